"""Drive one episode of the MANET under a decision function.

Within slot t: nodes move, links refresh, flows inject, then every node with a
queued packet builds its observation for the head packet's destination and the
shared policy picks an action.  Transmissions resolve in ascending node order,
tables update, and each actor's reward is known by the end of the slot.  The
next observation s_{t+1} is taken at the start of slot t+1, for the same
destination, whether or not the node acts again.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .config import EpisodeSpec, ScenarioConfig, realize
from .cq import CqTables, RewardInputs, advertised_q, build_observation, compute_reward, obs_dim, update_cq
from .netsim import (
    DpdCache,
    EpisodeClock,
    NetworkState,
    PacketIds,
    compute_links,
    forwarded_copy,
    init_mobility,
    inject_traffic,
    nearest_neighbors,
    step_mobility,
    transmit,
)
from .policy import TransitionBatch, act

TERMINAL_STATES = ("delivered", "dropped_ttl", "dropped_duplicate_everywhere", "in_flight_at_Tmax")


def episode_rngs(seed: int):
    """Independent streams: (scenario draws, mobility, traffic, policy sampling)."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)]


def policy_decider(actor, rng, greedy=False):
    def decide(obs, mask):
        return act(actor, obs, mask, rng, greedy=greedy)
    return decide


def random_decider(rng):
    """Uniform choice among valid actions."""
    def decide(obs, mask):
        counts = mask.sum(axis=1)
        pick = (rng.random(len(mask)) * counts).astype(int)
        pick = np.minimum(pick, counts - 1)
        cum = np.cumsum(mask, axis=1)
        actions = (cum <= pick[:, None]).sum(axis=1)
        return actions, -np.log(counts)
    return decide


@dataclass
class EpisodeResult:
    batch: TransitionBatch
    metrics: dict
    n_nodes: int
    T_max: int
    flows: list
    events: list = field(default_factory=list)

    def events_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.events)


class ManetEpisode:
    def __init__(self, spec: EpisodeSpec, mobility_rng, traffic_rng, record_events=False):
        self.spec = spec
        n = spec.n_nodes
        self.mob_rng, self.traffic_rng = mobility_rng, traffic_rng
        self.mobility = init_mobility(n, spec.mobility, mobility_rng)
        self.clock = EpisodeClock(spec.T_max)
        self.tables = [CqTables(n, spec.cq) for _ in range(n)]
        self.queues = [deque() for _ in range(n)]
        self.dpd = [DpdCache(spec.dpd_capacity) for _ in range(n)]
        self.prev_action = [None] * n
        self.attempts = [0] * n  # sends of the current queue head
        self.next_id = PacketIds()
        self.record_events = record_events
        self.events = []
        self.status = {}  # packet_id -> [delivered, ttl_drops, hops_at_delivery]
        self.stats = {"transmissions": 0, "jam_events": 0, "injected": 0}
        self.links = None
        self.neighbors = None

    def _event(self, node, kind, **fields):
        if self.record_events:
            self.events.append({"slot": self.clock.slot, "node": int(node), "kind": kind, **fields})

    def refresh_topology(self):
        if self.clock.slot > 0:
            self.mobility = step_mobility(self.mobility, self.spec.mobility, self.mob_rng)
        pos = self.mobility.position
        self.links = compute_links(pos, self.spec.channel)
        self.neighbors = [nearest_neighbors(self.links, pos, i, self.spec.k_max)
                          for i in range(self.spec.n_nodes)]

    def inject(self):
        for pkt in inject_traffic(self.spec.flows, self.clock, self.traffic_rng, self.spec.ttl, self.next_id):
            self.queues[pkt.source].append(pkt)
            self.dpd[pkt.source].insert(pkt.packet_id)
            self.status[pkt.packet_id] = [False, 0, None]
            self.stats["injected"] += 1
            self._event(pkt.source, "inject", packet=pkt.packet_id, dst=pkt.destination)

    def observe(self, node, destination):
        return build_observation(self.tables[node], self.neighbors[node], self.prev_action[node],
                                 destination, self.spec.k_max)

    def resolve(self, actors, actions):
        """Transmit for every actor; return {node: (n_acks, reached_destination)}."""
        state = NetworkState(self.mobility.position, self.links, self.neighbors, self.queues, self.dpd)
        adv_cache = {}
        outcomes = {}
        slot = self.clock.slot
        for i, a in zip(actors, actions):
            pkt = self.queues[i][0]
            d = pkt.destination
            if d not in adv_cache:
                adv_cache[d] = advertised_q(self.tables, d)
            out = transmit(i, int(a), pkt, state, self.spec.channel, slot, adv_cache[d])
            outcomes[i] = out
            self.stats["transmissions"] += 1
            if out.jammed:
                self.stats["jam_events"] += 1
                self._event(i, "jam", packet=pkt.packet_id)
            self._event(i, "tx", packet=pkt.packet_id, action=int(a), targets=out.targets,
                        acked=out.acked)
            for j, fresh in out.accepted.items():
                if not fresh:
                    continue
                if j == d:
                    st = self.status[pkt.packet_id]
                    if not st[0]:
                        st[0], st[2] = True, pkt.hop_count + 1
                        self._event(j, "deliver", packet=pkt.packet_id, hops=pkt.hop_count + 1)
                    continue
                cp = forwarded_copy(pkt)
                if cp.ttl > 0:
                    self.queues[j].append(cp)
                else:
                    self.status[pkt.packet_id][1] += 1
                    self._event(j, "drop_ttl", packet=pkt.packet_id)
            self.attempts[i] += 1
            if out.n_acks > 0:
                self._dequeue(i)
            elif self.attempts[i] > self.spec.max_retries:
                self._dequeue(i)
                self._event(i, "give_up", packet=pkt.packet_id)
            self.prev_action[i] = int(a)
        # advertised values were read before any table moved, so order is irrelevant
        for i, t in enumerate(self.tables):
            update_cq(t, outcomes.get(i))
        return {i: (o.n_acks, o.reached_destination) for i, o in outcomes.items()}

    def _dequeue(self, node):
        self.queues[node].popleft()
        self.attempts[node] = 0

    def terminal_counts(self) -> dict:
        alive = set()
        for q in self.queues:
            alive.update(p.packet_id for p in q)
        counts = dict.fromkeys(TERMINAL_STATES, 0)
        for pid, (delivered, ttl_drops, _) in self.status.items():
            if delivered:
                counts["delivered"] += 1
            elif pid in alive:
                counts["in_flight_at_Tmax"] += 1
            elif ttl_drops:
                counts["dropped_ttl"] += 1
            else:
                counts["dropped_duplicate_everywhere"] += 1
        return counts

    def metrics(self) -> dict:
        counts = self.terminal_counts()
        injected = self.stats["injected"]
        delivered = counts["delivered"]
        hops = [s[2] for s in self.status.values() if s[0]]
        return {
            "injected": injected,
            "delivered": delivered,
            "delivery_ratio": delivered / injected if injected else 0.0,
            "mean_hops": float(np.mean(hops)) if hops else 0.0,
            "transmissions": self.stats["transmissions"],
            "overhead": self.stats["transmissions"] / delivered if delivered else float("inf"),
            "jam_events": self.stats["jam_events"],
            "terminal": counts,
        }


def run_episode(spec: EpisodeSpec, decide: Callable, mobility_rng, traffic_rng,
                weights=None, record_events=False) -> EpisodeResult:
    weights = weights or spec.weights
    ep = ManetEpisode(spec, mobility_rng, traffic_rng, record_events)
    dim, k1 = obs_dim(spec.k_max), spec.k_max + 1
    rows = {k: [] for k in ("obs", "mask", "actions", "logprobs", "rewards", "next_obs", "dones",
                            "nodes", "slots")}
    pending = {}
    rewards_total = 0.0

    def close(node, p, next_vec, done):
        obs, mask, a, lp, r, _, slot = p
        for key, val in (("obs", obs), ("mask", mask), ("actions", a), ("logprobs", lp),
                         ("rewards", r), ("next_obs", next_vec), ("dones", done),
                         ("nodes", node), ("slots", slot)):
            rows[key].append(val)

    while not ep.clock.done:
        ep.refresh_topology()
        ep.inject()
        for node, p in sorted(pending.items()):
            close(node, p, ep.observe(node, p[5]).vector, False)
        pending = {}
        actors = [i for i in range(spec.n_nodes) if ep.queues[i]]
        if actors:
            obs = [ep.observe(i, ep.queues[i][0].destination) for i in actors]
            ob = np.stack([o.vector for o in obs])
            mk = np.stack([o.mask for o in obs])
            actions, logps = decide(ob, mk)
            dests = [ep.queues[i][0].destination for i in actors]
            res = ep.resolve(actors, actions)
            for j, i in enumerate(actors):
                n_acks, reached = res[i]
                r = compute_reward(RewardInputs(n_acks, reached), weights)
                rewards_total += r
                pending[i] = (ob[j], mk[j], int(actions[j]), float(logps[j]), r, dests[j], ep.clock.slot)
        else:
            for t in ep.tables:
                update_cq(t, None)
        ep.clock.tick()
    # the episode ends: bootstrap dropped, next state taken from the final tables
    for node, p in sorted(pending.items()):
        close(node, p, ep.observe(node, p[5]).vector, True)

    n = len(rows["rewards"])
    batch = TransitionBatch(
        obs=np.array(rows["obs"]).reshape(n, dim),
        mask=np.array(rows["mask"], dtype=bool).reshape(n, k1),
        actions=np.array(rows["actions"], dtype=int),
        logprobs=np.array(rows["logprobs"], dtype=float),
        rewards=np.array(rows["rewards"], dtype=float),
        next_obs=np.array(rows["next_obs"]).reshape(n, dim),
        dones=np.array(rows["dones"], dtype=bool),
        nodes=np.array(rows["nodes"], dtype=int),
        slots=np.array(rows["slots"], dtype=int),
    )
    m = ep.metrics()
    m["mean_reward"] = rewards_total / n if n else 0.0
    return EpisodeResult(batch, m, spec.n_nodes, spec.T_max, spec.flows, ep.events)


def simulate(cfg: ScenarioConfig, seed: int, actor=None, greedy=False, randomize=False,
             record_events=False) -> EpisodeResult:
    """Realise ``cfg`` with ``seed`` and run it under ``actor`` (uniform-random if None)."""
    r_scn, r_mob, r_traffic, r_pol = episode_rngs(seed)
    spec = realize(cfg, r_scn, randomize=randomize)
    if actor is not None and actor.k_max != spec.k_max:
        raise ValueError(f"policy built for k_max={actor.k_max}, scenario uses {spec.k_max}")
    decide = random_decider(r_pol) if actor is None else policy_decider(actor, r_pol, greedy)
    return run_episode(spec, decide, r_mob, r_traffic, record_events=record_events)
