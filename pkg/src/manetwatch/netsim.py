"""Slotted-time MANET world.

Nodes move under a Gauss-Markov model inside a rectangle, links form a unit-disk
graph, and each node transmits at most one packet per slot.  Every hop is
acknowledged within the slot; jammers can silence those ACKs (``SUPPRESS_ACK``)
or the whole neighbourhood (``SUPPRESS_ALL``).  Receivers run duplicate packet
detection before accepting a copy.
"""

from __future__ import annotations

import enum
import math
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

BROADCAST = 0  # action index; unicast to neighbour slot k is k + 1


class JamMode(str, enum.Enum):
    SUPPRESS_ACK = "SUPPRESS_ACK"
    SUPPRESS_ALL = "SUPPRESS_ALL"


@dataclass
class MobilityParams:
    mean_speed: float = 2.0
    memory: float = 0.8
    sigma_speed: float = 0.5
    sigma_heading: float = 0.3
    width: float = 600.0
    height: float = 600.0

    def __post_init__(self):
        if not 0.0 <= self.memory <= 1.0:
            raise ValueError(f"memory must lie in [0, 1], got {self.memory}")
        if self.mean_speed < 0 or self.sigma_speed < 0 or self.sigma_heading < 0:
            raise ValueError("speeds and noise scales must be non-negative")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("area dimensions must be positive")


@dataclass
class MobilityState:
    """Gauss-Markov state.  Fields broadcast, so one instance may hold every node."""

    position: np.ndarray  # (..., 2)
    speed: np.ndarray
    heading: np.ndarray
    mean_speed: np.ndarray
    mean_heading: np.ndarray
    memory: float

    def copy(self) -> "MobilityState":
        return MobilityState(
            self.position.copy(),
            np.array(self.speed, dtype=float, copy=True),
            np.array(self.heading, dtype=float, copy=True),
            np.array(self.mean_speed, dtype=float, copy=True),
            np.array(self.mean_heading, dtype=float, copy=True),
            self.memory,
        )


def _reflect(pos, heading, mean_heading, lo, hi, axis):
    """Fold coordinates back into [lo, hi] and mirror headings of the bounced ones."""
    x = pos[..., axis]
    span = hi - lo
    # a triangle wave handles moves longer than the box as well
    u = np.mod(x - lo, 2 * span)
    bounced = (x < lo) | (x > hi)
    pos[..., axis] = lo + np.where(u > span, 2 * span - u, u)
    if axis == 0:
        heading = np.where(bounced, math.pi - heading, heading)
        mean_heading = np.where(bounced, math.pi - mean_heading, mean_heading)
    else:
        heading = np.where(bounced, -heading, heading)
        mean_heading = np.where(bounced, -mean_heading, mean_heading)
    return heading, mean_heading


def step_mobility(state: MobilityState, params: MobilityParams, rng: np.random.Generator,
                  noise: Optional[tuple] = None) -> MobilityState:
    """Advance one slot of Gauss-Markov motion.

    speed' = m*speed + (1-m)*mean_speed + sqrt(1-m^2)*sigma_s*w1, and likewise for the
    heading with sigma_h*w2.  The node then moves by speed' along heading' and
    reflects off the walls.  ``noise`` overrides the (w1, w2) draws.
    """
    m = state.memory
    shape = np.shape(state.speed)
    if noise is None:
        w1 = rng.standard_normal(shape)
        w2 = rng.standard_normal(shape)
    else:
        w1, w2 = (np.asarray(w, dtype=float) for w in noise)
    scale = math.sqrt(max(0.0, 1.0 - m * m))
    speed = m * state.speed + (1.0 - m) * state.mean_speed + scale * params.sigma_speed * w1
    speed = np.maximum(speed, 0.0)
    heading = m * state.heading + (1.0 - m) * state.mean_heading + scale * params.sigma_heading * w2

    pos = np.array(state.position, dtype=float, copy=True)
    pos[..., 0] += speed * np.cos(heading)
    pos[..., 1] += speed * np.sin(heading)
    mean_heading = np.array(state.mean_heading, dtype=float, copy=True)
    heading, mean_heading = _reflect(pos, heading, mean_heading, 0.0, params.width, 0)
    heading, mean_heading = _reflect(pos, heading, mean_heading, 0.0, params.height, 1)
    return MobilityState(pos, speed, heading, np.array(state.mean_speed, dtype=float, copy=True),
                         mean_heading, m)


def init_mobility(n: int, params: MobilityParams, rng: np.random.Generator) -> MobilityState:
    pos = np.column_stack([rng.uniform(0, params.width, n), rng.uniform(0, params.height, n)])
    mean_heading = rng.uniform(-math.pi, math.pi, n)
    return MobilityState(
        position=pos,
        speed=np.full(n, float(params.mean_speed)),
        heading=mean_heading.copy(),
        mean_speed=np.full(n, float(params.mean_speed)),
        mean_heading=mean_heading,
        memory=params.memory,
    )


@dataclass
class JammerConfig:
    position: tuple = (0.0, 0.0)
    jam_radius: float = 50.0
    active_window: tuple = (0, 0)  # inclusive slot interval
    mode: JamMode = JamMode.SUPPRESS_ACK
    follow_node: Optional[int] = None  # track this node's position instead of staying fixed

    def __post_init__(self):
        self.mode = JamMode(self.mode)
        if self.jam_radius <= 0:
            raise ValueError("jam_radius must be positive")
        lo, hi = self.active_window
        if lo < 0 or hi < lo:
            raise ValueError(f"bad active_window {self.active_window}")
        self.active_window = (int(lo), int(hi))
        self.position = tuple(float(v) for v in self.position)

    def active(self, slot: int) -> bool:
        return self.active_window[0] <= slot <= self.active_window[1]


@dataclass
class ChannelModel:
    comm_radius: float = 250.0
    jammers: list = field(default_factory=list)

    def __post_init__(self):
        if self.comm_radius <= 0:
            raise ValueError("comm_radius must be positive")

    def jammed(self, positions: np.ndarray, slot: int, modes: Iterable[JamMode]) -> np.ndarray:
        """Boolean per node: inside an active jammer of one of ``modes``."""
        modes = set(modes)
        hit = np.zeros(len(positions), dtype=bool)
        for jam in self.jammers:
            if jam.mode not in modes or not jam.active(slot):
                continue
            centre = positions[jam.follow_node] if jam.follow_node is not None else np.asarray(jam.position)
            hit |= np.hypot(*(positions - centre).T) <= jam.jam_radius
        return hit


def compute_links(positions: np.ndarray, channel: ChannelModel) -> np.ndarray:
    """Symmetric adjacency of the closed-disk graph (distance <= radius links)."""
    positions = np.asarray(positions, dtype=float)
    if len(positions) < 2:
        raise ValueError("need at least two nodes")
    diff = positions[:, None, :] - positions[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    adj = dist <= channel.comm_radius
    np.fill_diagonal(adj, False)
    return adj


@dataclass
class Packet:
    packet_id: int
    flow_id: int
    source: int
    destination: int
    hop_count: int
    ttl: int
    created_slot: int


@dataclass
class TrafficFlow:
    flow_id: int
    source: int
    destination: int
    rate: float

    def __post_init__(self):
        if self.source == self.destination:
            raise ValueError("flow source and destination must differ")
        if not 0.0 < self.rate <= 1.0:
            raise ValueError(f"flow rate must lie in (0, 1], got {self.rate}")


class DpdCache:
    """Seen-packet set with FIFO eviction."""

    def __init__(self, capacity: int = 4096):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._seen: OrderedDict = OrderedDict()

    def __contains__(self, packet_id) -> bool:
        return packet_id in self._seen

    def __len__(self):
        return len(self._seen)

    def insert(self, packet_id: int) -> bool:
        """Record ``packet_id``; False if it is already cached (a duplicate)."""
        if packet_id in self._seen:
            return False
        self._seen[packet_id] = None
        if len(self._seen) > self.capacity:
            self._seen.popitem(last=False)
        return True


@dataclass
class EpisodeClock:
    T_max: int
    slot: int = 0

    def tick(self):
        if self.slot >= self.T_max:
            raise RuntimeError("episode already finished")
        self.slot += 1

    @property
    def done(self) -> bool:
        return self.slot >= self.T_max


class PacketIds:
    def __init__(self):
        self._next = 0

    def __call__(self) -> int:
        self._next += 1
        return self._next - 1


def inject_traffic(flows: Sequence[TrafficFlow], clock: EpisodeClock, rng: np.random.Generator,
                   ttl: int = 32, next_id: Optional[PacketIds] = None) -> list:
    """One Bernoulli(rate) packet per flow for the current slot."""
    if not flows:
        return []
    next_id = next_id or PacketIds()
    draws = rng.random(len(flows))
    out = []
    for flow, u in zip(flows, draws):
        if u < flow.rate:
            out.append(Packet(next_id(), flow.flow_id, flow.source, flow.destination,
                              hop_count=0, ttl=ttl, created_slot=clock.slot))
    return out


@dataclass
class NetworkState:
    """Everything the channel needs to resolve one slot."""

    positions: np.ndarray
    links: np.ndarray
    neighbors: list  # per node, the observation neighbour list (ascending ids)
    queues: list
    dpd: list


@dataclass
class TransmitOutcome:
    sender: int
    packet: Packet
    targets: list
    accepted: dict  # receiver -> fresh copy taken in
    acked: list
    advertised: dict = field(default_factory=dict)  # acker -> piggybacked best q
    failed: bool = False  # unicast slot held no current neighbour
    jammed: bool = False  # some reception or ACK was suppressed by a jammer

    @property
    def n_acks(self) -> int:
        return len(self.acked)

    @property
    def reached_destination(self) -> bool:
        """Destination took the packet and its ACK came back."""
        return self.packet.destination in self.acked


def transmit(sender: int, action: int, packet: Packet, state: NetworkState, channel: ChannelModel,
             slot: int, advertised: Optional[np.ndarray] = None) -> TransmitOutcome:
    """Resolve one transmission: reception, DPD, ACK return.

    ``action`` is BROADCAST or 1 + index into the sender's neighbour list.  Accepted
    copies are returned, not enqueued; the caller owns the queues.  ``advertised[j]``
    is receiver j's best q toward the packet's destination, copied onto its ACK.
    """
    nbrs = state.neighbors[sender]
    failed = False
    if action == BROADCAST:
        targets = [j for j in np.flatnonzero(state.links[sender])]
    else:
        k = action - 1
        if 0 <= k < len(nbrs) and state.links[sender, nbrs[k]]:
            targets = [nbrs[k]]
        else:
            targets, failed = [], True
    targets = [int(j) for j in targets]

    deaf = channel.jammed(state.positions, slot, (JamMode.SUPPRESS_ALL,))
    ack_blocked = bool(channel.jammed(state.positions, slot,
                                      (JamMode.SUPPRESS_ACK, JamMode.SUPPRESS_ALL))[sender])
    accepted, acked, adv = {}, [], {}
    jammed = False
    for j in targets:
        if deaf[j]:
            accepted[j] = False
            jammed = True
            continue
        fresh = state.dpd[j].insert(packet.packet_id)
        accepted[j] = fresh
        if fresh:
            if ack_blocked:
                jammed = True
                continue
            acked.append(j)
            if advertised is not None:
                adv[j] = float(advertised[j])
    return TransmitOutcome(sender, packet, targets, accepted, acked, adv, failed, jammed)


def forwarded_copy(packet: Packet) -> Packet:
    """The copy a relay queues: one more hop taken, one less allowed."""
    return replace(packet, hop_count=packet.hop_count + 1, ttl=packet.ttl - 1)


def nearest_neighbors(links: np.ndarray, positions: np.ndarray, node: int, k_max: int) -> list:
    """Up to ``k_max`` nearest linked nodes, returned in ascending id order."""
    cand = np.flatnonzero(links[node])
    if len(cand) > k_max:
        d = np.hypot(*(positions[cand] - positions[node]).T)
        order = np.lexsort((cand, d))  # distance, ties by id
        cand = cand[order[:k_max]]
    return sorted(int(c) for c in cand)
