"""Per-node C/Q routing tables, observation layout and the local reward."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .netsim import BROADCAST, TransmitOutcome


@dataclass
class RewardWeights:
    w1: float = 1.0  # exactly one ACK
    w2: float = 0.2  # per surplus ACK
    w3: float = 1.0  # no ACK
    w4: float = 5.0  # delivered to destination

    def __post_init__(self):
        if min(self.w1, self.w2, self.w3, self.w4) <= 0:
            raise ValueError("reward weights must be positive")


@dataclass
class RewardInputs:
    n_prev: int
    delivered_prev: bool


def compute_reward(inputs: RewardInputs, weights: RewardWeights) -> float:
    n = inputs.n_prev
    if n < 0:
        raise ValueError("ACK count cannot be negative")
    r = 0.0
    if n == 1:
        r += weights.w1
    elif n > 1:
        r -= weights.w2 * (n - 1)
    else:
        r -= weights.w3
    if inputs.delivered_prev:
        r += weights.w4
    return r


@dataclass
class CqParams:
    beta_q: float = 0.3
    beta_c: float = 0.2
    gamma_q: float = 0.95
    q_init: float = 0.0
    c_init: float = 0.5


class CqTables:
    """q[j, d] and c[j, d] held by one node, plus last slot's snapshot.

    Rows index the next hop, columns the destination.  Snapshots rotate on every
    call to :func:`update_cq`, so the deltas always describe a single slot.
    """

    def __init__(self, n_nodes: int, params: Optional[CqParams] = None):
        self.params = params or CqParams()
        self.q = np.full((n_nodes, n_nodes), self.params.q_init)
        self.c = np.full((n_nodes, n_nodes), self.params.c_init)
        self.q_prev = self.q.copy()
        self.c_prev = self.c.copy()

    @property
    def dq(self):
        return self.q - self.q_prev

    @property
    def dc(self):
        return self.c - self.c_prev

    def best_q(self, destination: int) -> float:
        return float(self.q[:, destination].max())

    def rotate(self):
        self.q_prev[:] = self.q
        self.c_prev[:] = self.c

    def copy(self) -> "CqTables":
        t = CqTables.__new__(CqTables)
        t.params = self.params
        t.q, t.c = self.q.copy(), self.c.copy()
        t.q_prev, t.c_prev = self.q_prev.copy(), self.c_prev.copy()
        return t


def advertised_q(tables: Sequence[CqTables], destination: int) -> np.ndarray:
    """What each node would piggyback on an ACK for ``destination``; the destination says 1."""
    adv = np.array([t.best_q(destination) for t in tables])
    adv[destination] = 1.0
    return adv


def update_cq(tables: CqTables, outcome: Optional[TransmitOutcome]) -> CqTables:
    """Rotate snapshots, then fold this slot's transmission result into the tables.

    ACKing neighbour j: q <- (1-bq)q + bq(rho + gq*q_best_j), c <- (1-bc)c + bc.
    Targeted but silent j: c <- (1-bc)c.  Mutates and returns ``tables``.
    """
    tables.rotate()
    if outcome is None:
        return tables
    p = tables.params
    d = outcome.packet.destination
    acked = set(outcome.acked)
    for j in outcome.targets:
        if j in acked:
            rho = 1.0 if j == d else 0.0
            best = outcome.advertised.get(j, 1.0 if j == d else 0.0)
            target = rho + p.gamma_q * best
            tables.q[j, d] = min(1.0, max(0.0, (1 - p.beta_q) * tables.q[j, d] + p.beta_q * target))
            tables.c[j, d] = min(1.0, (1 - p.beta_c) * tables.c[j, d] + p.beta_c)
        else:
            tables.c[j, d] = max(0.0, (1 - p.beta_c) * tables.c[j, d])
    return tables


def obs_dim(k_max: int) -> int:
    return 4 * k_max + k_max + 1


@dataclass
class Observation:
    vector: np.ndarray
    mask: np.ndarray  # valid actions: [BROADCAST, slot 0, ..., slot K-1]
    neighbors: list


def build_observation(tables: CqTables, neighbors: Sequence[int], prev_action: Optional[int],
                      destination: int, k_max: int) -> Observation:
    """Lay out [c | q | dc | dq | onehot(prev action)] for one destination.

    ``neighbors`` must already be truncated and sorted; absent slots are zero and
    masked off.  ``prev_action`` None means the node has not acted yet.
    """
    nbrs = list(neighbors)[:k_max]
    n = len(nbrs)
    vec = np.zeros(obs_dim(k_max))
    if n:
        idx = np.asarray(nbrs)
        vec[0:n] = tables.c[idx, destination]
        vec[k_max:k_max + n] = tables.q[idx, destination]
        vec[2 * k_max:2 * k_max + n] = tables.c[idx, destination] - tables.c_prev[idx, destination]
        vec[3 * k_max:3 * k_max + n] = tables.q[idx, destination] - tables.q_prev[idx, destination]
    if prev_action is not None:
        vec[4 * k_max + prev_action] = 1.0
    mask = np.zeros(k_max + 1, dtype=bool)
    mask[BROADCAST] = True
    mask[1:n + 1] = True
    return Observation(vec, mask, nbrs)
