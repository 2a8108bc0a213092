"""Online TD-error anomaly monitoring.

Offline, nominal TD errors are collected and every sample gets a leave-one-out
k-nearest-neighbour distance; those distances form an empirical null.  Online,
each new TD error is scored the same way, turned into a smoothed tail
probability p, and the evidence log(alpha / p) is accumulated with a CUSUM-style
recursion g_t = max(0, g_{t-1} + l_t).  The first slot with g_t >= h raises the
alarm.  Every node runs its own detector.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
from scipy.spatial import cKDTree

CALIBRATION_VERSION = 1


def td_error(critic, s_t, r_t, s_next, done, gamma: float):
    """V(s_t) - r_t - gamma * V(s_next), bootstrap dropped where ``done``.

    Note the sign: this is the negated advantage.  Works on single samples or batches.
    """
    from .policy import value

    v = value(critic, s_t)
    v_next = value(critic, s_next)
    out = v - np.asarray(r_t, dtype=float) - gamma * v_next * (1.0 - np.asarray(done, dtype=float))
    return out if out.size > 1 or np.ndim(r_t) else float(out[0])


def _kth_window(sorted_vals: np.ndarray, x: np.ndarray, k: int, exclude: Optional[np.ndarray] = None):
    """k-th smallest |x - sorted_vals[j]| using only the 2k sorted neighbours around x."""
    m = len(sorted_vals)
    if exclude is None:
        centre = np.searchsorted(sorted_vals, x)
    else:
        centre = exclude
    offs = np.arange(-k, k + 1)
    idx = centre[:, None] + offs[None, :]
    valid = (idx >= 0) & (idx < m)
    if exclude is not None:
        valid &= idx != exclude[:, None]
    cand = sorted_vals[np.clip(idx, 0, m - 1)]
    dist = np.where(valid, np.abs(x[:, None] - cand), np.inf)
    return np.partition(dist, k - 1, axis=1)[:, k - 1]


def loo_knn_stats(deltas: np.ndarray, k: int) -> np.ndarray:
    """Leave-one-out k-th neighbour distance of every calibration sample.

    Scalar samples use the sorted-window search; rows of a 2-D array (window
    embedding) go through a KD-tree.
    """
    deltas = np.asarray(deltas, dtype=float)
    m = len(deltas)
    if k < 1 or k >= m:
        raise ValueError(f"need 1 <= k < calibration size, got k={k}, size={m}")
    if deltas.ndim == 1:
        order = np.argsort(deltas, kind="stable")
        s = deltas[order]
        stats_sorted = _kth_window(s, s, k, exclude=np.arange(m))
        out = np.empty(m)
        out[order] = stats_sorted
        return out
    tree = cKDTree(deltas)
    dist, _ = tree.query(deltas, k=k + 1)
    return dist[:, k]


@dataclass
class CalibrationSet:
    deltas: np.ndarray
    knn_stats: np.ndarray
    sorted_stats: np.ndarray
    k: int
    window: int = 1
    _sorted_deltas: np.ndarray = field(default=None, repr=False)
    _tree: object = field(default=None, repr=False)

    @classmethod
    def build(cls, deltas, k: int = 5, window: int = 1) -> "CalibrationSet":
        deltas = np.asarray(deltas, dtype=float)
        if len(deltas) == 0:
            raise ValueError("empty calibration set")
        if window > 1 and (deltas.ndim != 2 or deltas.shape[1] != window):
            raise ValueError("windowed calibration needs an (M, window) array")
        stats = loo_knn_stats(deltas, k)
        return cls(deltas, stats, np.sort(stats), int(k), int(window))

    @classmethod
    def from_streams(cls, streams, k: int = 5, window: int = 1) -> "CalibrationSet":
        """Pool per-node TD streams (iterables of floats), embedding windows if asked."""
        if window == 1:
            parts = [np.asarray(s, dtype=float) for s in streams]
            pooled = np.concatenate(parts) if parts else np.zeros(0)
        else:
            rows = [embed(np.asarray(s, dtype=float), window) for s in streams]
            rows = [r for r in rows if len(r)]
            pooled = np.concatenate(rows) if rows else np.zeros((0, window))
        return cls.build(pooled, k, window)

    @property
    def size(self) -> int:
        return len(self.deltas)

    def knn(self, x, k: Optional[int] = None) -> np.ndarray:
        """Online k-th neighbour distance of fresh point(s) to the calibration samples."""
        k = self.k if k is None else k
        if k > self.size:
            raise ValueError("k exceeds calibration size")
        if self.window == 1:
            if self._sorted_deltas is None:
                self._sorted_deltas = np.sort(self.deltas)
            x = np.atleast_1d(np.asarray(x, dtype=float))
            return _kth_window(self._sorted_deltas, x, k)
        if self._tree is None:
            self._tree = cKDTree(self.deltas)
        x = np.atleast_2d(np.asarray(x, dtype=float))
        dist, _ = self._tree.query(x, k=k)
        return dist.reshape(len(x), -1)[:, k - 1]

    def tail_probability(self, d) -> np.ndarray:
        """(1 + #{stats >= d}) / (M + 1)."""
        d = np.atleast_1d(np.asarray(d, dtype=float))
        m = self.size
        ge = m - np.searchsorted(self.sorted_stats, d, side="left")
        return (1.0 + ge) / (m + 1.0)

    def save(self, path):
        doc = {
            "version": CALIBRATION_VERSION,
            "count": self.size,
            "k": self.k,
            "window": self.window,
            "deltas": self.deltas.tolist(),
            "knn_stats": self.knn_stats.tolist(),
        }
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path) -> "CalibrationSet":
        doc = json.loads(Path(path).read_text())
        if doc.get("version") != CALIBRATION_VERSION:
            raise ValueError(f"unsupported calibration version {doc.get('version')}")
        deltas = np.asarray(doc["deltas"], dtype=float)
        stats = np.asarray(doc["knn_stats"], dtype=float)
        if len(deltas) != doc["count"] or len(stats) != doc["count"]:
            raise ValueError("calibration file is truncated")
        return cls(deltas, stats, np.sort(stats), int(doc["k"]), int(doc.get("window", 1)))


def embed(stream: np.ndarray, window: int) -> np.ndarray:
    """Rows of the last ``window`` values, one row per position with a full history."""
    if len(stream) < window:
        return np.zeros((0, window))
    return np.lib.stride_tricks.sliding_window_view(stream, window).copy()


def knn_statistic(x, calib: CalibrationSet, k: Optional[int] = None):
    out = calib.knn(x, k)
    return float(out[0]) if np.ndim(x) == 0 or (calib.window > 1 and np.ndim(x) == 1) else out


def build_ecdf(calib: CalibrationSet):
    """Tail-probability query over the calibration kNN statistics."""
    if calib.size == 0:
        raise ValueError("empty calibration set")
    return calib.tail_probability


@dataclass
class DetectorConfig:
    k: int = 5
    alpha: float = 0.05
    h: float = 10.0
    p_floor: Optional[float] = None  # None -> 1 / (M + 1)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.h <= 0:
            raise ValueError("h must be positive")
        if self.p_floor is not None and not 0.0 < self.p_floor < self.alpha:
            raise ValueError("p_floor must lie in (0, alpha)")

    def bind(self, calib: CalibrationSet) -> "DetectorConfig":
        """Validate against a calibration set and resolve the default p floor."""
        if self.k >= calib.size:
            raise ValueError(f"k={self.k} must be smaller than calibration size {calib.size}")
        if self.k != calib.k:
            raise ValueError(f"detector k={self.k} does not match calibration k={calib.k}")
        floor = self.p_floor if self.p_floor is not None else 1.0 / (calib.size + 1)
        if floor >= self.alpha:
            raise ValueError("calibration too small for this alpha (1/(M+1) >= alpha)")
        return DetectorConfig(self.k, self.alpha, self.h, floor)


def log_unlikelihood(p, cfg: DetectorConfig):
    floor = cfg.p_floor if cfg.p_floor is not None else 0.0
    p = np.maximum(np.asarray(p, dtype=float), floor)
    out = np.log(cfg.alpha / p)
    return float(out) if out.ndim == 0 else out


@dataclass
class DetectorState:
    g: float = 0.0
    alarm_slot: Optional[int] = None
    history: Optional[deque] = None  # (slot, p, ell, g) tuples, bounded

    @classmethod
    def fresh(cls, history: int = 0):
        return cls(0.0, None, deque(maxlen=history) if history else None)


def cusum_step(state: DetectorState, ell: float, cfg: DetectorConfig, slot: int,
               p: float = math.nan) -> DetectorState:
    g = max(0.0, state.g + ell)
    alarm = state.alarm_slot
    if alarm is None and g >= cfg.h:
        alarm = slot
    hist = state.history
    if hist is not None:
        hist.append((slot, p, ell, g))
    return DetectorState(g, alarm, hist)


@dataclass
class NodeTrace:
    slot: np.ndarray
    delta: np.ndarray
    knn: np.ndarray
    p: np.ndarray
    ell: np.ndarray
    g: np.ndarray
    alarm_slot: Optional[int]


@dataclass
class DetectorRun:
    nodes: dict  # node -> NodeTrace
    aggregate: np.ndarray  # mean node g per slot
    n_slots: int

    @property
    def score(self) -> float:
        return float(self.aggregate.max()) if len(self.aggregate) else 0.0

    def alarm_slots(self) -> dict:
        return {n: t.alarm_slot for n, t in self.nodes.items()}


def score_stream(slots, deltas, calib: CalibrationSet, cfg: DetectorConfig) -> NodeTrace:
    """Run one node's detector over its TD stream (slots ascending)."""
    slots = np.asarray(slots, dtype=int)
    deltas = np.asarray(deltas, dtype=float)
    if calib.window > 1:
        x = embed(deltas, calib.window)
        slots_used = slots[calib.window - 1:]
        deltas_used = deltas[calib.window - 1:]
    else:
        x, slots_used, deltas_used = deltas, slots, deltas
    if len(slots_used) == 0:
        e = np.zeros(0)
        return NodeTrace(np.zeros(0, dtype=int), e, e, e, e, e, None)
    d = calib.knn(x, cfg.k)
    p = calib.tail_probability(d)
    ell = log_unlikelihood(p, cfg)
    ell = np.atleast_1d(ell)
    g = np.empty(len(ell))
    state = DetectorState()
    for i, (t, e) in enumerate(zip(slots_used, ell)):
        state = cusum_step(state, float(e), cfg, int(t))
        g[i] = state.g
    return NodeTrace(slots_used, deltas_used, d, p, ell, g, state.alarm_slot)


def aggregate_scores(traces: Mapping[int, NodeTrace], n_nodes: int, n_slots: int) -> np.ndarray:
    """Mean over all nodes of each node's latest g (0 before its first sample)."""
    total = np.zeros(n_slots)
    for tr in traces.values():
        if len(tr.slot) == 0:
            continue
        held = np.zeros(n_slots)
        held[tr.slot] = tr.g
        # forward-fill between samples
        have = np.zeros(n_slots, dtype=bool)
        have[tr.slot] = True
        idx = np.where(have, np.arange(n_slots), 0)
        np.maximum.accumulate(idx, out=idx)
        filled = held[idx]
        filled[: tr.slot[0]] = 0.0
        total += filled
    return total / max(n_nodes, 1)


def run_detector(streams: Mapping[int, tuple], calib: CalibrationSet, cfg: DetectorConfig,
                 n_nodes: int, n_slots: int) -> DetectorRun:
    """Score every node's (slots, deltas) stream independently and aggregate."""
    cfg = cfg.bind(calib)
    traces = {int(node): score_stream(s, d, calib, cfg) for node, (s, d) in sorted(streams.items())}
    return DetectorRun(traces, aggregate_scores(traces, n_nodes, n_slots), n_slots)
