"""Calibration, detection runs, ROC evaluation and report files."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .config import ScenarioConfig
from .monitor import CalibrationSet, DetectorConfig, DetectorRun, run_detector, td_error
from .rollout import EpisodeResult, simulate


def derive_seeds(seed: int, count: int) -> list:
    return [int(s) for s in np.random.default_rng(seed).integers(0, 2**31 - 1, size=count)]


def td_streams(result: EpisodeResult, critic, gamma: float) -> dict:
    """Per-node (slots, TD errors) from a finished episode, slots ascending."""
    b = result.batch
    if len(b) == 0:
        return {}
    deltas = td_error(critic, b.obs, b.rewards, b.next_obs, b.dones, gamma)
    deltas = np.atleast_1d(deltas)
    out = {}
    for node in np.unique(b.nodes):
        sel = np.flatnonzero(b.nodes == node)
        sel = sel[np.argsort(b.slots[sel], kind="stable")]
        out[int(node)] = (b.slots[sel], deltas[sel])
    return out


def calibrate(actor, critic, gamma: float, cfg: ScenarioConfig, episodes: int, seed: int = 0,
              k: int = 5, window: int = 1) -> CalibrationSet:
    """Pool TD errors of the frozen policy over nominal episodes."""
    if not cfg.nominal:
        raise ValueError("calibration needs an anomaly-free scenario")
    if episodes < 1:
        raise ValueError("calibration needs at least one episode")
    streams = []
    for s in derive_seeds(seed, episodes):
        res = simulate(cfg, s, actor=actor)
        streams.extend(d for _, d in td_streams(res, critic, gamma).values())
    return CalibrationSet.from_streams(streams, k=k, window=window)


@dataclass
class RunRecord:
    scenario: str
    seed: int
    label: str  # "nominal" | "anomalous"
    n_nodes: int
    T_max: int
    metrics: dict
    aggregate: list
    traces: dict = field(default_factory=dict)  # node -> column dict

    @property
    def score(self) -> float:
        """Episode score: max over slots of the mean node decision statistic."""
        return max(self.aggregate) if self.aggregate else 0.0

    @classmethod
    def from_run(cls, scenario, seed, label, result: EpisodeResult, run: DetectorRun) -> "RunRecord":
        traces = {}
        for node, tr in run.nodes.items():
            traces[str(node)] = {
                "slot": tr.slot.tolist(), "delta": tr.delta.tolist(), "knn_stat": tr.knn.tolist(),
                "p": tr.p.tolist(), "ell": tr.ell.tolist(), "g": tr.g.tolist(),
                "alarm": tr.alarm_slot,
            }
        metrics = {k: v for k, v in result.metrics.items()}
        if math.isinf(metrics.get("overhead", 0.0)):
            metrics["overhead"] = None
        return cls(scenario, int(seed), label, result.n_nodes, result.T_max, metrics,
                   run.aggregate.tolist(), traces)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "RunRecord":
        return cls(**json.loads(line))


def write_records(path, records: Iterable[RunRecord]):
    Path(path).write_text("".join(r.to_json() + "\n" for r in records))


def read_records(path) -> list:
    return [RunRecord.from_json(line) for line in Path(path).read_text().splitlines() if line.strip()]


def detect_episode(actor, critic, gamma: float, cfg: ScenarioConfig, seed: int, calib: CalibrationSet,
                   dcfg: DetectorConfig, scenario: Optional[str] = None) -> RunRecord:
    res = simulate(cfg, seed, actor=actor)
    run = run_detector(td_streams(res, critic, gamma), calib, dcfg, res.n_nodes, res.T_max)
    label = "nominal" if cfg.nominal else "anomalous"
    return RunRecord.from_run(scenario or cfg.anomaly.kind, seed, label, res, run)


def detect(actor, critic, gamma, cfg, calib, dcfg, episodes: int, seed: int = 0, scenario=None) -> list:
    return [detect_episode(actor, critic, gamma, cfg, s, calib, dcfg, scenario)
            for s in derive_seeds(seed, episodes)]


@dataclass
class RocPoint:
    h: float
    tpr: float
    fpr: float
    n_pos: int
    n_neg: int


def roc_curve(nominal_scores: Sequence[float], anomalous_scores: Sequence[float],
              h_grid: Optional[Sequence[float]] = None) -> list:
    """An episode alarms at threshold h when its score reaches h."""
    neg = np.asarray(nominal_scores, dtype=float)
    pos = np.asarray(anomalous_scores, dtype=float)
    if len(neg) == 0 or len(pos) == 0:
        raise ValueError("ROC needs both nominal and anomalous episodes")
    if h_grid is None:
        h_grid = np.concatenate([np.unique(np.concatenate([neg, pos])), [np.inf]])
    pts = [RocPoint(float(h), float(np.mean(pos >= h)), float(np.mean(neg >= h)), len(pos), len(neg))
           for h in sorted(h_grid)]
    return pts


def auc(points: Sequence[RocPoint]) -> float:
    """Trapezoidal area under the staircase, anchored at (0,0) and (1,1)."""
    xy = sorted({(0.0, 0.0), (1.0, 1.0), *((p.fpr, p.tpr) for p in points)})
    x = np.array([a for a, _ in xy])
    y = np.array([b for _, b in xy])
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))


def threshold_for_fpr(points: Sequence[RocPoint], max_fpr: float) -> RocPoint:
    """Lowest threshold whose false-positive rate stays within ``max_fpr``."""
    ok = [p for p in points if p.fpr <= max_fpr]
    return min(ok, key=lambda p: p.h)


def roc_csv(points: Sequence[RocPoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["h", "fpr", "tpr"])
    for p in points:
        w.writerow([repr(p.h), repr(p.fpr), repr(p.tpr)])
    return buf.getvalue()


TRACE_COLUMNS = ("slot", "node", "delta", "knn_stat", "p", "ell", "g", "alarm")


def trace_csv(record: RunRecord) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    rows = []
    for node, tr in record.traces.items():
        for i, slot in enumerate(tr["slot"]):
            alarm = tr["alarm"] is not None and slot >= tr["alarm"]
            rows.append((slot, int(node), tr["delta"][i], tr["knn_stat"][i], tr["p"][i], tr["ell"][i],
                         tr["g"][i], int(alarm)))
    rows.sort(key=lambda r: (r[0], r[1]))
    for r in rows:
        w.writerow([r[0], r[1], *(repr(float(v)) for v in r[2:7]), r[7]])
    return buf.getvalue()


def aggregate_csv(record: RunRecord) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["slot", "mean_g"])
    for t, g in enumerate(record.aggregate):
        w.writerow([t, repr(float(g))])
    return buf.getvalue()


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def plot_trace(csv_path, svg_path, T_max: int):
    """Aggregate score trace, read back from its CSV."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = _read_csv(csv_path)
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.plot([int(r["slot"]) for r in rows], [float(r["mean_g"]) for r in rows], lw=1)
    ax.set_xlim(0, T_max)
    ax.set_xlabel("slot")
    ax.set_ylabel("mean g_t")
    fig.tight_layout()
    fig.savefig(svg_path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return fig


def plot_roc(csv_path, svg_path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = _read_csv(csv_path)
    fig, ax = plt.subplots(figsize=(4, 4))
    pts = sorted((float(r["fpr"]), float(r["tpr"])) for r in rows)
    ax.step([p[0] for p in pts], [p[1] for p in pts], where="post")
    ax.plot([0, 1], [0, 1], ls=":", c="grey")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.01)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    fig.tight_layout()
    fig.savefig(svg_path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return fig


def write_report(records: Sequence[RunRecord], roc_points: Optional[Sequence[RocPoint]], out_dir) -> list:
    """Per-episode trace CSVs, ROC CSV, and SVG plots drawn from those CSVs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, rec in enumerate(records):
        stem = f"{rec.scenario}_{rec.label}_{i:03d}_seed{rec.seed}"
        tpath = out / f"{stem}_trace.csv"
        tpath.write_text(trace_csv(rec))
        apath = out / f"{stem}_score.csv"
        apath.write_text(aggregate_csv(rec))
        plot_trace(apath, out / f"{stem}_score.svg", rec.T_max)
        written += [tpath, apath, out / f"{stem}_score.svg"]
    if roc_points:
        rpath = out / "roc.csv"
        rpath.write_text(roc_csv(roc_points))
        plot_roc(rpath, out / "roc.svg")
        written += [rpath, out / "roc.svg"]
    return written
