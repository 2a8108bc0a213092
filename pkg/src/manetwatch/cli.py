"""Command line: train, calibrate, detect, roc, report.

Exit codes: 0 success, 1 usage/config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ScenarioConfig, load_config
from .monitor import CalibrationSet, DetectorConfig
from .policy import PolicyParams, TrainingDiverged, ValueParams, load_checkpoint, save_checkpoint
from .training import hyperparams_from, train

log = logging.getLogger("manetwatch")


class UsageError(Exception):
    pass


def _nominal(cfg: ScenarioConfig, what: str):
    if not cfg.nominal:
        raise UsageError(f"{what} needs an anomaly-free config (anomaly.kind = none, no jammers)")


def cmd_train(args):
    cfg = load_config(args.config)
    _nominal(cfg, "train")
    seed = cfg.seed if args.seed is None else args.seed
    hp = hyperparams_from(cfg)
    iterations = cfg.ppo.iterations if args.iterations is None else args.iterations
    res = train(cfg, hp, seed=seed, iterations=iterations)
    save_checkpoint(args.out, res.actor, res.critic, hp, extra={"seed": seed, "iterations": iterations})
    log_path = Path(args.log) if args.log else Path(args.out).with_suffix(".log.jsonl")
    log_path.write_text(res.log_jsonl())
    if res.log:
        last = res.log[-1]
        print(f"trained {iterations} iterations; last delivery ratio {last['delivery_ratio']:.3f}")
    return 0


def _load_policy(path, cfg):
    actor, critic, hp, _ = load_checkpoint(path, k_max=cfg.routing.k_max)
    return actor, critic, hp


def cmd_calibrate(args):
    from .experiments import calibrate

    cfg = load_config(args.config)
    _nominal(cfg, "calibrate")
    if args.episodes < 1:
        raise UsageError("episodes must be >= 1 (an empty calibration set is not allowed)")
    actor, critic, hp = _load_policy(args.checkpoint, cfg)
    k = cfg.detector.k if args.k is None else args.k
    window = cfg.detector.window if args.window is None else args.window
    seed = cfg.seed if args.seed is None else args.seed
    calib = calibrate(actor, critic, hp.gamma, cfg, args.episodes, seed=seed, k=k, window=window)
    calib.save(args.out)
    print(f"calibration samples: {calib.size}")
    return 0


def cmd_detect(args):
    from .experiments import detect, write_records

    cfg = load_config(args.config)
    actor, critic, hp = _load_policy(args.checkpoint, cfg)
    calib = CalibrationSet.load(args.calibration)
    d = cfg.detector
    dcfg = DetectorConfig(k=calib.k if args.k is None else args.k,
                          alpha=d.alpha if args.alpha is None else args.alpha,
                          h=d.h if args.h is None else args.h, p_floor=d.p_floor)
    try:
        dcfg.bind(calib)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    seed = cfg.seed if args.seed is None else args.seed
    records = detect(actor, critic, hp.gamma, cfg, calib, dcfg, args.episodes, seed=seed)
    write_records(args.out, records)
    for r in records:
        alarms = [n for n, t in r.traces.items() if t["alarm"] is not None]
        print(f"{r.scenario} seed={r.seed} score={r.score:.3f} alarmed_nodes={len(alarms)}")
    return 0


def _h_grid(text):
    if text is None:
        return None
    if ":" in text:
        lo, hi, n = text.split(":")
        return list(np.linspace(float(lo), float(hi), int(n)))
    return [float(v) for v in text.split(",")]


def cmd_roc(args):
    from .experiments import auc, read_records, roc_csv, roc_curve

    nominal = [r for p in args.nominal for r in read_records(p)]
    anomalous = [r for p in args.anomalous for r in read_records(p)]
    if not nominal or not anomalous:
        raise UsageError("need at least one nominal and one anomalous record")
    if any(r.label != "nominal" for r in nominal) or any(r.label != "anomalous" for r in anomalous):
        raise UsageError("record labels do not match the sets they were passed in")
    pts = roc_curve([r.score for r in nominal], [r.score for r in anomalous], _h_grid(args.h_grid))
    area = auc(pts)
    Path(args.out).write_text(roc_csv(pts))
    print(f"AUC {area:.4f} over {len(anomalous)} anomalous / {len(nominal)} nominal episodes")
    return 0


def cmd_report(args):
    from .experiments import RocPoint, read_records, write_report

    records = [r for p in args.records for r in read_records(p)]
    pts = None
    if args.roc:
        import csv

        with open(args.roc, newline="") as fh:
            pts = [RocPoint(float(r["h"]), float(r["tpr"]), float(r["fpr"]), 0, 0) for r in csv.DictReader(fh)]
    try:
        files = write_report(records, pts, args.out_dir)
    except OSError as exc:
        raise RuntimeError(f"cannot write report: {exc}") from exc
    print(f"wrote {len(files)} files to {args.out_dir}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="manetwatch", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("train", help="train the shared routing policy on nominal scenarios")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="checkpoint path (JSON)")
    t.add_argument("--iterations", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--log", help="training log path (JSON lines)")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("calibrate", help="collect nominal TD errors into a calibration file")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--config", required=True)
    c.add_argument("--episodes", type=int, default=50)
    c.add_argument("--k", type=int)
    c.add_argument("--window", type=int)
    c.add_argument("--seed", type=int)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_calibrate)

    d = sub.add_parser("detect", help="run the frozen policy with per-node detectors")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--calibration", required=True)
    d.add_argument("--config", required=True)
    d.add_argument("--episodes", type=int, default=1)
    d.add_argument("--k", type=int)
    d.add_argument("--alpha", type=float)
    d.add_argument("--h", type=float)
    d.add_argument("--seed", type=int)
    d.add_argument("--out", required=True, help="run records (JSON lines)")
    d.set_defaults(func=cmd_detect)

    r = sub.add_parser("roc", help="episode-level ROC from nominal and anomalous run records")
    r.add_argument("--nominal", nargs="+", required=True)
    r.add_argument("--anomalous", nargs="+", required=True)
    r.add_argument("--h-grid", help="comma list or lo:hi:n; default = every observed score")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_roc)

    rp = sub.add_parser("report", help="trace CSVs, ROC CSV and SVG plots")
    rp.add_argument("--records", nargs="+", required=True)
    rp.add_argument("--roc")
    rp.add_argument("--out-dir", required=True)
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingDiverged, ValueError, RuntimeError, OSError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
