import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from manetwatch.config import AnomalySpec, JammerSpec, ScenarioConfig
from manetwatch.experiments import (
    RunRecord,
    auc,
    calibrate,
    detect,
    plot_trace,
    read_records,
    roc_csv,
    roc_curve,
    threshold_for_fpr,
    trace_csv,
    write_records,
    write_report,
)
from manetwatch.monitor import DetectorConfig
from manetwatch.policy import PolicyParams, ValueParams


def test_toy_roc_points_and_area():
    pts = roc_curve([1, 2], [3, 4], h_grid=[0.5, 2.5, 4.5])
    assert [(p.fpr, p.tpr) for p in pts] == [(1.0, 1.0), (0.0, 1.0), (0.0, 0.0)]
    assert auc(pts) == 1.0


def test_perfect_separation_passes_through_corner():
    pts = roc_curve([0.1, 0.2, 0.3], [5.0, 6.0])
    assert any(p.fpr == 0.0 and p.tpr == 1.0 for p in pts)
    assert auc(pts) == 1.0


def test_identical_distributions_near_half():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=2000), rng.normal(size=2000)
    assert auc(roc_curve(a, b)) == pytest.approx(0.5, abs=0.03)


def test_ties_give_half_credit():
    assert auc(roc_curve([1.0, 1.0], [1.0, 1.0])) == pytest.approx(0.5)


def test_area_matches_pairwise_ranking():
    rng = np.random.default_rng(1)
    neg = rng.integers(0, 10, 40).astype(float)
    pos = rng.integers(3, 13, 30).astype(float)
    # Mann-Whitney form of the area, ties counted half
    want = np.mean([(p > n) + 0.5 * (p == n) for p in pos for n in neg])
    assert auc(roc_curve(neg, pos)) == pytest.approx(want, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 50), min_size=1, max_size=30), st.lists(st.floats(0, 50), min_size=1, max_size=30))
def test_roc_staircase_is_monotone(neg, pos):
    pts = roc_curve(neg, pos)
    hs = [p.h for p in pts]
    assert hs == sorted(hs)
    assert all(a.tpr >= b.tpr and a.fpr >= b.fpr for a, b in zip(pts, pts[1:]))
    assert 0.0 <= auc(pts) <= 1.0


def test_empty_class_rejected():
    with pytest.raises(ValueError):
        roc_curve([], [1.0])


def test_threshold_for_fpr_picks_lowest_admissible():
    pts = roc_curve([1, 2, 3, 4], [5, 6], h_grid=[0, 2, 3.5, 4.5])
    assert threshold_for_fpr(pts, 0.25).h == 3.5


def test_roc_csv_header():
    text = roc_csv(roc_curve([1], [2]))
    assert text.splitlines()[0] == "h,fpr,tpr"


# --- runs on a small untrained policy ---------------------------------------

@pytest.fixture(scope="module")
def small():
    cfg = ScenarioConfig.from_dict({"N": 5, "T_max": 80, "routing": {"k_max": 4},
                                    "flows": {"count": 2, "rate": 0.5}})
    rng = np.random.default_rng(0)
    actor, critic = PolicyParams.create(4, (8, 8), rng), ValueParams.create(4, (8, 8), rng)
    cal = calibrate(actor, critic, 0.99, cfg, 3, seed=1, k=3)
    return cfg, actor, critic, cal


def test_calibration_needs_nominal_and_episodes(small):
    cfg, actor, critic, _ = small
    with pytest.raises(ValueError):
        calibrate(actor, critic, 0.99, cfg, 0)
    jam = cfg.with_anomaly(AnomalySpec(kind="jammer", jammers=[JammerSpec(follow_flow=0)]))
    with pytest.raises(ValueError):
        calibrate(actor, critic, 0.99, jam, 2)


def test_calibration_is_seed_deterministic(small, tmp_path):
    cfg, actor, critic, cal = small
    again = calibrate(actor, critic, 0.99, cfg, 3, seed=1, k=3)
    cal.save(tmp_path / "a.json")
    again.save(tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_records_round_trip_and_labels(small, tmp_path):
    cfg, actor, critic, cal = small
    dcfg = DetectorConfig(k=3, alpha=0.2, h=5)
    nom = detect(actor, critic, 0.99, cfg, cal, dcfg, 2, seed=3)
    jam_cfg = cfg.with_anomaly(AnomalySpec(kind="jammer", jammers=[JammerSpec(follow_flow=0, window=(10, 60))]))
    jam = detect(actor, critic, 0.99, jam_cfg, cal, dcfg, 2, seed=3)
    assert all(r.label == "nominal" and r.metrics["jam_events"] == 0 for r in nom)
    assert all(r.label == "anomalous" for r in jam)
    write_records(tmp_path / "r.jsonl", nom + jam)
    back = read_records(tmp_path / "r.jsonl")
    assert [r.to_json() for r in back] == [r.to_json() for r in nom + jam]
    assert back[0].score == max(back[0].aggregate)
    assert len(back[0].aggregate) == cfg.T_max


def test_trace_csv_columns(small):
    cfg, actor, critic, cal = small
    rec = detect(actor, critic, 0.99, cfg, cal, DetectorConfig(k=3, alpha=0.2, h=5), 1, seed=4)[0]
    lines = trace_csv(rec).splitlines()
    assert lines[0] == "slot,node,delta,knn_stat,p,ell,g,alarm"
    assert len(lines) - 1 == sum(len(t["slot"]) for t in rec.traces.values())


def test_report_is_reproducible_and_plots_span_episode(small, tmp_path):
    cfg, actor, critic, cal = small
    recs = detect(actor, critic, 0.99, cfg, cal, DetectorConfig(k=3, alpha=0.2, h=5), 2, seed=5)
    pts = roc_curve([r.score for r in recs], [r.score + 1 for r in recs])
    a = write_report(recs, pts, tmp_path / "a")
    b = write_report(recs, pts, tmp_path / "b")
    assert [p.name for p in a] == [p.name for p in b]
    for pa, pb in zip(a, b):
        if pa.suffix == ".csv":
            assert pa.read_bytes() == pb.read_bytes()
    score_csv = next(p for p in a if p.name.endswith("_score.csv"))
    fig = plot_trace(score_csv, tmp_path / "t.svg", cfg.T_max)
    assert fig.axes[0].get_xlim() == (0.0, float(cfg.T_max))


def test_run_record_score_of_empty_aggregate():
    assert RunRecord("x", 0, "nominal", 2, 0, {}, []).score == 0.0
