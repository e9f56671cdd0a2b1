import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from glmatch.datagen import generate_synthetic_pair
from glmatch.eval import (
    FIG3_BLUR,
    FIG3_SCALE,
    TABLE2_ROWS,
    ablation_run,
    aggregate,
    evaluate_record,
    f_measure,
    metrics_from_counts,
    plot_sweep,
    precision_recall_f,
    robustness_sweep,
    toggle_label,
    transform_record,
    write_metrics,
    write_table,
)
from glmatch.geometry import rotation_about_center, transform_segments
from glmatch.losses import MatchGroundTruth
from glmatch.transport import MatchSet


@pytest.mark.parametrize("p, r, f", [(85.46, 45.29, 59.20), (86.12, 70.47, 77.51)])
def test_f_measure_reproduces_reported_values(p, r, f):
    assert abs(f_measure(p, r) - f) <= 0.01


@given(st.floats(0, 100), st.floats(0, 100))
def test_f_measure_is_harmonic_mean(p, r):
    f = f_measure(p, r)
    assert min(p, r) - 1e-9 <= f <= max(p, r) + 1e-9
    if p > 0 and r > 0:
        assert f == pytest.approx(2 / (1 / p + 1 / r))


def test_precision_recall_counts():
    gt = MatchGroundTruth([(0, 0), (1, 2), (2, 1)], [3], [3])
    m = precision_recall_f(MatchSet([(0, 0, 0.9), (1, 1, 0.5)], [2, 3], [2, 3]), gt)
    assert (m.true_positives, m.predicted, m.gt_matches) == (1, 2, 3)
    assert m.precision == pytest.approx(50.0) and m.recall == pytest.approx(100 / 3)


def test_undefined_cases():
    m = metrics_from_counts(0, 0, 4)
    assert m.precision == 0 and not m.precision_defined and m.recall_defined
    assert not metrics_from_counts(0, 3, 0).recall_defined


def test_micro_average_pools_counts_and_skips_empty_gt():
    ms = [metrics_from_counts(1, 1, 10), metrics_from_counts(9, 10, 10), metrics_from_counts(0, 5, 0)]
    agg = aggregate(ms)
    assert agg.precision == pytest.approx(100 * 10 / 11) and agg.recall == pytest.approx(50.0)


def test_rotation_transform_keeps_gt_geometry():
    rec = generate_synthetic_pair(seed=3)
    out = transform_record(rec, "rotation", 20.0)
    s = rec.image_a.shape[1]
    back_a = transform_segments(rotation_about_center(-10.0, s, s), out.lines_a)
    back_b = transform_segments(rotation_about_center(10.0, s, s), out.lines_b)
    h = np.array(rec.meta["homography"])
    for i, j in out.gt.pairs:
        a = transform_segments(h, back_a[i])[0]
        d = (a[2:] - a[:2]) / np.hypot(*(a[2:] - a[:2]))
        for p in (back_b[j][:2], back_b[j][2:]):
            assert abs((p - a[:2]) @ np.array([-d[1], d[0]])) < 1e-6
    out.gt.validate(len(out.lines_a), len(out.lines_b))


def test_scale_and_blur_transforms():
    rec = generate_synthetic_pair(seed=4)
    half = transform_record(rec, "scale", 0.5)
    assert half.image_a.shape == (64, 64)
    half.gt.validate(len(half.lines_a), len(half.lines_b))
    blurred = transform_record(rec, "blur", 2.0)
    assert blurred.gt == rec.gt and blurred.image_a.std() < rec.image_a.std()
    assert transform_record(rec, "blur", 0.0) is rec
    with pytest.raises(ValueError):
        transform_record(rec, "shear", 1.0)


def _gt_matcher(records):
    # answers from a lookup of the exact line arrays: a perfect matcher for these inputs
    table = {rec.lines_a.tobytes() + rec.lines_b.tobytes(): rec.gt for rec in records}

    def match(ia, ib, la, lb):
        gt = table[np.asarray(la).tobytes() + np.asarray(lb).tobytes()]
        return MatchSet([(i, j, 1.0) for i, j in gt.pairs], gt.unmatched_a, gt.unmatched_b)

    return match


def test_sweep_with_perfect_and_empty_matchers(tmp_path):
    recs = [generate_synthetic_pair(seed=s) for s in range(3)]
    res = robustness_sweep(_gt_matcher(recs), recs, "blur", FIG3_BLUR)
    assert [v for v, _ in res.points] == list(FIG3_BLUR)
    assert all(m.precision == 100 and m.recall == 100 for _, m in res.points)
    empty = robustness_sweep(lambda *a: MatchSet(), recs, "scale", FIG3_SCALE)
    assert all(m.recall == 0 and not m.precision_defined for _, m in empty.points)
    plot_sweep(res, tmp_path / "s.png")
    assert (tmp_path / "s.png").stat().st_size > 0
    json.dumps(res.to_dict())


def test_sweep_rejects_unsorted_values():
    with pytest.raises(ValueError, match="increasing"):
        robustness_sweep(lambda *a: MatchSet(), [], "blur", [2.0, 1.0])


def test_ablation_table(tmp_path):
    recs = [generate_synthetic_pair(seed=s) for s in range(2)]
    variants = {"YYY": _gt_matcher(recs), "NNN": lambda *a: MatchSet()}
    with pytest.warns(RuntimeWarning, match="skipped"):
        rows = ablation_run(recs, variants)
    assert [toggle_label(r) for r in rows] == ["YYY", "NNN"]
    assert rows[0]["R"] == 100 and rows[1]["R"] == 0
    assert toggle_label(TABLE2_ROWS[1]) == "YYN"
    write_table(rows, tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "feature_loss,topk_graph_learning,glpooling,P,R,F"


def test_write_metrics(tmp_path):
    write_metrics(metrics_from_counts(3, 4, 5), tmp_path / "m.json", tmp_path / "m.csv")
    d = json.loads((tmp_path / "m.json").read_text())
    assert d["precision"] == 75 and d["recall"] == 60
    assert len((tmp_path / "m.csv").read_text().splitlines()) == 2


@given(st.integers(0, 10_000), st.integers(0, 1000), st.integers(0, 1000))
def test_precision_recall_against_set_count(seed, n_pred, n_gt):
    rng = np.random.default_rng(seed)
    pred = {(int(a), int(b)) for a, b in rng.integers(0, 40, (n_pred, 2))}
    truth = {(int(a), int(b)) for a, b in rng.integers(0, 40, (n_gt, 2))}
    m = precision_recall_f(pred, MatchGroundTruth(sorted(truth), [], []))
    tp = sum(1 for p in pred if p in truth)
    assert m.true_positives == tp
    if pred:
        assert m.precision == pytest.approx(100 * tp / len(pred))
    if truth:
        assert m.recall == pytest.approx(100 * tp / len(truth))


@given(st.floats(0, 100), st.floats(0, 100))
def test_f_measure_symmetric_and_below_mean(p, r):
    assert f_measure(p, r) == f_measure(r, p)
    assert f_measure(p, r) <= (p + r) / 2 + 1e-9


@pytest.mark.parametrize("axis, value", [("rotation", 0.0), ("scale", 1.0), ("blur", 0.0)])
def test_identity_sweep_point_equals_direct_evaluation(axis, value):
    recs = [generate_synthetic_pair(seed=s) for s in range(2)]
    matcher = _gt_matcher(recs)
    res = robustness_sweep(matcher, recs, axis, [value])
    assert res.points[0][1] == aggregate(evaluate_record(matcher, r) for r in recs)
