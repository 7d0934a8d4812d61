import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cerfusion.evaluation import (
    ConfusionMatrix,
    EvalReport,
    accuracy,
    confusion_matrix,
    export_report,
    format_metrics_table,
    macro_f1,
    per_class_f1,
    per_class_precision,
    per_class_recall,
    read_confusion_csv,
    report_from_predictions,
)
from cerfusion.errors import ShapeError
from cerfusion.labels import COMPOUND, SINGLE

from oracles import brute_force_metrics


def test_perfect_prediction_diagonal():
    cm = confusion_matrix([0, 1, 2], [0, 1, 2], 3)
    np.testing.assert_array_equal(cm.counts, np.eye(3, dtype=int))
    np.testing.assert_array_equal(per_class_f1(cm), [100, 100, 100])


def test_hand_counted_matrix():
    cm = confusion_matrix([0, 0, 1], [1, 0, 1], 2)
    assert cm.counts.tolist() == [[1, 1], [0, 1]]
    np.testing.assert_allclose(per_class_precision(cm), [100, 50])
    np.testing.assert_allclose(per_class_recall(cm), [50, 100])
    np.testing.assert_allclose(per_class_f1(cm), [200 / 3, 200 / 3])
    assert round(per_class_f1(cm)[0], 2) == 66.67


def test_empty_inputs():
    cm = confusion_matrix([], [], 7)
    assert cm.counts.shape == (7, 7) and cm.total == 0
    assert accuracy(cm) == 0.0
    assert macro_f1(per_class_f1(cm)) == 0.0


def test_confusion_errors():
    with pytest.raises(ShapeError):
        confusion_matrix([0, 1], [0], 2)
    with pytest.raises(IndexError):
        confusion_matrix([0, 2], [0, 1], 2)
    with pytest.raises(IndexError):
        confusion_matrix([0, 1], [-1, 1], 2)


def test_zero_support_zero_predictions_is_zero():
    cm = confusion_matrix([0, 0, 1], [0, 0, 1], 3)
    assert per_class_f1(cm)[2] == 0.0


def test_macro_f1_is_plain_mean():
    assert macro_f1([80.0] * 7) == 80.0
    vals = np.random.default_rng(0).uniform(0, 100, 7)
    assert macro_f1(vals) == pytest.approx(sum(v / 7 for v in vals), abs=1e-12)
    total = 0.0
    for v in vals:
        total += v
    assert abs(macro_f1(vals) - total / len(vals)) < 1e-12


@settings(max_examples=150, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)), min_size=0, max_size=200))
def test_metrics_match_brute_force(pairs):
    t = [a for a, _ in pairs]
    p = [b for _, b in pairs]
    cm = confusion_matrix(t, p, 7)
    ref = brute_force_metrics(t, p, 7)
    assert cm.counts.tolist() == ref["cm"]
    np.testing.assert_allclose(per_class_precision(cm), 100 * np.array(ref["precision"]), atol=1e-9, rtol=0)
    np.testing.assert_allclose(per_class_recall(cm), 100 * np.array(ref["recall"]), atol=1e-9, rtol=0)
    np.testing.assert_allclose(per_class_f1(cm), 100 * np.array(ref["f1"]), atol=1e-9, rtol=0)
    assert abs(accuracy(cm) - 100 * ref["accuracy"]) < 1e-9
    assert abs(macro_f1(per_class_f1(cm)) - 100 * ref["macro_f1"]) < 1e-9


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)), min_size=1, max_size=100), st.randoms())
def test_permutation_invariance_and_identities(pairs, rnd):
    t = np.array([a for a, _ in pairs])
    p = np.array([b for _, b in pairs])
    rep = report_from_predictions(t, p, COMPOUND)
    perm = list(range(len(t)))
    rnd.shuffle(perm)
    rep2 = report_from_predictions(t[perm], p[perm], COMPOUND)
    assert rep.to_dict() == rep2.to_dict()
    cm = rep.confusion.counts
    assert rep.accuracy == pytest.approx(100 * np.trace(cm) / cm.sum())
    assert 0 <= rep.macro_f1 <= 100
    rows = cm.sum(axis=1)
    np.testing.assert_allclose(rep.per_class_recall * rows / 100, np.diag(cm), atol=1e-9)
    assert rep.macro_f1 == pytest.approx(np.mean(rep.per_class_f1))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=1, max_size=60))
def test_macro_f1_is_100_iff_diagonal_full_rows(labels):
    rep = report_from_predictions(labels, labels, COMPOUND)
    full_rows = len(set(labels)) == 7
    assert (rep.macro_f1 == 100.0) == full_rows


def test_macro_f1_below_100_with_one_error():
    t = list(range(7)) * 2
    p = list(t)
    p[0] = 1
    assert report_from_predictions(t, p, COMPOUND).macro_f1 < 100


def test_constant_class_zero_predictor_closed_form():
    t = np.repeat(np.arange(7), 5)
    rep = report_from_predictions(t, np.zeros_like(t), COMPOUND)
    assert rep.accuracy == pytest.approx(100 / 7, abs=1e-9)
    assert rep.macro_f1 == pytest.approx((2 / 8 * 100) / 7, abs=1e-9)
    assert abs(rep.macro_f1 - 3.571) < 1e-3


def test_report_json_round_trip():
    rng = np.random.default_rng(3)
    rep = report_from_predictions(rng.integers(0, 7, 50), rng.integers(0, 7, 50), COMPOUND)
    again = EvalReport.from_json(rep.to_json())
    assert again.to_dict() == rep.to_dict()
    assert again.macro_f1 == rep.macro_f1


def test_metrics_table_layout():
    rng = np.random.default_rng(4)
    rep = report_from_predictions(rng.integers(0, 7, 80), rng.integers(0, 7, 80), COMPOUND)
    lines = format_metrics_table(rep).splitlines()
    assert lines[0] == "row_name,value"
    data = lines[1:]
    assert len(data) == 9
    assert [l.split(",")[0] for l in data] == list(COMPOUND.names) + ["acc", "F1"]


def test_two_decimal_rendering():
    cm = ConfusionMatrix(np.eye(7, dtype=np.int64), COMPOUND)
    rep = EvalReport.from_confusion(cm)
    rep.macro_f1 = 74.596
    assert format_metrics_table(rep).splitlines()[-1] == "F1,74.60"


def test_export_report_files(tmp_path):
    rng = np.random.default_rng(5)
    rep = report_from_predictions(rng.integers(0, 8, 60), rng.integers(0, 8, 60), SINGLE)
    files = export_report(rep, tmp_path / "out")
    assert sorted(f.name for f in files) == ["confusion.csv", "confusion.png", "metrics.csv"]
    assert sorted(p.name for p in (tmp_path / "out").iterdir()) == ["confusion.csv", "confusion.png", "metrics.csv"]
    back = read_confusion_csv(tmp_path / "out" / "confusion.csv")
    np.testing.assert_array_equal(back.counts, rep.confusion.counts)
    assert (tmp_path / "out" / "confusion.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert len((tmp_path / "out" / "metrics.csv").read_text().splitlines()) == 1 + 10
