import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import count_confusion, mann_whitney_auc
from seqtune.errors import ContractError, EvaluationError
from seqtune.evaluation import (
    PROJECTION_ORDER,
    BinaryProjection,
    ConfusionMatrix,
    accuracy,
    binary_scores,
    build_report,
    confusion_matrix,
    format_table,
    normalize_confusion,
    roc_and_auc,
)


def test_confusion_examples():
    cm = confusion_matrix([0, 1, 2, 2], [0, 1, 2, 2], 3)
    np.testing.assert_array_equal(cm.counts, np.diag([1, 1, 2]))
    cm = confusion_matrix([0, 1, 2], [1, 1, 1], 3)
    np.testing.assert_array_equal(cm.counts, [[0, 1, 0], [0, 1, 0], [0, 1, 0]])


def test_confusion_matches_counting_loop(rng):
    t, p = rng.integers(0, 3, 200), rng.integers(0, 3, 200)
    cm = confusion_matrix(t, p, 3)
    np.testing.assert_array_equal(cm.counts, count_confusion(t.tolist(), p.tolist(), 3))
    assert cm.total == 200


def test_confusion_length_mismatch():
    with pytest.raises(ContractError):
        confusion_matrix([0, 1], [0], 3)


def test_normalize():
    cm = confusion_matrix([0, 0, 0, 0, 1], [0, 1, 2, 2, 1], 3)
    fractions, empty = normalize_confusion(cm)
    np.testing.assert_allclose(fractions[0], [0.25, 0.25, 0.5])
    assert empty == [2] and not fractions[2].any()
    ident, _ = normalize_confusion(confusion_matrix([0, 1, 2, 1], [0, 1, 2, 1], 3))
    np.testing.assert_array_equal(ident, np.eye(3))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.integers(0, 50), min_size=4, max_size=4), min_size=4, max_size=4))
def test_normalized_rows_sum_to_one(rows):
    fractions, empty = normalize_confusion(ConfusionMatrix(np.array(rows), list("abcd")))
    for i, row in enumerate(fractions):
        if i in empty:
            assert not row.any()
        else:
            assert abs(row.sum() - 1) <= 1e-12


def test_accuracy():
    assert accuracy(confusion_matrix([0, 1, 2], [0, 1, 2], 3)) == 1.0
    assert accuracy(ConfusionMatrix(np.ones((3, 3), dtype=int), list("abc"))) == pytest.approx(1 / 3)
    with pytest.raises(ContractError):
        accuracy(ConfusionMatrix(np.zeros((3, 3), dtype=int), list("abc")))


def test_accuracy_matches_direct_count(rng):
    t, p = rng.integers(0, 3, 137), rng.integers(0, 3, 137)
    assert accuracy(confusion_matrix(t, p, 3)) == sum(int(a == b) for a, b in zip(t, p)) / 137


# ---------------------------------------------------------------- binary


def test_binary_score_examples():
    s, y = binary_scores([[1, 0, 0], [0, 0.3, 0.7]], [0, 2], BinaryProjection.ABNORMAL_VS_NORMAL)
    assert s.tolist() == [0, 1.0] and y.tolist() == [0, 1]
    s, y = binary_scores([[0, 0.5, 0.5], [0.2, 0.8, 0.0], [1, 0, 0]], [1, 2, 0], BinaryProjection.TB_VS_CANCER)
    assert s.tolist() == [0.5, 0.0] and y.tolist() == [0, 1]
    s, _ = binary_scores([[1, 0, 0], [0.2, 0.8, 0]], [1, 2], "TB_VS_CANCER")
    assert s[0] == 0.5  # undefined ratio
    s, y = binary_scores([[0.1, 0.2, 0.7], [0.5, 0.5, 0]], [2, 1], "CANCER_VS_REST")
    assert s.tolist() == [0.7, 0.0] and y.tolist() == [1, 0]


def test_binary_partition(rng):
    probs = rng.dirichlet(np.ones(3), 60)
    labels = rng.integers(0, 3, 60)
    included = {"ABNORMAL_VS_NORMAL": 60, "TB_VS_CANCER": int(np.sum(labels > 0)), "CANCER_VS_REST": 60}
    for proj in PROJECTION_ORDER:
        s, y = binary_scores(probs, labels, proj)
        assert int(y.sum()) + int((y == 0).sum()) == included[proj.value] == len(s)


def test_binary_single_class_is_error():
    with pytest.raises(EvaluationError):
        binary_scores([[0.2, 0.3, 0.5]] * 3, [2, 2, 2], "CANCER_VS_REST")


# ------------------------------------------------------------------- ROC


def test_auc_examples():
    assert roc_and_auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]).auc == 1.0
    assert roc_and_auc([0.4] * 6, [1, 0, 1, 0, 0, 1]).auc == 0.5
    with pytest.raises(EvaluationError):
        roc_and_auc([0.1, 0.2], [1, 1])


def test_roc_shape(rng):
    scores = np.round(rng.random(50), 1)
    labels = rng.integers(0, 2, 50)
    labels[:2] = [0, 1]
    curve = roc_and_auc(scores, labels)
    assert curve.points[0] == (0.0, 0.0) and curve.points[-1] == (1.0, 1.0)
    assert np.all(np.diff(curve.fpr) >= 0) and np.all(np.diff(curve.tpr) >= 0)
    assert curve.thresholds[0] == np.inf and curve.thresholds[-1] == -np.inf
    # each distinct score appears once as a threshold
    assert sorted(curve.thresholds[1:-1].tolist(), reverse=True) == sorted(set(scores.tolist()), reverse=True)


def _score_sets():
    labels = st.lists(st.integers(0, 1), min_size=2, max_size=200).filter(lambda l: 0 < sum(l) < len(l))
    return labels.flatmap(lambda l: st.tuples(
        st.lists(st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]) | st.floats(0, 1), min_size=len(l), max_size=len(l)),
        st.just(l)))


@settings(max_examples=100, deadline=None)
@given(_score_sets())
def test_auc_equals_mann_whitney(data):
    scores, labels = data
    assert abs(roc_and_auc(scores, labels).auc - mann_whitney_auc(scores, labels)) < 1e-9


@settings(max_examples=50, deadline=None)
@given(_score_sets())
def test_auc_invariances(data):
    scores, labels = data
    s = np.array(scores)
    base = roc_and_auc(s, labels).auc
    # strictly increasing map built on ranks so float rounding cannot merge scores
    _, rank = np.unique(s, return_inverse=True)
    assert abs(roc_and_auc(np.exp(0.5 * rank) + 2, labels).auc - base) < 1e-9
    assert abs(roc_and_auc(8 * s, labels).auc - base) < 1e-9
    flipped = roc_and_auc(s, [1 - y for y in labels]).auc
    assert abs(flipped - (1 - base)) < 1e-9


# ---------------------------------------------------------------- report


def test_perfect_report():
    labels = np.array([0, 1, 2, 2, 1, 0])
    probs = np.eye(3)[labels] * 0.9 + 0.1 / 3
    report = build_report("SFT", probs, labels)
    assert report.accuracy == 1.0
    assert all(v == 1.0 for v in report.auc.values())
    assert list(report.auc) == [p.value for p in PROJECTION_ORDER]


def test_report_accuracy_cross_check(rng):
    probs = rng.dirichlet(np.ones(3), 80)
    labels = rng.integers(0, 3, 80)
    report = build_report("FT_ALL", probs, labels)
    assert report.accuracy == accuracy(confusion_matrix(labels, probs.argmax(axis=1), 3))
    assert report.per_class_accuracy["TB"] == report.normalized_confusion[1][1]
    d = report.to_dict()
    assert d["roc"]["TB_VS_CANCER"]["thresholds"][0] == "inf"
    assert "binary_scores" in d["metadata"]


def test_table_rows_in_order(rng):
    probs = rng.dirichlet(np.ones(3), 30)
    labels = np.arange(30) % 3
    reports = [build_report(mode, probs, labels) for mode in ("FT_ALL", "FT_FC", "SFT")]
    lines = format_table(reports).splitlines()
    assert [l.split()[0] for l in lines[2:]] == ["FT_ALL", "FT_FC", "SFT"]
    assert "ACC" in lines[0] and "AUC prob. 3" in lines[0]
