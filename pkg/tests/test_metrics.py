import itertools
import math
from decimal import ROUND_HALF_UP, Decimal

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facecnn import metrics as M
from facecnn.errors import DomainError

# Table 2 of the source study, as printed (class 1 F1 is printed as 0.7).
TABLE2 = {
    "class0": (0.55, 0.58, 0.57, 48),
    "class1": (0.71, 0.68, 0.70, 72),
    "accuracy": 0.64,
    "macro": (0.63, 0.63, 0.63),
    "weighted": (0.65, 0.64, 0.64),
}
TABLE2_CM = [[28, 20], [23, 49]]


def r2(x):
    return float(Decimal(repr(float(x))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def rounded_rows(rep):
    return {
        "class0": (r2(rep.per_class[0].precision), r2(rep.per_class[0].recall), r2(rep.per_class[0].f1), rep.per_class[0].support),
        "class1": (r2(rep.per_class[1].precision), r2(rep.per_class[1].recall), r2(rep.per_class[1].f1), rep.per_class[1].support),
        "accuracy": r2(rep.accuracy),
        "macro": (r2(rep.macro.precision), r2(rep.macro.recall), r2(rep.macro.f1)),
        "weighted": (r2(rep.weighted.precision), r2(rep.weighted.recall), r2(rep.weighted.f1)),
    }


# -- regression ----------------------------------------------------------------


def test_rmse_mae_hand_examples():
    assert M.rmse([1, 2, 3], [1, 2, 3]) == 0.0
    assert M.mae([1, 2, 3], [1, 2, 3]) == 0.0
    assert M.rmse([1, 2, 3], [2, 2, 2]) == pytest.approx(math.sqrt(2 / 3), abs=1e-12)
    assert M.mae([1, 2, 3], [2, 2, 2]) == pytest.approx(2 / 3, abs=1e-12)
    assert M.mae([1, 2, 3], [2, 2, 2]) <= M.rmse([1, 2, 3], [2, 2, 2])


def test_table3_consistency():
    assert abs(M.rmse_from_mse(52.529) - 7.2477) <= 5e-5


@pytest.mark.parametrize("y,yh", [([1, 2], [1]), ([], [])])
def test_regression_errors(y, yh):
    for fn in (M.mse, M.rmse, M.mae):
        with pytest.raises(DomainError):
            fn(y, yh)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 116), st.floats(0, 116)), min_size=1, max_size=50))
def test_regression_properties(pairs):
    y = [a for a, _ in pairs]
    yh = [b for _, b in pairs]
    rep = M.RegressionReport.from_predictions(y, yh)
    sq = math.fsum((a - b) ** 2 for a, b in pairs)
    assert rep.rmse**2 * len(pairs) == pytest.approx(sq, rel=1e-6, abs=1e-9)
    assert rep.mae <= rep.rmse + 1e-12
    assert rep.rmse == pytest.approx(math.sqrt(rep.mse), rel=1e-9)
    assert min(rep.mse, rep.rmse, rep.mae) >= 0
    if y == yh:
        assert rep.mse == rep.rmse == rep.mae == 0


def test_mae_by_decade_oracle():
    y = [5, 15, 17, 25]
    yh = [6, 10, 20, 25]
    assert M.mae_by_decade(y, yh) == {"0-9": 1.0, "10-19": 4.0, "20-29": 0.0}


def test_regression_render_four_decimals():
    text = M.RegressionReport.from_predictions([0.0], [7.2477]).render()
    assert "RMSE" in text and "7.2477" in text


# -- confusion matrix ----------------------------------------------------------


def test_confusion_examples():
    assert M.confusion_matrix([0, 1, 0], [0, 1, 0]).counts == ((2, 0), (0, 1))
    assert M.confusion_matrix([0, 0, 1], [1, 1, 0]).counts == ((0, 2), (1, 0))
    np.testing.assert_allclose(M.ConfusionMatrix.from_array([[2, 2], [1, 3]]).normalized(), [[0.5, 0.5], [0.25, 0.75]])


def test_confusion_normalized_zero_row():
    np.testing.assert_array_equal(M.ConfusionMatrix.from_array([[0, 0], [1, 3]]).normalized()[0], [0, 0])


def test_confusion_unknown_class():
    with pytest.raises(DomainError):
        M.confusion_matrix([0, 2], [0, 1])
    with pytest.raises(DomainError):
        M.confusion_matrix([0, 1], [0])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=80))
def test_confusion_and_report_properties(pairs):
    labels = [a for a, _ in pairs]
    preds = [b for _, b in pairs]
    cm = M.confusion_matrix(labels, preds)
    a = cm.array()
    assert a.sum() == len(pairs)
    assert a[0].sum() == labels.count(0) and a[1].sum() == labels.count(1)
    norm = cm.normalized()
    for c in (0, 1):
        if a[c].sum():
            assert norm[c].sum() == pytest.approx(1.0)
    rep = M.classification_report(cm)
    assert rep.accuracy == pytest.approx(np.trace(a) / a.sum())
    assert rep.weighted.recall == pytest.approx(rep.accuracy)
    assert rep.macro.f1 <= max(m.f1 for m in rep.per_class) + 1e-12


# -- classification report -----------------------------------------------------


def test_table2_reconstruction_exact_values():
    rep = M.classification_report(M.ConfusionMatrix.from_array(TABLE2_CM))
    got = [(m.precision, m.recall, m.f1) for m in rep.per_class]
    np.testing.assert_allclose(got[0], (28 / 51, 28 / 48, 2 * 28 / (2 * 28 + 20 + 23)), rtol=1e-12)
    np.testing.assert_allclose(got[1], (49 / 69, 49 / 72, 2 * 49 / (2 * 49 + 20 + 23)), rtol=1e-12)
    assert rep.accuracy == pytest.approx(77 / 120)
    assert rounded_rows(rep) == TABLE2


def test_table2_brute_force_search_finds_the_matrix():
    """Every 2x2 matrix with supports 48/72 whose rounded report equals Table 2."""
    hits = []
    for tp0, tp1 in itertools.product(range(49), range(73)):
        cm = M.ConfusionMatrix.from_array([[tp0, 48 - tp0], [72 - tp1, tp1]])
        if rounded_rows(M.classification_report(cm)) == TABLE2:
            hits.append(cm.counts)
    assert hits == [((28, 20), (23, 49))]


def test_report_perfect_and_zero_prediction_conventions():
    perfect = M.classification_report(M.ConfusionMatrix.from_array([[5, 0], [0, 7]]))
    assert perfect.accuracy == 1.0
    assert all(m.precision == m.recall == m.f1 == 1.0 for m in perfect.per_class)
    none_predicted_1 = M.classification_report(M.ConfusionMatrix.from_array([[5, 0], [3, 0]]))
    assert none_predicted_1.per_class[1].precision == 0.0
    assert none_predicted_1.per_class[1].f1 == 0.0
    with pytest.raises(DomainError):
        M.classification_report(M.ConfusionMatrix.from_array([[0, 0], [0, 0]]))


def test_report_render_matches_table2_layout():
    text = M.classification_report(M.ConfusionMatrix.from_array(TABLE2_CM)).render()
    lines = text.splitlines()
    assert lines[0].split() == ["Class", "Precision", "Recall", "F1-Score", "Support"]
    assert lines[1].split() == ["0", "0.55", "0.58", "0.57", "48"]
    assert lines[2].split() == ["1", "0.71", "0.68", "0.70", "72"]
    assert lines[3].split() == ["Accuracy", "-", "-", "0.64", "120"]
    assert lines[4].split() == ["Macro-Average", "0.63", "0.63", "0.63", "120"]
    assert lines[5].split() == ["Weighted-Average", "0.65", "0.64", "0.64", "120"]


def test_argmax_tie_goes_to_class_zero():
    np.testing.assert_array_equal(M.predicted_classes(np.array([[0.5, 0.5], [0.2, 0.8]])), [0, 1])


# -- ROC / AUC -----------------------------------------------------------------


def pairwise_auc(labels, scores):
    pos = [s for l, s in zip(labels, scores) if l == 1]
    neg = [s for l, s in zip(labels, scores) if l == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_auc_hand_example():
    labels, scores = [0, 0, 1, 1], [0.1, 0.4, 0.35, 0.8]
    assert M.roc_auc(labels, scores).auc == 0.75
    assert M.auc_mann_whitney(labels, scores) == 0.75
    assert pairwise_auc(labels, scores) == 0.75


def test_auc_perfect_and_ties():
    assert M.roc_auc([0, 0, 1, 1], [0.1, 0.2, 0.8, 0.9]).auc == 1.0
    assert M.roc_auc([0, 1, 0, 1], [0.5] * 4).auc == 0.5


def test_auc_single_class_is_domain_error():
    with pytest.raises(DomainError):
        M.roc_auc([1, 1], [0.2, 0.3])


def test_roc_curve_shape():
    roc = M.roc_auc([0, 1, 0, 1, 1], [0.3, 0.9, 0.3, 0.6, 0.1])
    assert (roc.fpr[0], roc.tpr[0]) == (0.0, 0.0)
    assert (roc.fpr[-1], roc.tpr[-1]) == (1.0, 1.0)
    assert all(b >= a for a, b in zip(roc.fpr, roc.fpr[1:]))
    assert all(b >= a for a, b in zip(roc.tpr, roc.tpr[1:]))
    assert list(roc.thresholds[1:]) == [0.9, 0.6, 0.3, 0.1]
    csv_lines = roc.to_csv().splitlines()
    assert csv_lines[0] == "threshold,fpr,tpr"
    assert len(csv_lines) == len(roc.fpr) + 1


def test_auc_equivalence_on_100_random_instances():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 201))
        labels = rng.integers(0, 2, n)
        labels[0], labels[1] = 0, 1
        # coarse grid forces plenty of ties
        scores = rng.integers(0, 20, n) / 20
        trap = M.roc_auc(labels, scores).auc
        worst = max(worst, abs(trap - pairwise_auc(labels.tolist(), scores.tolist())))
        worst = max(worst, abs(trap - M.auc_mann_whitney(labels, scores)))
    assert worst <= 1e-9


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.floats(0, 1)), min_size=2, max_size=60))
def test_auc_reversal(pairs):
    labels = [l for l, _ in pairs]
    if len(set(labels)) < 2:
        return
    scores = np.array([s for _, s in pairs])
    auc = M.roc_auc(labels, scores).auc
    # negation reverses the order exactly; 1 - s can merge nearly equal scores
    assert M.roc_auc(labels, -scores).auc == pytest.approx(1 - auc, abs=1e-9)
    assert 0 <= auc <= 1
