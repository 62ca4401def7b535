import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gwanomaly import autodiff as ad
from gwanomaly.autodiff import DiffArray, Tape, finite_diff_check
from gwanomaly.errors import DomainError, ShapeError, UndefinedMetricError
from gwanomaly.layers import softmax
from gwanomaly.metrics import (EvalReport, accuracy, build_report, confusion, cross_entropy, pairwise_auc,
                               parse_report, roc_auc, roc_curve, tnr, tnr_at_tpr, tpr)

from conftest import dbl


def auc_oracle(scores, labels):
    """Mann-Whitney statistic by explicit double loop."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


# -- cross entropy ------------------------------------------------------------------

def test_ce_at_half():
    assert cross_entropy(dbl([[0.5, 0.5]]), [1]).item() == pytest.approx(math.log(2), abs=1e-12)


def test_ce_clamped_at_zero_probability():
    v = cross_entropy(dbl([[1.0, 0.0]]), [1]).item()
    assert v == pytest.approx(-math.log(1e-7), rel=1e-9)
    assert v == pytest.approx(16.118, abs=1e-3)


def test_ce_matches_mean_negative_log(rng):
    p = rng.uniform(0.05, 0.95, 8)
    probs = np.column_stack([1 - p, p])
    y = rng.integers(0, 2, 8)
    want = -np.mean(np.log(probs[np.arange(8), y]))
    assert cross_entropy(dbl(probs), y).item() == pytest.approx(want, rel=1e-12)


def test_ce_clamped_entries_have_zero_gradient():
    p = dbl([[1.0, 0.0], [0.3, 0.7]], requires_grad=True)
    with Tape() as tape:
        ad.backward(cross_entropy(p, [1, 1]), tape)
    assert p.grad[0, 1] == 0
    assert p.grad[1, 1] == pytest.approx(-1 / (2 * 0.7))


def test_ce_gradient_through_softmax(rng):
    z = dbl(rng.standard_normal((6, 2)))
    y = rng.integers(0, 2, 6)
    assert finite_diff_check(lambda v: cross_entropy(softmax(v), y), z, 1e-5) <= 1e-6


def test_ce_rejects_bad_labels_and_rows():
    with pytest.raises(DomainError):
        cross_entropy(dbl([[0.5, 0.5]]), [2])
    with pytest.raises(DomainError):
        cross_entropy(dbl([[0.5, 0.6]]), [1])
    with pytest.raises(ShapeError):
        cross_entropy(dbl([[0.5, 0.5]]), [1, 0])


# -- confusion and rates -------------------------------------------------------------------

def test_confusion_example():
    assert confusion([0.9, 0.2, 0.7, 0.1], [1, 0, 0, 0], 0.5) == (1, 1, 2, 0)
    assert tnr(2, 1) == pytest.approx(2 / 3)


def test_threshold_is_strict():
    assert confusion([0.5], [1], 0.5) == (0, 0, 0, 1)


def test_threshold_one_gives_full_tnr():
    tp, fp, tn, fn = confusion([0.2, 0.99, 1.0], [0, 0, 1], 1.0)
    assert tnr(tn, fp) == 1.0


def test_undefined_rates():
    with pytest.raises(UndefinedMetricError):
        tnr(0, 0)
    with pytest.raises(UndefinedMetricError):
        tpr(0, 0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=50), st.floats(0, 1))
def test_confusion_partitions(pairs, thr):
    s, y = zip(*pairs)
    tp, fp, tn, fn = confusion(s, y, thr)
    assert tp + fp + tn + fn == len(s)
    assert accuracy(s, y, thr) == pytest.approx((tp + tn) / len(s))


# -- ROC / AUC ---------------------------------------------------------------------------

def test_auc_perfect_and_inverted():
    assert roc_auc([0.1, 0.9], [0, 1])[1] == 1.0
    assert roc_auc([0.9, 0.1], [0, 1])[1] == 0.0


def test_auc_all_tied_is_half():
    assert roc_auc([0.5] * 6, [0, 1, 0, 1, 1, 0])[1] == 0.5


def test_roc_single_class_is_undefined():
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.1, 0.2], [0, 0])


def test_roc_endpoints_and_monotone(rng):
    s, y = rng.random(50), rng.integers(0, 2, 50)
    y[:2] = (0, 1)
    curve = roc_curve(s, y)
    assert (curve.fpr[0], curve.tpr[0]) == (0, 0)
    assert (curve.fpr[-1], curve.tpr[-1]) == (1, 1)
    assert np.all(np.diff(curve.fpr) >= 0) and np.all(np.diff(curve.tpr) >= 0)


def test_roc_thresholds_reproduce_points(rng):
    s = np.round(rng.random(40), 1)
    y = rng.integers(0, 2, 40)
    y[:2] = (0, 1)
    curve = roc_curve(s, y)
    for f, t, thr in zip(curve.fpr, curve.tpr, curve.thresholds):
        tp, fp, tn, fn = confusion(s, y, thr)
        assert (fp / (fp + tn), tp / (tp + fn)) == pytest.approx((f, t))


def test_auc_matches_oracle_1000_instances():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 201))
        levels = int(rng.integers(1, 30))
        s = rng.integers(0, levels, n) / levels if rng.random() < 0.5 else rng.random(n)
        y = rng.integers(0, 2, n)
        y[rng.choice(n, 2, replace=False)] = (0, 1)
        worst = max(worst, abs(roc_auc(s, y)[1] - pairwise_auc(s, y)))
    assert worst <= 1e-12


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]), st.integers(0, 1)), min_size=2, max_size=40))
def test_pairwise_auc_matches_double_loop(pairs):
    s, y = map(np.array, zip(*pairs))
    if len(set(y.tolist())) < 2:
        return
    assert pairwise_auc(s, y, chunk=3) == pytest.approx(auc_oracle(s, y), abs=1e-12)


def test_tnr_at_tpr_example():
    scores = [0.1, 0.2, 0.3, 0.4, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99]
    labels = [0, 0, 0, 1, 0, 1, 1, 1, 1, 1]
    value, thr = tnr_at_tpr(scores, labels, 0.9)
    tp, fp, tn, fn = confusion(scores, labels, thr)
    assert tp / (tp + fn) >= 0.9
    # TPR 5/6 at the 0.6 boundary misses 0.9; all six positives need the threshold below 0.4
    assert value == pytest.approx(3 / 4)


# -- reports -------------------------------------------------------------------------------

def test_report_roundtrip(tmp_path, rng):
    s, y = rng.random(30), np.r_[np.zeros(15, int), np.ones(15, int)]
    rep = build_report(s, y, 0.5)
    rep.write(tmp_path / "r.txt", tmp_path / "roc.csv")
    back = parse_report((tmp_path / "r.txt").read_text())
    assert back["TP"] == rep.tp and back["auc"] == rep.auc and back["tnr"] == rep.tnr
    lines = (tmp_path / "roc.csv").read_text().splitlines()
    assert lines[0] == "fpr,tpr" and len(lines) == len(rep.roc_points) + 1


def test_report_without_roc_uses_na():
    rep = build_report([0.1, 0.2], [0, 0], 0.5, with_roc=False)
    parsed = parse_report(rep.to_text())
    assert parsed["auc"] is None and parsed["tpr"] is None and parsed["tnr"] == 1.0


def test_report_n():
    assert EvalReport(0.5, 1, 2, 3, 4, None, None, 0.4).n == 10
