"""Metric implementations vs independent brute-force oracles."""

import itertools
import warnings

import numpy as np
import pytest

from eegfuse.evaluation import (auc_pr, auroc, balanced_accuracy, cohen_kappa,
                                weighted_f1)
from eegfuse.rng import stream


# -- oracles: explicit-loop reimplementations, no shared code ----------------------

def oracle_balanced_accuracy(t, p):
    recalls = []
    for c in sorted(set(t)):
        total = sum(1 for ti in t if ti == c)
        hits = sum(1 for ti, pi in zip(t, p) if ti == c and pi == c)
        recalls.append(hits / total)
    return sum(recalls) / len(recalls)


def oracle_kappa(t, p):
    n = len(t)
    po = sum(1 for ti, pi in zip(t, p) if ti == pi) / n
    classes = sorted(set(t) | set(p))
    pe = sum((list(t).count(c) / n) * (list(p).count(c) / n) for c in classes)
    if pe >= 1.0:
        return 0.0
    return (po - pe) / (1 - pe)


def oracle_weighted_f1(t, p):
    acc = 0.0
    for c in sorted(set(t) | set(p)):
        tp = sum(1 for ti, pi in zip(t, p) if ti == c and pi == c)
        fp = sum(1 for ti, pi in zip(t, p) if ti != c and pi == c)
        fn = sum(1 for ti, pi in zip(t, p) if ti == c and pi != c)
        f1 = 0.0 if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)
        acc += f1 * (tp + fn)
    return acc / len(t)


def oracle_auroc(t, s):
    pos = [si for ti, si in zip(t, s) if ti == 1]
    neg = [si for ti, si in zip(t, s) if ti == 0]
    wins = 0.0
    for a in pos:
        for b in neg:
            if a > b:
                wins += 1.0
            elif a == b:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def oracle_ap(t, s):
    n_pos = sum(t)
    ap, prev_recall = 0.0, 0.0
    for th in sorted(set(s), reverse=True):
        sel = [i for i, si in enumerate(s) if si >= th]
        tp = sum(1 for i in sel if t[i] == 1)
        precision = tp / len(sel)
        recall = tp / n_pos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


# -- worked examples ------------------------------------------------------------------

def test_balanced_accuracy_examples():
    assert balanced_accuracy([0, 1, 2], [0, 1, 2]) == 1.0
    assert balanced_accuracy([0, 0, 0, 1], [0, 0, 0, 0]) == 0.5
    y = [0] * 90 + [1] * 10
    assert balanced_accuracy(y, [0] * 100) == 0.5


def test_balanced_accuracy_absent_class_warns():
    with pytest.warns(UserWarning, match="absent"):
        val = balanced_accuracy([0, 0, 1, 1], [2, 0, 1, 1])
    assert val == pytest.approx((0.5 + 1.0) / 2)


def test_cohen_kappa_examples():
    assert cohen_kappa([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0
    assert cohen_kappa([0, 0, 1, 1], [0, 1, 0, 1]) == 0.0
    t = [0] * 4 + [1] * 4
    p = [0, 0, 0, 1, 1, 0, 1, 1]
    assert cohen_kappa(t, p) == pytest.approx(0.5, abs=1e-12)
    assert cohen_kappa([1, 1, 1], [1, 1, 1]) == 0.0  # degenerate p_e == 1


def test_weighted_f1_examples():
    assert weighted_f1([0, 1, 2], [0, 1, 2]) == 1.0
    assert weighted_f1([0, 0, 1], [0, 0, 0]) == pytest.approx(2 * 0.8 / 3, abs=1e-12)
    assert weighted_f1([1, 1], [1, 1]) == 1.0


def test_auroc_worked_example_and_edges():
    assert auroc([0, 0, 1, 1], [0.1, 0.4, 0.35, 0.8]) == pytest.approx(0.75, abs=1e-12)
    assert auroc([0, 0, 1, 1], [0.1, 0.2, 0.3, 0.4]) == 1.0
    assert auroc([0, 1, 0, 1], [0.5, 0.5, 0.5, 0.5]) == 0.5
    assert auc_pr([0, 0, 1, 1], [0.1, 0.2, 0.3, 0.4]) == 1.0
    with pytest.raises(ValueError):
        auroc([1, 1], [0.1, 0.2])
    with pytest.raises(ValueError):
        auc_pr([0, 0], [0.1, 0.2])


def test_auroc_monotone_invariance():
    rng = stream(0, "mono")
    for _ in range(30):
        n = 12
        t = (rng.random(n) < 0.4).astype(int)
        if t.min() == t.max():
            continue
        s = rng.standard_normal(n)
        base = auroc(t, s)
        for f in (lambda x: 2 * x + 1, np.tanh, np.exp):
            assert auroc(t, f(s)) == pytest.approx(base, abs=1e-12)


# -- exhaustive enumeration ------------------------------------------------------------

def all_confusions(n, k):
    """All k x k confusion matrices with total n, realized as label arrays."""
    for cells in itertools.product(range(n + 1), repeat=k * k):
        if sum(cells) != n:
            continue
        t, p = [], []
        for idx, count in enumerate(cells):
            t += [idx // k] * count
            p += [idx % k] * count
        yield t, p


def test_classification_metrics_exhaustive_assignments_n4():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for n in range(1, 5):
            for t in itertools.product(range(3), repeat=n):
                for p in itertools.product(range(3), repeat=n):
                    assert balanced_accuracy(t, p) == pytest.approx(
                        oracle_balanced_accuracy(t, p), abs=1e-9)
                    assert cohen_kappa(t, p) == pytest.approx(oracle_kappa(t, p), abs=1e-9)
                    assert weighted_f1(t, p) == pytest.approx(oracle_weighted_f1(t, p), abs=1e-9)


def test_classification_metrics_all_confusions_n6():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for k in (2, 3):
            for n in range(1, 7):
                for t, p in all_confusions(n, k):
                    assert balanced_accuracy(t, p) == pytest.approx(
                        oracle_balanced_accuracy(t, p), abs=1e-9)
                    assert cohen_kappa(t, p) == pytest.approx(oracle_kappa(t, p), abs=1e-9)
                    assert weighted_f1(t, p) == pytest.approx(oracle_weighted_f1(t, p), abs=1e-9)


def test_ranking_metrics_exhaustive_labels_tie_grids():
    rng = stream(1, "scores")
    for n in range(2, 7):
        label_sets = [t for t in itertools.product((0, 1), repeat=n)
                      if 0 < sum(t) < n]
        if n <= 4:
            score_sets = list(itertools.product((0.2, 0.5, 0.8), repeat=n))
        else:
            score_sets = [tuple(rng.uniform(0, 1, n)) for _ in range(40)]
            score_sets += [tuple(rng.choice([0.2, 0.5, 0.8], n)) for _ in range(20)]
            score_sets += [(0.5,) * n]
        for t in label_sets:
            for s in score_sets:
                assert auroc(t, s) == pytest.approx(oracle_auroc(t, s), abs=1e-9)
                assert auc_pr(t, s) == pytest.approx(oracle_ap(t, s), abs=1e-9)


def test_balanced_accuracy_recall_preserving_resampling():
    """Duplicating samples within classes keeps per-class recall fixed."""
    t = [0, 0, 1, 1, 1]
    p = [0, 1, 1, 1, 0]
    base = balanced_accuracy(t, p)
    t2 = t + [0, 0, 1, 1, 1]
    p2 = p + [0, 1, 1, 1, 0]
    assert balanced_accuracy(t2, p2) == pytest.approx(base, abs=1e-12)
