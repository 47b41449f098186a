import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ria.errors import UndefinedMetricError
from ria.metrics import (auc, auc_pairwise, average_ranks, evaluate, grouped_auc, logloss, parse_report)


def loop_auc(scores, labels):
    """Plain double loop over (positive, negative) pairs."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))



def test_auc_examples():
    assert auc([0.9, 0.1], [1, 0]) == 1.0
    assert auc([0.1, 0.9], [1, 0]) == 0.0
    assert auc([0.5, 0.5, 0.2], [1, 0, 0]) == 0.75


def test_auc_single_class_is_an_error():
    with pytest.raises(UndefinedMetricError):
        auc([0.2, 0.3], [1, 1])
    with pytest.raises(UndefinedMetricError):
        auc_pairwise([0.2], [0])


def test_fast_auc_matches_oracle_on_random_instances():
    rng = np.random.default_rng(2024)
    for trial in range(100):
        n = int(rng.integers(2, 1001))
        # coarse grid on half the instances so ties are common
        s = rng.normal(size=n) if trial % 2 else rng.integers(0, 8, size=n) / 8
        y = rng.integers(0, 2, size=n)
        y[0], y[-1] = 0, 1
        assert abs(auc(s, y) - loop_auc(s.tolist(), y.tolist())) <= 1e-12


@given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 1)), min_size=2, max_size=60))
def test_auc_equals_pairwise_oracle(pairs):
    s = [p[0] / 4 for p in pairs]
    y = [p[1] for p in pairs]
    if len(set(y)) < 2:
        return
    assert abs(auc(s, y) - loop_auc(s, y)) <= 1e-12
    assert abs(auc_pairwise(s, y) - loop_auc(s, y)) <= 1e-12


@given(st.lists(st.floats(-5, 5), min_size=4, max_size=80), st.integers(0, 2**31))
def test_auc_invariant_under_monotone_maps_and_negation(scores, seed):
    rng = np.random.default_rng(seed)
    s = np.asarray(scores)
    y = rng.integers(0, 2, size=s.size)
    y[0], y[-1] = 0, 1
    base = auc(s, y)
    # random strictly increasing map over the distinct score values
    uniq = np.unique(s)
    targets = np.cumsum(rng.uniform(0.01, 5.0, size=uniq.size)) - 7.0
    mapped = targets[np.searchsorted(uniq, s)]
    assert auc(mapped, y) == pytest.approx(base, abs=1e-12)
    assert base + auc(-s, y) == pytest.approx(1.0, abs=1e-12)


def test_average_ranks_shares_ties():
    assert average_ranks(np.array([3.0, 1.0, 3.0, 2.0])).tolist() == [3.5, 1.0, 3.5, 2.0]


def test_logloss_examples():
    assert logloss([0.5, 0.5, 0.5], [1, 0, 1]) == pytest.approx(math.log(2), rel=1e-15)
    assert logloss([1.0], [1]) == pytest.approx(1e-7, rel=1e-6)
    assert logloss([0.0], [1]) == pytest.approx(-math.log(1e-7), rel=1e-12)
    assert logloss([0.9, 0.1], [1, 1]) == pytest.approx(1.2039728043, rel=1e-10)


def test_logloss_matches_direct_sum():
    rng = np.random.default_rng(5)
    for _ in range(100):
        n = int(rng.integers(1, 500))
        p = rng.uniform(0.001, 0.999, size=n)
        y = rng.integers(0, 2, size=n)
        direct = -sum(math.log(pi) if yi else math.log(1 - pi) for pi, yi in zip(p, y)) / n
        assert abs(logloss(p, y) - direct) <= 1e-12


def test_grouped_auc_skips_single_class_groups():
    s = [0.9, 0.1, 0.3, 0.4, 0.8, 0.7]
    y = [1, 0, 1, 0, 1, 1]
    g = [0, 0, 1, 1, 2, 2]
    assert grouped_auc(s, y, g) == 0.5
    with pytest.raises(UndefinedMetricError):
        grouped_auc([0.1, 0.2], [1, 1], [0, 1])


def test_evaluate_and_report_round_trip():
    rep = evaluate([0.9, 0.2, 0.6, 0.4], [1, 0, 0, 1])
    parsed = parse_report(rep.to_text("listwise_"))
    assert parsed["listwise_auc"] == f"{0.75:.10f}" and parsed["listwise_n"] == "4"
    assert parsed["listwise_pooling"] == "global"
    assert evaluate([0.9, 0.2], [1, 0], groups=[0, 0], pooling="grouped").auc == 1.0
    with pytest.raises(ValueError):
        evaluate([0.9, 0.2], [1, 0], pooling="macro")
    with pytest.raises(ValueError):
        evaluate([0.9, 0.2], [1, 0], pooling="grouped")


def test_input_validation():
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1, 0, 1])
    with pytest.raises(ValueError):
        logloss([0.1, 0.2], [1, 2])
