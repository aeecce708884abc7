import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as hst
from scipy import stats

from qpswitch.sampling import LinearScanSampler, ProportionalSampler

weights_st = hst.lists(hst.integers(0, 50), min_size=1, max_size=40)


@given(weights_st)
def test_prefix_sums_match_cumsum(w):
    s = ProportionalSampler(w)
    assert [s.cumulative(k) for k in range(len(w))] == np.cumsum(w).tolist()
    assert s.total == sum(w)


@given(weights_st, hst.data())
def test_find_agrees_with_linear_scan(w, data):
    if sum(w) == 0:
        return
    target = data.draw(hst.integers(0, sum(w) - 1))
    assert ProportionalSampler(w).find(target) == LinearScanSampler(w).find(target)


@given(weights_st, hst.lists(hst.tuples(hst.integers(0, 39), hst.integers(0, 50)), max_size=20),
       hst.integers(0, 2**32 - 1))
@settings(max_examples=60)
def test_same_seed_same_samples_after_updates(w, updates, seed):
    fast, slow = ProportionalSampler(w), LinearScanSampler(w)
    for idx, val in updates:
        idx %= len(w)
        fast.update(idx, val)
        slow.update(idx, val)
    assert fast.total == slow.total
    r1, r2 = np.random.default_rng(seed), np.random.default_rng(seed)
    assert [fast.sample(r1) for _ in range(30)] == [slow.sample(r2) for _ in range(30)]


def test_zero_weight_never_drawn():
    s = ProportionalSampler([0, 3, 0, 1, 0])
    rng = np.random.default_rng(1)
    seen = {s.sample(rng) for _ in range(5000)}
    assert seen == {1, 3}


def test_empty_row_returns_none():
    assert ProportionalSampler([0, 0, 0]).sample(np.random.default_rng(0)) is None


def test_distribution_chi_square():
    w = np.array([1, 5, 0, 10, 4, 30])
    s = ProportionalSampler(w)
    rng = np.random.default_rng(11)
    draws = 60_000
    counts = np.bincount([s.sample(rng) for _ in range(draws)], minlength=w.size)
    keep = w > 0
    assert counts[~keep].sum() == 0
    p = stats.chisquare(counts[keep], w[keep] / w.sum() * draws).pvalue
    assert p > 1e-3


def test_validation():
    with pytest.raises(ValueError):
        ProportionalSampler([])
    with pytest.raises(ValueError):
        ProportionalSampler([1, -2])
    s = ProportionalSampler([1, 2])
    with pytest.raises(IndexError):
        s.update(2, 1)
    with pytest.raises(ValueError):
        s.update(0, -1)
    with pytest.raises(ValueError):
        s.find(3)
