from __future__ import annotations

import math
from functools import reduce

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from coalflow import oracles
from coalflow.estimators import (
    EstimateResult,
    StreamStats,
    bm_diagnostics,
    ks_against_cdf,
    ks_two_sample,
    prop1_layout,
    prop1_samples,
    prop1_sum_estimate,
    stats_merge,
    stats_update,
    two_proportion_z,
)
from coalflow.web import MeetingSample

values = st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=0, max_size=40)


@given(xs=values)
def test_welford_matches_two_pass(xs):
    s = reduce(stats_update, xs, StreamStats())
    ref = StreamStats.from_values(xs)
    assert s.n == ref.n
    if xs:
        assert s.mean == pytest.approx(ref.mean, rel=1e-9, abs=1e-9)
        assert s.m2 == pytest.approx(ref.m2, rel=1e-7, abs=1e-6)


@given(a=values, b=values, c=values)
def test_merge_is_associative_and_exact(a, b, c):
    sa, sb, sc = (StreamStats.from_values(x) for x in (a, b, c))
    left = stats_merge(stats_merge(sa, sb), sc)
    right = stats_merge(sa, stats_merge(sb, sc))
    whole = StreamStats.from_values(a + b + c)
    for s in (left, right):
        assert s.n == whole.n
        if whole.n:
            assert s.mean == pytest.approx(whole.mean, rel=1e-9, abs=1e-9)
            assert s.m2 == pytest.approx(whole.m2, rel=1e-7, abs=1e-6)


def test_fixed_merge_order_is_bit_reproducible():
    rng = np.random.default_rng(3)
    chunks = [StreamStats.from_values(rng.normal(size=50)) for _ in range(16)]
    a = reduce(stats_merge, chunks, StreamStats())
    b = reduce(stats_merge, chunks, StreamStats())
    assert a == b


def test_stats_edge_cases():
    assert math.isnan(StreamStats().variance)
    assert math.isnan(StreamStats.from_values([1.0]).stderr)
    s = StreamStats.from_values([1.0, 3.0])
    assert s.variance == 2.0 and s.stderr == 1.0


def test_estimate_result():
    r = EstimateResult.from_stats(StreamStats.from_values([0.0, 2.0, 4.0]), tag="x")
    assert r.value == 2.0 and r.n == 3 and r.extra == {"tag": "x"}
    assert r.within(2.0 + 3 * r.stderr) and not r.within(2.0 + 3.01 * r.stderr)
    assert r.to_dict()["extra"] == {"tag": "x"}


def test_ks_at_rank_points_is_half_a_step():
    # samples at the quantiles (i - 1/2)/n give the smallest possible statistic, 1/(2n)
    n = 200
    q = (np.arange(1, n + 1) - 0.5) / n
    res = ks_against_cdf(q, lambda t: min(max(t, 0.0), 1.0), 1.0)
    assert res.statistic == pytest.approx(1 / (2 * n), abs=1e-15)
    assert res.meet_fraction == 1.0 and res.z_score == 0.0


def test_ks_mixed_law_splits_atom_and_met_part():
    gap, horizon = 0.5, 1.0
    cdf = lambda t: oracles.hitting_cdf_zero_drift(gap, t)
    p = cdf(horizon)
    n = 4000
    n_met = int(round(p * n))
    # met times at the conditional quantiles, the rest never meet
    from scipy.optimize import brentq
    u = (np.arange(1, n_met + 1) - 0.5) / n_met
    met = [brentq(lambda t: cdf(t) / p - ui, 1e-12, horizon) for ui in u]
    samples = [MeetingSample(True, t) for t in met] + [MeetingSample.never()] * (n - n_met)
    res = ks_against_cdf(samples, cdf, horizon)
    assert res.n_met == n_met and res.n_total == n
    assert res.statistic == pytest.approx(1 / (2 * n_met), abs=1e-9)
    assert abs(res.z_score) < 0.1
    assert res.passes(0.01)


def test_ks_with_no_meetings_is_undefined():
    res = ks_against_cdf([math.inf] * 10, lambda t: oracles.hitting_cdf_zero_drift(0.5, t), 1.0)
    assert not res.defined and math.isnan(res.statistic) and not res.passes(1.0)
    with pytest.raises(ValueError):
        ks_against_cdf([], lambda t: t, 1.0)


def test_two_sample_helpers():
    a = np.arange(10.0)
    assert ks_two_sample(a, a) == 0.0
    assert ks_two_sample(a, a + 100) == 1.0
    assert two_proportion_z(50, 100, 50, 100) == 0.0
    assert two_proportion_z(60, 100, 40, 100) == pytest.approx(0.2 / math.sqrt(0.25 * 0.02))
    assert two_proportion_z(0, 10, 0, 10) == 0.0


def _bm_rows(rng, paths, steps, h, drift=0.0):
    v = rng.normal(size=(paths, steps)) * math.sqrt(h) + drift * h
    return np.column_stack([v.reshape(-1), np.full(v.size, h), np.repeat(np.arange(paths), steps)])


def test_bm_diagnostics_null_case():
    rep = bm_diagnostics(_bm_rows(np.random.default_rng(0), 2000, 16, 1 / 16))
    assert rep.passes()
    assert rep.qv_ratio == pytest.approx(1.0, abs=0.02)
    assert rep.elapsed == pytest.approx(2000.0)


def test_bm_diagnostics_detects_drift():
    rep = bm_diagnostics(_bm_rows(np.random.default_rng(1), 2000, 16, 1 / 16, drift=1.0))
    assert not rep.checks()["mean"]


def test_bm_diagnostics_detects_correlation():
    rng = np.random.default_rng(2)
    z = rng.normal(size=20001)
    v = (z[1:] + z[:-1]) / math.sqrt(2) * 0.1
    rep = bm_diagnostics(np.column_stack([v, np.full(v.size, 0.01)]))
    assert not rep.checks()["lag1"]


def test_bm_diagnostics_errors():
    with pytest.raises(ValueError):
        bm_diagnostics(np.empty((0, 2)))
    with pytest.raises(ValueError):
        bm_diagnostics([[0.1, 0.0]])


def test_prop1_layout():
    times, pos, bstep, estep, blocks, extra = prop1_layout(4, 0.25, 0.75, 0.5, 0.01)
    assert len(blocks) == 4 and extra == 2  # tie at s = 1/4: the block particle comes first
    assert pos[extra] == 0.5 and times[bstep[extra]] == 0.25 and times[estep[extra]] == 0.75
    for j, pid in enumerate(blocks):
        assert times[bstep[pid]] == j / 4 and times[estep[pid]] == (j + 1) / 4
    with pytest.raises(ValueError):
        prop1_layout(4, 0.8, 0.2, 0.0, 0.01)
    with pytest.raises(ValueError):
        prop1_layout(0, 0.1, 0.2, 0.0, 0.01)


def test_prop1_sanity_case_is_second_moment():
    x = prop1_samples(1, 0.0, 1.0, 0.0, 4000, 1e-3, 0)
    # phi_{0,1}(0)^2 for a standard BM: chi-square with one degree of freedom
    assert np.all(x >= 0)
    assert abs(x.mean() - 1.0) < 3 * math.sqrt(2 / x.size)


def test_prop1_far_apart_is_zero():
    est = prop1_sum_estimate(8, 0.5, 0.6, 5.0, 20000, 1e-3, 1)
    assert est.within(0.0)


def test_prop1_matches_exact_expectation():
    est = prop1_sum_estimate(4, 0.25, 0.75, 0.5, 20000, 1e-3, 2)
    exact = oracles.correlation_sum_expected(4, 0.25, 0.75, 0.5)
    assert abs(est.value - exact) < 3 * est.stderr + 0.005


def test_prop1_is_reproducible():
    a = prop1_samples(4, 0.25, 0.75, 0.5, 50, 1e-3, 7)
    b = prop1_samples(4, 0.25, 0.75, 0.5, 50, 1e-3, 7)
    assert np.array_equal(a, b)
