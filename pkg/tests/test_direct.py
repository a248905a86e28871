from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from coalflow import oracles
from coalflow.direct import (
    ClusterEstimate,
    cluster_nodes,
    cluster_size_estimate,
    direct_batch,
    direct_simulate,
    pair_meeting_batch,
    pair_meeting_time,
    sandwich_batch,
    sandwich_simulate,
    write_cluster_csv,
    write_meeting_csv,
)
from coalflow.estimators import ks_against_cdf
from coalflow.model import DriftModel
from coalflow.rng import Stream
from coalflow.web import SCHEMA_HEADER, Birth, evaluate_flow

DRIFTS = [DriftModel.zero(), DriftModel.linear(-1.0), DriftModel.linear(0.5),
          DriftModel.cosine(), DriftModel.scaled_tanh(2.0)]


@given(seed=st.integers(0, 2**32), gap=st.floats(0.0, 1.0), drift=st.sampled_from(DRIFTS))
def test_pair_kernel_matches_generic_engine(seed, gap, drift):
    s = pair_meeting_time(0.1, 0.1 + gap, drift, 0.5, 0.01, Stream(seed, "m"))
    rec = evaluate_flow([Birth(0.1), Birth(0.1 + gap)], [0.5], 0.5, 0.01, Stream(seed, "m"),
                        drift=drift, record="grid")
    assert s.time == rec.meeting_time(0, 1)
    assert s.met == (rec.meeting_time(0, 1) < math.inf)


def test_pair_batch_matches_single_runs():
    out = pair_meeting_batch(0.0, 0.3, DriftModel.cosine(), 1.0, 1e-3, 2, 8, purpose="pb", sub=1)
    for i in range(8):
        assert out[i] == pair_meeting_time(0.0, 0.3, DriftModel.cosine(), 1.0, 1e-3,
                                           Stream(2, "pb", i, 1)).time


def test_equal_starts_meet_at_zero_and_order_checked():
    assert pair_meeting_time(0.4, 0.4, DriftModel.zero(), 1.0, 0.1, Stream(0, "z")).time == 0.0
    with pytest.raises(ValueError):
        pair_meeting_time(1.0, 0.0, DriftModel.zero(), 1.0, 0.1, Stream(0, "z"))
    with pytest.raises(ValueError):
        direct_simulate([1.0, 0.0], DriftModel.zero(), 1.0, 0.1, Stream(0, "z"))


@pytest.mark.parametrize("drift", DRIFTS)
def test_direct_paths_ordered(drift):
    rec = direct_simulate([-0.5, 0.0, 0.01, 0.8], drift, 1.0, 1e-3, Stream(7, "ord"))
    assert np.all(np.diff(rec.positions, axis=1) >= 0)


def test_linear_single_particle_mean():
    C, u = 0.7, 1.3
    x = direct_batch([u], DriftModel.linear(C), 1.0, 1e-3, 3, 20000)[:, 0, 0]
    se = x.std(ddof=1) / math.sqrt(x.size)
    # Euler on dx = C x dt gives (1 + C h)^n; the bias is far below se at h = 1e-3
    assert abs(x.mean() - u * math.exp(C)) < 3 * se + u * math.exp(C) * C * C * 1e-3


def test_zero_drift_meeting_law_moderate_reps():
    t = pair_meeting_batch(0.0, 0.5, DriftModel.zero(), 1.0, 1e-3, 11, 20000)
    ks = ks_against_cdf(t, lambda s: oracles.hitting_cdf_zero_drift(0.5, s), 1.0)
    assert abs(ks.z_score) < 3.5
    assert ks.statistic < 0.025


def test_linear_meeting_law_moderate_reps():
    t = pair_meeting_batch(0.0, 0.5, DriftModel.linear(0.5), 1.0, 1e-3, 12, 20000)
    ks = ks_against_cdf(t, lambda s: oracles.meeting_cdf_linear(0.5, 0.5, s), 1.0)
    surv = np.mean(t > 1.0)
    p = oracles.meeting_survival_linear(0.5, 0.0, 0.5, 1.0)
    assert abs(surv - p) < 3.5 * math.sqrt(p * (1 - p) / t.size)
    assert ks.statistic < 0.025


def test_meeting_csv(tmp_path):
    path = tmp_path / "m.csv"
    write_meeting_csv(path, np.array([0.5, np.inf]))
    lines = path.read_text().splitlines()
    assert lines[:2] == [SCHEMA_HEADER, "replica,met,time"]
    assert lines[2].startswith("0,1,") and lines[3].startswith("1,0,")


def test_cluster_nodes_are_midpoints():
    assert np.allclose(cluster_nodes(4), [0.125, 0.375, 0.625, 0.875])


def test_cluster_estimate_validation():
    m = DriftModel.linear(1.0)
    with pytest.raises(ValueError):
        cluster_size_estimate(m, 0.0, 10, 10, 1e-3, 0)
    with pytest.raises(ValueError):
        cluster_size_estimate(m, 0.1, 1, 10, 1e-3, 0)
    with pytest.raises(ValueError):
        cluster_size_estimate(m, 0.1, 10, 10, 1e-3, 0, method="guess")
    with pytest.raises(ValueError):
        ClusterEstimate(0.1, "fan", 1.5, 0.0, 1, 2)


def test_cluster_tiny_time_is_near_zero():
    e = cluster_size_estimate(DriftModel.linear(1.0), 1e-6, 20, 200, 1e-8, 0)
    assert 0.0 <= e.value < 0.01


def test_cluster_matches_oracle_and_methods_agree():
    m, t = DriftModel.linear(1.0), 0.01
    pair = cluster_size_estimate(m, t, 50, 1000, t / 100, 1)
    fan = cluster_size_estimate(m, t, 50, 2000, t / 100, 1, method="fan")
    orc = oracles.expected_cluster_size_linear(1.0, t)
    assert abs(pair.value - orc) < 3 * pair.stderr + 0.01
    assert abs(pair.value - fan.value) < 3 * math.hypot(pair.stderr, fan.stderr) + 0.01
    assert 0 <= fan.value <= 1 and 0 <= pair.value <= 1


def test_cluster_nondecreasing_in_t():
    m = DriftModel.cosine()
    vals = [cluster_size_estimate(m, t, 40, 800, 1e-4, 2) for t in (0.01, 0.04, 0.16)]
    for a, b in zip(vals, vals[1:]):
        assert b.value > a.value - 3 * math.hypot(a.stderr, b.stderr)


def test_cluster_csv(tmp_path):
    e = ClusterEstimate(0.01, "pair-quadrature", 0.1, 0.001, 100, 10)
    write_cluster_csv(tmp_path / "c.csv", [e])
    assert (tmp_path / "c.csv").read_text().splitlines()[1] == "t,method,value,stderr,reps"


def test_sandwich_zero_drift_is_equality():
    r = sandwich_simulate(DriftModel.zero(), 0.0, 0.5, 1.0, 1e-3, Stream(0, "sw"), c_alpha=0.0)
    assert np.array_equal(r.delta, r.eta) and np.array_equal(r.delta, r.eta_tilde)
    s = sandwich_batch(DriftModel.zero(), 0.0, 0.5, 1.0, 1e-3, 0, 500, c_alpha=0.0)
    assert s.bitwise_equal and s.holds_everywhere


@pytest.mark.parametrize("C", [0.5, 2.0])
def test_sandwich_linear_upper_bound_is_tight(C):
    for seed in range(20):
        r = sandwich_simulate(DriftModel.linear(C), 0.0, 0.5, 1.0, 1e-3, Stream(seed, "sl"))
        # same recursion on both sides; only rounding separates them
        assert np.allclose(r.delta, r.eta, rtol=1e-12, atol=1e-12)
        assert np.all(r.eta_tilde <= r.delta + 1e-12)


def test_sandwich_cosine_holds():
    s = sandwich_batch(DriftModel.cosine(), 0.0, 0.5, 1.0, 1e-3, 3, 2000, c_alpha=1.0)
    assert s.holds_everywhere
    r = sandwich_simulate(DriftModel.cosine(), 0.0, 0.5, 1.0, 1e-3, Stream(3, "sandwich", 0))
    assert r.violations() == 0


def test_sandwich_gap_lands_on_zero_and_stays():
    r = sandwich_simulate(DriftModel.cosine(), 0.0, 0.05, 1.0, 1e-3, Stream(5, "sw"))
    assert r.tau < math.inf
    k = np.searchsorted(r.times, r.tau)
    assert np.all(r.delta[k:] == 0.0)
    assert np.all(r.column("xi1")[k:] == r.column("xi2")[k:])


def test_sandwich_argument_checks():
    with pytest.raises(ValueError):
        sandwich_simulate(DriftModel.cosine(), 0.0, 0.5, 1.0, 1e-3, Stream(0, "a"), c_alpha=0.5)
    with pytest.raises(ValueError):
        sandwich_simulate(DriftModel.cosine(), 0.5, 0.0, 1.0, 1e-3, Stream(0, "a"))
    with pytest.raises(ValueError):
        sandwich_simulate(DriftModel.cosine(), 0.0, 0.5, 1.0, 1e-3, Stream(0, "a"), gamma=0.0)
    with pytest.raises(ValueError):
        sandwich_simulate(DriftModel.linear(5.0), 0.0, 0.5, 1.0, 0.5, Stream(0, "a"))


def test_sandwich_csv(tmp_path):
    r = sandwich_simulate(DriftModel.cosine(), 0.0, 0.5, 0.1, 0.01, Stream(0, "c"))
    r.write_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[1] == "time,xi1,xi2,delta,eta,eta_tilde"
    assert len(lines) == 2 + len(r.times)
