"""Reference simulator for coalescing diffusions with drift.

Independent unit-noise diffusions ``dY = a(Y) dt + dw`` move by Euler steps
until two of them meet; met particles share noise and drift from then on.
Coalescence detection is the web engine's (sign change plus a drift-frozen
bridge test on adjacent gaps), so with zero drift the two simulators are the
same process.

The two-particle kernel here keeps both positions in registers and stops at
the first meeting; it consumes draws in the same order as the general engine
and reproduces its meeting times bit for bit.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numba as nb
import numpy as np

from coalflow.model import DriftModel, check_sorted
from coalflow.rng import STATE_SIZE, Stream, derive_key, hot_kernel, init_state, next_normal
from coalflow.web import (
    BRIDGE_CUTOFF,
    SCHEMA_HEADER,
    Birth,
    MeetingSample,
    PathRecord,
    _bridge_uniform,
    build_grid,
    drift_at,
    evaluate_flow,
    flow_batch,
    index_of,
    run_segment,
)

# --------------------------------------------------------------------------
# flows


def direct_simulate(starts: Sequence[float], model: DriftModel, horizon: float, dt: float,
                    rng: Stream, eval_times: Sequence[float] | None = None,
                    record: str = "grid") -> PathRecord:
    """All particles start at time 0; returns the full grid path by default."""
    check_sorted(list(starts))
    births = [Birth(float(u), 0.0) for u in starts]
    return evaluate_flow(births, list(eval_times or [horizon]), horizon, dt, rng,
                         drift=model, record=record)


def direct_batch(starts: Sequence[float], model: DriftModel, horizon: float, dt: float,
                 seed: int, reps: int, eval_times: Sequence[float] | None = None,
                 purpose: str = "direct") -> np.ndarray:
    """Positions ``[reps, len(eval_times), len(starts)]``; replica ``i`` reads stream ``i``."""
    check_sorted(list(starts))
    births = [Birth(float(u), 0.0) for u in starts]
    return flow_batch(births, list(eval_times or [horizon]), horizon, dt, seed, reps,
                      purpose=purpose, drift=model)


# --------------------------------------------------------------------------
# pair meetings


@hot_kernel
def pair_meet_run(x1, x2, times, dcode, dpar, st):
    """First grid time the pair is detected together; ``inf`` if never."""
    if x2 <= x1:
        return times[0]
    for k in range(times.shape[0] - 1):
        h = times[k + 1] - times[k]
        sq = math.sqrt(h)
        inv_h = 1.0 / h
        x1n = x1 + drift_at(dcode, dpar, x1) * h + sq * next_normal(st)
        x2n = x2 + drift_at(dcode, dpar, x2) * h + sq * next_normal(st)
        gap1 = x2n - x1n
        if gap1 <= 0.0:
            return times[k + 1]
        e = (x2 - x1) * gap1 * inv_h
        if e < BRIDGE_CUTOFF:
            if _bridge_uniform(st) < math.exp(-e):
                return times[k + 1]
        x1 = x1n
        x2 = x2n
    return np.inf


@nb.njit(cache=True, parallel=True)
def _pair_batch(u1, u2, times, dcode, dpar, k0, k1, reps, sub):
    out = np.empty(reps)
    for i in nb.prange(reps):
        st = np.empty(STATE_SIZE, dtype=np.uint64)
        init_state(st, k0, k1, np.uint64(i), np.uint64(sub))
        out[i] = pair_meet_run(u1, u2, times, dcode, dpar, st)
    return out


@nb.njit(cache=True, parallel=True)
def _node_batch(nodes, times, dcode, dpar, k0, k1, reps):
    """Meeting flags for pairs ``(0, r_j)``; replica ``i`` of node ``j`` reads ``(i, j)``."""
    m = nodes.shape[0]
    met = np.empty(m * reps, dtype=np.uint8)
    for f in nb.prange(m * reps):
        j = f // reps
        i = f - j * reps
        st = np.empty(STATE_SIZE, dtype=np.uint64)
        init_state(st, k0, k1, np.uint64(i), np.uint64(j))
        met[f] = pair_meet_run(0.0, nodes[j], times, dcode, dpar, st) < np.inf
    return met.reshape(m, reps)


def pair_meeting_time(u1: float, u2: float, model: DriftModel, horizon: float, dt: float,
                      rng: Stream) -> MeetingSample:
    if u2 < u1:
        raise ValueError("need u1 <= u2")
    times = build_grid(0.0, horizon, dt)
    dcode, dpar = model.code
    t = pair_meet_run(float(u1), float(u2), times, dcode, dpar, rng.state)
    return MeetingSample(bool(t < math.inf), float(t))


def pair_meeting_batch(u1: float, u2: float, model: DriftModel, horizon: float, dt: float,
                       seed: int, reps: int, purpose: str = "meet", sub: int = 0) -> np.ndarray:
    """Meeting times of ``reps`` replicas (``inf`` = not met by ``horizon``)."""
    if u2 < u1:
        raise ValueError("need u1 <= u2")
    times = build_grid(0.0, horizon, dt)
    k0, k1 = derive_key(seed, purpose)
    dcode, dpar = model.code
    return _pair_batch(float(u1), float(u2), times, dcode, dpar, np.uint64(k0),
                       np.uint64(k1), int(reps), int(sub))


def write_meeting_csv(path: str | Path, times: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(SCHEMA_HEADER + "\n")
        w = csv.writer(fh)
        w.writerow(["replica", "met", "time"])
        for i, t in enumerate(times):
            met = bool(t < math.inf)
            w.writerow([i, int(met), repr(float(t)) if met else "inf"])


# --------------------------------------------------------------------------
# cluster size


@dataclass(frozen=True)
class ClusterEstimate:
    t: float
    method: str
    value: float
    stderr: float
    reps: int
    grid_m: int
    node_probs: tuple[float, ...] = field(default=(), repr=False)

    def __post_init__(self) -> None:
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"cluster fraction {self.value} outside [0, 1]")
        if self.stderr < 0:
            raise ValueError("negative standard error")


def cluster_nodes(grid_m: int) -> np.ndarray:
    """Midpoints ``(j + 1/2) / m`` of the ``m`` cells of ``[0, 1]``."""
    return (np.arange(grid_m) + 0.5) / grid_m


@nb.njit(cache=True, parallel=True)
def _fan_batch(times, birth_pos, dcode, dpar, k0, k1, reps, rec_flag):
    n = birth_pos.shape[0]
    frac = np.empty(reps)
    kend = times.shape[0] - 1
    for i in nb.prange(reps):
        st = np.empty(STATE_SIZE, dtype=np.uint64)
        init_state(st, k0, k1, np.uint64(i), np.uint64(0))
        cl_rep = np.empty(n, dtype=np.int64)
        cl_pos = np.empty(n)
        parent = np.arange(n)
        rec_pos = np.empty((1, n))
        rec_rep = np.empty((1, n), dtype=np.int64)
        ev = np.empty((0, 3), dtype=np.int64)
        birth_step = np.zeros(n, dtype=np.int64)
        run_segment(cl_rep, cl_pos, 0, parent, times, 0, kend, birth_pos, birth_step, 0,
                    dcode, dpar, st, rec_flag, rec_pos, rec_rep, ev, 0)
        c = 0
        for p in range(1, n):
            if rec_rep[0, p] == rec_rep[0, 0]:
                c += 1
        frac[i] = c / (n - 1)
    return frac


def cluster_size_estimate(model: DriftModel, t: float, grid_m: int, reps: int, dt: float,
                          seed: int, method: str = "pair-quadrature") -> ClusterEstimate:
    """Estimate ``E nu_t``, the mean length of ``{u in [0, 1]: Y_t(u) = Y_t(0)}``.

    ``pair-quadrature`` averages ``P{tau(0, r_j) <= t}`` over the cell
    midpoints ``r_j`` with ``reps`` independent pairs per node.  ``fan`` runs
    ``{0} U {r_j}`` jointly and counts the nodes in the cluster of 0.
    """
    if t <= 0:
        raise ValueError("t must be positive")
    if grid_m < 2:
        raise ValueError("grid_m must be at least 2")
    if reps < 2:
        raise ValueError("need at least two replicas")
    times = build_grid(0.0, t, dt)
    nodes = cluster_nodes(grid_m)
    dcode, dpar = model.code
    if method == "pair-quadrature":
        k0, k1 = derive_key(seed, "cluster")
        met = _node_batch(nodes, times, dcode, dpar, np.uint64(k0), np.uint64(k1), int(reps))
        p = met.sum(axis=1) / reps
        value = float(p.mean())
        stderr = math.sqrt(float(np.sum(p * (1.0 - p))) / reps) / grid_m
        return ClusterEstimate(t, method, value, stderr, reps, grid_m, tuple(float(x) for x in p))
    if method == "fan":
        k0, k1 = derive_key(seed, "fan")
        birth_pos = np.concatenate([[0.0], nodes])
        rec_flag = np.full(len(times), -1, dtype=np.int64)
        rec_flag[-1] = 0
        frac = _fan_batch(times, birth_pos, dcode, dpar, np.uint64(k0), np.uint64(k1),
                          int(reps), rec_flag)
        return ClusterEstimate(t, method, float(frac.mean()),
                               float(frac.std(ddof=1) / math.sqrt(reps)), reps, grid_m)
    raise ValueError(f"unknown method {method!r}; choose pair-quadrature or fan")


def write_cluster_csv(path: str | Path, estimates: Sequence[ClusterEstimate]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(SCHEMA_HEADER + "\n")
        w = csv.writer(fh)
        w.writerow(["t", "method", "value", "stderr", "reps"])
        for e in estimates:
            w.writerow([repr(e.t), e.method, repr(e.value), repr(e.stderr), e.reps])


# --------------------------------------------------------------------------
# sandwich coupling

SANDWICH_COLUMNS = ("xi1", "xi2", "delta", "eta", "eta_tilde")


@hot_kernel
def sandwich_run(xi1, d, times, dcode, dpar, c_alpha, gamma, st, rec):
    """Fill ``rec[k] = (xi1, xi2, delta, eta, eta_tilde)``; returns the meeting time.

    The gap ``delta`` is advanced directly, ``d' = d + (a(xi2) - a(xi1)) h + g dw``
    with ``dw`` the difference of the two unit noises, and the bounds use the
    matching Euler recursions ``eta' = eta + c eta h + g dw``,
    ``eta~' = eta~ - c eta~ h + g dw``.  On the step where the pair meets the
    noise difference is cut at the meeting (``w_{t ^ tau}``), so ``delta``
    lands on 0; afterwards the bounds move deterministically.
    """
    eta = d
    etl = d
    met = d <= 0.0
    tau = times[0] if met else np.inf
    if met:
        d = 0.0
    rec[0, 0] = xi1
    rec[0, 1] = xi1 + d
    rec[0, 2] = d
    rec[0, 3] = eta
    rec[0, 4] = etl
    g2 = gamma * gamma
    for k in range(times.shape[0] - 1):
        h = times[k + 1] - times[k]
        sq = math.sqrt(h)
        a1 = drift_at(dcode, dpar, xi1)
        z1 = next_normal(st)
        xi1n = xi1 + a1 * h + gamma * sq * z1
        if not met:
            a2 = drift_at(dcode, dpar, xi1 + d)
            dn_noise = gamma * sq * (next_normal(st) - z1)
            dn = d + (a2 - a1) * h + dn_noise
            merge = dn <= 0.0
            if not merge:
                e = d * dn / (g2 * h)
                if e < BRIDGE_CUTOFF:
                    merge = _bridge_uniform(st) < math.exp(-e)
            if merge:
                cut = -d - (a2 - a1) * h
                eta = eta + c_alpha * eta * h + cut
                etl = etl - c_alpha * etl * h + cut
                d = 0.0
                met = True
                tau = times[k + 1]
            else:
                eta = eta + c_alpha * eta * h + dn_noise
                etl = etl - c_alpha * etl * h + dn_noise
                d = dn
        else:
            eta = eta + c_alpha * eta * h
            etl = etl - c_alpha * etl * h
        xi1 = xi1n
        rec[k + 1, 0] = xi1
        rec[k + 1, 1] = xi1 + d
        rec[k + 1, 2] = d
        rec[k + 1, 3] = eta
        rec[k + 1, 4] = etl
    return tau


@dataclass
class SandwichRecord:
    """Coupled gap and bounding processes on one grid (columns per ``SANDWICH_COLUMNS``)."""

    times: np.ndarray
    values: np.ndarray
    tau: float
    c_alpha: float
    gamma: float

    def column(self, name: str) -> np.ndarray:
        return self.values[:, SANDWICH_COLUMNS.index(name)]

    @property
    def delta(self) -> np.ndarray:
        return self.column("delta")

    @property
    def eta(self) -> np.ndarray:
        return self.column("eta")

    @property
    def eta_tilde(self) -> np.ndarray:
        return self.column("eta_tilde")

    def violations(self) -> int:
        """Grid times where ``eta~ <= delta <= eta`` fails."""
        d = self.delta
        return int(np.count_nonzero((self.eta_tilde > d) | (d > self.eta)))

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(SCHEMA_HEADER + "\n")
            w = csv.writer(fh)
            w.writerow(["time", *SANDWICH_COLUMNS])
            for t, row in zip(self.times, self.values):
                w.writerow([repr(float(t)), *(repr(float(v)) for v in row)])


def _sandwich_args(model: DriftModel, u1: float, u2: float, c_alpha: float | None, gamma: float,
                   dt: float):
    if u2 < u1:
        raise ValueError("need u1 <= u2")
    c = model.lipschitz_constant if c_alpha is None else float(c_alpha)
    if c < model.lipschitz_constant:
        raise ValueError(f"c_alpha={c} is below the drift's Lipschitz constant "
                         f"{model.lipschitz_constant}")
    if c * dt >= 1.0:
        raise ValueError("need c_alpha * dt < 1 for the lower bounding recursion")
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    return c


def sandwich_simulate(model: DriftModel, u1: float, u2: float, horizon: float, dt: float,
                      rng: Stream, c_alpha: float | None = None,
                      gamma: float = 1.0) -> SandwichRecord:
    """Couple ``xi2 - xi1`` with the linear bounds ``eta`` (rate ``+c``) and ``eta~`` (rate ``-c``).

    ``c_alpha`` defaults to the drift's Lipschitz constant and must not be
    smaller.  Every grid time satisfies ``eta~ <= xi2 - xi1 <= eta``.
    """
    c = _sandwich_args(model, u1, u2, c_alpha, gamma, dt)
    times = build_grid(0.0, horizon, dt)
    rec = np.empty((len(times), len(SANDWICH_COLUMNS)))
    dcode, dpar = model.code
    tau = sandwich_run(float(u1), float(u2) - float(u1), times, dcode, dpar, c, float(gamma),
                       rng.state, rec)
    return SandwichRecord(times, rec, float(tau), c, float(gamma))


@nb.njit(cache=True, parallel=True)
def _sandwich_batch(u1, d, times, dcode, dpar, c_alpha, gamma, k0, k1, reps):
    # per replica: (sandwich violations, grid times where the three paths differ bitwise, tau)
    out = np.empty((reps, 3))
    nt = times.shape[0]
    for i in nb.prange(reps):
        st = np.empty(STATE_SIZE, dtype=np.uint64)
        init_state(st, k0, k1, np.uint64(i), np.uint64(0))
        rec = np.empty((nt, 5))
        tau = sandwich_run(u1, d, times, dcode, dpar, c_alpha, gamma, st, rec)
        bad = 0
        diff = 0
        for k in range(nt):
            if rec[k, 4] > rec[k, 2] or rec[k, 2] > rec[k, 3]:
                bad += 1
            if rec[k, 4] != rec[k, 2] or rec[k, 3] != rec[k, 2]:
                diff += 1
        out[i, 0] = bad
        out[i, 1] = diff
        out[i, 2] = tau
    return out


@dataclass(frozen=True)
class SandwichSummary:
    reps: int
    violations: np.ndarray       # per replica
    mismatches: np.ndarray       # per replica, grid times where eta, eta~, delta differ
    tau: np.ndarray

    @property
    def holds_everywhere(self) -> bool:
        return bool(np.all(self.violations == 0))

    @property
    def bitwise_equal(self) -> bool:
        return bool(np.all(self.mismatches == 0))


def sandwich_batch(model: DriftModel, u1: float, u2: float, horizon: float, dt: float,
                   seed: int, reps: int, c_alpha: float | None = None,
                   gamma: float = 1.0) -> SandwichSummary:
    c = _sandwich_args(model, u1, u2, c_alpha, gamma, dt)
    times = build_grid(0.0, horizon, dt)
    k0, k1 = derive_key(seed, "sandwich")
    dcode, dpar = model.code
    out = _sandwich_batch(float(u1), float(u2) - float(u1), times, dcode, dpar, c, float(gamma),
                          np.uint64(k0), np.uint64(k1), int(reps))
    return SandwichSummary(int(reps), out[:, 0].astype(np.int64), out[:, 1].astype(np.int64),
                           out[:, 2])
