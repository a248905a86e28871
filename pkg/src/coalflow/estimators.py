"""Monte Carlo statistics: streaming moments, mixed-law KS, BM diagnostics.

The correlation-sum experiment lives here too: one coalescing web per replica
with births ``(0, k/n)`` for ``k < n`` and ``(r, s)``, and the per-replica sum
``sum_k phi_{k/n,(k+1)/n}(0) phi_{s,t}(r)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Sequence

import numba as nb
import numpy as np
from scipy import stats as _st

from coalflow.rng import STATE_SIZE, derive_key, hot_kernel, init_state
from coalflow.web import MeetingSample, build_grid, coalescing_step, find_root, spawn_particle

SIGMAS = 3.0


# --------------------------------------------------------------------------
# streaming moments


@dataclass(frozen=True)
class StreamStats:
    n: int = 0
    mean: float = 0.0
    m2: float = 0.0    # sum of squared deviations from the mean

    @property
    def variance(self) -> float:
        return self.m2 / (self.n - 1) if self.n > 1 else math.nan

    @property
    def stderr(self) -> float:
        return math.sqrt(self.variance / self.n) if self.n > 1 else math.nan

    @classmethod
    def from_values(cls, values: Sequence[float]) -> "StreamStats":
        """Two-pass moments of a whole sample (same quantities as repeated updates)."""
        x = np.asarray(values, dtype=float)
        if x.size == 0:
            return cls()
        mean = float(x.mean())
        return cls(int(x.size), mean, float(np.sum((x - mean) ** 2)))


def stats_update(s: StreamStats, x: float) -> StreamStats:
    """Welford's update."""
    n = s.n + 1
    delta = x - s.mean
    mean = s.mean + delta / n
    return StreamStats(n, mean, s.m2 + delta * (x - mean))


def stats_merge(a: StreamStats, b: StreamStats) -> StreamStats:
    """Chan et al. pairwise combination."""
    if a.n == 0:
        return b
    if b.n == 0:
        return a
    n = a.n + b.n
    delta = b.mean - a.mean
    mean = a.mean + delta * b.n / n
    return StreamStats(n, mean, a.m2 + b.m2 + delta * delta * a.n * b.n / n)


@dataclass(frozen=True)
class EstimateResult:
    value: float
    stderr: float
    n: int
    extra: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_stats(cls, stats: StreamStats, **extra) -> "EstimateResult":
        return cls(stats.mean, stats.stderr, stats.n, extra)

    def within(self, target: float, sigmas: float = SIGMAS) -> bool:
        return abs(self.value - target) <= sigmas * self.stderr

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


# --------------------------------------------------------------------------
# KS with an atom at infinity


@dataclass(frozen=True)
class KsResult:
    statistic: float          # nan when no sample met
    n_met: int
    n_total: int
    meet_fraction: float
    oracle_meet_prob: float
    z_score: float

    @property
    def defined(self) -> bool:
        return self.n_met > 0

    def passes(self, d_max: float, z_max: float = SIGMAS) -> bool:
        return self.defined and self.statistic <= d_max and abs(self.z_score) <= z_max

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _meeting_times(samples) -> np.ndarray:
    if len(samples) and isinstance(samples[0], MeetingSample):
        return np.array([s.time for s in samples], dtype=float)
    return np.asarray(samples, dtype=float)


def ks_against_cdf(samples, cdf: Callable[[float], float], horizon: float) -> KsResult:
    """Split the mixed law: binomial z for the atom, KS for the met times.

    ``samples`` are :class:`MeetingSample` objects or meeting times with
    ``inf`` for not-met.  The met times are compared with
    ``cdf(t) / cdf(horizon)``.
    """
    times = _meeting_times(samples)
    n = times.size
    if n == 0:
        raise ValueError("no samples")
    met = times[times <= horizon]
    p_or = float(cdf(horizon))
    frac = met.size / n
    if 0.0 < p_or < 1.0:
        z = (frac - p_or) / math.sqrt(p_or * (1.0 - p_or) / n)
    else:
        z = 0.0 if frac == p_or else math.inf
    if met.size == 0 or p_or <= 0.0:
        return KsResult(math.nan, int(met.size), n, frac, p_or, z)
    cond = np.vectorize(lambda t: min(1.0, float(cdf(t)) / p_or), otypes=[float])
    d = float(_st.kstest(met, cond).statistic)
    return KsResult(d, int(met.size), n, frac, p_or, z)


def ks_two_sample(a: np.ndarray, b: np.ndarray) -> float:
    return float(_st.ks_2samp(np.asarray(a), np.asarray(b)).statistic)


def two_proportion_z(k1: int, n1: int, k2: int, n2: int) -> float:
    p = (k1 + k2) / (n1 + n2)
    se = math.sqrt(p * (1 - p) * (1 / n1 + 1 / n2))
    if se == 0.0:
        return 0.0 if k1 / n1 == k2 / n2 else math.inf
    return (k1 / n1 - k2 / n2) / se


# --------------------------------------------------------------------------
# Brownian-motion diagnostics


@dataclass(frozen=True)
class BmReport:
    n: int
    mean_z: float
    var_ratio: float
    var_ratio_se: float
    lag1: float
    lag1_pairs: int
    quadratic_variation: float
    elapsed: float

    @property
    def qv_ratio(self) -> float:
        return self.quadratic_variation / self.elapsed

    def checks(self, sigmas: float = SIGMAS) -> dict[str, bool]:
        return {
            "mean": abs(self.mean_z) <= sigmas,
            "variance": abs(self.var_ratio - 1.0) <= sigmas * self.var_ratio_se,
            "lag1": self.lag1_pairs < 2 or abs(self.lag1) <= sigmas / math.sqrt(self.lag1_pairs),
        }

    def passes(self, sigmas: float = SIGMAS) -> bool:
        return all(self.checks(sigmas).values())

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["qv_ratio"] = self.qv_ratio
        d["checks"] = self.checks()
        return d


def bm_diagnostics(increments) -> BmReport:
    """Diagnostics for rows ``(value, span[, path index])`` of non-overlapping increments.

    Lag-1 correlation pairs consecutive rows of the same path (all rows form
    one path when no index column is given).
    """
    a = np.asarray(increments, dtype=float)
    if a.ndim != 2 or a.shape[0] == 0 or a.shape[1] not in (2, 3):
        raise ValueError("need a non-empty table of (value, span[, path]) rows")
    v, span = a[:, 0], a[:, 1]
    if np.any(span <= 0):
        raise ValueError("spans must be positive")
    path = a[:, 2] if a.shape[1] == 3 else np.zeros(len(v))
    n = len(v)
    elapsed = float(span.sum())
    mean_z = float(v.sum() / math.sqrt(elapsed))
    r = v * v / span
    var_ratio = float(r.mean())
    var_se = float(r.std(ddof=1) / math.sqrt(n)) if n > 1 else math.inf
    u = v / np.sqrt(span)
    same = path[1:] == path[:-1]
    x, y = u[:-1][same], u[1:][same]
    lag1 = float(np.corrcoef(x, y)[0, 1]) if x.size > 1 else math.nan
    return BmReport(n, mean_z, var_ratio, var_se, lag1, int(x.size), float(np.sum(v * v)), elapsed)


# --------------------------------------------------------------------------
# correlation sums


@hot_kernel
def prop1_run(birth_pos, birth_step, end_step, times, st, cl_rep, cl_pos, parent, alive, ev,
              values):
    """One web with particles retired after their value is read.

    Particle ``p`` is born at grid index ``birth_step[p]`` (ids in birth
    order) and read at ``end_step[p]``, after that index's births.  A read
    particle leaves its cluster; an empty cluster is dropped.
    """
    n = birth_pos.shape[0]
    ncl = 0
    nborn = 0
    for k in range(times.shape[0]):
        while nborn < n and birth_step[nborn] == k:
            x = birth_pos[nborn]
            old = -1
            for c in range(ncl):
                if cl_pos[c] == x:
                    old = cl_rep[c]
            ncl = spawn_particle(cl_rep, cl_pos, ncl, parent, nborn, x)
            if old < 0:
                alive[nborn] = 1
            else:
                root = find_root(parent, nborn)
                if root == nborn:
                    alive[nborn] = alive[old] + 1
                else:
                    alive[old] += 1
            nborn += 1
        for p in range(nborn):
            if end_step[p] == k:
                root = find_root(parent, p)
                c = 0
                while cl_rep[c] != root:
                    c += 1
                values[p] = cl_pos[c]
                alive[root] -= 1
                if alive[root] == 0:
                    for j in range(c, ncl - 1):
                        cl_rep[j] = cl_rep[j + 1]
                        cl_pos[j] = cl_pos[j + 1]
                    ncl -= 1
        if k < times.shape[0] - 1 and ncl > 0:
            ncl, nev = coalescing_step(cl_rep, cl_pos, ncl, parent, times[k + 1] - times[k],
                                       0, 0.0, st, ev, 0, k + 1)
            for e in range(nev):
                alive[ev[e, 1]] += alive[ev[e, 2]]
                alive[ev[e, 2]] = 0


@nb.njit(cache=True, parallel=True)
def _prop1_batch(birth_pos, birth_step, end_step, times, weights_idx, extra_idx, k0, k1, reps):
    n = birth_pos.shape[0]
    out = np.empty(reps)
    for i in nb.prange(reps):
        st = np.empty(STATE_SIZE, dtype=np.uint64)
        init_state(st, k0, k1, np.uint64(i), np.uint64(0))
        cl_rep = np.empty(n, dtype=np.int64)
        cl_pos = np.empty(n)
        parent = np.full(n, -1, dtype=np.int64)
        alive = np.zeros(n, dtype=np.int64)
        ev = np.empty((n, 3), dtype=np.int64)
        values = np.empty(n)
        prop1_run(birth_pos, birth_step, end_step, times, st, cl_rep, cl_pos, parent, alive,
                  ev, values)
        acc = 0.0
        for j in range(weights_idx.shape[0]):
            acc += values[weights_idx[j]]
        out[i] = acc * values[extra_idx]
    return out


def prop1_layout(n: int, s: float, t: float, r: float, dt: float):
    """Grid and births for the correlation sum; ids follow birth order.

    Block particles ``(0, k/n)`` are read at ``(k+1)/n``; the extra particle
    ``(r, s)`` at ``t``.  Ties in birth time put the block particle first.
    """
    if s > t:
        raise ValueError("need s <= t")
    if not 0.0 <= s <= 1.0 or not 0.0 <= t <= 1.0:
        raise ValueError("need 0 <= s <= t <= 1")
    if n < 1:
        raise ValueError("n must be positive")
    births = [(k / n, 0, k) for k in range(n)] + [(s, 1, n)]
    births.sort()
    times = build_grid(0.0, 1.0, dt, [k / n for k in range(n + 1)] + [s, t])
    idx = {float(x): i for i, x in enumerate(times)}
    pos = np.empty(n + 1)
    bstep = np.empty(n + 1, dtype=np.int64)
    estep = np.empty(n + 1, dtype=np.int64)
    blocks = []
    extra = -1
    for pid, (bt, kind, k) in enumerate(births):
        bstep[pid] = idx[float(bt)]
        if kind == 0:
            pos[pid] = 0.0
            estep[pid] = idx[float((k + 1) / n)]
            blocks.append(pid)
        else:
            pos[pid] = r
            estep[pid] = idx[float(t)]
            extra = pid
    return times, pos, bstep, estep, np.array(blocks, dtype=np.int64), extra


def prop1_samples(n: int, s: float, t: float, r: float, reps: int, dt: float,
                  seed: int) -> np.ndarray:
    """Per-replica sums; replica ``i`` reads stream ``(seed, "prop1", i)``."""
    times, pos, bstep, estep, blocks, extra = prop1_layout(n, s, t, r, dt)
    k0, k1 = derive_key(seed, "prop1")
    return _prop1_batch(pos, bstep, estep, times, blocks, extra, np.uint64(k0), np.uint64(k1),
                        int(reps))


def prop1_sum_estimate(n: int, s: float, t: float, r: float, reps: int, dt: float,
                       seed: int) -> EstimateResult:
    """Replica mean and standard error of ``sum_k phi_{k/n,(k+1)/n}(0) phi_{s,t}(r)``."""
    x = prop1_samples(n, s, t, r, reps, dt, seed)
    return EstimateResult.from_stats(StreamStats.from_values(x), n_blocks=n, s=s, t=t, r=r)
