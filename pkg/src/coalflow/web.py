"""Coalescing Brownian motions with finitely many space-time births.

Particles are grouped into clusters kept in position order.  One step of
length ``h`` gives every cluster an independent ``N(0, h)`` increment (plus
an Euler drift term when a drift is supplied), then sweeps adjacent pairs
left to right:

* a nonpositive new gap means the paths crossed, so they merge;
* otherwise they merge with probability ``exp(-d0 d1 / h)``, the chance that
  the gap bridge touched zero inside the step.

The gap of two independent unit Brownian motions has variance rate 2, so the
bridge exponent is ``-d0 d1 / h`` and not the rate-1 ``-2 d0 d1 / h``.

A merged cluster keeps the smaller particle id as its representative and
that representative's sampled endpoint as its position.  Merges that would
leave a cluster at or left of its left neighbour cascade, so cluster
positions stay strictly increasing.

Random draws per step: one normal per cluster in position order, each
followed (from the second cluster on) by at most one uniform for the bridge
test.  The uniform is skipped when ``d0 d1 / h > 40``: the merge probability
is then below the 2^-53 resolution of the uniform.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numba as nb
import numpy as np

from coalflow.model import DriftModel
from coalflow.rng import STATE_SIZE, Stream, hot_kernel, init_state, next_normal, next_uniform

SCHEMA_HEADER = "# coalflow-schema v1"
BRIDGE_CUTOFF = 40.0
GRID_TOL = 1e-7


def bridge_meet_prob(d0: float, d1: float, h: float) -> float:
    """Probability that the gap bridge from ``d0`` to ``d1`` over ``h`` touched 0."""
    if h <= 0:
        raise ValueError("step length must be positive")
    if d0 <= 0 or d1 <= 0:
        return 1.0
    return math.exp(-d0 * d1 / h)


# --------------------------------------------------------------------------
# compiled core


@nb.njit(cache=True, inline="always")
def drift_at(code, p, x):
    if code == 0:
        return 0.0
    if code == 1:
        return p * x
    if code == 2:
        return math.cos(x)
    return math.tanh(p * x)


@nb.njit(cache=True, inline="always")
def find_root(parent, i):
    while parent[i] != i:
        i = parent[i]
    return i


@nb.njit(cache=True, inline="never")
def _bridge_uniform(st):
    # Kept out of line: inlining a second Philox refill into the hot loop
    # costs more than the call on the rare steps that need it.
    return next_uniform(st)


@nb.njit(cache=True, inline="never")
def _absorb(cl_rep, cl_pos, parent, ev, nev, m, r, x_new, step_idx):
    """Merge the incoming cluster ``(r, x_new)`` into the stack top, then cascade."""
    top_rep = cl_rep[m - 1]
    if r < top_rep:
        parent[top_rep] = r
        cl_rep[m - 1] = r
        cl_pos[m - 1] = x_new
        absorbed, surv = top_rep, r
    else:
        parent[r] = top_rep
        absorbed, surv = r, top_rep
    if nev < ev.shape[0]:
        ev[nev, 0] = step_idx
        ev[nev, 1] = surv
        ev[nev, 2] = absorbed
    nev += 1
    while m > 1 and cl_pos[m - 1] <= cl_pos[m - 2]:
        a_rep = cl_rep[m - 1]
        b_rep = cl_rep[m - 2]
        if a_rep < b_rep:
            parent[b_rep] = a_rep
            cl_rep[m - 2] = a_rep
            cl_pos[m - 2] = cl_pos[m - 1]
            absorbed, surv = b_rep, a_rep
        else:
            parent[a_rep] = b_rep
            absorbed, surv = a_rep, b_rep
        if nev < ev.shape[0]:
            ev[nev, 0] = step_idx
            ev[nev, 1] = surv
            ev[nev, 2] = absorbed
        nev += 1
        m -= 1
    return m, nev


@nb.njit(cache=True, inline="always")
def coalescing_step(cl_rep, cl_pos, ncl, parent, h, dcode, dpar, st, ev, nev, step_idx):
    """Advance all clusters by ``h`` in place; returns ``(ncl, nev)``."""
    sq = math.sqrt(h)
    inv_h = 1.0 / h
    m = 0
    prev_old = 0.0
    for j in range(ncl):
        x_old = cl_pos[j]
        r = cl_rep[j]
        x_new = x_old + drift_at(dcode, dpar, x_old) * h + sq * next_normal(st)
        merged = False
        if m > 0:
            gap1 = x_new - cl_pos[m - 1]
            if gap1 <= 0.0:
                merged = True
            else:
                e = (x_old - prev_old) * gap1 * inv_h
                if e < BRIDGE_CUTOFF:
                    if _bridge_uniform(st) < math.exp(-e):
                        merged = True
        prev_old = x_old
        if merged:
            m, nev = _absorb(cl_rep, cl_pos, parent, ev, nev, m, r, x_new, step_idx)
        else:
            cl_rep[m] = r
            cl_pos[m] = x_new
            m += 1
    return m, nev


@nb.njit(cache=True)
def spawn_particle(cl_rep, cl_pos, ncl, parent, pid, x):
    """Insert particle ``pid`` at ``x``; joins a cluster sitting exactly at ``x``."""
    parent[pid] = pid
    i = 0
    while i < ncl and cl_pos[i] < x:
        i += 1
    if i < ncl and cl_pos[i] == x:
        rep = cl_rep[i]
        if pid < rep:
            parent[rep] = pid
            cl_rep[i] = pid
        else:
            parent[pid] = rep
        return ncl
    for j in range(ncl, i, -1):
        cl_rep[j] = cl_rep[j - 1]
        cl_pos[j] = cl_pos[j - 1]
    cl_rep[i] = pid
    cl_pos[i] = x
    return ncl + 1


@nb.njit(cache=True)
def particle_position(cl_rep, cl_pos, ncl, parent, pid):
    root = find_root(parent, pid)
    for i in range(ncl):
        if cl_rep[i] == root:
            return cl_pos[i]
    return np.nan


@hot_kernel
def run_segment(cl_rep, cl_pos, ncl, parent, times, k_start, k_end,
                birth_pos, birth_step, nborn, dcode, dpar, st,
                rec_flag, rec_pos, rec_rep, ev, nev):
    """Run grid points ``k_start..k_end`` of one replica.

    At each grid index: spawn births due there, record if ``rec_flag[k] >= 0``
    (row ``rec_flag[k]``), then step to the next grid point unless at
    ``k_end``.  Returns ``(ncl, nborn, nev)``.
    """
    n = birth_pos.shape[0]
    for k in range(k_start, k_end + 1):
        while nborn < n and birth_step[nborn] == k:
            ncl = spawn_particle(cl_rep, cl_pos, ncl, parent, nborn, birth_pos[nborn])
            nborn += 1
        row = rec_flag[k]
        if row >= 0:
            for p in range(n):
                if p < nborn:
                    rec_pos[row, p] = particle_position(cl_rep, cl_pos, ncl, parent, p)
                    rec_rep[row, p] = find_root(parent, p)
                else:
                    rec_pos[row, p] = np.nan
                    rec_rep[row, p] = -1
        if k < k_end:
            ncl, nev = coalescing_step(cl_rep, cl_pos, ncl, parent, times[k + 1] - times[k],
                                       dcode, dpar, st, ev, nev, k + 1)
    return ncl, nborn, nev


@nb.njit(cache=True, parallel=True)
def run_batch(times, birth_pos, birth_step, dcode, dpar, k0, k1, reps, sub, rec_flag, nrec):
    """Replicas ``0..reps-1`` of one flow; returns positions ``[reps, nrec, n]``."""
    n = birth_pos.shape[0]
    out = np.empty((reps, nrec, n))
    kend = times.shape[0] - 1
    for i in nb.prange(reps):
        st = np.empty(STATE_SIZE, dtype=np.uint64)
        init_state(st, k0, k1, np.uint64(i), np.uint64(sub))
        cl_rep = np.empty(n, dtype=np.int64)
        cl_pos = np.empty(n)
        parent = np.arange(n)
        rec_rep = np.empty((nrec, n), dtype=np.int64)
        ev = np.empty((0, 3), dtype=np.int64)
        run_segment(cl_rep, cl_pos, 0, parent, times, 0, kend, birth_pos, birth_step, 0,
                    dcode, dpar, st, rec_flag, out[i], rec_rep, ev, 0)
    return out


# --------------------------------------------------------------------------
# grids


def build_grid(start: float, end: float, dt: float, special: Sequence[float] = ()) -> np.ndarray:
    """Points ``k dt`` strictly inside ``(start, end)`` plus ``start``, ``end`` and ``special``.

    The regular points sit on one absolute lattice (origin 0), so grids for
    ``[p, q]`` and ``[q, d]`` concatenate to the grid for ``[p, d]`` whenever
    ``q`` is special in the latter.  Lattice points closer than ``1e-7 dt`` to
    a special time are dropped in favour of it.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if end < start:
        raise ValueError("end before start")
    sp = sorted({float(start), float(end), *(float(s) for s in special if start <= s <= end)})
    sp_arr = np.array(sp)
    k_lo = math.floor(start / dt)
    k_hi = math.ceil(end / dt)
    base = np.arange(k_lo, k_hi + 1) * dt
    base = base[(base > start) & (base < end)]
    if base.size:
        idx = np.searchsorted(sp_arr, base)
        near = np.full(base.shape, np.inf)
        lo = np.clip(idx - 1, 0, len(sp_arr) - 1)
        hi = np.clip(idx, 0, len(sp_arr) - 1)
        near = np.minimum(np.abs(base - sp_arr[lo]), np.abs(base - sp_arr[hi]))
        base = base[near > GRID_TOL * dt]
    return np.union1d(base, sp_arr)


def index_of(times: np.ndarray, t: float) -> int:
    i = int(np.searchsorted(times, t))
    if i >= len(times) or times[i] != t:
        raise ValueError(f"time {t} is not a grid point")
    return i


# --------------------------------------------------------------------------
# Python-level state


@dataclass(frozen=True)
class Birth:
    position: float
    time: float = 0.0

    def __post_init__(self) -> None:
        if self.time < 0:
            raise ValueError("birth time must be nonnegative")


@dataclass(frozen=True)
class WebState:
    """One replica: ordered clusters plus union-find over particle ids.

    Particle ids are birth order.  ``parent[p] == p`` marks a representative;
    ``parent[p] == -1`` an unborn slot.
    """

    current_time: float
    births: tuple[Birth, ...]
    parent: np.ndarray
    cl_rep: np.ndarray
    cl_pos: np.ndarray
    ncl: int
    steps: int = 0

    @classmethod
    def empty(cls, capacity: int = 8, time: float = 0.0) -> "WebState":
        return cls(time, (), np.full(capacity, -1, dtype=np.int64),
                   np.empty(capacity, dtype=np.int64), np.empty(capacity), 0)

    @property
    def n_particles(self) -> int:
        return len(self.births)

    def cluster_rep(self, pid: int) -> int:
        return int(find_root(self.parent, pid))

    def position(self, pid: int) -> float:
        if not 0 <= pid < self.n_particles:
            raise IndexError(pid)
        return float(particle_position(self.cl_rep, self.cl_pos, self.ncl, self.parent, pid))

    def positions(self) -> np.ndarray:
        return np.array([self.position(p) for p in range(self.n_particles)])

    def clusters(self) -> list[tuple[int, float]]:
        return [(int(self.cl_rep[i]), float(self.cl_pos[i])) for i in range(self.ncl)]

    def _copy(self, capacity: int | None = None):
        cap = max(capacity or 0, len(self.parent))
        parent = np.full(cap, -1, dtype=np.int64)
        parent[:len(self.parent)] = self.parent
        cl_rep = np.empty(cap, dtype=np.int64)
        cl_pos = np.empty(cap)
        cl_rep[:self.ncl] = self.cl_rep[:self.ncl]
        cl_pos[:self.ncl] = self.cl_pos[:self.ncl]
        return parent, cl_rep, cl_pos


def spawn(state: WebState, birth: Birth) -> WebState:
    """Add a particle born now; a birth on an occupied point joins that cluster."""
    if birth.time != state.current_time:
        raise ValueError(f"birth at {birth.time} but state is at {state.current_time}")
    pid = state.n_particles
    parent, cl_rep, cl_pos = state._copy(capacity=2 * (pid + 1))
    ncl = spawn_particle(cl_rep, cl_pos, state.ncl, parent, pid, float(birth.position))
    return WebState(state.current_time, state.births + (birth,), parent, cl_rep, cl_pos,
                    int(ncl), state.steps)


def advance_web(state: WebState, h: float, rng: Stream,
                drift: DriftModel | None = None) -> tuple[WebState, list[tuple[int, int, int]]]:
    """One coalescing step; events are ``(step, surviving rep, absorbed rep)``."""
    if h <= 0:
        raise ValueError("step length must be positive")
    dcode, dpar = (drift or DriftModel.zero()).code
    parent, cl_rep, cl_pos = state._copy()
    ev = np.empty((max(state.ncl, 1), 3), dtype=np.int64)
    ncl, nev = coalescing_step(cl_rep, cl_pos, state.ncl, parent, float(h), dcode, dpar,
                               rng.state, ev, 0, state.steps + 1)
    events = [tuple(int(v) for v in ev[i]) for i in range(nev)]
    return (WebState(state.current_time + h, state.births, parent, cl_rep, cl_pos, int(ncl),
                     state.steps + 1), events)


# --------------------------------------------------------------------------
# records


@dataclass
class PathRecord:
    """Positions of every particle at recorded times (NaN before birth)."""

    times: np.ndarray
    positions: np.ndarray            # [len(times), n_particles]
    cluster_rep: np.ndarray          # [len(times), n_particles], -1 before birth
    events: list[tuple[float, int, int]] = field(default_factory=list)
    final_state: WebState | None = None

    @property
    def n_particles(self) -> int:
        return self.positions.shape[1]

    def at(self, t: float) -> np.ndarray:
        return self.positions[index_of(self.times, t)]

    def meeting_time(self, i: int, j: int) -> float:
        """First recorded time ``i`` and ``j`` share a cluster (``inf`` if never)."""
        same = (self.cluster_rep[:, i] == self.cluster_rep[:, j]) & (self.cluster_rep[:, i] >= 0)
        hits = np.flatnonzero(same)
        return float(self.times[hits[0]]) if hits.size else math.inf

    def write_csv(self, path: str | Path, events_path: str | Path | None = None) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(SCHEMA_HEADER + "\n")
            w = csv.writer(fh)
            w.writerow(["time", "particle_id", "position", "cluster_rep"])
            for k, t in enumerate(self.times):
                for p in range(self.n_particles):
                    if self.cluster_rep[k, p] < 0:
                        continue
                    w.writerow([repr(float(t)), p, repr(float(self.positions[k, p])),
                                int(self.cluster_rep[k, p])])
        if events_path is not None:
            with open(events_path, "w", newline="") as fh:
                fh.write(SCHEMA_HEADER + "\n")
                w = csv.writer(fh)
                w.writerow(["time", "surviving_rep", "absorbed_rep"])
                for t, s, a in self.events:
                    w.writerow([repr(float(t)), s, a])


@dataclass(frozen=True)
class MeetingSample:
    met: bool
    time: float

    def __post_init__(self) -> None:
        if self.met != (self.time < math.inf):
            raise ValueError("met flag and time disagree")

    @classmethod
    def never(cls) -> "MeetingSample":
        return cls(False, math.inf)


# --------------------------------------------------------------------------
# flow evaluation


def _sorted_births(births: Sequence[Birth]) -> list[int]:
    return sorted(range(len(births)), key=lambda i: (births[i].time, i))


def evaluate_flow(births: Sequence[Birth], eval_times: Sequence[float], horizon: float,
                  dt: float, rng: Stream, drift: DriftModel | None = None,
                  record: str = "eval", state: WebState | None = None) -> PathRecord:
    """Simulate the births on a shared grid and record positions.

    Births are taken in ``(time, list order)`` order; particle ids follow that
    order.  ``record="grid"`` records every grid point instead of
    ``eval_times``.  Passing ``state`` resumes a previous run: births already
    in the state are skipped and the grid continues from its time.
    """
    births = [b if isinstance(b, Birth) else Birth(*b) for b in births]
    order = _sorted_births(births)
    if order != list(range(len(births))):
        raise ValueError("births must be listed in time order")
    for t in eval_times:
        if t > horizon:
            raise ValueError(f"eval time {t} beyond horizon {horizon}")
        late = [b for b in births if b.time > t]
        if late:
            raise ValueError(f"eval time {t} precedes the birth at time {late[0].time}")
    if any(b.time > horizon for b in births):
        raise ValueError("birth after horizon")

    start = 0.0 if state is None else state.current_time
    if state is not None:
        if state.births != tuple(births[:state.n_particles]):
            raise ValueError("state births do not match the requested births")
        if any(b.time < start for b in births[state.n_particles:]):
            raise ValueError("cannot add births earlier than the resumed state")
    special = [b.time for b in births if b.time >= start] + list(eval_times)
    times = build_grid(start, horizon, dt, special)

    n = len(births)
    cap = max(n, 1)
    if state is None:
        parent = np.full(cap, -1, dtype=np.int64)
        cl_rep = np.empty(cap, dtype=np.int64)
        cl_pos = np.empty(cap)
        ncl, nborn = 0, 0
        steps0 = 0
    else:
        parent, cl_rep, cl_pos = state._copy(capacity=cap)
        ncl, nborn = state.ncl, state.n_particles
        steps0 = state.steps
    birth_pos = np.array([b.position for b in births], dtype=float).reshape(-1)
    birth_step = np.array([index_of(times, b.time) if b.time >= start and i >= nborn else -1
                           for i, b in enumerate(births)], dtype=np.int64).reshape(-1)
    if record == "grid":
        rec_flag = np.arange(len(times), dtype=np.int64)
        rec_times = times
    elif record == "eval":
        rec_times = np.array(sorted(set(float(t) for t in eval_times)))
        rec_flag = np.full(len(times), -1, dtype=np.int64)
        for row, t in enumerate(rec_times):
            rec_flag[index_of(times, t)] = row
    else:
        raise ValueError(f"unknown record mode {record!r}")
    rec_pos = np.empty((len(rec_times), n))
    rec_rep = np.empty((len(rec_times), n), dtype=np.int64)
    ev = np.empty((4 * cap + 16, 3), dtype=np.int64)
    dcode, dpar = (drift or DriftModel.zero()).code
    # birth_pos/parent must cover all ids even when n == 0
    if n == 0:
        birth_pos = np.empty(0)
        birth_step = np.empty(0, dtype=np.int64)
    ncl, nborn, nev = run_segment(cl_rep, cl_pos, ncl, parent, times, 0, len(times) - 1,
                                  birth_pos, birth_step, nborn, dcode, dpar, rng.state,
                                  rec_flag, rec_pos, rec_rep, ev, 0)
    if nev > len(ev):
        raise RuntimeError("event buffer overflow")
    events = [(float(times[ev[i, 0]]), int(ev[i, 1]), int(ev[i, 2])) for i in range(nev)]
    final = WebState(float(times[-1]), tuple(births), parent, cl_rep, cl_pos, int(ncl),
                     steps0 + len(times) - 1)
    return PathRecord(rec_times, rec_pos, rec_rep, events, final)


def flow_batch(births: Sequence[Birth], eval_times: Sequence[float], horizon: float, dt: float,
               seed: int, reps: int, purpose: str = "web", drift: DriftModel | None = None,
               sub: int = 0) -> np.ndarray:
    """Positions at ``eval_times`` for replicas ``0..reps-1``: ``[reps, len(eval), n]``.

    Replica ``i`` reads the stream ``(seed, purpose, i, sub)`` and matches
    :func:`evaluate_flow` driven by that stream bit for bit.
    """
    from coalflow.rng import derive_key

    births = [b if isinstance(b, Birth) else Birth(*b) for b in births]
    if _sorted_births(births) != list(range(len(births))):
        raise ValueError("births must be listed in time order")
    times = build_grid(0.0, horizon, dt, [b.time for b in births] + list(eval_times))
    eval_sorted = sorted(set(float(t) for t in eval_times))
    rec_flag = np.full(len(times), -1, dtype=np.int64)
    for row, t in enumerate(eval_sorted):
        rec_flag[index_of(times, t)] = row
    birth_pos = np.array([b.position for b in births], dtype=float)
    birth_step = np.array([index_of(times, b.time) for b in births], dtype=np.int64)
    k0, k1 = derive_key(seed, purpose)
    dcode, dpar = (drift or DriftModel.zero()).code
    return run_batch(times, birth_pos, birth_step, dcode, dpar, np.uint64(k0), np.uint64(k1),
                     reps, sub, rec_flag, len(eval_sorted))
