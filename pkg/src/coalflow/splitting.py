"""Fractional-step (Trotter) scheme: coalescing web steps plus drift maps.

On every partition interval the particles follow the drift-free web.  At each
interior partition point ``t_k`` all positions go through the drift flow
``A_h`` of ``du/dt = a(u)`` over the interval just completed,
``h = t_k - t_{k-1}``.  Nothing is applied at ``t_N = 1``; the terminal value
is the left limit there.  For a uniform partition the N-1 maps give a linear
drift a mean of ``u e^{C (N-1)/N}``.

Per particle the record keeps the path ``X`` on the grid, the jumps
``Delta_k = X_{t_k} - X_{t_k-}`` and the martingale part
``m = X - sum_{t_k <= t} Delta_k``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numba as nb
import numpy as np

from coalflow.model import DriftModel, Partition, RngSpec, check_sorted
from coalflow.rng import STATE_SIZE, Stream, derive_key, hot_kernel, init_state
from coalflow.web import SCHEMA_HEADER, coalescing_step, drift_at, find_root, spawn_particle

RK4_STEP_LIMIT = 0.01  # max h_sub * C_a for named drifts; 0.1 already keeps the map monotone
TROTTER_PURPOSE = "trotter"


@nb.njit(cache=True, inline="always")
def _flow_map(dcode, dpar, lip, h, u):
    if dcode == 0 or h == 0.0:
        return u
    if dcode == 1:
        return u * math.exp(dpar * h)
    nsub = max(1, int(math.ceil(h * lip / RK4_STEP_LIMIT)))
    hs = h / nsub
    x = u
    for _ in range(nsub):
        k1 = drift_at(dcode, dpar, x)
        k2 = drift_at(dcode, dpar, x + 0.5 * hs * k1)
        k3 = drift_at(dcode, dpar, x + 0.5 * hs * k2)
        k4 = drift_at(dcode, dpar, x + hs * k3)
        x = x + hs / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


@nb.njit(cache=True)
def _flow_map_array(dcode, dpar, lip, h, u, out):
    for i in range(u.shape[0]):
        out[i] = _flow_map(dcode, dpar, lip, h, u[i])


def drift_flow_map(model: DriftModel, h: float, u):
    """``A_h(u)``: exact for zero and linear drifts, RK4 substeps otherwise."""
    if h < 0:
        raise ValueError("h must be nonnegative")
    dcode, dpar = model.code
    lip = model.lipschitz_constant
    arr = np.asarray(u, dtype=float)
    out = np.empty(arr.size)
    _flow_map_array(dcode, dpar, lip, float(h), arr.reshape(-1), out)
    return float(out[0]) if arr.ndim == 0 else out.reshape(arr.shape)


# --------------------------------------------------------------------------
# grid


def trotter_grid(partition: Partition, dt: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Grid refining the partition, interior-point flags and drift-map lengths.

    Interval ``k`` is cut into ``ceil(len / dt)`` equal substeps; breakpoints
    are stored exactly.  ``hmap[i] > 0`` marks an interior partition point and
    carries the length of the interval it closes.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if dt > partition.mesh * (1 + 1e-12):
        raise ValueError(f"dt={dt} exceeds the partition mesh {partition.mesh}")
    b = partition.breakpoints
    pieces = [np.array([b[0]])]
    for k in range(1, len(b)):
        length = b[k] - b[k - 1]
        n = max(1, math.ceil(length / dt - 1e-9))
        seg = b[k - 1] + length * np.arange(1, n + 1) / n
        seg[-1] = b[k]
        pieces.append(seg)
    times = np.concatenate(pieces)
    is_part = np.isin(times, np.array(b))
    hmap = np.zeros(len(times))
    for k in range(1, len(b) - 1):
        hmap[np.searchsorted(times, b[k])] = b[k] - b[k - 1]
    return times, is_part, hmap


# --------------------------------------------------------------------------
# compiled core


@hot_kernel
def trotter_run(starts, times, hmap, dcode, dpar, lip, st,
                cl_rep, cl_pos, parent, ev, X, jump, m, sup, acc):
    """One replica; fills ``X``, ``jump``, ``m`` (``[len(times), n]``) and ``sup``.

    ``acc`` is scratch for the running jump sums.
    """
    n = starts.shape[0]
    ncl = 0
    for p in range(n):
        ncl = spawn_particle(cl_rep, cl_pos, ncl, parent, p, starts[p])
    for p in range(n):
        sup[p] = 0.0
        acc[p] = 0.0
    nev = 0
    for k in range(times.shape[0]):
        if k > 0:
            ncl, nev = coalescing_step(cl_rep, cl_pos, ncl, parent, times[k] - times[k - 1],
                                       0, 0.0, st, ev, nev, k)
        hk = hmap[k]
        for p in range(n):
            root = find_root(parent, p)
            c = 0
            while cl_rep[c] != root:
                c += 1
            x = cl_pos[c]
            a = abs(drift_at(dcode, dpar, x))
            if a > sup[p]:
                sup[p] = a
            jump[k, p] = 0.0
            X[k, p] = x
        if hk > 0.0:
            for c in range(ncl):
                cl_pos[c] = _flow_map(dcode, dpar, lip, hk, cl_pos[c])
            for p in range(n):
                root = find_root(parent, p)
                c = 0
                while cl_rep[c] != root:
                    c += 1
                y = cl_pos[c]
                jump[k, p] = y - X[k, p]
                X[k, p] = y
                a = abs(drift_at(dcode, dpar, y))
                if a > sup[p]:
                    sup[p] = a
        for p in range(n):
            acc[p] = acc[p] + jump[k, p]
            m[k, p] = X[k, p] - acc[p]
    return ncl


def _alloc(n: int, nt: int):
    return (np.empty(n, dtype=np.int64), np.empty(n), np.full(n, -1, dtype=np.int64),
            np.empty((0, 3), dtype=np.int64), np.empty((nt, n)), np.empty((nt, n)),
            np.empty((nt, n)), np.empty(n), np.empty(n))


# --------------------------------------------------------------------------
# records


@dataclass
class SplitPathRecord:
    partition: Partition
    times: np.ndarray
    is_partition_point: np.ndarray
    X: np.ndarray                # [len(times), n], right-continuous values
    jump: np.ndarray             # [len(times), n], nonzero only at interior partition points
    m: np.ndarray                # martingale part
    sup_abs_drift: np.ndarray    # [n], sup over the path incl. left limits
    drift_length: np.ndarray     # length of the drift map applied at each grid time (0 if none)

    @property
    def n_particles(self) -> int:
        return self.X.shape[1]

    def left_limits(self) -> np.ndarray:
        return self.X - self.jump

    def cumulative_jumps(self) -> np.ndarray:
        out = np.empty_like(self.jump)
        acc = np.zeros(self.n_particles)
        for k in range(len(self.times)):
            acc = acc + self.jump[k]
            out[k] = acc
        return out

    def terminal(self) -> np.ndarray:
        return self.X[-1]

    def met_by_end(self, i: int = 0, j: int = 1) -> bool:
        return bool(self.X[-1, i] == self.X[-1, j])

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(SCHEMA_HEADER + "\n")
            w = csv.writer(fh)
            w.writerow(["time", "particle_id", "X", "m", "is_partition_point", "jump"])
            for k, t in enumerate(self.times):
                for p in range(self.n_particles):
                    w.writerow([repr(float(t)), p, repr(float(self.X[k, p])),
                                repr(float(self.m[k, p])), int(self.is_partition_point[k]),
                                repr(float(self.jump[k, p]))])


def trotter_simulate(starts: Sequence[float], partition: Partition, model: DriftModel, dt: float,
                     rng: Stream | RngSpec, reps: int = 1) -> list[SplitPathRecord]:
    """Run the splitting scheme; one record per replica.

    With a :class:`Stream` a single replica is drawn from it.  With an
    :class:`RngSpec` replica ``i`` reads ``spec.stream("trotter", i)``, the
    stream :func:`trotter_batch` uses for the same replica.
    """
    check_sorted(list(starts))
    if isinstance(rng, Stream) and reps != 1:
        raise ValueError("a single Stream drives exactly one replica; pass an RngSpec for more")
    x0 = np.asarray(starts, dtype=float)
    times, is_part, hmap = trotter_grid(partition, dt)
    dcode, dpar = model.code
    lip = model.lipschitz_constant
    records = []
    for i in range(reps):
        stream = rng if isinstance(rng, Stream) else rng.stream(TROTTER_PURPOSE, i)
        cl_rep, cl_pos, parent, ev, X, jump, m, sup, acc = _alloc(len(x0), len(times))
        trotter_run(x0, times, hmap, dcode, dpar, lip, stream.state,
                    cl_rep, cl_pos, parent, ev, X, jump, m, sup, acc)
        records.append(SplitPathRecord(partition, times, is_part, X, jump, m, sup, hmap))
    return records


def jump_bound(sup_abs_drift: float, lipschitz: float, mesh: float, length: float) -> float:
    """``sup |a(X)| e^{C_a mesh} length``."""
    return sup_abs_drift * math.exp(lipschitz * mesh) * length


def jump_bound_check(record: SplitPathRecord, model: DriftModel) -> np.ndarray:
    """Per particle: every jump within ``sup |a(X)| e^{C_a mesh}`` times the map length.

    The length is the span the drift map actually integrated over (the interval
    closed by that partition point); on uniform partitions it is the mesh.
    """
    lip = model.lipschitz_constant
    mesh = record.partition.mesh
    ok = np.ones(record.n_particles, dtype=bool)
    for k in np.flatnonzero(record.drift_length > 0):
        for p in range(record.n_particles):
            bound = jump_bound(record.sup_abs_drift[p], lip, mesh, record.drift_length[k])
            if abs(record.jump[k, p]) > bound:
                ok[p] = False
    for p in range(record.n_particles):
        if np.any(record.jump[record.drift_length == 0, p] != 0):
            ok[p] = False
    return ok


def martingale_diagnostics_input(records: Sequence[SplitPathRecord], particle: int = 0,
                                 spans: str = "partition") -> np.ndarray:
    """Non-overlapping ``m`` increments as rows ``(value, span, path index)``.

    ``spans="partition"`` takes one increment per partition interval;
    ``spans="grid"`` one per grid step.
    """
    if not records:
        raise ValueError("no records")
    ref = records[0]
    rows = []
    for idx, rec in enumerate(records):
        if rec.times.shape != ref.times.shape or np.any(rec.times != ref.times):
            raise ValueError("records do not share a grid")
        if rec.partition != ref.partition:
            raise ValueError("records do not share a partition")
        if spans == "partition":
            pts = np.flatnonzero(rec.is_partition_point)
        elif spans == "grid":
            pts = np.arange(len(rec.times))
        else:
            raise ValueError(f"unknown span mode {spans!r}")
        mv = rec.m[pts, particle]
        tv = rec.times[pts]
        for a in range(len(pts) - 1):
            rows.append((mv[a + 1] - mv[a], tv[a + 1] - tv[a], idx))
    return np.array(rows, dtype=float).reshape(-1, 3)


# --------------------------------------------------------------------------
# batches


@nb.njit(cache=True, parallel=True)
def _trotter_batch(starts, times, hmap, part_idx, dcode, dpar, lip, mesh, k0, k1, reps):
    n = starts.shape[0]
    nt = times.shape[0]
    npart = part_idx.shape[0]
    final = np.empty((reps, n))
    met = np.empty(reps, dtype=np.uint8)
    jump_ok = np.empty((reps, n), dtype=np.uint8)
    minc = np.empty((reps, npart - 1))
    for i in nb.prange(reps):
        st = np.empty(STATE_SIZE, dtype=np.uint64)
        init_state(st, k0, k1, np.uint64(i), np.uint64(0))
        cl_rep = np.empty(n, dtype=np.int64)
        cl_pos = np.empty(n)
        parent = np.full(n, -1, dtype=np.int64)
        ev = np.empty((0, 3), dtype=np.int64)
        X = np.empty((nt, n))
        jump = np.empty((nt, n))
        m = np.empty((nt, n))
        sup = np.empty(n)
        acc = np.empty(n)
        trotter_run(starts, times, hmap, dcode, dpar, lip, st, cl_rep, cl_pos, parent, ev,
                    X, jump, m, sup, acc)
        for p in range(n):
            final[i, p] = X[nt - 1, p]
            ok = 1
            for k in range(nt):
                if hmap[k] > 0.0:
                    if abs(jump[k, p]) > sup[p] * math.exp(lip * mesh) * hmap[k]:
                        ok = 0
                elif jump[k, p] != 0.0:
                    ok = 0
            jump_ok[i, p] = ok
        met[i] = 1 if n > 1 and X[nt - 1, 0] == X[nt - 1, n - 1] else 0
        for a in range(npart - 1):
            minc[i, a] = m[part_idx[a + 1], 0] - m[part_idx[a], 0]
    return final, met, jump_ok, minc


@dataclass(frozen=True)
class TrotterBatch:
    final: np.ndarray        # [reps, n] terminal positions
    met: np.ndarray          # [reps] first and last particle coalesced by t = 1
    jump_ok: np.ndarray      # [reps, n] jump bound held on the whole path
    m_increments: np.ndarray  # [reps, N] particle-0 martingale increments per interval
    spans: np.ndarray        # [N] interval lengths


def trotter_batch(starts: Sequence[float], partition: Partition, model: DriftModel, dt: float,
                  seed: int, reps: int) -> TrotterBatch:
    """Summaries of ``reps`` replicas without storing paths."""
    check_sorted(list(starts))
    times, is_part, hmap = trotter_grid(partition, dt)
    part_idx = np.flatnonzero(is_part)
    k0, k1 = derive_key(seed, TROTTER_PURPOSE)
    dcode, dpar = model.code
    final, met, ok, minc = _trotter_batch(np.asarray(starts, dtype=float), times, hmap, part_idx,
                                          dcode, dpar, model.lipschitz_constant, partition.mesh,
                                          np.uint64(k0), np.uint64(k1), int(reps))
    return TrotterBatch(final, met.astype(bool), ok.astype(bool), minc, partition.gaps())
