"""Counter-based random streams.

Every draw is a pure function of ``(master_seed, purpose, replica, sub,
position)``.  The generator is Philox4x64-10 (bit-compatible with
:class:`numpy.random.Philox`), written as numba kernels so the simulation
loops can draw without leaving compiled code.

Stream layout.  The Philox key is derived once per ``(master_seed, purpose)``
through :class:`numpy.random.SeedSequence`; the 256-bit counter is
``(block, replica, sub, 0)``.  Distinct replicas therefore read disjoint
counter ranges of the same keyed permutation, which is what makes replica
results independent of how they are scheduled over threads.

State arrays are ``uint64[11]``::

    [k0, k1, c0, c1, c2, c3, b0, b1, b2, b3, pos]

``b*`` buffer the last Philox block and ``pos`` indexes into it; ``pos == 4``
means the buffer is spent.

Loops that draw should be compiled with ``_nrt=False`` (see :data:`hot_kernel`).
With reference counting on, numba keeps an incref/decref pair on the state
array around every inlined draw that contains a call, which triples the cost
of a normal.
"""

from __future__ import annotations

import math
import zlib

import numba as nb
import numpy as np
from llvmlite import ir
from numba.core import types
from numba.extending import intrinsic

STATE_SIZE = 11

_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = np.uint64(0x9E3779B97F4A7C15)
_W1 = np.uint64(0xBB67AE8584CAA73B)
_S11 = np.uint64(11)
_ONE = np.uint64(1)
_FOUR = np.uint64(4)
_TWO_M53 = 1.0 / 9007199254740992.0

# Decorator for allocation-free inner loops.
hot_kernel = nb.njit(cache=True, _nrt=False)


@intrinsic
def _mulhi(typingctx, a, b):
    """High 64 bits of the full 128-bit product, as one native multiply."""
    sig = types.uint64(types.uint64, types.uint64)

    def codegen(context, builder, signature, args):
        i128 = ir.IntType(128)
        prod = builder.mul(builder.zext(args[0], i128), builder.zext(args[1], i128))
        return builder.trunc(builder.lshr(prod, ir.Constant(i128, 64)), ir.IntType(64))

    return sig, codegen


@nb.njit(cache=True, inline="always")
def _mulhilo(a, b):
    return _mulhi(a, b), a * b


@nb.njit(cache=True, inline="always")
def philox_block(c0, c1, c2, c3, k0, k1):
    """Philox4x64 with 10 rounds applied to one counter block."""
    for r in range(10):
        if r > 0:
            k0 = k0 + _W0
            k1 = k1 + _W1
        hi0, lo0 = _mulhilo(_M0, c0)
        hi1, lo1 = _mulhilo(_M1, c2)
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return c0, c1, c2, c3


@nb.njit(cache=True, inline="always")
def next_u64(st):
    if st[10] >= _FOUR:
        st[2] = st[2] + _ONE
        b0, b1, b2, b3 = philox_block(st[2], st[3], st[4], st[5], st[0], st[1])
        st[6] = b0
        st[7] = b1
        st[8] = b2
        st[9] = b3
        st[10] = np.uint64(0)
    i = st[10]
    st[10] = i + _ONE
    return st[6 + np.int64(i)]


@nb.njit(cache=True, inline="always")
def next_uniform(st):
    """Uniform on [0, 1) with 53 random bits."""
    return np.float64(next_u64(st) >> _S11) * _TWO_M53


def _ziggurat_tables(levels: int = 256, r: float = 3.6541528853610088,
                     v: float = 0.00492867323399):
    """Marsaglia-Tsang tables scaled for 52-bit integer magnitudes."""
    m = 2.0**52
    ki = np.zeros(levels, dtype=np.uint64)
    wi = np.zeros(levels)
    fi = np.zeros(levels)
    dn = tn = r
    q = v / math.exp(-0.5 * dn * dn)
    ki[0] = np.uint64((dn / q) * m)
    wi[0] = q / m
    wi[levels - 1] = dn / m
    fi[0] = 1.0
    fi[levels - 1] = math.exp(-0.5 * dn * dn)
    for i in range(levels - 2, 0, -1):
        dn = math.sqrt(-2.0 * math.log(v / dn + math.exp(-0.5 * dn * dn)))
        ki[i + 1] = np.uint64((dn / tn) * m)
        tn = dn
        fi[i] = math.exp(-0.5 * dn * dn)
        wi[i] = dn / m
    return ki, wi, fi


_ZIG_R = 3.6541528853610088
_ZIG_KI, _ZIG_WI, _ZIG_FI = _ziggurat_tables(r=_ZIG_R)
_MASK8 = np.uint64(0xFF)
_MASK52 = np.uint64(0x000FFFFFFFFFFFFF)
_S8 = np.uint64(8)
_S9 = np.uint64(9)


@nb.njit(cache=True, inline="never")
def _normal_slow(st, idx, x):
    # Rejection branch of the ziggurat (under 1% of draws).
    while True:
        if idx == 0:
            while True:
                xx = -math.log1p(-next_uniform(st)) / _ZIG_R
                yy = -math.log1p(-next_uniform(st))
                if yy + yy > xx * xx:
                    return -(_ZIG_R + xx) if x < 0.0 else _ZIG_R + xx
        if (_ZIG_FI[idx - 1] - _ZIG_FI[idx]) * next_uniform(st) + _ZIG_FI[idx] < math.exp(-0.5 * x * x):
            return x
        w = next_u64(st)
        idx = np.int64(w & _MASK8)
        rabs = (w >> _S9) & _MASK52
        sgn = 1.0 - 2.0 * np.float64(np.int64((w >> _S8) & _ONE))
        x = sgn * np.float64(np.int64(rabs)) * _ZIG_WI[idx]
        if rabs < _ZIG_KI[idx]:
            return x


@nb.njit(cache=True, inline="always")
def next_normal(st):
    """Standard normal by the 256-level ziggurat.

    One 64-bit word supplies the level (8 bits), the sign (1 bit) and a
    52-bit magnitude; the fast path accepts without further draws.
    """
    w = next_u64(st)
    idx = np.int64(w & _MASK8)
    rabs = (w >> _S9) & _MASK52
    # branch-free sign: the bit is a coin flip, so a branch would mispredict half the time
    sgn = 1.0 - 2.0 * np.float64(np.int64((w >> _S8) & _ONE))
    x = sgn * np.float64(np.int64(rabs)) * _ZIG_WI[idx]
    if rabs >= _ZIG_KI[idx]:
        x = _normal_slow(st, idx, x)
    return x


@nb.njit(cache=True)
def init_state(st, k0, k1, replica, sub):
    st[0] = k0
    st[1] = k1
    st[2] = np.uint64(0)
    st[3] = np.uint64(replica)
    st[4] = np.uint64(sub)
    st[5] = np.uint64(0)
    for i in range(6, 10):
        st[i] = np.uint64(0)
    st[10] = _FOUR


@nb.njit(cache=True, _nrt=False)
def _fill_normals(st, out):
    for i in range(out.shape[0]):
        out[i] = next_normal(st)


@nb.njit(cache=True, _nrt=False)
def _fill_uniforms(st, out):
    for i in range(out.shape[0]):
        out[i] = next_uniform(st)


def purpose_code(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def derive_key(master_seed: int, purpose: str) -> tuple[int, int]:
    """Philox key for one ``(master_seed, purpose)`` pair."""
    if not 0 <= master_seed < 2**64:
        raise ValueError(f"master seed must fit in 64 unsigned bits, got {master_seed}")
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=(purpose_code(purpose),))
    k = ss.generate_state(2, dtype=np.uint64)
    return int(k[0]), int(k[1])


class Stream:
    """One labelled random stream; advancing it mutates the counter.

    Thin Python handle over the state array the compiled kernels use, so a
    simulation driven from Python and one driven from a kernel consume draws
    identically.
    """

    def __init__(self, master_seed: int, purpose: str, replica: int = 0, sub: int = 0):
        if replica < 0 or sub < 0:
            raise ValueError("stream labels must be nonnegative")
        self.master_seed = master_seed
        self.purpose = purpose
        self.replica = replica
        self.sub = sub
        k0, k1 = derive_key(master_seed, purpose)
        self.state = np.zeros(STATE_SIZE, dtype=np.uint64)
        init_state(self.state, np.uint64(k0), np.uint64(k1), np.uint64(replica), np.uint64(sub))

    @property
    def position(self) -> tuple[int, int]:
        """``(block counter, offset in block)``; equal positions mean equal futures."""
        return int(self.state[2]), int(self.state[10])

    def copy(self) -> "Stream":
        other = object.__new__(Stream)
        other.master_seed = self.master_seed
        other.purpose = self.purpose
        other.replica = self.replica
        other.sub = self.sub
        other.state = self.state.copy()
        return other

    def normals(self, count: int) -> np.ndarray:
        out = np.empty(count, dtype=np.float64)
        _fill_normals(self.state, out)
        return out

    def uniforms(self, count: int) -> np.ndarray:
        out = np.empty(count, dtype=np.float64)
        _fill_uniforms(self.state, out)
        return out

    def normal(self) -> float:
        return float(next_normal(self.state))

    def uniform(self) -> float:
        return float(next_uniform(self.state))

    def __repr__(self) -> str:
        return (f"Stream(seed={self.master_seed}, purpose={self.purpose!r}, "
                f"replica={self.replica}, sub={self.sub}, position={self.position})")
