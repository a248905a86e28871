"""Closed forms and quadratures that need no simulation.

Conventions.  Two particles with unit diffusion each have a gap with
variance rate 2.  Under the linear drift ``a(u) = C u`` the gap is an
Ornstein-Uhlenbeck process ``dD = C D dt + sqrt(2) dB``; writing
``D_t = e^{Ct}(D_0 + sqrt(2) int_0^t e^{-Cs} dB_s)`` shows the meeting time is
the first passage of a Brownian motion run on the clock

    phi_C(t) = int_0^t exp(-2 C s) ds = (1 - exp(-2 C t)) / (2 C)

to the level ``u = (u2 - u1) / sqrt(2)``.  ``phi_C`` takes a ``scale`` factor
on the exponent so that the variant ``exp(-2 sqrt(2) C s)`` can be evaluated
as well (``scale=sqrt(2)``); the simulated dynamics follow ``scale=1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

SQRT2 = math.sqrt(2.0)
SQRT_PI = math.sqrt(math.pi)
SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class QuadratureConfig:
    abs_tol: float = 1e-10
    max_depth: int = 60

    def __post_init__(self) -> None:
        if not self.abs_tol > 0:
            raise ValueError("quadrature tolerance must be positive")


DEFAULT_QUAD = QuadratureConfig()


def adaptive_simpson(f: Callable[[float], float], a: float, b: float,
                     cfg: QuadratureConfig = DEFAULT_QUAD) -> float:
    """Adaptive Simpson with Richardson correction, iterative (explicit stack)."""
    if a == b:
        return 0.0
    if a > b:
        return -adaptive_simpson(f, b, a, cfg)
    fa, fb = f(a), f(b)
    m = 0.5 * (a + b)
    fm = f(m)
    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    total = 0.0
    stack = [(a, b, fa, fm, fb, whole, cfg.abs_tol, 0)]
    while stack:
        a, b, fa, fm, fb, whole, tol, depth = stack.pop()
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = (m - a) / 6.0 * (fa + 4.0 * flm + fm)
        right = (b - m) / 6.0 * (fm + 4.0 * frm + fb)
        delta = left + right - whole
        if depth >= cfg.max_depth or abs(delta) <= 15.0 * tol:
            total += left + right + delta / 15.0
        else:
            stack.append((a, m, fa, flm, fm, left, 0.5 * tol, depth + 1))
            stack.append((m, b, fm, frm, fb, right, 0.5 * tol, depth + 1))
    return total


def integrate(f: Callable[[float], float], a: float, b: float,
              cfg: QuadratureConfig = DEFAULT_QUAD, pieces: int = 8) -> float:
    """Adaptive Simpson over ``pieces`` equal panels.

    The initial panels keep narrow features from hiding between the first
    three sample points.
    """
    h = (b - a) / pieces
    sub = QuadratureConfig(cfg.abs_tol / pieces, cfg.max_depth)
    return math.fsum(adaptive_simpson(f, a + i * h, a + (i + 1) * h if i < pieces - 1 else b, sub)
                     for i in range(pieces))


def normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / SQRT2)


def normal_sf(x: float) -> float:
    return 0.5 * math.erfc(x / SQRT2)


def phi_C(C: float, t: float, scale: float = 1.0) -> float:
    """Meeting clock ``int_0^t exp(-2 scale C s) ds``; ``C = 0`` gives ``t``."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    k = 2.0 * scale * C
    if k == 0.0:
        return float(t)
    return -math.expm1(-k * t) / k


def meeting_survival_linear(C: float, u1: float, u2: float, t: float, scale: float = 1.0) -> float:
    """``P{tau > t}`` for two particles started at ``u1 <= u2`` under ``a(u) = C u``."""
    if t <= 0:
        raise ValueError("t must be positive")
    if u2 < u1:
        raise ValueError("need u1 <= u2")
    u = (u2 - u1) / SQRT2
    # sqrt(2/pi) int_0^x exp(-v^2/2) dv == erf(x / sqrt(2))
    return math.erf(u / math.sqrt(2.0 * phi_C(C, t, scale)))


def meeting_cdf_linear(C: float, gap: float, t: float, scale: float = 1.0) -> float:
    """``P{tau <= t}`` for a starting gap ``gap >= 0``; zero at ``t = 0``."""
    if t <= 0:
        return 0.0 if gap > 0 else 1.0
    return 1.0 - meeting_survival_linear(C, 0.0, gap, t, scale)


def meeting_never_prob_linear(C: float, u1: float, u2: float, scale: float = 1.0) -> float:
    """``P{tau = inf}``: positive only for a repulsive drift ``C > 0``."""
    if u2 < u1:
        raise ValueError("need u1 <= u2")
    if C <= 0:
        return 0.0
    u = (u2 - u1) / SQRT2
    phi_inf = 1.0 / (2.0 * scale * C)
    return math.erf(u / math.sqrt(2.0 * phi_inf))


def hitting_cdf_zero_drift(gap: float, s: float) -> float:
    """Reflection principle: ``P{tau <= s} = 2(1 - Phi(gap / sqrt(2 s)))``."""
    if s <= 0:
        return 1.0 if gap == 0 else 0.0
    return math.erfc(gap / (2.0 * math.sqrt(s)))


def l_defect(t: float, u: float, method: str = "hitting",
             cfg: QuadratureConfig = DEFAULT_QUAD) -> float:
    """Coalescence defect ``l(t, u) = E (t - tau) 1{tau <= t}``, gap ``u``.

    ``method``:

    * ``"density"`` integrates ``(t - s) u s^{-3/2} / (2 sqrt(pi)) e^{-u^2/(4s)}``;
      below ``u = 1e-3`` it substitutes ``s = u^2 / (4 y^2)``, which turns the
      spike at ``s ~ u^2`` into the smooth ``(t - u^2/(4y^2)) (2/sqrt(pi)) e^{-y^2}``.
    * ``"hitting"`` integrates the hitting probability ``int_0^t P{tau <= s} ds``.
    * ``"closed"`` evaluates ``(t + u^2/2) erfc(u / (2 sqrt t)) - u sqrt(t/pi) e^{-u^2/(4t)}``.

    ``l(t, 0) = t``: coincident particles coalesce at once.
    """
    if t <= 0:
        raise ValueError("t must be positive")
    if u < 0:
        raise ValueError("gap must be nonnegative")
    if u == 0.0:
        return float(t)
    if method == "closed":
        return ((t + 0.5 * u * u) * math.erfc(u / (2.0 * math.sqrt(t)))
                - u * math.sqrt(t / math.pi) * math.exp(-u * u / (4.0 * t)))
    if method == "hitting":
        return integrate(lambda s: hitting_cdf_zero_drift(u, s), 0.0, t, cfg)
    if method == "density":
        if u < 1e-3:
            y0 = u / (2.0 * math.sqrt(t))
            y1 = max(y0, 0.0) + 40.0

            def g(y: float) -> float:
                return (t - u * u / (4.0 * y * y)) * (2.0 / SQRT_PI) * math.exp(-y * y)

            return integrate(g, y0, y1, cfg)

        def f(s: float) -> float:
            if s <= 0.0:
                return 0.0
            return (t - s) * u * s ** -1.5 / (2.0 * SQRT_PI) * math.exp(-u * u / (4.0 * s))

        return integrate(f, 0.0, t, cfg)
    raise ValueError(f"unknown method {method!r}")


# sup_{s in (0,1]} e^{-1/(4s)} s^{-3/2} / (2 sqrt(pi)); stationary at s = 1/6.
L_BOUND_SUP_POINT = 1.0 / 6.0
L_BOUND_K = math.exp(-1.5) * 6.0 ** 1.5 / (2.0 * SQRT_PI)


def l_upper_bound(t: float, u: float) -> float:
    """``t^2 u^{-2} K`` with ``K = sup_s e^{-1/(4s)} s^{-3/2} / (2 sqrt(pi))``."""
    if u <= 0:
        raise ValueError("bound needs a positive gap")
    return t * t / (u * u) * L_BOUND_K


def expected_cluster_size_linear(C: float, t: float, scale: float = 1.0) -> float:
    """``E nu_t = int_0^1 P{tau(0, r) <= t} dr`` under ``a(u) = C u``.

    With ``sigma^2 = 2 phi_C(t)`` (the variance-2 gap on the meeting clock)
    the integral is ``2 Phi-bar(1/sigma) + sqrt(2/pi) sigma (1 - e^{-1/(2 sigma^2)})``.
    Small-time limit: ``E nu_t / sqrt(t) -> 2/sqrt(pi)``.
    """
    if t <= 0:
        raise ValueError("t must be positive")
    phi = phi_C(C, t, scale)
    sigma = math.sqrt(2.0 * phi)
    return (2.0 * normal_sf(1.0 / sigma)
            + SQRT_2_OVER_PI * sigma * -math.expm1(-1.0 / (2.0 * sigma * sigma)))


def cluster_size_limit_constant() -> float:
    """``lim_{t->0} E nu_t / sqrt(t)`` for the variance-2 meeting gap."""
    return 2.0 / SQRT_PI


def expected_l_gaussian(h: float, mean: float, var: float,
                        cfg: QuadratureConfig = QuadratureConfig(1e-12)) -> float:
    """``E l(h, |Z|)`` for ``Z ~ N(mean, var)``."""
    if var <= 0.0:
        return l_defect(h, abs(mean), "closed")
    sd = math.sqrt(var)
    lo, hi = mean - 12.0 * sd, mean + 12.0 * sd

    def f(x: float) -> float:
        z = (x - mean) / sd
        return l_defect(h, abs(x), "closed") * math.exp(-0.5 * z * z) / (sd * math.sqrt(2 * math.pi))

    if lo < 0.0 < hi:
        return integrate(f, lo, 0.0, cfg) + integrate(f, 0.0, hi, cfg)
    return integrate(f, lo, hi, cfg)


def correlation_sum_expected(n: int, s: float, t: float, r: float) -> float:
    """Exact ``E sum_k phi_{k/n,(k+1)/n}(0) phi_{s,t}(r)`` for the zero-drift web.

    Only blocks overlapping ``(s, t)`` contribute.  For such a block with
    overlap ``[a, b]`` both particles are alive and independent at ``a``, the
    gap there is ``N(r, (a - k/n) + (a - s))``, and the product moment picks
    up ``E l(b - a, |gap|)``; martingale steps outside the overlap add nothing.
    """
    if s > t:
        raise ValueError("need s <= t")
    if n < 1:
        raise ValueError("n must be positive")
    total = 0.0
    for k in range(n):
        p, q = k / n, (k + 1) / n
        a, b = max(p, s), min(q, t)
        if b <= a:
            continue
        total += expected_l_gaussian(b - a, r, (a - p) + (a - s))
    return total
