"""Water-filling over i.i.d. Rayleigh slots within one frame.

Within a frame the large-scale gain ``alpha`` is fixed and the per-slot
small-scale gain ``g`` is exponential(1).  The BS allocates

    p(g) = (nu - noise / (alpha * g))^+

so only slots with ``g >= g0 = noise / (alpha * nu)`` are used.  On those
slots ``1 + alpha g p / noise = g / g0`` and the expectations reduce to the
exponential integral E1:

    E[rate]  = W / ln 2 * E1(g0)
    E[power] = nu * exp(-g0) - noise / alpha * E1(g0)

The target rate therefore pins ``g0`` independently of ``alpha``.
"""

from dataclasses import dataclass
import math

import numpy as np
from scipy import integrate, special

__all__ = [
    "RateSaturationError",
    "WaterfillSolution",
    "SlotAllocation",
    "cutoff",
    "expected_rate",
    "expected_power",
    "expected_energy",
    "water_level_for_rate",
    "slot_powers",
    "rate_ceiling",
]

LN2 = math.log(2.0)


class RateSaturationError(ValueError):
    """Requested average rate lies above the configured ceiling."""


@dataclass(frozen=True)
class WaterfillSolution:
    water_level: np.ndarray
    expected_rate: np.ndarray
    expected_power: np.ndarray


@dataclass(frozen=True)
class SlotAllocation:
    powers: np.ndarray
    delivered_bits: np.ndarray
    transmit_energy: np.ndarray


def cutoff(alpha, nu, noise_power):
    """Slot-gain threshold ``g0`` below which a slot gets no power (inf at nu=0)."""
    alpha = np.asarray(alpha, dtype=float)
    nu = np.asarray(nu, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(nu > 0, noise_power / (alpha * np.where(nu > 0, nu, 1.0)), np.inf)


def _rate_quad(g0, bandwidth):
    if not np.isfinite(g0):
        return 0.0
    # substitute g = g0 + x so the integrand is smooth on [0, inf)
    val, _ = integrate.quad(
        lambda x: math.log1p(x / g0) * math.exp(-x), 0.0, np.inf, epsabs=0.0, epsrel=1e-12, limit=200
    )
    return bandwidth / LN2 * math.exp(-g0) * val


def expected_rate(alpha, nu, bandwidth, noise_power, method="closed"):
    """Mean rate in bits/s over exponential(1) slot gains.

    ``method="closed"`` evaluates the E1 form; ``method="quad"`` integrates
    numerically with adaptive quadrature (scalar loop, slow).
    """
    g0 = cutoff(alpha, nu, noise_power)
    if method == "closed":
        return bandwidth / LN2 * special.exp1(g0)
    if method == "quad":
        flat = np.vectorize(lambda x: _rate_quad(x, bandwidth), otypes=[float])
        return flat(g0)
    raise ValueError(f"unknown method {method!r}")


def expected_power(alpha, nu, noise_power):
    g0 = cutoff(alpha, nu, noise_power)
    nu = np.asarray(nu, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    return np.where(g0 < np.inf, nu * np.exp(-g0) - noise_power / alpha * special.exp1(g0), 0.0)


def _cutoff_for_rate(rate, bandwidth, tol_rel=1e-6, tol_abs=1.0, max_iter=200):
    """Invert ``W/ln2 * E1(g0) = rate`` for g0 by geometric bisection.

    Returns inf where rate is zero.
    """
    rate = np.asarray(rate, dtype=float)
    out = np.full(rate.shape, np.inf)
    active = rate > 0
    if not active.any():
        return out
    target = rate[active]
    scale = bandwidth / LN2
    # E1 is decreasing in g0: larger g0 means less rate.  Grow bracket geometrically.
    lo = np.full(target.shape, 1.0)
    hi = np.full(target.shape, 1.0)
    while True:
        need = scale * special.exp1(lo) < target
        if not need.any():
            break
        lo[need] *= 0.5 ** 8
    while True:
        need = scale * special.exp1(hi) > target
        if not need.any():
            break
        hi[need] *= 2.0
    tol = np.maximum(tol_rel * target, tol_abs)
    mid = np.sqrt(lo * hi)
    for _ in range(max_iter):
        mid = np.sqrt(lo * hi)
        r = scale * special.exp1(mid)
        done = np.abs(r - target) <= tol
        if done.all():
            break
        too_fast = r > target
        lo = np.where(too_fast & ~done, mid, lo)
        hi = np.where(~too_fast & ~done, mid, hi)
        # freeze converged entries
        lo = np.where(done, mid, lo)
        hi = np.where(done, mid, hi)
    out[active] = mid
    return out


def water_level_for_rate(alpha, rate, bandwidth, noise_power, ceiling=None, tol_rel=1e-6, tol_abs=1.0):
    """Water level delivering average ``rate`` (bits/s) on large-scale gain ``alpha``.

    Bisection stops once ``|expected_rate - rate| <= max(tol_rel * rate, tol_abs)``.
    Raises RateSaturationError if ``rate`` exceeds ``ceiling``.
    """
    alpha = np.asarray(alpha, dtype=float)
    rate = np.asarray(rate, dtype=float)
    if not np.all(np.isfinite(rate)) or np.any(rate < 0):
        raise ValueError("target rate must be finite and non-negative")
    if ceiling is not None and np.any(rate > ceiling * (1 + 1e-12)):
        raise RateSaturationError(f"rate {np.max(rate):.6g} exceeds ceiling {ceiling:.6g}")
    alpha, rate = np.broadcast_arrays(alpha, rate)
    g0 = _cutoff_for_rate(rate, bandwidth, tol_rel, tol_abs)
    with np.errstate(divide="ignore"):
        nu = np.where(np.isfinite(g0), noise_power / (alpha * g0), 0.0)
    return WaterfillSolution(
        water_level=nu,
        expected_rate=expected_rate(alpha, nu, bandwidth, noise_power),
        expected_power=expected_power(alpha, nu, noise_power),
    )


def expected_energy(alpha, rate, bandwidth, noise_power, frame_duration, efficiency=1.0):
    """Expected transmit energy (J) of one frame at average ``rate``."""
    sol = water_level_for_rate(alpha, rate, bandwidth, noise_power)
    return sol.expected_power * frame_duration / efficiency


def slot_powers(
    alpha,
    nu,
    gains,
    bandwidth,
    noise_power,
    slot_duration,
    efficiency=1.0,
    circuit_power=0.0,
    frame_duration=0.0,
):
    """Realized allocation for one frame.

    ``gains`` has shape (..., N_s); ``alpha`` and ``nu`` broadcast against
    its leading axes.
    """
    gains = np.asarray(gains, dtype=float)
    alpha = np.asarray(alpha, dtype=float)[..., None]
    nu = np.asarray(nu, dtype=float)[..., None]
    with np.errstate(divide="ignore"):
        p = np.maximum(nu - noise_power / (alpha * gains), 0.0)
    bits = slot_duration * bandwidth * np.log2(1.0 + alpha * gains * p / noise_power)
    energy = slot_duration * p.sum(axis=-1) / efficiency
    if circuit_power > 0:
        energy = energy + frame_duration * circuit_power
    return SlotAllocation(powers=p, delivered_bits=bits.sum(axis=-1), transmit_energy=energy)


def rate_ceiling(alpha_best, max_power, bandwidth, noise_power):
    """Average rate reached on gain ``alpha_best`` when the mean power equals ``max_power``."""
    lo, hi = 0.0, max_power
    while expected_power(alpha_best, hi, noise_power) < max_power:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if expected_power(alpha_best, mid, noise_power) < max_power:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-12 * hi:
            break
    return float(expected_rate(alpha_best, 0.5 * (lo + hi), bandwidth, noise_power))
