"""Perfect-prediction benchmark.

Knowing every frame's large-scale gain in advance, each user's problem is

    minimize   sum_t E[energy](alpha_t, R_t)
    subject to dT * sum_{t <= D_l} R_t >= Q_l   for every deadline l

Expected power is convex in the rate and the marginal energy per bit at
water level nu is nu * ln2 / W whatever the gain, so at the optimum the
water level is constant between binding deadlines and never rises over
time.  ``per_user_plan`` builds that staircase directly: repeatedly take
the deadline needing the highest common level from the current frame,
fix that block, and move on.  The per-BS power limit is only checked
afterwards.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
import math

import numpy as np

from peddpg import waterfill
from peddpg.sim import StreamingEnv

__all__ = [
    "InfeasiblePlanError",
    "EpisodePlan",
    "per_user_plan",
    "kkt_residual",
    "plan_energy",
    "equal_rate_plan",
    "just_in_time_plan",
    "plan_episode",
    "evaluate_plan",
    "write_plan_csv",
]

LN2 = math.log(2.0)


class InfeasiblePlanError(ValueError):
    pass


@dataclass
class EpisodePlan:
    rates: np.ndarray  # (T, K) bits/s
    expected_energy: np.ndarray  # (T, K) J
    qos_feasible: np.ndarray  # (K,)
    power_feasible: np.ndarray  # (T,) every BS within P_max in expectation
    kkt_residual: float

    @property
    def total_energy(self) -> float:
        return float(self.expected_energy.sum())


def _capped_rates(alpha, nu, bandwidth, noise_power, ceiling):
    r = waterfill.expected_rate(alpha, nu, bandwidth, noise_power)
    return r if ceiling is None else np.minimum(r, ceiling)


def _level_for_bits(alpha, bits, bandwidth, noise_power, frame_duration, ceiling):
    """Common water level over frames ``alpha`` delivering ``bits`` in total."""
    if bits <= 0:
        return 0.0
    if ceiling is not None and ceiling * frame_duration * len(alpha) < bits * (1 - 1e-12):
        return math.inf

    def delivered(nu):
        return frame_duration * float(_capped_rates(alpha, nu, bandwidth, noise_power, ceiling).sum())

    hi = noise_power / float(np.max(alpha))
    while delivered(hi) < bits:
        hi *= 2.0
    lo = hi
    while delivered(lo) > bits:
        lo *= 0.5
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        if delivered(mid) < bits:
            lo = mid
        else:
            hi = mid
        if hi / lo - 1.0 < 1e-13:
            break
    return hi


def per_user_plan(gains, deadlines, requirements, bandwidth, noise_power, frame_duration, ceiling=None):
    """Energy-minimal average rates for one user.

    ``deadlines`` are 1-based frame indices (increasing) and
    ``requirements`` the cumulative bits due by each.  Returns rates of
    shape (T,).
    """
    gains = np.asarray(gains, dtype=float)
    deadlines = [int(d) for d in deadlines]
    reqs = np.maximum.accumulate(np.asarray(requirements, dtype=float))
    T = len(gains)
    if any(d < 1 or d > T for d in deadlines):
        raise ValueError("deadline outside the horizon")
    if ceiling is not None:
        for d, q in zip(deadlines, reqs):
            if ceiling * frame_duration * d < q * (1 - 1e-12):
                raise InfeasiblePlanError(f"{q:.6g} bits by frame {d} exceed the rate ceiling")
    levels = np.zeros(T)
    start = 0
    delivered = 0.0
    pending = list(zip(deadlines, reqs))
    while pending:
        best = None
        for j, (d, q) in enumerate(pending):
            nu = _level_for_bits(gains[start:d], q - delivered, bandwidth, noise_power, frame_duration, ceiling)
            if best is None or nu >= best[0]:
                best = (nu, j)
        nu, j = best
        d, q = pending[j]
        levels[start:d] = nu
        if nu > 0:
            delivered = q
        start = d
        pending = pending[j + 1 :]
    rates = _capped_rates(gains, levels, bandwidth, noise_power, ceiling)
    return np.where(levels > 0, rates, 0.0)


def kkt_residual(rates, gains, deadlines, requirements, bandwidth, noise_power, frame_duration, ceiling=None):
    """Relative KKT violation of a single-user plan, recomputed from its rates.

    Checks primal feasibility, monotone (non-negative multiplier) water
    levels, and complementary slackness: the level may only drop right
    after a deadline that is met with equality.
    """
    rates = np.asarray(rates, dtype=float)
    gains = np.asarray(gains, dtype=float)
    sol = waterfill.water_level_for_rate(gains, rates, bandwidth, noise_power, tol_rel=1e-13, tol_abs=0.0)
    nu = sol.water_level
    cum = frame_duration * np.cumsum(rates)
    scale = max(float(np.max(requirements)), 1.0)
    res = 0.0
    for d, q in zip(deadlines, requirements):
        res = max(res, (q - cum[d - 1]) / scale)
    at_cap = np.zeros(len(rates), dtype=bool) if ceiling is None else rates >= ceiling * (1 - 1e-9)
    free = (rates > 0) & ~at_cap
    if free.any():
        ref = float(np.max(nu[free]))
        is_deadline = np.zeros(len(rates) + 1, dtype=bool)
        is_deadline[list(deadlines)] = True
        tight = np.zeros(len(rates) + 1, dtype=bool)
        for d, q in zip(deadlines, requirements):
            tight[d] = abs(cum[d - 1] - q) <= 1e-6 * scale
        idx = np.flatnonzero(free)
        for a, b in zip(idx[:-1], idx[1:]):
            drop = (nu[a] - nu[b]) / ref
            res = max(res, -drop)  # level may not rise
            if drop > 1e-6:
                # a drop needs a tight deadline somewhere in (a, b]
                if not tight[a + 1 : b + 1].any():
                    res = max(res, drop)
        # frames left at zero before the last deadline must not be worth using
        last = max(deadlines)
        for t in np.flatnonzero(rates[:last] <= 0):
            later = idx[idx > t]
            if later.size and not is_deadline[t + 1 : later[0] + 1].any():
                res = max(res, nu[later[0]] / ref)
    return float(res)


def plan_energy(rates, gains, bandwidth, noise_power, frame_duration, efficiency=1.0):
    return waterfill.expected_energy(gains, rates, bandwidth, noise_power, frame_duration, efficiency)


def _schedule(env: StreamingEnv):
    cfg = env.config
    deadlines = [l * cfg.frames_per_segment for l in range(1, cfg.segments_per_video)]
    reqs = np.array([env.requirement(l) for l in range(1, cfg.segments_per_video)])  # (L, K)
    return deadlines, reqs


def equal_rate_plan(deadlines, requirements, horizon, frame_duration):
    """Constant rate up to the last deadline, just fast enough for every deadline."""
    r = max(q / (d * frame_duration) for d, q in zip(deadlines, requirements))
    rates = np.zeros(horizon)
    rates[: max(deadlines)] = r
    return rates


def just_in_time_plan(deadlines, requirements, horizon, frame_duration):
    """Deliver each increment of the requirement inside its own deadline frame."""
    rates = np.zeros(horizon)
    prev = 0.0
    for d, q in zip(deadlines, requirements):
        rates[d - 1] += max(q - prev, 0.0) / frame_duration
        prev = max(prev, q)
    return rates


def plan_episode(env: StreamingEnv, seed=None, ceiling=True) -> EpisodePlan:
    """Oracle plan for the episode ``env.reset(seed)`` would start."""
    cfg = env.config
    gains, assoc = env.large_scale_trajectory(seed=seed)
    T, K = gains.shape
    deadlines, reqs = _schedule(env)
    cap = env.rate_ceiling if ceiling else None
    rates = np.zeros((T, K))
    qos = np.ones(K, dtype=bool)
    kkt = 0.0
    for k in range(K):
        try:
            rates[:, k] = per_user_plan(
                gains[:, k], deadlines, reqs[:, k], cfg.bandwidth, cfg.noise_power, cfg.frame_duration, cap
            )
        except InfeasiblePlanError:
            qos[k] = False
            rates[:, k] = np.minimum(just_in_time_plan(deadlines, reqs[:, k], T, cfg.frame_duration), env.rate_ceiling)
            continue
        kkt = max(
            kkt,
            kkt_residual(
                rates[:, k], gains[:, k], deadlines, reqs[:, k], cfg.bandwidth, cfg.noise_power, cfg.frame_duration, cap
            ),
        )
    sol = waterfill.water_level_for_rate(gains, rates, cfg.bandwidth, cfg.noise_power)
    energy = sol.expected_power * cfg.frame_duration / cfg.amplifier_efficiency
    per_bs = np.zeros((T, cfg.num_bs))
    np.add.at(per_bs, (np.arange(T)[:, None].repeat(K, 1), assoc), sol.expected_power)
    power_ok = np.all(per_bs <= cfg.max_bs_power, axis=1)
    return EpisodePlan(rates=rates, expected_energy=energy, qos_feasible=qos, power_feasible=power_ok, kkt_residual=kkt)


def evaluate_plan(plan: EpisodePlan | np.ndarray, env: StreamingEnv, seed=None) -> dict:
    """Execute a (T, K) rate schedule through the environment."""
    rates = plan.rates if isinstance(plan, EpisodePlan) else np.asarray(plan, dtype=float)
    env.reset(seed=seed)
    if rates.ndim != 2 or rates.shape[1] != env.config.num_users:
        raise ValueError(f"plan shape {rates.shape} does not match {env.config.num_users} users")
    total = {"return": 0.0, "energy": 0.0, "penalty": 0.0, "stalls": 0, "frames": 0}
    while not env.done:
        if env.t > len(rates):
            raise ValueError(f"plan covers {len(rates)} frames but the episode continues")
        out = env.step(rates[env.t - 1])
        total["return"] += out.reward
        total["energy"] += float(out.per_user_energy.sum())
        total["penalty"] += out.penalty_term
        total["stalls"] += int(out.stalls.sum())
        total["frames"] += 1
    return total


def write_plan_csv(path, plan: EpisodePlan):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user", "frame", "rate", "expected_energy"])
        T, K = plan.rates.shape
        for k in range(K):
            for t in range(T):
                w.writerow([k, t + 1, repr(float(plan.rates[t, k])), repr(float(plan.expected_energy[t, k]))])
