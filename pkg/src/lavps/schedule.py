"""Diffusion time discretisation, forward coefficients and Gaussian bridges."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

SCHEDULE_KINDS = ("linear-flow",)


@dataclass(frozen=True)
class NoiseSchedule:
    """Forward noising coefficients ``alpha[t]``, ``sigma[t]`` for ``t = 0..T``.

    ``x_t = alpha[t] * x_0 + sigma[t] * w`` with ``w ~ N(0, I)``.
    """

    T: int
    alpha: np.ndarray = field(repr=False)
    sigma: np.ndarray = field(repr=False)
    kind: str = "linear-flow"

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if alpha.shape != (self.T + 1,) or sigma.shape != (self.T + 1,):
            raise ValueError("alpha and sigma must have T + 1 entries")
        if alpha[0] != 1.0 or sigma[0] != 0.0:
            raise ValueError("schedule must start at alpha[0] = 1, sigma[0] = 0")
        if np.any(alpha[:-1] <= 0):
            raise ValueError("alpha[t] must be positive for t < T")
        if np.any(sigma[1:] <= 0):
            raise ValueError("sigma[t] must be positive for t >= 1")
        snr = alpha[1:] ** 2 / sigma[1:] ** 2
        if np.any(np.diff(snr) >= 0):
            raise ValueError("signal-to-noise ratio must be strictly decreasing")
        alpha.setflags(write=False)
        sigma.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "sigma", sigma)

    def snr(self, t):
        t = np.asarray(t)
        return self.alpha[t] ** 2 / self.sigma[t] ** 2

    def to_dict(self) -> dict:
        return {"T": self.T, "kind": self.kind}


class TransitionCoeffs(NamedTuple):
    alpha_ts: float | np.ndarray
    var_ts: float | np.ndarray


class BridgeStats(NamedTuple):
    mean_coeff_x0: float | np.ndarray
    mean_coeff_xt: float | np.ndarray
    variance: float | np.ndarray

    def mean(self, x0, xt):
        c0 = np.asarray(self.mean_coeff_x0)[..., None]
        ct = np.asarray(self.mean_coeff_xt)[..., None]
        return c0 * x0 + ct * xt


def make_schedule(T: int, kind: str = "linear-flow") -> NoiseSchedule:
    """Build a schedule with ``T`` forward steps.

    Only the linear-flow schedule ``alpha_t = 1 - t/T``, ``sigma_t = t/T``
    is available.
    """
    if not isinstance(T, (int, np.integer)) or isinstance(T, bool):
        raise TypeError(f"T must be an integer, got {T!r}")
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if kind not in SCHEDULE_KINDS:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    grid = np.arange(T + 1, dtype=np.float64) / T
    return NoiseSchedule(T=int(T), alpha=1.0 - grid, sigma=grid, kind=kind)


def _check_order(sched: NoiseSchedule, s, t):
    s = np.asarray(s)
    t = np.asarray(t)
    if np.any(s < 0) or np.any(t > sched.T):
        raise ValueError(f"timesteps must lie in [0, {sched.T}]")
    if np.any(s > t):
        raise ValueError("transition requires s <= t")
    return s, t


def _scalarise(x):
    return float(x) if np.ndim(x) == 0 else x


def transition(sched: NoiseSchedule, s, t) -> TransitionCoeffs:
    """Coefficients of the forward transition ``q_{t|s}``."""
    s, t = _check_order(sched, s, t)
    alpha_s = sched.alpha[s]
    if np.any(alpha_s == 0):
        raise ValueError("alpha[s] = 0: transition from the terminal step is degenerate")
    alpha_ts = sched.alpha[t] / alpha_s
    var_ts = sched.sigma[t] ** 2 - alpha_ts**2 * sched.sigma[s] ** 2
    # exact zero on the diagonal, clip rounding noise elsewhere
    var_ts = np.where(s == t, 0.0, np.maximum(var_ts, 0.0))
    alpha_ts = np.where(s == t, 1.0, alpha_ts)
    return TransitionCoeffs(_scalarise(alpha_ts), _scalarise(var_ts))


def bridge(sched: NoiseSchedule, s, t) -> BridgeStats:
    """Mean coefficients and variance of ``q(x_s | x_0, x_t)``.

    The mean is ``gamma * alpha_s * x_0 + (1 - gamma) / alpha_{t|s} * x_t`` with
    ``gamma = var_{t|s} / sigma_t^2``; the ``x_t`` coefficient is evaluated as
    ``alpha_{t|s} sigma_s^2 / sigma_t^2`` which stays finite when ``alpha_t = 0``.
    """
    s, t = _check_order(sched, s, t)
    if np.any(t < 1):
        raise ValueError("bridge requires t >= 1")
    at, st = sched.alpha[t], sched.sigma[t]
    as_, ss = sched.alpha[s], sched.sigma[s]
    same = s == t
    safe_as = np.where(as_ == 0, 1.0, as_)
    alpha_ts = np.where(same, 1.0, at / safe_as)
    var_ts = np.where(same, 0.0, np.maximum(st**2 - alpha_ts**2 * ss**2, 0.0))
    gamma = var_ts / st**2
    coeff_x0 = gamma * as_
    coeff_xt = np.where(same, 1.0, alpha_ts * ss**2 / st**2)
    variance = var_ts * ss**2 / st**2
    return BridgeStats(_scalarise(coeff_x0), _scalarise(coeff_xt), _scalarise(variance))


def coarse_grid(T: int, K: int) -> np.ndarray:
    """Strictly increasing integer grid ``t_0 = 0 < ... < t_K = T``.

    Points are ``round(k T / K)``; collisions (only possible when ``K`` is close to
    ``T``) are pushed forward by one step.
    """
    if K < 2 or K > T:
        raise ValueError(f"K must satisfy 2 <= K <= T, got K={K}, T={T}")
    grid = np.rint(np.arange(K + 1) * T / K).astype(np.int64)
    for k in range(1, K + 1):
        if grid[k] <= grid[k - 1]:
            grid[k] = grid[k - 1] + 1
    if grid[-1] != T:
        raise ValueError("could not build a strictly increasing grid")
    return grid


def switch_bound(T: int, r_switch: float) -> int:
    """Largest timestep of ``{1, ..., ceil((1 - r_switch) T)}``."""
    if not 0.0 <= r_switch <= 1.0:
        raise ValueError(f"r_switch must lie in [0, 1], got {r_switch}")
    # guard against 0.2 * 1000 = 200.00000000000003
    return int(math.ceil(round((1.0 - r_switch) * T, 9)))
