"""Diagonal-Gaussian variational fit of the midpoint conditional.

For a context ``c = (x0, x_t, s, t, y, A)`` the target is

    pi(x_s) ∝ g(y | D_s(x_s), A) · q(x_s | x0, x_t)

and the objective is the single-sample reparameterised estimate of
``KL(N(mu, diag rho) || pi)`` without the target's normaliser.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ._utils import sigmoid, softplus, softplus_inv
from .operators import DegradationOperator, guidance_log_likelihood_grad
from .schedule import NoiseSchedule, bridge

RHO_FLOOR = 1e-8
LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True, eq=False)
class VariationalParams:
    """Mean ``mu`` and diagonal variance ``rho = softplus(rho_raw) + RHO_FLOOR``.

    Arrays may carry a leading batch axis; every operation acts row-wise.
    """

    mu: np.ndarray
    rho_raw: np.ndarray

    @property
    def rho(self) -> np.ndarray:
        return softplus(self.rho_raw) + RHO_FLOOR

    @classmethod
    def from_variance(cls, mu, rho) -> "VariationalParams":
        rho = np.asarray(rho, dtype=np.float64)
        if np.any(~(rho > 0)):
            raise ValueError("variances must be positive")
        excess = np.maximum(rho - RHO_FLOOR, RHO_FLOOR)
        return cls(np.asarray(mu, dtype=np.float64), softplus_inv(excess))

    def as_dict(self) -> dict:
        return {"mu": self.mu, "rho_raw": self.rho_raw}


@dataclass(frozen=True, eq=False)
class Context:
    """One inner problem: endpoints ``x0, x_t``, times ``s < t`` and the observation.

    ``x0``/``x_t`` are ``(d,)`` or ``(n, d)``; ``s``/``t`` are shared by all rows
    or given per row. ``op = None`` switches the likelihood term off.
    """

    x0: np.ndarray
    x_t: np.ndarray
    s: int | np.ndarray
    t: int | np.ndarray
    y: np.ndarray | None
    op: DegradationOperator | None

    def __post_init__(self):
        s, t = np.asarray(self.s), np.asarray(self.t)
        if np.any(s < 1) or np.any(s >= t):
            raise ValueError("context requires 1 <= s < t")
        if np.shape(self.x0) != np.shape(self.x_t):
            raise ValueError("x0 and x_t must have the same shape")
        if (self.op is None) != (self.y is None):
            raise ValueError("y and op must be given together")

    def with_observation(self, y, op) -> "Context":
        return replace(self, y=y, op=op)


# --------------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    """Adam accumulators for a dict of parameter arrays."""

    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params, grad):
    """One bias-corrected Adam update; returns ``(new_state, new_params)``.

    ``params``/``grad`` are dicts of arrays or :class:`VariationalParams`. Inputs
    are not modified.
    """
    wrap = isinstance(params, VariationalParams)
    p = params.as_dict() if wrap else params
    g = grad.as_dict() if isinstance(grad, VariationalParams) else grad
    step = state.step + 1
    bc1 = 1.0 - state.beta1**step
    bc2 = 1.0 - state.beta2**step
    new_m, new_v, new_p = {}, {}, {}
    for key, val in p.items():
        gk = np.asarray(g[key], dtype=np.float64)
        m = state.m.get(key, np.zeros_like(gk))
        v = state.v.get(key, np.zeros_like(gk))
        m = state.beta1 * m + (1.0 - state.beta1) * gk
        v = state.beta2 * v + (1.0 - state.beta2) * gk * gk
        new_m[key], new_v[key] = m, v
        new_p[key] = val - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    new_state = replace(state, step=step, m=new_m, v=new_v)
    if wrap:
        return new_state, VariationalParams(new_p["mu"], new_p["rho_raw"])
    return new_state, new_p


def cosine_lr(base_lr: float, step: int, total: int) -> float:
    """Cosine decay from ``base_lr`` to zero over ``total`` steps."""
    if total <= 1:
        return base_lr
    return 0.5 * base_lr * (1.0 + np.cos(np.pi * step / total))


# --------------------------------------------------------------------------- objective


def zero_shot_init(sched: NoiseSchedule, ctx: Context) -> VariationalParams:
    """Bridge statistics of ``q(x_s | x0, x_t)``, independent of ``y`` and ``A``."""
    mean, var = _bridge_moments(sched, ctx)
    return VariationalParams.from_variance(mean, np.broadcast_to(var, mean.shape))


def _bridge_moments(sched, ctx):
    st = bridge(sched, ctx.s, ctx.t)
    x0 = np.asarray(ctx.x0, dtype=np.float64)
    xt = np.asarray(ctx.x_t, dtype=np.float64)
    if np.ndim(ctx.s) == 0 and np.ndim(ctx.t) == 0:
        mean = st.mean_coeff_x0 * x0 + st.mean_coeff_xt * xt
        var = np.full(x0.shape, st.variance)
    else:
        mean = st.mean(x0, xt)
        var = np.broadcast_to(np.asarray(st.variance)[..., None], x0.shape).copy()
    return mean, var


def objective_terms(mu, rho, ctx: Context, model, sched: NoiseSchedule, eps, bridge_moments=None):
    """Single-sample objective and its gradients w.r.t. ``mu`` and ``rho``.

    Returns ``(L, dL/dmu, dL/drho)`` with ``L`` of shape ``mu.shape[:-1]``.
    Shared by the sampler inner loop and inference-model training.
    """
    mu = np.asarray(mu, dtype=np.float64)
    rho = np.asarray(rho, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != mu.shape:
        raise ValueError(f"eps shape {eps.shape} does not match params {mu.shape}")
    m_b, v_b = bridge_moments if bridge_moments is not None else _bridge_moments(sched, ctx)
    sd = np.sqrt(rho)
    x_s = mu + sd * eps

    log_q = -0.5 * (LOG_2PI + np.log(rho) + eps**2).sum(-1)
    dev = x_s - m_b
    neg_log_bridge = 0.5 * (LOG_2PI + np.log(v_b) + dev**2 / v_b).sum(-1)
    u = dev / v_b  # d(-log bridge)/dx_s
    value = log_q + neg_log_bridge
    if ctx.op is not None:
        loglik, g = guidance_log_likelihood_grad(ctx.op, ctx.y, model, sched, ctx.s, x_s)
        value = value - loglik
        u = u - g
        _check_finite(loglik, "guidance log-likelihood")
    _check_finite(log_q, "variational entropy term")
    _check_finite(neg_log_bridge, "bridge log-density")
    grad_mu = u
    grad_rho = -0.5 / rho + u * eps / (2.0 * sd)
    return value, grad_mu, grad_rho


def _check_finite(val, name):
    if not np.all(np.isfinite(val)):
        raise FloatingPointError(f"non-finite value in the {name}")


def objective(params: VariationalParams, ctx: Context, model, sched: NoiseSchedule, eps):
    """Single-sample estimate of the KL objective at ``params`` with noise ``eps``."""
    value, _, _ = objective_terms(params.mu, params.rho, ctx, model, sched, eps)
    return value


def objective_grad(params: VariationalParams, ctx: Context, model, sched: NoiseSchedule, eps):
    """Pathwise gradient w.r.t. ``(mu, rho_raw)``, returned as ``VariationalParams``."""
    _, g_mu, g_rho = objective_terms(params.mu, params.rho, ctx, model, sched, eps)
    return VariationalParams(g_mu, g_rho * sigmoid(params.rho_raw))


def objective_and_grad(params: VariationalParams, ctx: Context, model, sched, eps, bridge_moments=None):
    value, g_mu, g_rho = objective_terms(params.mu, params.rho, ctx, model, sched, eps, bridge_moments)
    return value, VariationalParams(g_mu, g_rho * sigmoid(params.rho_raw))
