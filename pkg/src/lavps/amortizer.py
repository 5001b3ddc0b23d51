"""Inference model predicting warm starts for the inner variational problems.

The network outputs a residual on top of the zero-shot bridge statistics:

    mu  = m_bridge + f_mean(c)
    rho = v_bridge + f_var(c),   f_var(c) = v_bridge * (pos(1 + h(c)) - 1)

where ``h`` is the raw variance head and ``pos`` is the identity above
``POS_KNEE`` with a smooth exponential tail below it, so ``rho > 0`` always.
The last layer is zero-initialised: an untrained model reproduces the zero-shot
initialisation exactly.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array

from ._utils import as_generator
from .checkpoint import load_checkpoint, save_checkpoint
from .nn import EMBED_DIM, MLP, time_embedding
from .operators import DegradationOperator, OperatorFamily, descriptor_dim, observe
from .prior import GaussianMixture, sample_prior
from .schedule import NoiseSchedule, coarse_grid, switch_bound
from .variational import (
    AdamState,
    Context,
    adam_step,
    cosine_lr,
    VariationalParams,
    _bridge_moments,
    objective_terms,
)

logger = logging.getLogger(__name__)

POS_KNEE = 0.1


def _pos(u):
    """Identity on ``[POS_KNEE, inf)``, ``POS_KNEE * exp(u / POS_KNEE - 1)`` below (C1)."""
    u = np.asarray(u, dtype=np.float64)
    tail = POS_KNEE * np.exp(np.minimum(u, POS_KNEE) / POS_KNEE - 1.0)
    return np.where(u >= POS_KNEE, u, tail)


def _pos_grad(u):
    u = np.asarray(u, dtype=np.float64)
    return np.where(u >= POS_KNEE, 1.0, np.exp(np.minimum(u, POS_KNEE) / POS_KNEE - 1.0))


@dataclass
class AmortizerTrainConfig:
    """Training settings; ``K=None`` trains on the fine grid (``s = t - 1``)."""

    steps: int = 3000
    batch: int = 128
    ops_per_batch: int = 8
    lr: float = 1e-3
    r_switch: float = 0.8
    K: int | None = None
    omega: tuple = (1.0,)

    def validate(self, T: int):
        if self.steps < 0 or self.batch < 1 or not self.lr > 0:
            raise ValueError(f"invalid amortizer training config {self}")
        if self.ops_per_batch < 1 or self.batch % self.ops_per_batch:
            raise ValueError("batch must be a multiple of ops_per_batch")
        if len(candidate_times(T, self.r_switch, self.K)[0]) == 0:
            raise ValueError(f"r_switch={self.r_switch} leaves no usable timestep")
        _check_omega(self.omega)


def _check_omega(omega):
    w = np.asarray(omega, dtype=np.float64)
    if w.ndim != 1 or w.size == 0 or np.any(w < 0) or not w.sum() > 0:
        raise ValueError(f"omega must be a non-empty vector of non-negative weights, got {omega}")
    return w


def candidate_times(T: int, r_switch: float, K: int | None):
    """Grid indices and times ``t`` in the switch subset that admit a midpoint ``s >= 1``."""
    grid = np.arange(T + 1) if K is None else coarse_grid(T, K)
    bound = switch_bound(T, r_switch)
    idx = np.flatnonzero((grid <= bound) & (np.arange(len(grid)) >= 2))
    return idx, grid


def draw_midpoint_lag(omega, max_lag: int, rng) -> int:
    """Lag ``l >= 1`` (so ``s = grid[k - l]``) from the truncated weights ``omega``."""
    w = _check_omega(omega)[:max_lag]
    if not w.sum() > 0:
        return 1
    if np.count_nonzero(w) == 1:
        return int(np.flatnonzero(w)[0]) + 1
    return int(rng.choice(w.size, p=w / w.sum())) + 1


def sample_contexts(gm: GaussianMixture, sched: NoiseSchedule, model_theta, fam: OperatorFamily,
                    cfg: AmortizerTrainConfig, rng, n: int, X=None):
    """Draw ``n`` training contexts sharing one operator.

    ``x ~ p_data, A ~ p_op, y ~ g(.|x, A), t ~ U(T_switch), s | t ~ omega,
    x_t ~ q_{t|0}(x), x0 := D_t(x_t)``. Returns ``(Context, clean x)``.
    """
    rng = as_generator(rng)
    if X is None:
        x = sample_prior(gm, n, rng)
    else:
        x = X[rng.integers(0, len(X), size=n)]
    op = fam.sample(rng)
    y = observe(op, x, rng)
    idx, grid = candidate_times(sched.T, cfg.r_switch, cfg.K)
    k = idx[rng.integers(0, len(idx), size=n)]
    lags = np.array([draw_midpoint_lag(cfg.omega, int(kk) - 1, rng) for kk in k])
    t = grid[k]
    s = grid[k - lags]
    noise = rng.standard_normal(x.shape)
    x_t = sched.alpha[t][:, None] * x + sched.sigma[t][:, None] * noise
    x0 = model_theta.denoise(sched, t, x_t)
    return Context(x0, x_t, s, t, y, op), x


def sample_context(gm, sched, model_theta, fam, cfg, rng) -> Context:
    """Single context (1-D arrays, scalar timesteps)."""
    ctx, _ = sample_contexts(gm, sched, model_theta, fam, cfg, rng, 1)
    return Context(ctx.x0[0], ctx.x_t[0], int(ctx.s[0]), int(ctx.t[0]), ctx.y[0], ctx.op)


class InferenceModel(BaseEstimator):
    """Amortised warm-start ``c -> (mu, rho)`` for the inner variational problem.

    Inputs to the network are ``x0``, ``x_t``, separate embeddings of ``t`` and
    ``s``, the adjoint lift ``A^T y`` and an operator descriptor.
    """

    def __init__(self, schedule: NoiseSchedule | None = None, denoiser=None, family: OperatorFamily | None = None,
                 hidden=(256, 256, 256), steps=3000, batch_size=128, ops_per_batch=8, lr=1e-3,
                 r_switch=0.8, K=None, omega=(1.0,), random_state=None):
        self.schedule = schedule
        self.denoiser = denoiser
        self.family = family
        self.hidden = hidden
        self.steps = steps
        self.batch_size = batch_size
        self.ops_per_batch = ops_per_batch
        self.lr = lr
        self.r_switch = r_switch
        self.K = K
        self.omega = omega
        self.random_state = random_state

    def _config(self) -> AmortizerTrainConfig:
        return AmortizerTrainConfig(self.steps, self.batch_size, self.ops_per_batch, self.lr,
                                    self.r_switch, self.K, tuple(self.omega))

    def initialize(self, dim: int):
        """Untrained model (zero residual head)."""
        self.dim_ = int(dim)
        n_in = 3 * dim + 2 * EMBED_DIM + descriptor_dim(dim)
        self.net_ = MLP([n_in, *self.hidden, 2 * dim], rng=as_generator(self.random_state), zero_last=True)
        self.loss_curve_ = []
        self.switch_bound_ = switch_bound(self.schedule.T, self.r_switch)
        return self

    def _check_fitted(self):
        if not hasattr(self, "net_"):
            raise NotFittedError("InferenceModel is not initialised; call fit() or initialize()")

    def features(self, sched: NoiseSchedule, ctx: Context) -> np.ndarray:
        x0 = np.atleast_2d(ctx.x0)
        n, d = x0.shape
        emb_t = np.broadcast_to(time_embedding(ctx.t, sched.T), (n, EMBED_DIM))
        emb_s = np.broadcast_to(time_embedding(ctx.s, sched.T), (n, EMBED_DIM))
        if ctx.op is None:
            lift = np.zeros((n, d))
            desc = np.zeros((n, descriptor_dim(d)))
        else:
            lift = np.atleast_2d(ctx.op.adjoint(ctx.y))
            lift = np.broadcast_to(lift, (n, d))
            desc = np.broadcast_to(ctx.op.descriptor(), (n, descriptor_dim(d)))
        return np.concatenate([x0, np.atleast_2d(ctx.x_t), emb_t, emb_s, lift, desc], axis=1)

    def _heads(self, sched, ctx, cache=False):
        self._check_fitted()
        inp = self.features(sched, ctx)
        if cache:
            out, acts = self.net_.forward(inp, cache=True)
        else:
            out, acts = self.net_.forward(inp), None
        d = self.dim_
        return out[:, :d], out[:, d:], acts

    def infer(self, sched: NoiseSchedule, ctx: Context) -> VariationalParams:
        single = np.ndim(ctx.x0) == 1
        m_b, v_b = _bridge_moments(sched, ctx)
        h_mean, h_var, _ = self._heads(sched, ctx)
        if single:
            h_mean, h_var = h_mean[0], h_var[0]
        mu = m_b + h_mean
        rho = v_b * _pos(1.0 + h_var)
        return VariationalParams.from_variance(mu, rho)

    def loss_and_grads(self, sched, ctx: Context, eps):
        """Mean single-sample objective over the rows of ``ctx`` and its parameter gradients."""
        model = self.denoiser
        m_b, v_b = _bridge_moments(sched, ctx)
        h_mean, h_var, acts = self._heads(sched, ctx, cache=True)
        mu = m_b + h_mean
        u = 1.0 + h_var
        rho = v_b * _pos(u)
        value, g_mu, g_rho = objective_terms(mu, rho, ctx, model, sched, eps, (m_b, v_b))
        n = len(value)
        g_hvar = g_rho * v_b * _pos_grad(u)
        grads = self.net_.backward(acts, np.concatenate([g_mu, g_hvar], axis=1) / n)
        return value, grads

    def _train(self, gm, X, rng):
        sched = self.schedule
        cfg = self._config()
        cfg.validate(sched.T)
        if self.denoiser is None or self.family is None:
            raise ValueError("InferenceModel.fit needs a denoiser and an operator family")
        state = AdamState(lr=cfg.lr)
        per_op = cfg.batch // cfg.ops_per_batch
        for step in range(cfg.steps):
            total = None
            losses = []
            for _ in range(cfg.ops_per_batch):
                ctx, _ = sample_contexts(gm, sched, self.denoiser, self.family, cfg, rng, per_op, X)
                eps = rng.standard_normal(ctx.x0.shape)
                try:
                    value, grads = self.loss_and_grads(sched, ctx, eps)
                except FloatingPointError as exc:
                    raise FloatingPointError(f"{exc}; offending context: {_dump_context(ctx)}") from exc
                if not (np.all(np.isfinite(value)) and all(np.all(np.isfinite(g)) for g in grads.values())):
                    raise FloatingPointError(f"non-finite amortizer loss; offending context: {_dump_context(ctx)}")
                losses.append(value.mean())
                if total is None:
                    total = grads
                else:
                    for key in total:
                        total[key] = total[key] + grads[key]
            for key in total:
                total[key] = total[key] / cfg.ops_per_batch
            state = replace(state, lr=cosine_lr(cfg.lr, step, cfg.steps))
            state, self.net_.params = adam_step(state, self.net_.params, total)
            self.loss_curve_.append(float(np.mean(losses)))
            if step % 500 == 0:
                logger.info("amortizer step %d loss %.5f", step, self.loss_curve_[-1])
        return self

    def fit(self, X, y=None):
        """Train on clean samples ``X`` (rows are signals)."""
        X = check_array(X, dtype=np.float64)
        rng = as_generator(self.random_state)
        self.initialize(X.shape[1])
        return self._train(None, X, rng)

    def fit_prior(self, gm: GaussianMixture):
        rng = as_generator(self.random_state)
        self.initialize(gm.dim)
        return self._train(gm, None, rng)

    def save(self, path) -> None:
        self._check_fitted()
        meta = {"model": "inference_model", "dim": self.dim_, "hidden": list(self.hidden),
                "T": self.schedule.T, "r_switch": self.r_switch, "K": self.K,
                "omega": list(self.omega)}
        save_checkpoint(path, self.net_.state_dict(), meta)

    @classmethod
    def load(cls, path, schedule: NoiseSchedule, denoiser=None) -> "InferenceModel":
        tensors, meta = load_checkpoint(path)
        if meta.get("model") != "inference_model":
            raise ValueError(f"{path} is not an inference-model checkpoint")
        if meta["T"] != schedule.T:
            raise ValueError(f"checkpoint trained with T={meta['T']}, schedule has T={schedule.T}")
        model = cls(schedule=schedule, denoiser=denoiser, hidden=tuple(meta["hidden"]),
                    r_switch=meta["r_switch"], K=meta["K"], omega=tuple(meta["omega"]))
        model.initialize(meta["dim"])
        model.net_.load_state_dict(tensors)
        return model


def _dump_context(ctx: Context) -> str:
    rec = {
        "x0": np.asarray(ctx.x0).tolist(),
        "x_t": np.asarray(ctx.x_t).tolist(),
        "s": np.asarray(ctx.s).tolist(),
        "t": np.asarray(ctx.t).tolist(),
        "y": None if ctx.y is None else np.asarray(ctx.y).tolist(),
        "op": None if ctx.op is None else ctx.op.to_dict(),
    }
    return json.dumps(rec)


def infer(model: InferenceModel, sched: NoiseSchedule, ctx: Context) -> VariationalParams:
    return model.infer(sched, ctx)


def train_amortizer(gm: GaussianMixture, sched: NoiseSchedule, model_theta, fam: OperatorFamily,
                    cfg: AmortizerTrainConfig, rng=None, hidden=(256, 256, 256)) -> InferenceModel:
    """Fit an :class:`InferenceModel` on contexts drawn from ``gm`` and ``fam``."""
    seed = int(as_generator(rng).integers(2**63))
    model = InferenceModel(sched, model_theta, fam, hidden, cfg.steps, cfg.batch, cfg.ops_per_batch,
                           cfg.lr, cfg.r_switch, cfg.K, tuple(cfg.omega), seed)
    return model.fit_prior(gm)
