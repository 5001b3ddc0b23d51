"""Denoisers ``D_t(x) ≈ E[X_0 | X_t = x]``: exact mixture denoiser and a small MLP.

Both expose ``denoise(sched, t, x)`` and ``denoise_vjp(sched, t, x, v)`` on row
batches; the samplers only rely on that pair.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array

from ._utils import as_generator
from .checkpoint import load_checkpoint, save_checkpoint
from .nn import EMBED_DIM, MLP, time_embedding
from .prior import GaussianMixture, exact_denoiser, exact_denoiser_vjp, sample_prior
from .schedule import NoiseSchedule
from .variational import AdamState, adam_step, cosine_lr

logger = logging.getLogger(__name__)


class AnalyticDenoiser:
    """Exact denoiser of a :class:`GaussianMixture` prior."""

    kind = "analytic"

    def __init__(self, gm: GaussianMixture):
        self.gm = gm
        self.n_calls = 0

    @property
    def dim(self) -> int:
        return self.gm.dim

    def denoise(self, sched: NoiseSchedule, t, x_t):
        self.n_calls += 1
        return exact_denoiser(self.gm, sched, t, x_t)

    def denoise_vjp(self, sched: NoiseSchedule, t, x_t, v):
        self.n_calls += 1
        return exact_denoiser_vjp(self.gm, sched, t, x_t, v)


@dataclass
class DenoiserTrainConfig:
    steps: int = 2000
    batch: int = 256
    lr: float = 1e-3
    weights: np.ndarray | None = field(default=None)  # w_t for t = 1..T; None -> all ones

    def time_weights(self, T: int) -> np.ndarray:
        if self.weights is None:
            return np.ones(T)
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (T,):
            raise ValueError(f"denoiser weights must have length T={T}, got {w.shape}")
        if np.any(w < 0) or not np.any(w > 0):
            raise ValueError("denoiser weights must be non-negative with at least one positive entry")
        return w

    def validate(self):
        if self.steps < 0 or self.batch < 1 or not self.lr > 0:
            raise ValueError(f"invalid denoiser training config {self}")


class MLPDenoiser(BaseEstimator):
    """Learned denoiser ``D_t(x) = c_skip x + c_out F(c_in x, embed(t))``.

    ``F`` is a ``tanh`` MLP. With data scale ``v = sigma_data^2`` and
    ``n_t = alpha_t^2 v + sigma_t^2`` the coefficients are ``c_skip = alpha_t v / n_t``,
    ``c_out = sigma_t sqrt(v / n_t)`` and ``c_in = 1 / sqrt(n_t)``, so ``F = 0``
    is already the optimal denoiser for ``N(0, v I)`` data.

    ``fit(X)`` minimises the weighted denoising loss
    ``sum_t w_t E||D_t(X_t) - X_0||^2`` over clean samples ``X`` with Adam.
    """

    kind = "learned"

    def __init__(self, schedule: NoiseSchedule | None = None, hidden=(128, 128), steps=2000,
                 batch_size=256, lr=1e-3, time_weights=None, random_state=None):
        self.schedule = schedule
        self.hidden = hidden
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.time_weights = time_weights
        self.random_state = random_state

    # -- network plumbing
    def _init_net(self, dim: int, rng, sigma_data: float = 1.0) -> None:
        self.dim_ = dim
        self.sigma_data_ = float(sigma_data)
        self.net_ = MLP([dim + EMBED_DIM, *self.hidden, dim], rng=rng, zero_last=True)
        self.loss_curve_ = []
        self.n_calls = 0

    def _check_fitted(self):
        if not hasattr(self, "net_"):
            raise NotFittedError("MLPDenoiser is not initialised; call fit() or initialize()")

    def initialize(self, dim: int):
        """Set up untrained weights (same as ``fit`` with zero steps)."""
        self._init_net(dim, as_generator(self.random_state))
        return self

    @property
    def dim(self) -> int:
        self._check_fitted()
        return self.dim_

    def _coeffs(self, sched, t, n):
        t = np.broadcast_to(np.asarray(t), (n,))
        a, s = sched.alpha[t], sched.sigma[t]
        v = self.sigma_data_**2
        norm = a * a * v + s * s
        return (a * v / norm)[:, None], (s * np.sqrt(v / norm))[:, None], (1.0 / np.sqrt(norm))[:, None]

    def _inputs(self, sched, t, x):
        x = np.asarray(x, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite input to the denoiser")
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > sched.T):
            raise ValueError(f"denoiser timesteps must lie in [1, {sched.T}]")
        rows = np.atleast_2d(x)
        c_skip, c_out, c_in = self._coeffs(sched, t, rows.shape[0])
        emb = np.broadcast_to(time_embedding(t, sched.T), (rows.shape[0], EMBED_DIM))
        return np.concatenate([c_in * rows, emb], axis=1), rows, (c_skip, c_out, c_in), x.ndim == 1

    def denoise(self, sched: NoiseSchedule, t, x_t):
        self._check_fitted()
        self.n_calls += 1
        inp, rows, (c_skip, c_out, _), single = self._inputs(sched, t, x_t)
        out = c_skip * rows + c_out * self.net_.forward(inp)
        return out[0] if single else out

    def denoise_vjp(self, sched: NoiseSchedule, t, x_t, v):
        self._check_fitted()
        self.n_calls += 1
        inp, rows, (c_skip, c_out, c_in), single = self._inputs(sched, t, x_t)
        v = np.atleast_2d(v)
        f, g = self.net_.input_vjp(inp, c_out * v)
        out = c_skip * rows + c_out * f
        g = c_skip * v + c_in * g[:, : self.dim_]
        return (out[0], g[0]) if single else (out, g)

    # -- training
    def loss_and_grads(self, x0, t, noise, weights=None):
        """Weighted denoising loss on one minibatch and its parameter gradients.

        ``loss = mean_i w_{t_i} ||D_{t_i}(a x0_i + s noise_i) - x0_i||^2``.
        """
        sched = self.schedule
        t = np.asarray(t)
        w = np.ones(len(t)) if weights is None else np.asarray(weights)[t - 1]
        x_t = sched.alpha[t][:, None] * x0 + sched.sigma[t][:, None] * noise
        inp, rows, (c_skip, c_out, _), _ = self._inputs(sched, t, x_t)
        f, acts = self.net_.forward(inp, cache=True)
        resid = c_skip * rows + c_out * f - x0
        n = len(t)
        loss = float((w * (resid**2).sum(1)).sum() / n)
        grads = self.net_.backward(acts, 2.0 * w[:, None] * c_out * resid / n)
        return loss, grads

    def _train(self, draw_batch, rng):
        sched = self.schedule
        if sched is None:
            raise ValueError("MLPDenoiser needs a schedule")
        cfg = DenoiserTrainConfig(self.steps, self.batch_size, self.lr, self.time_weights)
        cfg.validate()
        w = cfg.time_weights(sched.T)
        # sampling t with probability w_t / sum(w) gives the weighted loss up to a constant factor
        probs = None if self.time_weights is None else w / w.sum()
        state = AdamState(lr=cfg.lr)
        for step in range(cfg.steps):
            x0 = draw_batch(rng, cfg.batch)
            t = rng.choice(sched.T, size=cfg.batch, p=probs) + 1
            noise = rng.standard_normal(x0.shape)
            loss, grads = self.loss_and_grads(x0, t, noise)
            if not np.isfinite(loss):
                raise FloatingPointError(f"denoiser training diverged at step {step}")
            state = replace(state, lr=cosine_lr(cfg.lr, step, cfg.steps))
            state, self.net_.params = adam_step(state, self.net_.params, grads)
            self.loss_curve_.append(loss)
            if step % 500 == 0:
                logger.info("denoiser step %d loss %.5f", step, loss)
        return self

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        rng = as_generator(self.random_state)
        self._init_net(X.shape[1], rng, np.sqrt(X.var(axis=0).mean()))

        def draw(r, n):
            return X[r.integers(0, len(X), size=n)]

        return self._train(draw, rng)

    def fit_prior(self, gm: GaussianMixture):
        """Train on fresh draws from an analytic prior instead of a fixed dataset."""
        rng = as_generator(self.random_state)
        self._init_net(gm.dim, rng, np.sqrt(np.trace(gm.covariance()) / gm.dim))
        return self._train(lambda r, n: sample_prior(gm, n, r), rng)

    # -- persistence
    def save(self, path) -> None:
        self._check_fitted()
        meta = {"model": "mlp_denoiser", "dim": self.dim_, "hidden": list(self.hidden),
                "T": self.schedule.T, "schedule_kind": self.schedule.kind, "sigma_data": self.sigma_data_}
        save_checkpoint(path, self.net_.state_dict(), meta)

    @classmethod
    def load(cls, path, schedule: NoiseSchedule) -> "MLPDenoiser":
        tensors, meta = load_checkpoint(path)
        if meta.get("model") != "mlp_denoiser":
            raise ValueError(f"{path} is not a denoiser checkpoint")
        if meta["T"] != schedule.T:
            raise ValueError(f"checkpoint trained with T={meta['T']}, schedule has T={schedule.T}")
        model = cls(schedule=schedule, hidden=tuple(meta["hidden"]))
        model._init_net(meta["dim"], None, meta["sigma_data"])
        model.net_.load_state_dict(tensors)
        return model


def denoise(model, sched: NoiseSchedule, t, x_t):
    if np.min(t) < 1 or np.max(t) > sched.T:
        raise ValueError(f"t must lie in [1, {sched.T}]")
    return model.denoise(sched, t, x_t)


def train_denoiser(gm: GaussianMixture, sched: NoiseSchedule, cfg: DenoiserTrainConfig, rng=None,
                   hidden=(128, 128)) -> MLPDenoiser:
    """Fit an :class:`MLPDenoiser` on draws from ``gm``."""
    cfg.validate()
    cfg.time_weights(sched.T)
    seed = as_generator(rng).integers(2**63)
    model = MLPDenoiser(sched, hidden, cfg.steps, cfg.batch, cfg.lr, cfg.weights, int(seed))
    return model.fit_prior(gm)


def ddim_grid(s: int, M: int) -> np.ndarray:
    if M < 1:
        raise ValueError(f"M must be >= 1, got {M}")
    if M > s:
        raise ValueError(f"cannot build {M} strictly decreasing steps from s={s}")
    return np.rint(np.arange(M, -1, -1) * s / M).astype(np.int64)


def ddim_refine(model, sched: NoiseSchedule, x_s, s: int, M: int) -> np.ndarray:
    """Deterministic DDIM chain from ``x_s`` at time ``s`` down to ``x_0`` in ``M`` steps."""
    if not 1 <= s <= sched.T:
        raise ValueError(f"s must lie in [1, {sched.T}]")
    grid = ddim_grid(s, M)
    x = np.asarray(x_s, dtype=np.float64)
    for u, v in zip(grid[:-1], grid[1:]):
        den = model.denoise(sched, int(u), x)
        if v == 0:
            x = den
        else:
            noise = (x - sched.alpha[u] * den) / sched.sigma[u]
            x = sched.alpha[v] * den + sched.sigma[v] * noise
    return x
