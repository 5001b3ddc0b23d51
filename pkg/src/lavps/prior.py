"""Analytic Gaussian-mixture priors.

A mixture prior gives closed forms for everything the samplers approximate:
noised marginals, the denoiser ``E[X_0 | X_t = x]`` (with its Jacobian), and the
posterior under a linear Gaussian observation model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
from scipy.special import logsumexp

from ._utils import as_generator
from .schedule import NoiseSchedule

if TYPE_CHECKING:
    from .operators import DegradationOperator

MAX_DIM = 64
MAX_CONDITION = 1e12
LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """Mixture ``sum_k w_k N(m_k, C_k)`` in ``dim`` dimensions."""

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    _chol: np.ndarray = field(init=False, repr=False)
    _cache: dict = field(init=False, repr=False, default_factory=dict)

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        m = np.asarray(self.means, dtype=np.float64)
        c = np.asarray(self.covs, dtype=np.float64)
        if m.ndim == 1:
            m = m[:, None]
        if c.ndim == 1:
            c = c[:, None, None]
        n_comp, dim = m.shape
        if w.shape != (n_comp,) or c.shape != (n_comp, dim, dim):
            raise ValueError(
                f"inconsistent mixture shapes: weights {w.shape}, means {m.shape}, covs {c.shape}"
            )
        if dim > MAX_DIM:
            raise ValueError(f"dimension {dim} exceeds the exact-oracle cap of {MAX_DIM}")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be non-negative and sum to 1")
        if not np.allclose(c, np.swapaxes(c, -1, -2), rtol=0, atol=1e-12):
            raise ValueError("covariances must be symmetric")
        try:
            chol = np.linalg.cholesky(c)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariances must be positive definite") from exc
        if np.any(np.linalg.cond(c) > MAX_CONDITION):
            raise ValueError(f"covariance condition number exceeds {MAX_CONDITION:g}")
        for name, arr in (("weights", w), ("means", m), ("covs", c), ("_chol", chol)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        mu = self.mean()
        second = np.einsum("k,kij->ij", self.weights, self.covs)
        second += np.einsum("k,ki,kj->ij", self.weights, self.means, self.means)
        return second - np.outer(mu, mu)

    def log_prob(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        diff = x[..., None, :] - self.means
        z = np.linalg.solve(self._chol, diff[..., None])[..., 0]
        logdet = 2.0 * np.log(np.diagonal(self._chol, axis1=-2, axis2=-1)).sum(-1)
        comp = -0.5 * (z**2).sum(-1) - 0.5 * logdet - 0.5 * self.dim * LOG_2PI
        with np.errstate(divide="ignore"):
            return logsumexp(comp + np.log(self.weights), axis=-1)

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covs": self.covs.tolist(),
        }

    @classmethod
    def from_dict(cls, spec: dict) -> "GaussianMixture":
        return cls(spec["weights"], spec["means"], spec["covs"])

    def _time_stats(self, alpha: float, sigma: float):
        """Per-component matrices of the noised model at one noise level (cached)."""
        key = (alpha, sigma)
        stats = self._cache.get(key)
        if stats is None:
            eye = np.eye(self.dim)
            S = alpha**2 * self.covs + sigma**2 * eye
            S_inv = np.linalg.inv(S)
            S_inv = 0.5 * (S_inv + np.swapaxes(S_inv, -1, -2))
            _, logdet = np.linalg.slogdet(S)
            # gain maps the centred observation to the component posterior mean shift
            gain = alpha * self.covs @ S_inv
            stats = (S_inv, logdet, gain)
            if len(self._cache) > 4096:
                self._cache.clear()
            self._cache[key] = stats
        return stats


@dataclass(frozen=True, eq=False)
class PosteriorOracle:
    """Exact posterior of a mixture prior under a linear Gaussian likelihood."""

    mixture: GaussianMixture

    def sample(self, n: int, rng=None) -> np.ndarray:
        return sample_prior(self.mixture, n, rng)


def sample_prior(gm: GaussianMixture, n: int, rng=None) -> np.ndarray:
    """Draw ``n`` i.i.d. samples, shape ``(n, dim)``."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = as_generator(rng)
    labels = rng.choice(gm.n_components, size=n, p=gm.weights)
    noise = rng.standard_normal((n, gm.dim))
    return gm.means[labels] + np.einsum("nij,nj->ni", gm._chol[labels], noise)


def random_mixture(dim: int, n_components: int, rng=None, mean_scale: float = 1.0,
                   cov_scale: float = 0.4, jitter: float = 0.05) -> GaussianMixture:
    """Equal-weight mixture with ``N(0, mean_scale^2)`` means and ``B B^T / d + jitter I`` covariances."""
    if dim < 1 or n_components < 1:
        raise ValueError("dim and n_components must be positive")
    rng = as_generator(rng)
    means = rng.normal(0.0, mean_scale, (n_components, dim))
    B = rng.normal(0.0, cov_scale, (n_components, dim, dim))
    covs = B @ np.swapaxes(B, -1, -2) / dim + jitter * np.eye(dim)
    return GaussianMixture(np.full(n_components, 1.0 / n_components), means, covs)


def noised_marginal(gm: GaussianMixture, sched: NoiseSchedule, t: int) -> GaussianMixture:
    """Law of ``X_t`` when ``X_0 ~ gm``: components ``N(a m_k, a^2 C_k + s^2 I)``."""
    if not 0 <= t <= sched.T:
        raise ValueError(f"t must lie in [0, {sched.T}], got {t}")
    a, s = sched.alpha[t], sched.sigma[t]
    covs = a**2 * gm.covs + s**2 * np.eye(gm.dim)
    return GaussianMixture(gm.weights.copy(), a * gm.means, covs)


def _alpha_sigma(sched: NoiseSchedule, t, n: int):
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > sched.T):
        raise ValueError(f"denoiser timesteps must lie in [1, {sched.T}]")
    if t.ndim == 0:
        return np.full(n, sched.alpha[t]), np.full(n, sched.sigma[t])
    if t.shape != (n,):
        raise ValueError(f"t must be a scalar or have shape ({n},), got {t.shape}")
    return sched.alpha[t], sched.sigma[t]


def _denoise_terms(gm: GaussianMixture, sched: NoiseSchedule, t, x: np.ndarray):
    """Responsibilities, component means and scores for each row of ``x``."""
    n = x.shape[0]
    alpha, sigma = _alpha_sigma(sched, t, n)
    if np.ndim(t) == 0:
        S_inv, logdet, gain = gm._time_stats(float(alpha[0]), float(sigma[0]))
        sub = "kij,nkj->nki"
    else:
        levels, inverse = np.unique(np.stack([alpha, sigma], 1), axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        stats = [gm._time_stats(float(a), float(s)) for a, s in levels]
        S_inv = np.stack([st[0] for st in stats])[inverse]  # (n, K, d, d)
        logdet = np.stack([st[1] for st in stats])[inverse]  # (n, K)
        gain = np.stack([st[2] for st in stats])[inverse]
        sub = "nkij,nkj->nki"

    diff = x[:, None, :] - alpha[:, None, None] * gm.means[None]  # (n, K, d)
    sol = np.einsum(sub, S_inv, diff)
    with np.errstate(divide="ignore"):
        log_w = np.log(gm.weights)
    log_comp = log_w - 0.5 * np.einsum("nki,nki->nk", diff, sol) - 0.5 * logdet
    log_comp -= 0.5 * gm.dim * LOG_2PI
    log_norm = logsumexp(log_comp, axis=1, keepdims=True)
    resp = np.exp(log_comp - log_norm)
    comp_mean = gm.means[None] + np.einsum(sub, gain, diff)
    return resp, comp_mean, sol, gain, sub


def _as_rows(x, dim):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[-1] != dim:
        raise ValueError(f"expected vectors of dimension {dim}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input to the denoiser")
    return x, single


def exact_denoiser(gm: GaussianMixture, sched: NoiseSchedule, t, x_t) -> np.ndarray:
    """Posterior mean ``E[X_0 | X_t = x_t]`` under the mixture prior.

    ``x_t`` may be a single vector or a batch ``(n, dim)``; ``t`` is a scalar or
    one timestep per row.
    """
    x, single = _as_rows(x_t, gm.dim)
    resp, comp_mean, *_ = _denoise_terms(gm, sched, t, x)
    out = np.einsum("nk,nki->ni", resp, comp_mean)
    return out[0] if single else out


def exact_denoiser_vjp(gm: GaussianMixture, sched: NoiseSchedule, t, x_t, v):
    """Return ``(D(x_t), J(x_t)^T v)`` where ``J`` is the denoiser Jacobian.

    ``J = sum_k r_k G_k + sum_k r_k (m_k - D)(g_k - g_bar)^T`` with ``G_k`` the
    per-component gain and ``g_k = -S_k^{-1}(x - a m_k)`` the component score.
    """
    x, single = _as_rows(x_t, gm.dim)
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    resp, comp_mean, sol, gain, sub = _denoise_terms(gm, sched, t, x)
    den = np.einsum("nk,nki->ni", resp, comp_mean)
    gt_v = np.einsum("kji,nj->nki" if sub.startswith("k") else "nkji,nj->nki", gain, v)
    jtv = np.einsum("nk,nki->ni", resp, gt_v)
    score = -sol
    score_bar = np.einsum("nk,nki->ni", resp, score)
    proj = np.einsum("nki,ni->nk", comp_mean - den[:, None, :], v)
    jtv += np.einsum("nk,nki->ni", resp * proj, score - score_bar[:, None, :])
    if single:
        return den[0], jtv[0]
    return den, jtv


def exact_posterior(gm: GaussianMixture, op: "DegradationOperator", y) -> PosteriorOracle:
    """Conjugate posterior of ``gm`` given ``y = A x + sigma_y w``."""
    if not getattr(op, "is_linear", False):
        raise TypeError("exact posterior is only available for linear operators")
    if not op.sigma_y > 0:
        raise ValueError(f"sigma_y must be positive, got {op.sigma_y}")
    A = op.matrix()
    y = np.asarray(y, dtype=np.float64)
    var_y = op.sigma_y**2
    eye_out = np.eye(A.shape[0])

    prec_prior = np.linalg.inv(gm.covs)
    prec = prec_prior + (A.T @ A)[None] / var_y
    post_cov = np.linalg.inv(prec)
    post_cov = 0.5 * (post_cov + np.swapaxes(post_cov, -1, -2))
    rhs = np.einsum("kij,kj->ki", prec_prior, gm.means) + (A.T @ y)[None] / var_y
    post_mean = np.einsum("kij,kj->ki", post_cov, rhs)

    evid_cov = np.einsum("ij,kjl,ml->kim", A, gm.covs, A) + var_y * eye_out
    evid_diff = y[None] - gm.means @ A.T
    _, logdet = np.linalg.slogdet(evid_cov)
    quad = np.einsum("ki,ki->k", evid_diff, np.linalg.solve(evid_cov, evid_diff[..., None])[..., 0])
    with np.errstate(divide="ignore"):
        log_w = np.log(gm.weights) - 0.5 * quad - 0.5 * logdet
    log_w -= logsumexp(log_w)
    weights = np.exp(log_w)
    weights /= weights.sum()
    return PosteriorOracle(GaussianMixture(weights, post_mean, post_cov))
