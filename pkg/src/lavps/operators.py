"""Linear degradation operators, Gaussian likelihoods and operator families."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._utils import as_generator

DEFAULT_SIGMA_Y = 0.05
OPERATOR_KINDS = ("mask", "block_downsample", "circular_conv")
LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True, eq=False)
class DegradationOperator:
    """Linear map ``A: R^d -> R^d'`` with observation noise ``sigma_y``.

    ``params`` by kind:

    - ``mask``: ``keep`` -- sorted indices that are observed.
    - ``block_downsample``: ``factor`` and optional ``shape`` ``(H, W)``; averages
      non-overlapping length-``r`` blocks (``r x r`` patches when ``shape`` is set).
    - ``circular_conv``: ``kernel``; ``(A x)[i] = sum_j k[j] x[(i - j) mod d]``.
    """

    kind: str
    in_dim: int
    params: dict
    sigma_y: float = DEFAULT_SIGMA_Y
    _matrix: np.ndarray = field(init=False, repr=False)

    is_linear = True

    def __post_init__(self):
        if self.kind not in OPERATOR_KINDS:
            raise ValueError(f"unknown operator kind {self.kind!r}")
        if not self.sigma_y > 0:
            raise ValueError(f"sigma_y must be positive, got {self.sigma_y}")
        d = int(self.in_dim)
        if d < 1:
            raise ValueError("in_dim must be positive")
        params = dict(self.params)
        if self.kind == "mask":
            keep = np.unique(np.asarray(params["keep"], dtype=np.int64))
            if keep.size == 0:
                raise ValueError("mask observes nothing")
            if keep[0] < 0 or keep[-1] >= d:
                raise ValueError("mask index out of range")
            params["keep"] = keep
        elif self.kind == "block_downsample":
            r = int(params["factor"])
            shape = params.get("shape")
            if r < 1:
                raise ValueError("downsampling factor must be >= 1")
            if shape is None:
                if d % r:
                    raise ValueError(f"factor {r} does not divide dimension {d}")
            else:
                H, W = (int(v) for v in shape)
                if H * W != d or H % r or W % r:
                    raise ValueError(f"shape {shape} incompatible with dim {d} and factor {r}")
                params["shape"] = (H, W)
            params["factor"] = r
        else:
            k = np.asarray(params["kernel"], dtype=np.float64).ravel()
            if k.size == 0 or k.size > d:
                raise ValueError("kernel length must be in [1, d]")
            params["kernel"] = k
        object.__setattr__(self, "in_dim", d)
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "sigma_y", float(self.sigma_y))
        object.__setattr__(self, "_matrix", self._build_matrix())

    @property
    def out_dim(self) -> int:
        return self._matrix.shape[0]

    def _build_matrix(self) -> np.ndarray:
        d = self.in_dim
        if self.kind == "mask":
            return np.eye(d)[self.params["keep"]]
        if self.kind == "block_downsample":
            r = self.params["factor"]
            shape = self.params.get("shape")
            if shape is None:
                return np.kron(np.eye(d // r), np.full((1, r), 1.0 / r))
            H, W = shape
            rows = np.kron(np.eye(H // r), np.full((1, r), 1.0 / r))
            cols = np.kron(np.eye(W // r), np.full((1, r), 1.0 / r))
            return np.kron(rows, cols)
        k = self.params["kernel"]
        M = np.zeros((d, d))
        for j, kj in enumerate(k):
            M += kj * np.roll(np.eye(d), j, axis=0)
        return M

    def matrix(self) -> np.ndarray:
        return self._matrix.copy()

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"expected input dimension {self.in_dim}, got {x.shape[-1]}")
        if self.kind == "mask":
            return x[..., self.params["keep"]]
        if self.kind == "circular_conv":
            out = np.zeros_like(x)
            for j, kj in enumerate(self.params["kernel"]):
                if kj != 0.0:
                    out += kj * np.roll(x, j, axis=-1)
            return out
        return x @ self._matrix.T

    def adjoint(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape[-1] != self.out_dim:
            raise ValueError(f"expected input dimension {self.out_dim}, got {v.shape[-1]}")
        if self.kind == "mask":
            out = np.zeros(v.shape[:-1] + (self.in_dim,))
            out[..., self.params["keep"]] = v
            return out
        if self.kind == "circular_conv":
            out = np.zeros_like(v)
            for j, kj in enumerate(self.params["kernel"]):
                if kj != 0.0:
                    out += kj * np.roll(v, -j, axis=-1)
            return out
        return v @ self._matrix

    def descriptor(self) -> np.ndarray:
        """Fixed-length summary: ``diag(A^T A)``, zero-padded kernel, kind one-hot."""
        d = self.in_dim
        kern = np.zeros(d)
        if self.kind == "circular_conv":
            k = self.params["kernel"]
            kern[: k.size] = k
        onehot = np.zeros(len(OPERATOR_KINDS))
        onehot[OPERATOR_KINDS.index(self.kind)] = 1.0
        return np.concatenate([np.einsum("ij,ij->j", self._matrix, self._matrix), kern, onehot])

    def to_dict(self) -> dict:
        params = {}
        for key, val in self.params.items():
            params[key] = val.tolist() if isinstance(val, np.ndarray) else (list(val) if isinstance(val, tuple) else val)
        return {"kind": self.kind, "in_dim": self.in_dim, "sigma_y": self.sigma_y, "params": params}

    @classmethod
    def from_dict(cls, spec: dict) -> "DegradationOperator":
        return cls(spec["kind"], spec["in_dim"], dict(spec.get("params", {})), spec.get("sigma_y", DEFAULT_SIGMA_Y))


def descriptor_dim(d: int) -> int:
    return 2 * d + len(OPERATOR_KINDS)


def mask(d: int, keep, sigma_y: float = DEFAULT_SIGMA_Y) -> DegradationOperator:
    return DegradationOperator("mask", d, {"keep": keep}, sigma_y)


def block_downsample(d: int, factor: int, shape=None, sigma_y: float = DEFAULT_SIGMA_Y) -> DegradationOperator:
    params = {"factor": factor}
    if shape is not None:
        params["shape"] = tuple(shape)
    return DegradationOperator("block_downsample", d, params, sigma_y)


def circular_conv(d: int, kernel, sigma_y: float = DEFAULT_SIGMA_Y) -> DegradationOperator:
    return DegradationOperator("circular_conv", d, {"kernel": kernel}, sigma_y)


def apply(op: DegradationOperator, x) -> np.ndarray:
    return op.apply(x)


def adjoint(op: DegradationOperator, v) -> np.ndarray:
    return op.adjoint(v)


def observe(op: DegradationOperator, x, rng=None) -> np.ndarray:
    """Draw ``y = A x + sigma_y w``."""
    rng = as_generator(rng)
    Ax = op.apply(x)
    return Ax + op.sigma_y * rng.standard_normal(Ax.shape)


def log_likelihood(op: DegradationOperator, y, x0):
    """``log N(y; A x0, sigma_y^2 I)``; batched over leading axes of ``x0``."""
    resid = np.asarray(y, dtype=np.float64) - op.apply(x0)
    var = op.sigma_y**2
    return -0.5 * op.out_dim * (LOG_2PI + np.log(var)) - 0.5 * (resid**2).sum(-1) / var


def guidance_log_likelihood(op: DegradationOperator, y, model, sched, t, x_t):
    """Likelihood evaluated at the denoised point, ``log g(y | D_t(x_t))``."""
    return log_likelihood(op, y, model.denoise(sched, t, x_t))


def guidance_log_likelihood_grad(op: DegradationOperator, y, model, sched, t, x_t):
    """Return ``(value, gradient w.r.t. x_t)`` of the guidance log-likelihood.

    The gradient is ``J_D^T A^T (y - A D) / sigma_y^2``, pulled back through the
    denoiser with one vector-Jacobian product.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    den = model.denoise(sched, t, x_t)
    resid = np.asarray(y, dtype=np.float64) - op.apply(den)
    var = op.sigma_y**2
    value = -0.5 * op.out_dim * (LOG_2PI + np.log(var)) - 0.5 * (resid**2).sum(-1) / var
    _, grad = model.denoise_vjp(sched, t, x_t, op.adjoint(resid) / var)
    return value, grad.reshape(x_t.shape)


# --------------------------------------------------------------------------- families


class OperatorFamily:
    """Sampling law over degradation operators on signals of dimension ``dim``."""

    dim: int
    sigma_y: float = DEFAULT_SIGMA_Y
    max_tries: int = 1000

    def _draw(self, rng) -> DegradationOperator | None:
        raise NotImplementedError

    def sample(self, rng=None) -> DegradationOperator:
        rng = as_generator(rng)
        for _ in range(self.max_tries):
            op = self._draw(rng)
            if op is not None:
                return op
        raise RuntimeError(f"{type(self).__name__}: no valid operator after {self.max_tries} draws")

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        out.update({k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()})
        return out


@dataclass
class FixedOperator(OperatorFamily):
    """Degenerate family that always returns the same operator."""

    operator: DegradationOperator
    kind = "fixed"

    @property
    def dim(self):
        return self.operator.in_dim

    def _draw(self, rng):
        return self.operator

    def to_dict(self) -> dict:
        return {"kind": "fixed", "operator": self.operator.to_dict()}


@dataclass
class BernoulliMask(OperatorFamily):
    """Drop each index independently with probability ``p ~ U[p_low, p_high]``."""

    dim: int
    p_low: float
    p_high: float
    sigma_y: float = DEFAULT_SIGMA_Y
    kind = "bernoulli_mask"

    def __post_init__(self):
        if not 0.0 <= self.p_low <= self.p_high <= 1.0:
            raise ValueError("need 0 <= p_low <= p_high <= 1")

    def _draw(self, rng):
        p = rng.uniform(self.p_low, self.p_high)
        keep = np.flatnonzero(rng.uniform(size=self.dim) >= p)
        if keep.size == 0:
            return None
        return mask(self.dim, keep, self.sigma_y)


@dataclass
class RectangleMask(OperatorFamily):
    """Remove one axis-aligned rectangle from an ``H x W`` grid.

    Side lengths are ``round(f * side)`` with ``f ~ U[frac_low, frac_high]``; the
    position is uniform over placements that fit.
    """

    height: int
    width: int
    frac_low: float = 0.4
    frac_high: float = 0.6
    sigma_y: float = DEFAULT_SIGMA_Y
    kind = "rectangle_mask"

    def __post_init__(self):
        if not 0.0 < self.frac_low <= self.frac_high <= 1.0:
            raise ValueError("need 0 < frac_low <= frac_high <= 1")

    @property
    def dim(self):
        return self.height * self.width

    def rectangle(self, rng):
        h = max(1, int(round(rng.uniform(self.frac_low, self.frac_high) * self.height)))
        w = max(1, int(round(rng.uniform(self.frac_low, self.frac_high) * self.width)))
        top = int(rng.integers(0, self.height - h + 1))
        left = int(rng.integers(0, self.width - w + 1))
        return top, left, h, w

    def _draw(self, rng):
        top, left, h, w = self.rectangle(rng)
        observed = np.ones((self.height, self.width), dtype=bool)
        observed[top : top + h, left : left + w] = False
        keep = np.flatnonzero(observed.ravel())
        if keep.size == 0:
            return None
        return mask(self.dim, keep, self.sigma_y)


@dataclass
class BlurKernels(OperatorFamily):
    """Circular convolutions with smooth random kernels of length ``length``.

    A kernel is a normalised sum of ``n_bumps`` Gaussian bumps with random
    centres; ``spread`` (drawn from ``[spread_low, spread_high]``) sets the bump
    width relative to the kernel length.
    """

    dim: int
    length: int
    spread_low: float = 0.1
    spread_high: float = 0.3
    n_bumps: int = 3
    sigma_y: float = DEFAULT_SIGMA_Y
    kind = "blur_kernels"

    def __post_init__(self):
        if not 1 <= self.length <= self.dim:
            raise ValueError("kernel length must lie in [1, dim]")
        if not 0 < self.spread_low <= self.spread_high:
            raise ValueError("need 0 < spread_low <= spread_high")

    def _draw(self, rng):
        pos = np.arange(self.length, dtype=np.float64)
        spread = rng.uniform(self.spread_low, self.spread_high) * self.length
        centres = rng.uniform(0, self.length - 1, size=self.n_bumps)
        kern = np.exp(-0.5 * ((pos[:, None] - centres[None]) / spread) ** 2).sum(1)
        kern /= kern.sum()
        return circular_conv(self.dim, kern, self.sigma_y)


FAMILIES = {
    "fixed": FixedOperator,
    "bernoulli_mask": BernoulliMask,
    "rectangle_mask": RectangleMask,
    "blur_kernels": BlurKernels,
}


def family_from_dict(spec: dict) -> OperatorFamily:
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind not in FAMILIES:
        raise ValueError(f"unknown operator family {kind!r}")
    if kind == "fixed":
        return FixedOperator(DegradationOperator.from_dict(spec["operator"]))
    return FAMILIES[kind](**spec)


def sample_operator(fam: OperatorFamily, rng=None) -> DegradationOperator:
    return fam.sample(rng)
