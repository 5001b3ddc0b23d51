"""MGDM and LAVPS posterior samplers.

Both run the same midpoint Gibbs chain on a coarse grid ``t_0 = 0 < ... < t_K = T``;
LAVPS replaces the zero-shot start of the inner variational problem by the
inference-model prediction whenever ``t_k`` lies in the switch subset and that
prediction scores no worse under a shared noise draw.

Chains are batched: ``n`` independent chains share the observation, the operator
and the midpoint draw ``s`` but nothing else.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from ._utils import as_generator
from .denoiser import ddim_refine
from .schedule import NoiseSchedule, bridge, coarse_grid, switch_bound, transition
from .amortizer import draw_midpoint_lag
from .variational import (
    AdamState,
    Context,
    VariationalParams,
    _bridge_moments,
    adam_step,
    objective,
    objective_and_grad,
    zero_shot_init,
)

MODES = ("mgdm", "lavps")


class SamplerError(RuntimeError):
    """Sampler abort; ``trace`` holds the entries recorded before the failure."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class SamplerConfig:
    K: int = 100
    R: int = 1
    M: int = 1
    eta: float = 0.01
    G_start: int = 1
    G_end: int = 3
    r_switch: float = 0.8
    omega: tuple = (1.0,)
    mode: str = "mgdm"
    likelihood: bool = True
    diagnostics: bool = True
    record_wallclock: bool = True

    def validate(self, T: int):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 2 <= self.K <= T:
            raise ValueError(f"K must satisfy 2 <= K <= T={T}, got {self.K}")
        if self.R < 1 or self.M < 1:
            raise ValueError("R and M must be >= 1")
        if self.G_start < 0 or self.G_end < 0:
            raise ValueError("gradient step counts must be non-negative")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        switch_bound(T, self.r_switch)
        grid = coarse_grid(T, self.K)
        if self.M > grid[1]:
            raise ValueError(f"M={self.M} exceeds the smallest midpoint s={grid[1]}")

    def timesteps(self, T: int) -> np.ndarray:
        return coarse_grid(T, self.K)

    def grad_steps(self, T: int) -> np.ndarray:
        """``G_k`` for every coarse index ``k`` (``G_end`` inside the switch subset)."""
        grid = self.timesteps(T)
        bound = switch_bound(T, self.r_switch)
        return np.where(grid <= bound, self.G_end, self.G_start)

    def expected_denoiser_calls(self, T: int) -> int:
        """Algorithmic denoiser evaluations of one run (diagnostics excluded)."""
        grid = self.timesteps(T)
        G = self.grad_steps(T)
        bound = switch_bound(T, self.r_switch)
        total = 1
        for k in range(self.K - 1, 1, -1):
            ws = 2 if (self.mode == "lavps" and grid[k] <= bound) else 0
            total += self.R * (int(G[k]) + self.M + ws)
        return total

    def expected_grad_steps(self, T: int) -> int:
        G = self.grad_steps(T)
        return int(self.R * G[2 : self.K].sum())


@dataclass
class TraceRecord:
    """One entry per Gibbs inner iteration ``(k, r)``.

    Per-chain quantities are lists; ``L_ws``/``L_zs`` are only present when the
    safeguard was evaluated.
    """

    entries: list = field(default_factory=list)

    def append(self, **kw):
        self.entries.append(kw)

    def __len__(self):
        return len(self.entries)

    def total_grad_steps(self) -> int:
        return int(sum(e["steps"] for e in self.entries))

    def total_denoiser_calls(self) -> int:
        return int(sum(e["denoiser_calls"] for e in self.entries)) + 1

    def to_jsonl(self) -> str:
        return "".join(json.dumps(_jsonable(e), sort_keys=True) + "\n" for e in self.entries)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _select(mask, a: VariationalParams, b: VariationalParams) -> VariationalParams:
    """Row-wise choice: ``a`` where ``mask`` else ``b``."""
    m = np.asarray(mask)[..., None]
    return VariationalParams(np.where(m, a.mu, b.mu), np.where(m, a.rho_raw, b.rho_raw))


def initial_objective_pair(inf_model, sched: NoiseSchedule, ctx: Context, model_theta, eps):
    """Objective at the warm start and at the zero-shot start under the same ``eps``."""
    ws = inf_model.infer(sched, ctx)
    zs = zero_shot_init(sched, ctx)
    return objective(ws, ctx, model_theta, sched, eps), objective(zs, ctx, model_theta, sched, eps)


def _run(model_theta, sched: NoiseSchedule, op, y, cfg: SamplerConfig, rng, inf_model=None, n=None):
    cfg.validate(sched.T)
    rng = as_generator(rng)
    lavps = cfg.mode == "lavps"
    if lavps and inf_model is None:
        raise ValueError("lavps mode needs an inference model")
    if cfg.likelihood and (op is None or y is None):
        raise ValueError("an operator and an observation are required unless the likelihood is off")
    bound = switch_bound(sched.T, cfg.r_switch)
    if lavps and bound > 0 and getattr(inf_model, "switch_bound_", bound) < bound:
        raise ValueError(
            f"sampler switch subset {{1..{bound}}} exceeds the inference model's training subset "
            f"{{1..{inf_model.switch_bound_}}}"
        )
    obs_y = None if not cfg.likelihood else np.asarray(y, dtype=np.float64)
    obs_op = op if cfg.likelihood else None

    single = n is None
    n_rows = 1 if single else int(n)
    d = model_theta.dim
    grid = cfg.timesteps(sched.T)
    G = cfg.grad_steps(sched.T)
    trace = TraceRecord()
    clock = time.perf_counter if cfg.record_wallclock else (lambda: 0.0)

    def _gibbs_step(k, x0, x_t):
        tk = int(grid[k])
        s = int(grid[k - draw_midpoint_lag(cfg.omega, k - 1, rng)])
        br = bridge(sched, tk, int(grid[k + 1]))
        x_t = br.mean_coeff_x0 * x0 + br.mean_coeff_xt * x_t
        x_t = x_t + np.sqrt(br.variance) * rng.standard_normal(x_t.shape)
        in_switch = tk <= bound
        n_steps = int(G[k])
        fwd = transition(sched, s, tk)
        for r in range(cfg.R):
            t_start = clock()
            ctx = Context(x0, x_t, s, tk, obs_y, obs_op)
            moments = _bridge_moments(sched, ctx)
            zs = zero_shot_init(sched, ctx)
            eps0 = rng.standard_normal(x0.shape)
            entry = {"k": k, "r": r, "t": tk, "s": s, "steps": n_steps}
            calls = n_steps + cfg.M
            if lavps and in_switch:
                ws = inf_model.infer(sched, ctx)
                L_ws = objective(ws, ctx, model_theta, sched, eps0)
                L_zs = objective(zs, ctx, model_theta, sched, eps0)
                use_ws = L_ws < L_zs  # ties go to the zero-shot start
                params = _select(use_ws, ws, zs)
                before = np.minimum(L_ws, L_zs)
                entry["init_source"] = np.where(use_ws, "warm-start", "zero-shot-fallback").tolist()
                entry["L_ws"], entry["L_zs"] = L_ws, L_zs
                calls += 2
            else:
                params = zs
                before = objective(zs, ctx, model_theta, sched, eps0) if cfg.diagnostics else None
                entry["init_source"] = ["zero-shot"] * n_rows
            state = AdamState(lr=cfg.eta)
            for _ in range(n_steps):
                eps = rng.standard_normal(x0.shape)
                _, grad = objective_and_grad(params, ctx, model_theta, sched, eps, moments)
                state, params = adam_step(state, params, grad)
            after = objective(params, ctx, model_theta, sched, eps0) if cfg.diagnostics else None
            x_s = params.mu + np.sqrt(params.rho) * rng.standard_normal(x0.shape)
            x0 = ddim_refine(model_theta, sched, x_s, s, cfg.M)
            x_t = fwd.alpha_ts * x_s + np.sqrt(fwd.var_ts) * rng.standard_normal(x_s.shape)
            entry["objective_before"] = before
            entry["objective_after"] = after
            entry["denoiser_calls"] = calls
            entry["wallclock"] = clock() - t_start
            trace.append(**entry)
            if not (np.all(np.isfinite(x0)) and np.all(np.isfinite(x_t))):
                raise SamplerError(f"non-finite sampler state at k={k}, r={r}", trace)
        return x0, x_t

    x_t = rng.standard_normal((n_rows, d))
    x0 = model_theta.denoise(sched, sched.T, x_t)
    for k in range(cfg.K - 1, 1, -1):
        try:
            x0, x_t = _gibbs_step(k, x0, x_t)
        except FloatingPointError as exc:
            raise SamplerError(f"{exc} at k={k}", trace) from exc
    return (x0[0] if single else x0), trace


def mgdm_sample(model_theta, sched: NoiseSchedule, op, y, cfg: SamplerConfig, rng=None, n=None):
    """Zero-shot midpoint Gibbs sampler; returns ``(x0, trace)``.

    ``n=None`` runs one chain and returns a ``(d,)`` vector, otherwise ``(n, d)``.
    """
    if cfg.mode != "mgdm":
        raise ValueError("mgdm_sample needs cfg.mode == 'mgdm'")
    return _run(model_theta, sched, op, y, cfg, rng, None, n)


def lavps_sample(model_theta, inf_model, sched: NoiseSchedule, op, y, cfg: SamplerConfig, rng=None, n=None):
    """Amortised sampler with the safeguarded warm start; returns ``(x0, trace)``."""
    if cfg.mode != "lavps":
        raise ValueError("lavps_sample needs cfg.mode == 'lavps'")
    return _run(model_theta, sched, op, y, cfg, rng, inf_model, n)


class MGDMSampler(BaseEstimator):
    """Estimator front-end for :func:`mgdm_sample`.

    Hyperparameters are constructor arguments so grids can be swept with
    ``sklearn.model_selection.ParameterGrid`` and ``sklearn.base.clone``.
    """

    _mode = "mgdm"

    def __init__(self, denoiser=None, schedule: NoiseSchedule | None = None, K=100, R=1, M=1, eta=0.01,
                 G_start=1, G_end=3, r_switch=0.8, omega=(1.0,), likelihood=True, diagnostics=True,
                 record_wallclock=True, random_state=None):
        self.denoiser = denoiser
        self.schedule = schedule
        self.K = K
        self.R = R
        self.M = M
        self.eta = eta
        self.G_start = G_start
        self.G_end = G_end
        self.r_switch = r_switch
        self.omega = omega
        self.likelihood = likelihood
        self.diagnostics = diagnostics
        self.record_wallclock = record_wallclock
        self.random_state = random_state

    def config(self) -> SamplerConfig:
        return SamplerConfig(self.K, self.R, self.M, self.eta, self.G_start, self.G_end, self.r_switch,
                             tuple(self.omega), self._mode, self.likelihood, self.diagnostics,
                             self.record_wallclock)

    def fit(self, X=None, y=None):
        """Validate the configuration; samplers have nothing to learn."""
        if self.denoiser is None or self.schedule is None:
            raise ValueError("sampler needs a denoiser and a schedule")
        self.config().validate(self.schedule.T)
        return self

    def _call(self, op, y, rng, n):
        return mgdm_sample(self.denoiser, self.schedule, op, y, self.config(), rng, n)

    def sample(self, y, op, n_samples=None, random_state=None):
        """Posterior draws given one observation; stores the trace in ``trace_``."""
        self.fit()
        rng = as_generator(self.random_state if random_state is None else random_state)
        x, self.trace_ = self._call(op, y, rng, n_samples)
        return x

    def predict(self, Y, op):
        """One posterior draw per row of ``Y`` (all rows observed through ``op``)."""
        Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
        rng = as_generator(self.random_state)
        self.fit()
        out = []
        for y in Y:
            x, self.trace_ = self._call(op, y, rng, None)
            out.append(x)
        return np.stack(out)


class LAVPSSampler(MGDMSampler):
    """Estimator front-end for :func:`lavps_sample`."""

    _mode = "lavps"

    def __init__(self, denoiser=None, schedule=None, inference_model=None, K=100, R=1, M=1, eta=0.01,
                 G_start=1, G_end=3, r_switch=0.8, omega=(1.0,), likelihood=True, diagnostics=True,
                 record_wallclock=True, random_state=None):
        super().__init__(denoiser, schedule, K, R, M, eta, G_start, G_end, r_switch, omega, likelihood,
                         diagnostics, record_wallclock, random_state)
        self.inference_model = inference_model

    def _call(self, op, y, rng, n):
        return lavps_sample(self.denoiser, self.inference_model, self.schedule, op, y, self.config(), rng, n)


def config_dict(cfg: SamplerConfig) -> dict:
    out = asdict(cfg)
    out["omega"] = list(cfg.omega)
    return out
