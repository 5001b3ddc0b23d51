"""Experiment harness: metrics, Pareto fronts and the paired non-inferiority test."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .amortizer import InferenceModel
from .config import SPLITS, ExperimentConfig
from .denoiser import AnalyticDenoiser, MLPDenoiser
from .operators import DegradationOperator, observe
from .prior import exact_posterior, sample_prior
from .samplers import SamplerError, config_dict, lavps_sample, mgdm_sample
from .stats import t_ppf

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("instance_id", "method", "config_id", "mse", "psnr", "sw1", "grad_steps",
                  "denoiser_calls", "wallclock_s")
PSNR_PEAK_RANGE = 2.0  # signals live roughly in [-1, 1]


# --------------------------------------------------------------------------- metrics


def psnr(mse: float, peak_range: float = PSNR_PEAK_RANGE) -> float:
    if mse <= 0:
        return math.inf
    return 10.0 * math.log10(peak_range**2 / mse)


def wasserstein1_1d(a, b) -> float:
    """Exact W1 between two empirical distributions on the line: ``int |F_a - F_b|``."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("empty sample")
    pts = np.concatenate([a, b])
    pts.sort(kind="mergesort")
    widths = np.diff(pts)
    Fa = np.searchsorted(a, pts[:-1], side="right") / a.size
    Fb = np.searchsorted(b, pts[:-1], side="right") / b.size
    return float(np.sum(np.abs(Fa - Fb) * widths))


def sliced_w1(samples, reference) -> np.ndarray:
    """Per-axis 1-D Wasserstein-1 distances between two ``(n, d)`` sample sets."""
    samples = np.atleast_2d(samples)
    reference = np.atleast_2d(reference)
    if samples.shape[1] != reference.shape[1]:
        raise ValueError("sample sets have different dimensions")
    return np.array([wasserstein1_1d(samples[:, j], reference[:, j]) for j in range(samples.shape[1])])


@dataclass
class RunMetrics:
    """One sampler run on one instance; ``error`` is set when the run aborted."""

    instance_id: str
    method: str
    config_id: str
    mse: float
    psnr: float
    sw1: float
    grad_steps: int
    denoiser_calls: int
    wallclock_s: float
    error: str | None = None

    def row(self) -> list:
        return [_fmt(getattr(self, c)) for c in METRIC_COLUMNS]


def _fmt(v):
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else ("nan" if math.isnan(v) else ("inf" if v > 0 else "-inf"))
    return str(v)


# --------------------------------------------------------------------------- Pareto


@dataclass(frozen=True)
class ParetoPoint:
    config_id: str
    quality: float
    cost: float


def pareto_front(points) -> list[ParetoPoint]:
    """Non-dominated subset (both coordinates lower-is-better), sorted by cost.

    ``points`` holds ``(quality, cost)`` pairs, ``(config_id, quality, cost)``
    triples or :class:`ParetoPoint` objects. A point is dominated when another is
    no worse in both coordinates and strictly better in one; exact duplicates are
    all kept. Points with a NaN coordinate are dropped.
    """
    pts = []
    for i, p in enumerate(points):
        if isinstance(p, ParetoPoint):
            pts.append(p)
        elif len(p) == 2:
            pts.append(ParetoPoint(str(i), float(p[0]), float(p[1])))
        else:
            pts.append(ParetoPoint(str(p[0]), float(p[1]), float(p[2])))
    pts = [p for p in pts if not (math.isnan(p.quality) or math.isnan(p.cost))]
    pts.sort(key=lambda p: (p.cost, p.quality))
    front, best = [], math.inf
    i = 0
    while i < len(pts):
        j = i
        while j < len(pts) and pts[j].cost == pts[i].cost:
            j += 1
        q_min = pts[i].quality  # group sorted by quality
        if q_min < best:
            front.extend(p for p in pts[i:j] if p.quality == q_min)
            best = q_min
        i = j
    return front


# --------------------------------------------------------------------------- non-inferiority


@dataclass
class NonInferiorityResult:
    """Paired one-sided test of ``H0: mean(baseline - candidate) <= -margin``."""

    n: int
    mean: float
    sd: float
    margin: float
    alpha: float
    statistic: float
    critical: float
    reject: bool

    def to_dict(self) -> dict:
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, float) and not math.isfinite(v):
                out[k] = _fmt(v)
        return out


def non_inferiority_test(scores_baseline, scores_candidate, margin: float = 0.003,
                         alpha: float = 0.05) -> NonInferiorityResult:
    """Paired non-inferiority t-test for lower-is-better scores.

    ``delta_i = baseline_i - candidate_i`` and ``T = (mean + margin) / (sd / sqrt(n))``
    is compared with the Student-t ``(1 - alpha)`` quantile on ``n - 1`` degrees of
    freedom; rejecting ``H0`` means the candidate is non-inferior. With zero
    spread, ``T`` is taken as ``+inf`` (``-inf``) when ``mean + margin`` is positive
    (negative); the case ``mean + margin = 0`` is undefined and raises.
    """
    b = np.asarray(scores_baseline, dtype=np.float64).ravel()
    c = np.asarray(scores_candidate, dtype=np.float64).ravel()
    if b.shape != c.shape:
        raise ValueError(f"paired scores need equal length, got {b.size} and {c.size}")
    n = b.size
    if n < 2:
        raise ValueError(f"non-inferiority test needs n >= 2 pairs, got {n}")
    if not (0 < alpha < 1):
        raise ValueError("alpha must lie in (0, 1)")
    delta = b - c
    if not np.all(np.isfinite(delta)):
        raise ValueError("scores must be finite")
    mean = float(delta.mean())
    sd = float(delta.std(ddof=1))
    num = mean + margin
    if sd == 0.0:
        if num == 0.0:
            raise ValueError("zero variance with mean + margin = 0: the test statistic is undefined")
        stat = math.copysign(math.inf, num)
    else:
        stat = num / (sd / math.sqrt(n))
    crit = t_ppf(1.0 - alpha, n - 1)
    return NonInferiorityResult(n, mean, sd, float(margin), float(alpha), stat, crit, bool(stat > crit))


# --------------------------------------------------------------------------- instances and models


@dataclass
class Instance:
    instance_id: str
    x: np.ndarray
    op: DegradationOperator
    y: np.ndarray
    sampler_seed: np.random.SeedSequence
    oracle_seed: np.random.SeedSequence


# root seed children: 0 denoiser, 1 amortizer, 2 validation, 3 test
def _child(seed: int, *key) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed, spawn_key=tuple(key))


def make_instances(cfg: ExperimentConfig, split: str) -> list[Instance]:
    """Seed-deterministic (clean signal, operator, observation) triples of one split."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    gm = cfg.prior()
    fam = cfg.family(cfg.raw["bench"]["distribution"])
    split_idx = 2 + SPLITS.index(split)
    out = []
    prefix = "val" if split == "validation" else "test"
    for i in range(cfg.raw["bench"][f"n_{split}"]):
        data_ss, sampler_ss, oracle_ss = _child(cfg.seed, split_idx, i).spawn(3)
        rng = np.random.default_rng(data_ss)
        x = sample_prior(gm, 1, rng)[0]
        op = fam.sample(rng)
        y = observe(op, x, rng)
        out.append(Instance(f"{prefix}-{i:04d}", x, op, y, sampler_ss, oracle_ss))
    return out


def prepare_models(cfg: ExperimentConfig, denoiser_path=None, amortizer_path=None):
    """Denoiser and (if LAVPS is configured) inference model, loaded or trained."""
    sched = cfg.schedule()
    gm = cfg.prior()
    den_cfg = cfg.raw["denoiser"]
    denoiser_path = denoiser_path or den_cfg.get("checkpoint")
    if den_cfg["kind"] == "analytic":
        denoiser = AnalyticDenoiser(gm)
    elif denoiser_path:
        denoiser = MLPDenoiser.load(denoiser_path, sched)
    else:
        denoiser = train_denoiser_from_config(cfg)
    inf_model = None
    if "lavps" in cfg.raw["sampler"]["methods"]:
        amortizer_path = amortizer_path or cfg.raw["amortizer"].get("checkpoint")
        if amortizer_path:
            inf_model = InferenceModel.load(amortizer_path, sched, denoiser)
        else:
            inf_model = train_amortizer_from_config(cfg, denoiser)
    return denoiser, inf_model


def train_denoiser_from_config(cfg: ExperimentConfig) -> MLPDenoiser:
    d = cfg.raw["denoiser"]
    tc = cfg.denoiser_train_config()
    seed = int(np.random.default_rng(_child(cfg.seed, 0)).integers(2**63))
    model = MLPDenoiser(cfg.schedule(), tuple(d["hidden"]), tc.steps, tc.batch, tc.lr, tc.weights, seed)
    return model.fit_prior(cfg.prior())


def train_amortizer_from_config(cfg: ExperimentConfig, denoiser) -> InferenceModel:
    a = cfg.raw["amortizer"]
    tc = cfg.amortizer_train_config()
    seed = int(np.random.default_rng(_child(cfg.seed, 1)).integers(2**63))
    model = InferenceModel(cfg.schedule(), denoiser, cfg.family("in_distribution"), tuple(a["hidden"]),
                           tc.steps, tc.batch, tc.ops_per_batch, tc.lr, tc.r_switch, tc.K, tuple(tc.omega), seed)
    return model.fit_prior(cfg.prior())


# --------------------------------------------------------------------------- runs


def run_instance(cfg: ExperimentConfig, inst: Instance, denoiser, inf_model, trace_dir=None) -> list[RunMetrics]:
    """Every configured (method, sampler config) on one instance.

    All runs on an instance share the sampler seed so method comparisons are paired.
    """
    sched = cfg.schedule()
    bench = cfg.raw["bench"]
    n_chains = bench["n_chains"]
    reference = None
    if n_chains >= 2:
        reference = exact_posterior(cfg.prior(), inst.op, inst.y).sample(bench["n_oracle"], inst.oracle_seed)
    out = []
    for method in cfg.raw["sampler"]["methods"]:
        for cid, scfg in cfg.sampler_configs(method):
            rng = np.random.default_rng(inst.sampler_seed)
            start = time.perf_counter()
            error = None
            try:
                if method == "mgdm":
                    xs, trace = mgdm_sample(denoiser, sched, inst.op, inst.y, scfg, rng, n=n_chains)
                else:
                    xs, trace = lavps_sample(denoiser, inf_model, sched, inst.op, inst.y, scfg, rng, n=n_chains)
            except SamplerError as exc:
                error, trace, xs = str(exc), exc.trace, None
            except FloatingPointError as exc:
                error, trace, xs = str(exc), None, None
            wall = time.perf_counter() - start if bench["record_wallclock"] else 0.0
            if trace_dir is not None and trace is not None:
                trace.write(Path(trace_dir) / f"{inst.instance_id}__{method}__{cid}.jsonl")
            if error is not None:
                logger.warning("run %s/%s/%s failed: %s", inst.instance_id, method, cid, error)
                out.append(RunMetrics(inst.instance_id, method, cid, math.nan, math.nan, math.nan,
                                      0, 0, wall, error))
                continue
            steps, calls = trace.total_grad_steps(), trace.total_denoiser_calls()
            if steps != scfg.expected_grad_steps(sched.T) or calls != scfg.expected_denoiser_calls(sched.T):
                raise RuntimeError(f"trace accounting mismatch for {inst.instance_id}/{method}/{cid}")
            mse = float(np.mean((xs - inst.x) ** 2))
            sw1 = float(sliced_w1(xs, reference).max()) if reference is not None else math.nan
            out.append(RunMetrics(inst.instance_id, method, cid, mse, psnr(mse), sw1, steps, calls, wall))
    return out


@dataclass
class ExperimentResult:
    metrics: list = field(default_factory=list)
    pareto: list = field(default_factory=list)  # (split, method, ParetoPoint)
    tests: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    @property
    def failed(self) -> bool:
        return bool(self.failures)


def n_threads() -> int:
    env = os.environ.get("LAVPS_THREADS")
    if env is None:
        return min(4, os.cpu_count() or 1)
    n = int(env)
    if n < 1:
        raise ValueError("LAVPS_THREADS must be >= 1")
    return n


def summarize(cfg: ExperimentConfig, metrics: list[RunMetrics]) -> tuple[list, dict]:
    """Pareto fronts per (split, method) and paired tests of LAVPS against MGDM."""
    pareto = []
    for split in cfg.raw["bench"]["splits"]:
        prefix = "val-" if split == "validation" else "test-"
        rows = [m for m in metrics if m.instance_id.startswith(prefix) and m.error is None]
        for method in cfg.raw["sampler"]["methods"]:
            pts = []
            for cid, _ in cfg.sampler_configs(method):
                sel = [m for m in rows if m.method == method and m.config_id == cid]
                if sel:
                    pts.append((cid, float(np.mean([m.mse for m in sel])),
                                float(np.mean([m.denoiser_calls for m in sel]))))
            pareto.extend((split, method, p) for p in pareto_front(pts))

    bench = cfg.raw["bench"]
    split = bench["splits"][-1]
    prefix = "val-" if split == "validation" else "test-"
    report = {"split": split, "metric": "mse", "baseline": "mgdm", "candidate": "lavps",
              "margin": bench["delta"], "alpha": bench["alpha"], "tests": []}
    methods = cfg.raw["sampler"]["methods"]
    if "mgdm" in methods and "lavps" in methods:
        for cid, _ in cfg.sampler_configs("mgdm"):
            base = {m.instance_id: m.mse for m in metrics
                    if m.method == "mgdm" and m.config_id == cid and m.error is None and m.instance_id.startswith(prefix)}
            cand = {m.instance_id: m.mse for m in metrics
                    if m.method == "lavps" and m.config_id == cid and m.error is None and m.instance_id.startswith(prefix)}
            ids = sorted(set(base) & set(cand))
            entry = {"config_id": cid}
            try:
                res = non_inferiority_test([base[i] for i in ids], [cand[i] for i in ids],
                                           bench["delta"], bench["alpha"])
                entry.update(res.to_dict())
            except ValueError as exc:
                entry["error"] = str(exc)
            report["tests"].append(entry)
    return pareto, report


def write_outputs(cfg: ExperimentConfig, result: ExperimentResult, out_dir) -> None:
    out = Path(out_dir)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for m in result.metrics:
            w.writerow(m.row())
    with open(out / "pareto.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("split", "method", "config_id", "quality", "cost"))
        for split, method, p in result.pareto:
            w.writerow((split, method, p.config_id, _fmt(p.quality), _fmt(p.cost)))
    with open(out / "tests.json", "w") as fh:
        json.dump(result.tests, fh, indent=2, sort_keys=True)
        fh.write("\n")
    configs = {cid: config_dict(c) for cid, c in cfg.sampler_configs("mgdm")}
    for c in configs.values():
        c.pop("mode")
    with open(out / "configs.json", "w") as fh:
        json.dump(configs, fh, indent=2, sort_keys=True)
        fh.write("\n")


def run_experiment(cfg: ExperimentConfig, out_dir, denoiser=None, inf_model=None, threads=None,
                   denoiser_path=None, amortizer_path=None) -> ExperimentResult:
    """Generate instances, run every configured sampler and write the result files.

    Writes ``metrics.csv``, ``pareto.csv``, ``tests.json``, ``configs.json`` and
    (optionally) ``traces/*.jsonl`` under ``out_dir``. Aborted runs are recorded
    and the experiment continues; ``result.failed`` reports them.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if denoiser is None or (inf_model is None and "lavps" in cfg.raw["sampler"]["methods"]):
        d, i = prepare_models(cfg, denoiser_path, amortizer_path)
        denoiser = denoiser or d
        inf_model = inf_model or i
    trace_dir = None
    if cfg.raw["bench"]["write_traces"]:
        trace_dir = out / "traces"
        trace_dir.mkdir(exist_ok=True)
    instances = [inst for split in cfg.raw["bench"]["splits"] for inst in make_instances(cfg, split)]
    workers = threads or n_threads()
    with ThreadPoolExecutor(max_workers=workers) as pool:
        per_instance = list(pool.map(lambda inst: run_instance(cfg, inst, denoiser, inf_model, trace_dir),
                                     instances))
    metrics = [m for rows in per_instance for m in rows]
    pareto, tests = summarize(cfg, metrics)
    result = ExperimentResult(metrics, pareto, tests, [m for m in metrics if m.error is not None])
    write_outputs(cfg, result, out)
    return result
