"""Experiment configuration: YAML load/dump with key-naming validation.

Layout (every section optional except ``prior`` and ``operators``)::

    seed: 0
    schedule: {T: 1000, kind: linear-flow}
    prior: {random: {dim: 8, n_components: 4, seed: 1}}    # or weights/means/covs
    sigma_y: 0.05
    operators:
      in_distribution: {kind: bernoulli_mask, p_low: 0.3, p_high: 0.7}
      out_of_distribution: {kind: blur_kernels, length: 3}
    denoiser: {kind: analytic}                              # or learned + training keys
    amortizer: {hidden: [128, 128], steps: 3000, ...}
    sampler:
      base: {K: 100, R: 1, M: 1, eta: 0.01, G_start: 1, G_end: 3, r_switch: 0.8, omega: [1.0]}
      grid: {G_start: [1, 3], G_end: [0, 1, 3, 10]}
      methods: [mgdm, lavps]
    bench: {splits: [validation, test], n_validation: 32, n_test: 300, ...}

The amortizer is trained on the sampler's coarse grid and midpoint weights, and
on the largest switch subset any grid point uses.
"""

from __future__ import annotations

import copy
from pathlib import Path

import numpy as np
import yaml
from sklearn.model_selection import ParameterGrid

from .amortizer import AmortizerTrainConfig
from .denoiser import DenoiserTrainConfig
from .operators import DEFAULT_SIGMA_Y, FAMILIES, OperatorFamily, family_from_dict
from .prior import GaussianMixture, random_mixture
from .samplers import MODES, SamplerConfig
from .schedule import NoiseSchedule, make_schedule

SPLITS = ("validation", "test")
DISTRIBUTIONS = ("in_distribution", "out_of_distribution")

DEFAULTS = {
    "seed": 0,
    "schedule": {"T": 1000, "kind": "linear-flow"},
    "sigma_y": DEFAULT_SIGMA_Y,
    "denoiser": {"kind": "analytic", "checkpoint": None, "hidden": [128, 128], "steps": 2000,
                 "batch": 256, "lr": 1e-3},
    "amortizer": {"checkpoint": None, "hidden": [256, 256, 256], "steps": 3000, "batch": 128,
                  "ops_per_batch": 8, "lr": 1e-3},
    "sampler": {
        "base": {"K": 100, "R": 1, "M": 1, "eta": 0.01, "G_start": 1, "G_end": 3, "r_switch": 0.8,
                 "omega": [1.0]},
        "grid": {"G_start": [1, 3], "G_end": [0, 1, 3, 10], "eta": [0.01, 0.03], "M": [1, 5],
                 "r_switch": [0.7, 0.8, 0.9]},
        "methods": ["mgdm", "lavps"],
    },
    "bench": {"splits": ["validation", "test"], "n_validation": 32, "n_test": 300, "n_chains": 1,
              "n_oracle": 1000, "distribution": "in_distribution", "delta": 0.003, "alpha": 0.05,
              "record_wallclock": True, "write_traces": True},
}

GRID_KEYS = ("K", "R", "M", "eta", "G_start", "G_end", "r_switch")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


def _merge(default, given):
    if isinstance(default, dict) and isinstance(given, dict):
        out = copy.deepcopy(default)
        for k, v in given.items():
            out[k] = _merge(default.get(k), v) if k in default else copy.deepcopy(v)
        return out
    return copy.deepcopy(given)


def _fail(key, msg, value):
    raise ConfigError(f"config key '{key}': {msg} (got {value!r})")


def _need(cond, key, msg, value):
    if not cond:
        _fail(key, msg, value)


def _pos_int(d, key, path, minimum=1):
    v = d.get(key)
    _need(isinstance(v, int) and not isinstance(v, bool) and v >= minimum, f"{path}.{key}",
          f"must be an integer >= {minimum}", v)
    return v


class ExperimentConfig:
    """Validated experiment description; ``raw`` holds the merged plain-data form."""

    def __init__(self, raw: dict):
        self.raw = raw
        self._validate()

    # -- construction
    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError(f"config root must be a mapping, got {type(data).__name__}")
        unknown = set(data) - set(DEFAULTS) - {"prior", "operators"}
        if unknown:
            key = sorted(unknown)[0]
            _fail(key, "unknown top-level key", data[key])
        raw = _merge(DEFAULTS, data)
        given_sampler = data.get("sampler")
        if isinstance(given_sampler, dict) and "grid" in given_sampler:
            # a configured grid replaces the default sweep instead of extending it
            raw["sampler"]["grid"] = copy.deepcopy(given_sampler["grid"])
        return cls(raw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)

    def dump(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True, default_flow_style=None)

    def save(self, path) -> None:
        Path(path).write_text(self.dump())

    def with_seed(self, seed: int) -> "ExperimentConfig":
        raw = self.to_dict()
        raw["seed"] = int(seed)
        return ExperimentConfig(raw)

    # -- validation
    def _validate(self):
        r = self.raw
        for section in ("schedule", "denoiser", "amortizer", "sampler", "bench"):
            _need(isinstance(r.get(section), dict), section, "must be a mapping", r.get(section))
        _need(isinstance(r["sampler"].get("base"), dict), "sampler.base", "must be a mapping",
              r["sampler"].get("base"))
        _need(isinstance(r.get("seed"), int) and r["seed"] >= 0, "seed", "must be a non-negative integer",
              r.get("seed"))
        sch = r["schedule"]
        _pos_int(sch, "T", "schedule", minimum=2)
        try:
            make_schedule(sch["T"], sch["kind"])
        except ValueError as exc:
            _fail("schedule.kind", str(exc), sch["kind"])
        _need(isinstance(r["sigma_y"], (int, float)) and r["sigma_y"] > 0, "sigma_y", "must be positive",
              r["sigma_y"])
        if "prior" not in r:
            _fail("prior", "is required", None)
        try:
            gm = self.prior()
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"config key 'prior': {exc}") from exc
        ops = r.get("operators")
        _need(isinstance(ops, dict) and "in_distribution" in ops, "operators.in_distribution",
              "is required", ops)
        for label, spec in ops.items():
            key = f"operators.{label}"
            _need(label in DISTRIBUTIONS, key, f"label must be one of {DISTRIBUTIONS}", label)
            if spec is None:
                continue
            _need(isinstance(spec, dict) and spec.get("kind") in FAMILIES, f"{key}.kind",
                  f"must be one of {sorted(FAMILIES)}", None if not isinstance(spec, dict) else spec.get("kind"))
            if "sigma_y" in spec:
                _need(isinstance(spec["sigma_y"], (int, float)) and spec["sigma_y"] > 0, f"{key}.sigma_y",
                      "must be positive", spec["sigma_y"])
            try:
                fam = self.family(label)
            except (ValueError, KeyError, TypeError) as exc:
                raise ConfigError(f"config key '{key}': {exc}") from exc
            _need(fam.dim == gm.dim, f"{key}", f"operator dimension must equal prior dimension {gm.dim}",
                  fam.dim)

        den = r["denoiser"]
        _need(den.get("kind") in ("analytic", "learned"), "denoiser.kind", "must be 'analytic' or 'learned'",
              den.get("kind"))
        if den["kind"] == "learned" and den.get("checkpoint") is None:
            try:
                self.denoiser_train_config().validate()
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"config key 'denoiser': {exc}") from exc

        smp = r["sampler"]
        methods = smp.get("methods")
        _need(isinstance(methods, list) and methods and all(m in MODES for m in methods), "sampler.methods",
              f"must be a non-empty list drawn from {MODES}", methods)
        grid = smp.get("grid") or {}
        _need(isinstance(grid, dict), "sampler.grid", "must be a mapping", grid)
        for k, vals in grid.items():
            _need(k in GRID_KEYS, f"sampler.grid.{k}", f"must be one of {GRID_KEYS}", k)
            _need(isinstance(vals, list) and len(vals) > 0, f"sampler.grid.{k}", "must be a non-empty list", vals)
        base = smp["base"]
        unknown = set(base) - set(GRID_KEYS) - {"omega"}
        if unknown:
            key = sorted(unknown)[0]
            _fail(f"sampler.base.{key}", "unknown sampler setting", base[key])
        for cid, cfg in self.sampler_configs("mgdm"):
            try:
                cfg.validate(sch["T"])
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"config key 'sampler' ({cid}): {exc}") from exc
        _need(len({c.K for _, c in self.sampler_configs("mgdm")}) == 1, "sampler.grid.K",
              "all grid points must share one K (the amortizer is trained on that grid)", grid.get("K"))

        if "lavps" in methods and r["amortizer"].get("checkpoint") is None:
            try:
                self.amortizer_train_config().validate(sch["T"])
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"config key 'amortizer': {exc}") from exc

        b = r["bench"]
        splits = b.get("splits")
        _need(isinstance(splits, list) and splits and all(s in SPLITS for s in splits), "bench.splits",
              f"must be a non-empty list drawn from {SPLITS}", splits)
        for s in splits:
            _pos_int(b, f"n_{s}", "bench")
        _pos_int(b, "n_chains", "bench")
        _pos_int(b, "n_oracle", "bench")
        _need(b.get("distribution") in DISTRIBUTIONS, "bench.distribution", f"must be one of {DISTRIBUTIONS}",
              b.get("distribution"))
        _need(ops.get(b["distribution"]) is not None, "bench.distribution",
              "refers to an operator family that is not configured", b["distribution"])
        _need(isinstance(b.get("delta"), (int, float)) and b["delta"] >= 0, "bench.delta",
              "must be a non-negative number", b.get("delta"))
        _need(isinstance(b.get("alpha"), (int, float)) and 0 < b["alpha"] < 1, "bench.alpha",
              "must lie in (0, 1)", b.get("alpha"))
        for flag in ("record_wallclock", "write_traces"):
            _need(isinstance(b.get(flag), bool), f"bench.{flag}", "must be true or false", b.get(flag))

    # -- typed views
    @property
    def seed(self) -> int:
        return self.raw["seed"]

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.raw["schedule"]["T"], self.raw["schedule"]["kind"])

    def prior(self) -> GaussianMixture:
        spec = self.raw["prior"]
        if not isinstance(spec, dict):
            raise ValueError("prior must be a mapping")
        if "random" in spec:
            rs = dict(spec["random"])
            return random_mixture(rs.pop("dim"), rs.pop("n_components"), np.random.default_rng(rs.pop("seed", 0)),
                                  **rs)
        return GaussianMixture.from_dict(spec)

    def family(self, label: str = "in_distribution") -> OperatorFamily:
        spec = dict(self.raw["operators"][label])
        if spec["kind"] != "fixed":
            spec.setdefault("sigma_y", self.raw["sigma_y"])
        return family_from_dict(spec)

    def denoiser_train_config(self) -> DenoiserTrainConfig:
        d = self.raw["denoiser"]
        return DenoiserTrainConfig(d["steps"], d["batch"], d["lr"], d.get("weights"))

    def sampler_grid(self) -> list[dict]:
        grid = self.raw["sampler"].get("grid") or {}
        return list(ParameterGrid(grid)) if grid else [{}]

    def sampler_configs(self, mode: str) -> list[tuple[str, SamplerConfig]]:
        """``(config_id, SamplerConfig)`` for every grid point, in a fixed order."""
        base = dict(self.raw["sampler"]["base"])
        base["omega"] = tuple(base.get("omega", (1.0,)))
        rec = self.raw["bench"]["record_wallclock"]
        out = []
        for i, point in enumerate(self.sampler_grid()):
            fields = {**base, **point}
            out.append((f"c{i:03d}", SamplerConfig(mode=mode, diagnostics=False, record_wallclock=rec, **fields)))
        return out

    def amortizer_train_config(self) -> AmortizerTrainConfig:
        a = self.raw["amortizer"]
        cfgs = [c for _, c in self.sampler_configs("lavps")]
        return AmortizerTrainConfig(a["steps"], a["batch"], a["ops_per_batch"], a["lr"],
                                    min(c.r_switch for c in cfgs), cfgs[0].K, cfgs[0].omega)
