"""Command-line entry point.

Subcommands: ``train-denoiser``, ``train-amortizer``, ``sample``, ``bench`` and
``stats``. Exit status is 0 on success, 1 on invalid input and 2 when a run fails.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from .bench import make_instances, non_inferiority_test, prepare_models, run_experiment
from .bench import train_amortizer_from_config, train_denoiser_from_config
from .checkpoint import CheckpointError
from .config import SPLITS, ConfigError, ExperimentConfig
from .denoiser import AnalyticDenoiser, MLPDenoiser
from .samplers import SamplerError, lavps_sample, mgdm_sample

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2
BUNDLED = ("smoke", "default")

logger = logging.getLogger("lavps")


class UsageError(ValueError):
    pass


def bundled_config(name: str) -> Path:
    """Path of a config shipped with the package (``smoke`` or ``default``)."""
    if name not in BUNDLED:
        raise UsageError(f"no bundled config named {name!r}; choose from {BUNDLED}")
    return Path(str(resources.files("lavps") / "configs" / f"{name}.yaml"))


def load_config(args) -> ExperimentConfig:
    path = Path(args.config)
    if not path.exists() and args.config in BUNDLED:
        path = bundled_config(args.config)
    cfg = ExperimentConfig.load(path)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train_denoiser(args) -> int:
    cfg = load_config(args)
    model = train_denoiser_from_config(cfg)
    path = _out_dir(args) / "denoiser.ckpt"
    model.save(path)
    print(f"denoiser checkpoint written to {path} (final loss {model.loss_curve_[-1]:.6f})"
          if model.loss_curve_ else f"denoiser checkpoint written to {path}")
    return EXIT_OK


def _load_denoiser(cfg, path):
    if cfg.raw["denoiser"]["kind"] == "analytic":
        return AnalyticDenoiser(cfg.prior())
    path = path or cfg.raw["denoiser"].get("checkpoint")
    if not path:
        raise UsageError("a learned denoiser needs --denoiser or denoiser.checkpoint")
    return MLPDenoiser.load(path, cfg.schedule())


def cmd_train_amortizer(args) -> int:
    cfg = load_config(args)
    denoiser = _load_denoiser(cfg, args.denoiser)
    model = train_amortizer_from_config(cfg, denoiser)
    path = _out_dir(args) / "amortizer.ckpt"
    model.save(path)
    print(f"inference-model checkpoint written to {path}")
    return EXIT_OK


def _parse_instance(spec: str):
    split, _, idx = spec.partition(":")
    if split not in SPLITS or not idx.isdigit():
        raise UsageError(f"--instance must look like 'test:3' or 'validation:0', got {spec!r}")
    return split, int(idx)


def cmd_sample(args) -> int:
    cfg = load_config(args)
    split, idx = _parse_instance(args.instance)
    n = cfg.raw["bench"][f"n_{split}"] if split in cfg.raw["bench"]["splits"] else 0
    raw = cfg.to_dict()
    raw["bench"][f"n_{split}"] = max(n, idx + 1)
    if split not in raw["bench"]["splits"]:
        raw["bench"]["splits"].append(split)
    inst = make_instances(ExperimentConfig(raw), split)[idx]
    configs = dict(cfg.sampler_configs(args.method))
    if args.config_id not in configs:
        raise UsageError(f"unknown --config-id {args.config_id!r}; available: {sorted(configs)}")
    scfg = configs[args.config_id]
    denoiser = _load_denoiser(cfg, args.denoiser)
    sched = cfg.schedule()
    rng = np.random.default_rng(inst.sampler_seed)
    out = _out_dir(args)
    stem = f"{inst.instance_id}__{args.method}__{args.config_id}"
    try:
        if args.method == "mgdm":
            xs, trace = mgdm_sample(denoiser, sched, inst.op, inst.y, scfg, rng, n=args.n_chains)
        else:
            if args.amortizer is None and cfg.raw["amortizer"].get("checkpoint") is None:
                raise UsageError("lavps sampling needs --amortizer or amortizer.checkpoint")
            _, inf_model = prepare_models(cfg, args.denoiser, args.amortizer)
            xs, trace = lavps_sample(denoiser, inf_model, sched, inst.op, inst.y, scfg, rng, n=args.n_chains)
    except SamplerError as exc:
        exc.trace.write(out / f"{stem}.trace.jsonl")
        raise
    trace.write(out / f"{stem}.trace.jsonl")
    record = {"instance_id": inst.instance_id, "method": args.method, "config_id": args.config_id,
              "x_true": inst.x.tolist(), "y": inst.y.tolist(), "operator": inst.op.to_dict(),
              "samples": xs.tolist(), "mse": float(np.mean((xs - inst.x) ** 2))}
    with open(out / f"{stem}.json", "w") as fh:
        json.dump(_plain(record), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"{stem}: mse {record['mse']:.6f}; outputs in {out}")
    return EXIT_OK


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def cmd_bench(args) -> int:
    cfg = load_config(args)
    out = _out_dir(args)
    result = run_experiment(cfg, out, threads=args.threads, denoiser_path=args.denoiser,
                            amortizer_path=args.amortizer)
    print(f"{len(result.metrics)} runs written to {out}")
    if result.failed:
        print(f"{len(result.failures)} runs failed", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


def _read_scores(path, method, config_id, metric):
    rows = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if method is not None and row["method"] != method:
                continue
            if config_id is not None and row["config_id"] != config_id:
                continue
            key = (row["instance_id"], row["config_id"]) if method is not None else (
                row["instance_id"], row["method"], row["config_id"])
            try:
                rows[key] = float(row[metric])
            except KeyError as exc:
                raise UsageError(f"{path} has no column {metric!r}") from exc
    return rows


def cmd_stats(args) -> int:
    if (args.baseline_method is None) != (args.candidate_method is None):
        raise UsageError("give both --baseline-method and --candidate-method or neither")
    base = _read_scores(args.baseline, args.baseline_method, args.config_id, args.metric)
    cand = _read_scores(args.candidate, args.candidate_method, args.config_id, args.metric)
    keys = sorted(set(base) & set(cand))
    pairs = [(base[k], cand[k]) for k in keys if math.isfinite(base[k]) and math.isfinite(cand[k])]
    if len(pairs) < 2:
        raise UsageError(f"need at least 2 paired finite scores, found {len(pairs)}")
    b, c = zip(*pairs)
    res = non_inferiority_test(b, c, args.delta, args.alpha)
    report = {"metric": args.metric, **res.to_dict(),
              "conclusion": "non-inferior" if res.reject else "non-inferiority not shown"}
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out_dir is not None:
        (_out_dir(args) / "stats.json").write_text(text + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lavps", description="Amortised diffusion posterior sampling experiments")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default="."):
        sp.add_argument("--config", required=True, help="YAML config path or a bundled name (smoke, default)")
        sp.add_argument("--seed", type=int, default=None, help="override the root seed")
        sp.add_argument("--out-dir", default=out_default, help="output directory")

    sp = sub.add_parser("train-denoiser", help="fit the learned denoiser")
    common(sp)
    sp.set_defaults(func=cmd_train_denoiser)

    sp = sub.add_parser("train-amortizer", help="fit the inference model")
    common(sp)
    sp.add_argument("--denoiser", help="denoiser checkpoint (learned denoisers only)")
    sp.set_defaults(func=cmd_train_amortizer)

    sp = sub.add_parser("sample", help="run one sampler on one generated instance")
    common(sp)
    sp.add_argument("--denoiser")
    sp.add_argument("--amortizer")
    sp.add_argument("--method", choices=("mgdm", "lavps"), default="mgdm")
    sp.add_argument("--config-id", default="c000")
    sp.add_argument("--instance", default="test:0", help="split:index, e.g. test:3")
    sp.add_argument("--n-chains", type=int, default=1)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("bench", help="run the benchmark and write metrics, Pareto and test files")
    common(sp)
    sp.add_argument("--denoiser")
    sp.add_argument("--amortizer")
    sp.add_argument("--threads", type=int, default=None, help="work-pool size (default: LAVPS_THREADS)")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("stats", help="paired non-inferiority test between two metric CSVs")
    sp.add_argument("baseline")
    sp.add_argument("candidate")
    sp.add_argument("--delta", type=float, default=0.003)
    sp.add_argument("--alpha", type=float, default=0.05)
    sp.add_argument("--metric", default="mse")
    sp.add_argument("--baseline-method")
    sp.add_argument("--candidate-method")
    sp.add_argument("--config-id")
    sp.add_argument("--out-dir", default=None)
    sp.set_defaults(func=cmd_stats)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (SamplerError, FloatingPointError, RuntimeError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
