# FILE: pcno-toolkit/main.py

import argparse
import csv
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional

from pydantic import ValidationError

import settings
from logging_config import setup_logging
from pcno import benchmark, datagen, dataset_io, gradcheck, training
from pcno.error_utils import EXIT_OK, EXIT_USAGE, PCNOError, handle_exception, not_found_error, usage_error
from pcno.geometry import preprocess_sample
from pcno.pydantic_models import RunConfig

PROBLEMS = ("advdiff", "darcy", "burgers")
CHANNELS = {
    "advdiff": {"a": ["f", "D", "u_l"], "u": ["u"]},
    "darcy": {"a": ["a"], "u": ["u"]},
    "burgers": {"a": ["u0"], "u": ["u1"]},
}


# --- CONFIG RESOLUTION ---

def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(document: Dict[str, Any], overrides: List[str]) -> Dict[str, Any]:
    """Patch a nested config document with key.path=value pairs (values parsed as JSON)."""
    for item in overrides:
        if "=" not in item:
            raise usage_error(f"override must look like key.path=value, got {item!r}")
        key, raw = item.split("=", 1)
        node = document
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise usage_error(f"override {key!r} descends into a non-section")
        node[parts[-1]] = _parse_value(raw)
    return document


def load_run_config(path: Optional[str], overrides: List[str]) -> RunConfig:
    document: Dict[str, Any] = {}
    if path:
        if not os.path.isfile(path):
            raise not_found_error(f"Config file not found: {path}")
        with open(path) as fh:
            try:
                document = json.load(fh)
            except json.JSONDecodeError as e:
                raise usage_error(f"config {path} is not valid JSON: {e}")
    document = apply_overrides(document, overrides)
    if isinstance(document.get("model", {}), dict):
        document.setdefault("model", {}).setdefault("dtype", settings.DEFAULT_DTYPE)
    return RunConfig(**document)


def write_resolved_config(out_dir: str, command: str, config: RunConfig, args: argparse.Namespace) -> None:
    os.makedirs(out_dir, exist_ok=True)
    echo = {
        "command": command,
        "seed": args.seed,
        "overrides": list(args.override),
        "config": config.model_dump(),
        "args": {k: v for k, v in sorted(vars(args).items()) if k not in ("handler", "override")},
    }
    with open(os.path.join(out_dir, "resolved_config.json"), "w") as fh:
        json.dump(echo, fh, indent=2, sort_keys=True)


def _require_out(args: argparse.Namespace) -> str:
    if not args.out:
        raise usage_error(f"{args.command} needs --out")
    return args.out


# --- COMMANDS ---

def cmd_gen(args, config: RunConfig) -> int:
    if args.problem not in PROBLEMS:
        raise usage_error(f"unknown problem {args.problem!r}; expected one of {PROBLEMS}")
    if args.n <= 0:
        raise usage_error("--n must be positive")
    out = _require_out(args)
    if args.problem == "advdiff":
        samples = datagen.gen_advdiff_dataset(args.n, args.seed, args.threads, kinds=args.mesh_kinds)
    elif args.problem == "darcy":
        samples = datagen.gen_darcy_dataset(args.n, args.grid, args.seed, args.threads)
    else:
        samples = datagen.gen_burgers_dataset(args.n, args.resolution, args.seed, args.solve_resolution, args.threads)
    manifest = dataset_io.write_dataset(samples, out, problem=args.problem, channel_names=CHANNELS[args.problem])
    write_resolved_config(out, "gen", config, args)
    print(f"wrote {manifest.sample_count} {args.problem} samples to {out}")
    return EXIT_OK


def cmd_preprocess(args, config: RunConfig) -> int:
    out = _require_out(args)
    pre = config.preprocess
    if args.density_mode:
        pre = pre.model_copy(update={"density_mode": args.density_mode})
    if args.intrinsic_dim:
        pre = pre.model_copy(update={"intrinsic_dim": args.intrinsic_dim})
    config = config.model_copy(update={"preprocess": pre})
    reader = dataset_io.open_dataset(args.dataset)
    samples = datagen.parallel_map(lambda i: preprocess_sample(reader[i].without_features(), pre),
                                   list(range(len(reader))), args.threads)
    manifest = dataset_io.write_dataset(samples, out, problem=reader.manifest.problem,
                                        channel_names=reader.manifest.channel_names, units=reader.manifest.units)
    write_resolved_config(out, "preprocess", config, args)
    print(f"preprocessed {manifest.sample_count} samples ({pre.density_mode} density) into {out}")
    return EXIT_OK


def cmd_train(args, config: RunConfig) -> int:
    out = _require_out(args)
    train_set = dataset_io.read_dataset(args.train)
    test_set = dataset_io.read_dataset(args.test) if args.test else []
    write_resolved_config(out, "train", config, args)
    result = training.train(config, train_set, test_set, seed=args.seed)
    training.save_checkpoint(result.best_model, os.path.join(out, "checkpoint.pcno"), config)
    training.write_history_csv(result.history, os.path.join(out, "history.csv"))
    with open(os.path.join(out, "history.json"), "w") as fh:
        json.dump(result.history.model_dump(), fh, indent=2)
    if result.history.status == "diverged":
        raise PCNOError("TRAINING_DIVERGED", "training diverged; history written", {"out": out})
    last = result.history.epochs[-1]
    print(f"trained {len(result.history.epochs)} epochs: train rel-L2 {last.train_rel_l2:.4e}"
          + (f", best test rel-L2 {result.history.best_test_rel_l2:.4e}" if result.history.best_test_rel_l2 is not None else ""))
    return EXIT_OK


def cmd_eval(args, config: RunConfig) -> int:
    out = _require_out(args)
    model = training.load_checkpoint(args.checkpoint)
    samples = dataset_io.read_dataset(args.dataset)
    errors = training.evaluate(model, samples, args.batch_size or config.train.eval_batch_size)
    labels = [s.label for s in samples]
    report = training.summarize_errors(errors, labels)
    write_resolved_config(out, "eval", config, args)
    with open(os.path.join(out, "metrics.json"), "w") as fh:
        json.dump(report.model_dump(), fh, indent=2, sort_keys=True)
    with open(os.path.join(out, "per_sample_errors.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample", "label", "rel_l2"])
        for i in sorted(range(len(samples)), key=lambda k: errors[k]):
            writer.writerow([i, labels[i], repr(float(errors[i]))])
    print(json.dumps(report.model_dump(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args, config: RunConfig) -> int:
    report = gradcheck.run_gradcheck(seed=args.seed, tolerance=args.tolerance, include_model=not args.skip_model)
    if args.out:
        write_resolved_config(args.out, "gradcheck", config, args)
        with open(os.path.join(args.out, "gradcheck.json"), "w") as fh:
            json.dump(report.model_dump(), fh, indent=2, sort_keys=True)
    print(f"{'PASS' if report.passed else 'FAIL'}: worst op {report.worst_op} "
          f"({report.worst_discrepancy:.3e}, tolerance {report.tolerance:.0e})")
    return EXIT_OK if report.passed else 1


def cmd_bench(args, config: RunConfig) -> int:
    report = benchmark.run_benchmark(args.sizes, config.model, seed=args.seed, repeats=args.repeats)
    if args.out:
        write_resolved_config(args.out, "bench", config, args)
        with open(os.path.join(args.out, "bench.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["n_nodes", "seconds"])
            for row in report.rows:
                writer.writerow([row.n_nodes, repr(row.seconds)])
    for row in report.rows:
        print(f"{row.n_nodes:>8d}  {row.seconds:.6f}s")
    if report.exponent is not None:
        print(f"fitted exponent: {report.exponent:.3f}")
    return EXIT_OK


def cmd_inspect(args, config: RunConfig) -> int:
    reader = dataset_io.open_dataset(args.dataset)
    m = reader.manifest
    counts: Dict[str, int] = {}
    for label in reader.labels:
        counts[label] = counts.get(label, 0) + 1
    summary = {"problem": m.problem, "format_version": m.format_version, "samples": m.sample_count, "d": m.dim,
               "intrinsic_dim": m.intrinsic_dim, "d_a": m.d_a, "d_u": m.d_u, "centering": m.centering,
               "density_mode": m.density_mode, "has_features": m.has_features, "labels": counts,
               "nodes": {"min": min(r.n_nodes for r in m.records), "max": max(r.n_nodes for r in m.records)}}
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


# --- PARSER ---

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=str, default=None, help='JSON run configuration')
    common.add_argument('--override', action='append', default=[], metavar='KEY=VALUE',
                        help='patch a config key, e.g. model.width=32 (repeatable)')
    common.add_argument('--seed', type=int, default=0)
    common.add_argument('--out', type=str, default=None)
    common.add_argument('--threads', type=int, default=settings.THREADS)
    common.add_argument('--log-level', type=str, default=settings.LOG_LEVEL)

    parser = argparse.ArgumentParser(description='Point cloud neural operator toolkit.')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('gen', parents=[common], help='generate a PDE dataset')
    p.add_argument('problem', type=str, help=f"one of {', '.join(PROBLEMS)}")
    p.add_argument('--n', type=int, required=True)
    p.add_argument('--grid', type=int, default=65, help='Darcy grid size')
    p.add_argument('--resolution', type=int, default=256, help='Burgers output resolution')
    p.add_argument('--solve-resolution', type=int, default=1024, help='Burgers solver resolution')
    p.add_argument('--mesh-kinds', type=str, nargs='+', choices=list(datagen.MESH_KINDS), default=None,
                   help='advection-diffusion mesh families to cycle through (default: all)')
    p.set_defaults(handler=cmd_gen)

    p = sub.add_parser('preprocess', parents=[common], help='attach geometry features and gradient weights')
    p.add_argument('dataset', type=str)
    p.add_argument('--density-mode', type=str, choices=['uniform', 'pointcloud'], default=None)
    p.add_argument('--intrinsic-dim', type=int, default=None)
    p.set_defaults(handler=cmd_preprocess)

    p = sub.add_parser('train', parents=[common], help='train a model')
    p.add_argument('--train', type=str, required=True)
    p.add_argument('--test', type=str, default=None)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser('eval', parents=[common], help='evaluate a checkpoint')
    p.add_argument('--checkpoint', type=str, required=True)
    p.add_argument('--dataset', type=str, required=True)
    p.add_argument('--batch-size', type=int, default=None)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser('gradcheck', parents=[common], help='finite-difference check of all derivatives')
    p.add_argument('--tolerance', type=float, default=gradcheck.DEFAULT_TOLERANCE)
    p.add_argument('--skip-model', action='store_true')
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser('bench', parents=[common], help='time inference against node count')
    p.add_argument('--sizes', type=int, nargs='+', default=[2000, 4000, 8000, 16000])
    p.add_argument('--repeats', type=int, default=3)
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser('inspect', parents=[common], help='summarize a dataset container')
    p.add_argument('dataset', type=str)
    p.set_defaults(handler=cmd_inspect)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    setup_logging(console_level=args.log_level.upper())

    try:
        config = load_run_config(args.config, args.override)
        return args.handler(args, config)
    except ValidationError as e:
        fields = [".".join(str(p) for p in err["loc"]) for err in e.errors()]
        logging.error(f"Invalid configuration in fields {fields}")
        print(json.dumps({"error_code": "INVALID_CONFIG", "fields": fields, "details": e.errors(include_url=False)},
                         default=str), file=sys.stderr)
        return EXIT_USAGE
    except PCNOError as e:
        exit_code = handle_exception(e, args.command)
        print(json.dumps(e.to_dict(), default=str), file=sys.stderr)
        return exit_code
    except Exception as e:
        exit_code = handle_exception(e, args.command)
        print(json.dumps({"error_code": "INTERNAL_ERROR", "message": str(e)}), file=sys.stderr)
        return exit_code


if __name__ == '__main__':
    sys.exit(main())
