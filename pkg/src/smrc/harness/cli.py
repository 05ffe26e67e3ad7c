"""Command-line front end.

Subcommands: generate, train, evaluate, hpo, sensitivity, sweep, report.
Every command takes ``--config`` (key=value file), optional ``--preset``
(desk or paper), and overrides ``--seed`` / ``--out`` / ``--workers``.
``SMRC_WORKERS`` is the environment fallback for ``--workers``.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .config import (
    ExperimentConfig,
    apply_preset,
    config_from_mapping,
    config_hash,
    parse_config_text,
)
from .runner import (
    run_evaluate,
    run_generate,
    run_hpo,
    run_report,
    run_sensitivity,
    run_sweep,
    run_train,
    best_record,
)


def _add_common(p: argparse.ArgumentParser, needs_config: bool = True):
    p.add_argument("--config", type=Path, required=needs_config, help="key=value config file")
    p.add_argument("--preset", choices=["desk", "paper"], help="epochs/restarts preset")
    p.add_argument("--seed", type=int, help="override the base seed")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument(
        "--workers",
        type=int,
        help="parallel restart workers (default: SMRC_WORKERS or 1)",
    )
    p.add_argument("--resume", action="store_true", help="skip completed restarts/cells")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smrc",
        description="Self-modulated reservoir computing experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in [
        ("generate", "materialize the configured dataset as columnar files"),
        ("train", "train with restarts; write records and the best checkpoint"),
        ("evaluate", "evaluate a checkpoint on the configured test split"),
        ("hpo", "search conventional-RC hyperparameters"),
        ("sensitivity", "perturbation-ensemble analysis of a checkpoint"),
        ("sweep", "run the cross product of sweep.* axes"),
        ("report", "summarize results in an output directory"),
    ]:
        p = sub.add_parser(name, help=help_text)
        if name == "report":
            p.add_argument("--out", type=Path, required=True)
        else:
            _add_common(p)
        if name in ("evaluate", "sensitivity"):
            p.add_argument("--checkpoint", type=Path, required=True)
        if name == "evaluate":
            p.add_argument(
                "--data",
                type=Path,
                help="dataset directory from `smrc generate` (default: regenerate)",
            )
    return parser


def load_config(args) -> ExperimentConfig:
    text = args.config.read_text(encoding="utf-8")
    kv = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        kv[key.strip()] = value.strip()
    if args.preset:
        kv = apply_preset(kv, args.preset)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out is not None:
        overrides["out"] = str(args.out)
    if args.workers is not None:
        overrides["workers"] = str(args.workers)
    elif "workers" not in kv and os.environ.get("SMRC_WORKERS"):
        overrides["workers"] = os.environ["SMRC_WORKERS"]
    kv.update(overrides)
    return config_from_mapping(kv)


def resolve_out(cfg: ExperimentConfig, args) -> Path:
    if args.out is not None:
        return Path(args.out)
    if cfg.out:
        return Path(cfg.out)
    return Path("runs") / config_hash(cfg)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    if args.command == "report":
        sys.stdout.write(run_report(args.out))
        return 0

    cfg = load_config(args)
    out = resolve_out(cfg, args)

    if args.command == "generate":
        manifest = run_generate(cfg, out)
        print(
            f"wrote {manifest['n_train']} train + {manifest['n_test']} test samples "
            f"to {out} (config {manifest['config_hash']})"
        )
        return 0

    if args.command == "train":
        records = run_train(cfg, out, resume=args.resume, workers=cfg.workers)
        best = best_record(records)
        print(f"{'restart':>8s} {'train_mse':>12s} {'test_mse':>12s} {'epoch':>6s} degraded")
        for r in records:
            print(
                f"{r.restart:>8d} {r.train_mse:>12.6g} {r.test_mse:>12.6g} "
                f"{r.selected_epoch:>6d} {r.degraded}"
            )
        print(
            f"best restart {best.restart}: train_mse={best.train_mse:.6g} "
            f"test_mse={best.test_mse:.6g} -> {out}/checkpoint_{best.config_hash}.json"
        )
        return 0

    if args.command == "evaluate":
        metrics = run_evaluate(cfg, args.checkpoint, out, data_dir=args.data)
        print(f"test_mse={metrics['test_mse']:.8g} over {metrics['n_sequences']} sequences")
        return 0

    if args.command == "hpo":
        payload = run_hpo(cfg, out)
        b = payload["best"]
        print(
            f"best of {payload['budget']} ({payload['search']}): "
            f"rho_in={b['rho_in']:.4g} rho_hat_res={b['rho_hat_res']:.4g} "
            f"xi={b['xi']:.4g} val_mse={b['val_mse']:.6g}"
        )
        return 0

    if args.command == "sensitivity":
        from .config import Task

        if cfg.task != Task.ATTENTION:
            print(
                f"note: sensitivity analysis on task {cfg.task.value} is experimental",
                file=sys.stderr,
            )
        results = run_sensitivity(cfg, args.checkpoint, out)
        for t_p, series in sorted(results.items()):
            lam_max = series["lambda_max"]
            print(
                f"t_p={t_p}: lambda_max in [{lam_max.min():.4f}, {lam_max.max():.4f}], "
                f"floor_hits={series['floor_hits_total']}"
            )
        return 0

    if args.command == "sweep":
        summary = run_sweep(cfg, out, resume=args.resume, workers=cfg.workers)
        print(f"{len(summary['cells'])} cells done, {len(summary['failures'])} failures")
        for c in summary["cells"]:
            print(
                f"  {c['gate_mode']:>22s} n_res={c['n_res']:<5d} "
                f"best_test_mse={c['best_test_mse']:.6g}"
            )
        return 0

    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    raise SystemExit(main())
