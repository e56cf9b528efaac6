"""Command-line entry point: ``sdvae <command> [flags]``.

Commands: train, eval, export-latents, export-recon, gradcheck, grid.
Errors are reported as one JSON line on stderr; exit codes are
0 ok, 2 usage, 3 numeric failure, 4 I/O.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys
from pathlib import Path

from . import autodiff as ad
from .config import ConfigError, TrainingConfig, dump_config, from_mapping, load_config, presets, to_mapping
from .data import (
    Dataset,
    IDXError,
    SyntheticSpec,
    export_latents,
    export_reconstructions,
    find_mnist,
    load_idx,
    load_mnist,
    make_synthetic,
)
from .gradcheck import TOLERANCE, run_suite
from .model import CheckpointError, load_checkpoint, save_checkpoint
from .trainer import TrainingDiverged, append_metrics, evaluate, prepare, resolve_config, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
OUT_ENV = "SDVAE_OUT"
GRID_AXES = {"lambda": "lam", "beta1": "beta1", "beta2": "beta2", "flow_length": "flow_length",
             "labeled_count": "labeled_count"}

log = logging.getLogger("sdvae")


class UsageFailure(Exception):
    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(message)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageFailure(message)


def _fail(kind: str, code: int, message: str, field: str | None = None) -> int:
    record = {"error": kind, "code": code, "message": str(message)}
    if field is not None:
        record["field"] = field
    print(json.dumps(record), file=sys.stderr)
    return code


# ------------------------------------------------------------------ datasets


def load_dataset(source: str, synthetic_seed: int = 0) -> tuple[Dataset, Dataset]:
    """``synthetic``, ``mnist`` (needs $SDVAE_MNIST_DIR), ``idx:<dir>`` or
    ``idx:<train images>,<train labels>,<test images>,<test labels>``."""
    if source == "synthetic":
        return make_synthetic(SyntheticSpec(seed=synthetic_seed))
    if source == "mnist":
        root = find_mnist()
        if root is None:
            raise FileNotFoundError("MNIST files not found; set SDVAE_MNIST_DIR")
        return load_mnist(root)
    if source.startswith("idx:"):
        paths = [p for p in source[4:].split(",") if p]
        if len(paths) == 1:
            return load_mnist(paths[0])
        if len(paths) == 4:
            train_set = load_idx(paths[0], paths[1], name="train")
            test_set = load_idx(paths[2], paths[3], name="test")
            k = max(train_set.k, test_set.k)
            return tuple(Dataset(d.images, d.labels, k, d.name, d.image_shape) for d in (train_set, test_set))
        raise UsageFailure("idx: takes a directory or four comma-separated files", "dataset")
    raise UsageFailure(f"unknown dataset {source!r}; use synthetic, mnist or idx:<paths>", "dataset")


def _default_dataset() -> str:
    return "mnist" if find_mnist() is not None else "synthetic"


# ------------------------------------------------------------------- config


def _parse_set(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageFailure(f"--set expects key=value, got {item!r}", "set")
        out[key.strip()] = value.strip()
    return out


def resolve_run_config(args) -> TrainingConfig:
    config = load_config(args.config) if args.config else TrainingConfig()
    changes = _parse_set(getattr(args, "set", None))
    flags = {
        "seed": args.seed,
        "labeled_count": args.labeled,
        "variant": args.variant,
        "iaf": None if args.iaf is None else bool(args.iaf),
        "epochs": args.epochs,
        "learning_rate": args.lr,
    }
    changes.update({k: v for k, v in flags.items() if v is not None})
    return from_mapping({**to_mapping(config), **changes}) if changes else config


def _out_dir(args, config: TrainingConfig) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "runs")) / f"{config.name}-seed{config.seed}"


# ------------------------------------------------------------------ commands


def cmd_train(args) -> int:
    config = resolve_run_config(args)
    train_set, test_set = load_dataset(args.dataset or _default_dataset())
    out = _out_dir(args, config)
    out.mkdir(parents=True, exist_ok=True)
    result = run_training(config, train_set, test_set, out)
    last = result.metrics[-1] if result.metrics else None
    print(json.dumps({
        "out": str(out),
        "epochs": len(result.metrics),
        "test_err": None if last is None else last.test_err,
    }))
    return EXIT_OK


def run_training(config: TrainingConfig, train_set: Dataset, test_set: Dataset | None, out: Path):
    """Train with the resolved config, metrics file and checkpoint written to ``out``."""
    config = resolve_config(config, train_set)
    dump_config(config, out / "config.yaml")
    metrics_path = out / "metrics.jsonl"
    metrics_path.write_text("")
    ckpt = out / "checkpoint.bin"
    try:
        result = train(config, train_set, test_set, on_epoch=lambda rec, _: append_metrics(metrics_path, rec))
    except TrainingDiverged as exc:
        save_checkpoint(ckpt, exc.params, {"diverged": str(exc)})
        raise
    save_checkpoint(ckpt, result.params, {"epochs": config.epochs})
    return result


def _checkpoint_and_test(args):
    params, _ = load_checkpoint(args.checkpoint)
    source = args.dataset or _default_dataset()
    train_set, test_set = load_dataset(source)
    data = test_set if args.split == "test" else train_set
    return params, prepare(data, params.config)


def cmd_eval(args) -> int:
    params, data = _checkpoint_and_test(args)
    rec = evaluate(params, data)
    print(json.dumps({"split": args.split, "n": len(data), "error": rec.test_err, "re": rec.test_re}))
    return EXIT_OK


def cmd_export_latents(args) -> int:
    params, data = _checkpoint_and_test(args)
    export_latents(params, data, args.out)
    print(json.dumps({"out": args.out, "rows": len(data)}))
    return EXIT_OK


def cmd_export_recon(args) -> int:
    params, data = _checkpoint_and_test(args)
    mean_re = export_reconstructions(params, data, args.mask, args.out)
    print(json.dumps({"out": args.out, "mask": args.mask, "rows": len(data), "re": mean_re}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_suite(trials=args.trials, seed=args.seed if args.seed is not None else 0)
    worst = max(r.error for r in results)
    for r in results:
        print(f"{r.name:28s} {r.error:.3e} {'ok' if r.ok else 'FAIL'}")
    print(f"max rel err {worst:.3e}")
    return EXIT_OK if worst < TOLERANCE else EXIT_NUMERIC


# --------------------------------------------------------------------- grid


def parse_axes(items: list[str]) -> dict[str, list[str]]:
    axes: dict[str, list[str]] = {}
    for item in items or []:
        key, sep, values = item.partition("=")
        key = key.strip()
        if not sep or key not in GRID_AXES:
            raise UsageFailure(f"grid axis must be one of {', '.join(GRID_AXES)} as name=v1,v2", "axis")
        axes[key] = [v.strip() for v in values.split(",") if v.strip()]
        if not axes[key]:
            raise UsageFailure(f"axis {key} has no values", "axis")
    return axes


def grid(
    config: TrainingConfig,
    axes: dict[str, list],
    train_set: Dataset,
    test_set: Dataset,
    out: Path | None = None,
    repeats: int = 1,
) -> list[dict]:
    """Train every cell of the grid in turn; one summary row per (cell, repeat).

    Repeat ``r`` runs with seed ``config.seed + r``, so cells that differ only
    in their axis values share seeds.  A failing cell is recorded and the
    grid carries on.
    """
    names = list(axes)
    rows = []
    for cell_id, values in enumerate(itertools.product(*(axes[n] for n in names))):
        for r in range(repeats):
            row = dict(zip(names, values))
            row.update(cell=cell_id, seed=config.seed + r)
            try:
                cell_config = config.replace(
                    **{GRID_AXES[n]: v for n, v in zip(names, values)}, seed=config.seed + r
                )
                if out is not None:
                    cell_dir = out / f"cell{cell_id:03d}-seed{config.seed + r}"
                    cell_dir.mkdir(parents=True, exist_ok=True)
                    result = run_training(cell_config, train_set, test_set, cell_dir)
                else:
                    result = train(cell_config, train_set, test_set)
                last = result.metrics[-1] if result.metrics else None
                row.update(status="ok", test_err=None if last is None else last.test_err,
                           test_re=None if last is None else last.test_re, error="")
            except (ConfigError, ad.AutodiffError, TrainingDiverged, FloatingPointError, ValueError) as exc:
                row.update(status="failed", test_err=None, test_re=None, error=str(exc).replace("\n", " "))
            log.info("grid cell %s: %s", cell_id, row["status"])
            rows.append(row)
    return rows


def write_grid_summary(path: Path, rows: list[dict]) -> None:
    if not rows:
        return
    fields = list(rows[0])
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)


def cmd_grid(args) -> int:
    config = resolve_run_config(args)
    axes = parse_axes(args.axis)
    if not axes:
        raise UsageFailure("grid needs at least one --axis", "axis")
    train_set, test_set = load_dataset(args.dataset or _default_dataset())
    out = Path(args.out) if args.out else Path(os.environ.get(OUT_ENV, "runs")) / "grid"
    out.mkdir(parents=True, exist_ok=True)
    dump_config(config, out / "base_config.yaml")
    rows = grid(config, axes, train_set, test_set, out, args.repeats)
    write_grid_summary(out / "summary.csv", rows)
    for row in rows:
        print(json.dumps(row))
    return EXIT_OK


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sdvae", description="Semi-supervised disentangled VAE on numpy.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def run_flags(p, out_help):
        p.add_argument("--config", help=f"YAML file or preset ({', '.join(presets())})")
        p.add_argument("--out", help=out_help)
        p.add_argument("--seed", type=int)
        p.add_argument("--labeled", type=int, help="labeled training rows")
        p.add_argument("--variant", choices=("sdvae1", "sdvae2"))
        p.add_argument("--iaf", type=int, choices=(0, 1))
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--dataset", help="synthetic | mnist | idx:<dir> | idx:<4 files>")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config field")

    p = sub.add_parser("train", help="train a model")
    run_flags(p, f"output directory (default ${OUT_ENV}/<variant>-seed<seed>)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grid", help="train over a grid of settings")
    run_flags(p, f"output directory (default ${OUT_ENV}/grid)")
    p.add_argument("--axis", action="append", metavar="NAME=V1,V2",
                   help=f"grid axis, one of {', '.join(GRID_AXES)}")
    p.add_argument("--repeats", type=int, default=1, help="seeds per cell")
    p.set_defaults(func=cmd_grid)

    def ckpt_flags(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--dataset", help="synthetic | mnist | idx:<dir> | idx:<4 files>")
        p.add_argument("--split", choices=("train", "test"), default="test")

    p = sub.add_parser("eval", help="classification error and RE of a checkpoint")
    ckpt_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-latents", help="write v probabilities and u means as CSV")
    ckpt_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_latents)

    p = sub.add_parser("export-recon", help="write reconstructions with u or v zeroed")
    ckpt_flags(p)
    p.add_argument("--mask", choices=("none", "mask-u", "mask-v"), default="none")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_recon)

    p = sub.add_parser("gradcheck", help="finite-difference check of every primitive and objective")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(name)s: %(message)s")
        return args.func(args)
    except UsageFailure as exc:
        return _fail("usage", EXIT_USAGE, exc, exc.field)
    except ConfigError as exc:
        return _fail("usage", EXIT_USAGE, exc, exc.field)
    except (TrainingDiverged, ad.NumericError, FloatingPointError) as exc:
        return _fail("numeric", EXIT_NUMERIC, exc)
    except (IDXError, CheckpointError, OSError) as exc:
        return _fail("io", EXIT_IO, exc)
    except ValueError as exc:
        return _fail("usage", EXIT_USAGE, exc)


if __name__ == "__main__":
    sys.exit(main())
