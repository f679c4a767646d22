"""Command line entry point: ``cbmrnn train | eval | gradcheck | ablate | data``."""

from __future__ import annotations

import csv
import logging
import sys
from pathlib import Path

import click

from . import checkpoint as ckpt_io
from . import config as config_io
from .ablate import format_table, run_ablation
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig
from .gradcheck import injected_fault, run_suite
from .runner import build_datasets, evaluate, load_model, make_streams, run_training
from .scheme import TrainingDiverged
from .tasks import load_dataset, save_dataset

EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def _resolve(config_path, seed, overrides) -> RunConfig:
    cfg = config_io.load(config_path) if config_path else RunConfig()
    cfg = config_io.apply_overrides(cfg, list(overrides))
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    return cfg


def config_options(fn):
    fn = click.option("--print-defaults", is_flag=True,
                      help="Print the effective configuration and exit.")(fn)
    fn = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                      help="Override a config field; repeatable.")(fn)
    fn = click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=None,
                      help="Global seed (overrides the config file).")(fn)
    fn = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                      help="Sectioned key-value config file.")(fn)
    return fn


def _load_or_exit(config_path, seed, overrides, print_defaults) -> RunConfig:
    try:
        cfg = _resolve(config_path, seed, overrides)
    except FileNotFoundError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    if print_defaults:
        click.echo(config_io.dump(cfg), nl=False)
        sys.exit(0)
    return cfg


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress per epoch.")
def main(verbose):
    """Context Bridge Module networks trained with overlap coherence."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command()
@config_options
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="runs/train",
              show_default=True, help="Output directory.")
@click.option("--resume", type=click.Path(dir_okay=False, exists=True), default=None,
              help="Continue from a checkpoint written by an earlier run.")
def train(config_path, seed, overrides, print_defaults, out_dir, resume):
    """Train a model and write metrics.csv plus one checkpoint per epoch."""
    cfg = _load_or_exit(config_path, seed, overrides, print_defaults)
    try:
        rows = run_training(cfg, out_dir, resume=resume)
    except (TrainingDiverged, FloatingPointError) as exc:
        click.echo(f"training diverged: {exc}", err=True)
        sys.exit(EXIT_DIVERGED)
    except (CheckpointError, ConfigError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    if rows:
        last = rows[-1]
        summary = ", ".join(f"{k}={last[k]:.4g}" for k in
                            ("task_loss", "accuracy", "exact_match", "mae") if last.get(k) is not None)
        click.echo(f"epoch {last['epoch']}: {summary}")
    click.echo(f"wrote {Path(out_dir) / 'metrics.csv'}")


EVAL_HEADER = ("checkpoint", "epoch", "dataset", "accuracy", "exact_match", "exact_match_after_cat", "mae")


@main.command("eval")
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path(dir_okay=False, exists=True))
@click.option("--data", "data_path", type=click.Path(dir_okay=False, exists=True), default=None,
              help="Dataset file; defaults to the run's held-out split.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
              help="Directory of eval.csv (default: the checkpoint's directory).")
def eval_cmd(ckpt_path, data_path, out_dir):
    """Full-sequence evaluation of a checkpoint."""
    try:
        cfg, model, _ = load_model(ckpt_path)
        epoch = ckpt_io.load(ckpt_path).epoch
    except (CheckpointError, ConfigError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    if data_path:
        dataset = load_dataset(data_path)
    else:
        _, dataset = build_datasets(cfg, make_streams(cfg.seed)["data"])
    metrics = evaluate(cfg, model, dataset)
    for k, v in metrics.items():
        click.echo(f"{k}: {v:.6f}")
    out = Path(out_dir) if out_dir else Path(ckpt_path).parent
    out.mkdir(parents=True, exist_ok=True)
    path = out / "eval.csv"
    new = not path.exists()
    with open(path, "a", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(EVAL_HEADER)
        w.writerow([ckpt_path, epoch, data_path or "test-split"]
                   + [repr(metrics[k]) if k in metrics else "" for k in EVAL_HEADER[3:]])


@main.command()
@config_options
@click.option("--instances", type=click.IntRange(1), default=None,
              help="Random instances per primitive (default: gc_instances from the config).")
@click.option("--inject-fault", is_flag=True, hidden=True,
              help="Corrupt the sigmoid derivative (negative control for tests).")
def gradcheck(config_path, seed, overrides, print_defaults, instances, inject_fault):
    """Finite-difference check of every primitive, the cell and a gated stack."""
    cfg = _load_or_exit(config_path, seed, overrides, print_defaults)
    n = instances or cfg.gc_instances
    kwargs = dict(instances=n, seed=cfg.seed, td_rate=cfg.gc_td_rate, gate_seed=cfg.gc_gate_seed)
    if inject_fault:
        with injected_fault():
            result = run_suite(**kwargs)
    else:
        result = run_suite(**kwargs)
    for name, err in result.errors.items():
        mark = "ok  " if err < result.tolerance else "FAIL"
        click.echo(f"{mark} {name:<22} max_rel_err={err:.3e} instances={result.instances[name]}")
    verdict = "PASS" if result.passed else "FAIL"
    click.echo(f"{verdict}: max relative error {result.max_error:.3e} ({result.seconds:.1f}s)")
    sys.exit(0 if result.passed else 1)


@main.command()
@config_options
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="runs/ablate",
              show_default=True)
@click.option("--full-grid", is_flag=True, help="Every merge x TD x lambda combination.")
def ablate(config_path, seed, overrides, print_defaults, out_dir, full_grid):
    """Merge-function, TD-rate and coherence-weight ablations."""
    cfg = _load_or_exit(config_path, seed, overrides, print_defaults)
    try:
        table = run_ablation(cfg, out_dir, full=full_grid)
    except (TrainingDiverged, FloatingPointError) as exc:
        click.echo(f"training diverged: {exc}", err=True)
        sys.exit(EXIT_DIVERGED)
    click.echo(format_table(table))
    click.echo(f"wrote {Path(out_dir) / 'ablation.csv'}")


@main.command()
@config_options
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="runs/data",
              show_default=True)
def data(config_path, seed, overrides, print_defaults, out_dir):
    """Write the configured train and test splits as binary dataset files."""
    cfg = _load_or_exit(config_path, seed, overrides, print_defaults)
    train_set, test_set = build_datasets(cfg, make_streams(cfg.seed)["data"])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(out / "train.bin", train_set)
    save_dataset(out / "test.bin", test_set)
    click.echo(f"wrote {out / 'train.bin'} and {out / 'test.bin'}")


if __name__ == "__main__":
    main()
