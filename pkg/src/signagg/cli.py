"""Command-line interface.

Subcommands: train (single config, optionally repeated over seeds), grid
(learning-rate x sample-count sweep), variance-study (estimator variance
comparison CSV), gradcheck (finite-difference verification; exit code 2 on a
tolerance breach), bound (evaluate one certificate), report (aggregate run
records).  Validation problems exit with code 1.
"""

import csv
import dataclasses
import hashlib
import json
import os
import sys
from datetime import datetime, timezone

import click
import numpy as np

from . import __version__, kernels, rng as rng_mod
from .bounds import BoundConfig, InvalidBoundConfig, bound as bound_fn, min_bound_over_lambda
from .data import (
    Dataset,
    IdxFormatError,
    load_binary_mnist,
    resolve_data_dir,
    toy_two_gaussians,
)
from .gradcheck import run_all as run_all_checks
from .network import CheckpointError, NetworkSpecError, save_posterior
from .studies import variance_study_rows
from .training import ConfigError, TrainConfig, train_run, write_rows_csv

_USER_ERRORS = (
    ConfigError,
    NetworkSpecError,
    InvalidBoundConfig,
    CheckpointError,
    IdxFormatError,
    FileNotFoundError,
    json.JSONDecodeError,
)

_DATA_KEYS = {"dataset", "data_dir", "toy_train", "toy_test", "data_seed"}
_TOP_KEYS = {"run", "data", "repeats", "grid"}
_GRID_KEYS = {"learning_rates", "train_samples"}


def _fail(message: str, code: int = 1):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_json(path) -> dict:
    with open(path, "r") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return raw


def _check_keys(section: dict, allowed, where: str):
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def _load_datasets(data_section: dict, data_dir_flag):
    _check_keys(data_section, _DATA_KEYS, "'data'")
    dataset = data_section.get("dataset", "toy")
    if dataset == "toy":
        data_seed = int(data_section.get("data_seed", 0))
        train = toy_two_gaussians(
            int(data_section.get("toy_train", 512)),
            rng_mod.substream(data_seed, rng_mod.DATA, 0),
        )
        test = toy_two_gaussians(
            int(data_section.get("toy_test", 256)),
            rng_mod.substream(data_seed, rng_mod.DATA, 1),
        )
        return train, test
    if dataset == "mnist":
        data_dir = resolve_data_dir(data_dir_flag or data_section.get("data_dir"))
        return (
            load_binary_mnist(data_dir, "train"),
            load_binary_mnist(data_dir, "test"),
        )
    raise ConfigError(f"dataset must be 'toy' or 'mnist', got {dataset!r}")


def _write_manifest(out_dir, command: str, config_bytes: bytes, seeds):
    manifest = {
        "command": command,
        "config_sha256": hashlib.sha256(config_bytes).hexdigest(),
        "seeds": list(seeds),
        "version": __version__,
        "backend": kernels.get_backend(),
        "created_utc": datetime.now(timezone.utc).isoformat(),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


_SUMMARY_KEYS = ("train_linear", "test_linear", "test_01", "kl", "bound")


def _aggregate(best_rows):
    out = {"runs": len(best_rows)}
    for key in _SUMMARY_KEYS:
        vals = np.array([row[key] for row in best_rows], dtype=np.float64)
        vals = vals[~np.isnan(vals)]
        if vals.size == 0:
            continue
        out[key] = {
            "mean": float(vals.mean()),
            "std": float(vals.std(ddof=1)) if vals.size > 1 else 0.0,
        }
    return out


@click.group()
@click.option(
    "--backend",
    type=click.Choice(["auto", "numpy", "numba"]),
    default=None,
    help="Kernel backend override (default: SIGNAGG_BACKEND or auto).",
)
def main(backend):
    """Train signed-output stochastic networks with certified risk bounds."""
    if backend is not None:
        try:
            kernels.set_backend(backend)
        except kernels.BackendError as exc:
            _fail(str(exc))


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=None, help="Overrides the config seed.")
@click.option("--out", "out_dir", default="runs", show_default=True)
@click.option("--data-dir", default=None, help="Overrides SIGNAGG_DATA_DIR.")
def train(config_path, seed, out_dir, data_dir):
    """Run the training protocol from a JSON config; write records + checkpoints."""
    try:
        raw = _load_json(config_path)
        _check_keys(raw, _TOP_KEYS - {"grid"}, "config")
        repeats = int(raw.get("repeats", 1))
        if repeats < 1:
            raise ConfigError(f"repeats must be >= 1, got {repeats}")
        base = TrainConfig.from_dict(raw.get("run", {}))
        if seed is not None:
            base = dataclasses.replace(base, seed=seed)
        train_ds, test_ds = _load_datasets(raw.get("data", {}), data_dir)
    except _USER_ERRORS as exc:
        _fail(str(exc))
    os.makedirs(out_dir, exist_ok=True)
    seeds, best_rows = [], []
    for rep in range(repeats):
        cfg = dataclasses.replace(base, seed=base.seed + rep)
        seeds.append(cfg.seed)
        result = train_run(cfg, train_ds, test_ds)
        record = result.record
        stem = os.path.join(out_dir, f"run-{cfg.seed}")
        with open(stem + ".json", "w") as fh:
            json.dump(record.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        write_rows_csv(record.rows, stem + ".csv")
        if result.best_posterior is not None:
            save_posterior(result.best_posterior, stem + ".ckpt")
        best_rows.append(record.best_row)
        click.echo(
            f"run seed={cfg.seed}: selected epoch {record.best_epoch} "
            f"({record.selected_by}), bound={record.best_row['bound']:.6g}, "
            f"train_linear={record.best_row['train_linear']:.6g}, "
            f"test_01={record.best_row['test_01']:.6g}"
            + (" [terminated early]" if record.terminated_early else "")
        )
    with open(os.path.join(config_path), "rb") as fh:
        config_bytes = fh.read()
    _write_manifest(out_dir, "train", config_bytes, seeds)
    if repeats > 1:
        summary = _aggregate(best_rows)
        with open(os.path.join(out_dir, "summary.json"), "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
        click.echo(json.dumps(summary, sort_keys=True))


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", default="grid", show_default=True)
@click.option("--data-dir", default=None)
def grid(config_path, seed, out_dir, data_dir):
    """Sweep learning rate x sample count with the early-termination rule."""
    try:
        raw = _load_json(config_path)
        _check_keys(raw, _TOP_KEYS - {"repeats"}, "config")
        grid_section = raw.get("grid", {})
        _check_keys(grid_section, _GRID_KEYS, "'grid'")
        lrs = [float(v) for v in grid_section.get("learning_rates", [0.1, 0.01, 0.001])]
        ts = [int(v) for v in grid_section.get("train_samples", [1, 10, 50, 100])]
        base = TrainConfig.from_dict(raw.get("run", {}))
        if seed is not None:
            base = dataclasses.replace(base, seed=seed)
        train_ds, test_ds = _load_datasets(raw.get("data", {}), data_dir)
    except _USER_ERRORS as exc:
        _fail(str(exc))
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for lr in lrs:
        for t in ts:
            cfg = dataclasses.replace(base, learning_rate=lr, train_samples=t)
            result = train_run(cfg, train_ds, test_ds)
            record = result.record
            stem = os.path.join(out_dir, f"cell-lr{lr:g}-T{t}")
            with open(stem + ".json", "w") as fh:
                json.dump(record.to_dict(), fh, indent=2, sort_keys=True)
                fh.write("\n")
            write_rows_csv(record.rows, stem + ".csv")
            rows.append(
                {
                    "learning_rate": lr,
                    "train_samples": t,
                    "best_epoch": record.best_epoch,
                    "selected_by": record.selected_by,
                    "bound": record.best_row["bound"],
                    "train_linear": record.best_row["train_linear"],
                    "test_01": record.best_row["test_01"],
                    "terminated_early": record.terminated_early,
                    "wall_time_s": round(record.wall_time_s, 3),
                }
            )
            click.echo(
                f"cell lr={lr:g} T={t}: bound={record.best_row['bound']:.6g} "
                f"train_linear={record.best_row['train_linear']:.6g}"
                + (" [terminated early]" if record.terminated_early else "")
            )
    summary_path = os.path.join(out_dir, "grid_summary.csv")
    with open(summary_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    with open(config_path, "rb") as fh:
        _write_manifest(out_dir, "grid", fh.read(), [base.seed])
    click.echo(f"wrote {summary_path}")


@main.command("variance-study")
@click.option("--configs", default=20, show_default=True)
@click.option("--output-samples", default=20000, show_default=True)
@click.option("--gradient-samples", default=50000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", default="variance_study.csv", show_default=True)
def variance_study(configs, output_samples, gradient_samples, seed, out_path):
    """Compare naive vs aggregated estimator variances on random small nets."""
    if configs < 1 or output_samples < 2 or gradient_samples < 2:
        _fail("configs must be >= 1 and sample counts >= 2")
    rows = variance_study_rows(
        configs,
        rng_mod.substream(seed, 200),
        output_samples=output_samples,
        gradient_samples=gradient_samples,
    )
    with open(out_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    wins = sum(1 for r in rows if r["agg_le_naive"])
    gaps = sum(1 for r in rows if r["cov_gap_mineig"] >= r["cov_gap_margin"] - 3 * r["cov_gap_mineig_stderr"])
    click.echo(
        f"{len(rows)} configs: aggregated variance <= naive in {wins}, "
        f"covariance gap >= 1 - 2/pi in {gaps}; wrote {out_path}"
    )


@main.command()
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--fast", is_flag=True, help="Smaller Monte-Carlo sizes.")
@click.option("--corrupt", is_flag=True, hidden=True)
def gradcheck(seed, fast, corrupt):
    """Verify every gradient estimator against finite differences."""
    results = run_all_checks(seed=seed, fast=fast, corrupt=corrupt)
    failed = False
    for res in results:
        click.echo(res.line())
        failed = failed or not res.passed
    if failed:
        sys.exit(2)


@main.command("bound")
@click.option("--risk", type=float, required=True)
@click.option("--kl", type=float, required=True)
@click.option("--m", type=int, required=True)
@click.option("--delta", type=float, default=0.05, show_default=True)
@click.option("--alpha", type=float, default=2.0, show_default=True)
@click.option("--lam", type=float, default=None, help="Fixed lambda; omit to minimise over the grid.")
def bound_cmd(risk, kl, m, delta, alpha, lam):
    """Evaluate one risk certificate and print it as JSON."""
    try:
        if lam is None:
            report = min_bound_over_lambda(risk, kl, m, delta=delta, alpha=alpha)
        else:
            report = bound_fn(risk, kl, BoundConfig(m=m, delta=delta, alpha=alpha, lam=lam))
    except _USER_ERRORS as exc:
        _fail(str(exc))
    click.echo(report.to_json(indent=2))


@main.command()
@click.argument("run_files", nargs=-1, required=True, type=click.Path())
@click.option("--json", "as_json", is_flag=True, help="Print the aggregate as JSON.")
def report(run_files, as_json):
    """Summarise one or more run-record JSON files (mean/std of best rows)."""
    best_rows = []
    try:
        for path in run_files:
            record = _load_json(path)
            if "best_row" not in record:
                raise ConfigError(f"{path}: not a run record (no best_row)")
            best_rows.append(record["best_row"])
            if not as_json:
                row = record["best_row"]
                click.echo(
                    f"{path}: objective={record['config']['objective']} "
                    f"epoch={record['best_epoch']} bound={row['bound']:.6g} "
                    f"train_linear={row['train_linear']:.6g} test_01={row['test_01']:.6g}"
                )
    except _USER_ERRORS as exc:
        _fail(str(exc))
    summary = _aggregate(best_rows)
    if as_json:
        click.echo(json.dumps(summary, indent=2, sort_keys=True))
    else:
        parts = []
        for key in _SUMMARY_KEYS:
            if key in summary:
                parts.append(f"{key} {summary[key]['mean']:.6g} ± {summary[key]['std']:.3g}")
        click.echo(f"aggregate over {summary['runs']} runs: " + " | ".join(parts))


if __name__ == "__main__":
    main()
