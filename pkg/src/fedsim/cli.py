"""Command-line front end: configure, run, and report simulations.

Exit codes: 0 success, 1 configuration error, 2 aborted run, 3 encryption
transparency violation (compare-encryption only).
"""

from __future__ import annotations

import csv
import json
import sys
import time
from pathlib import Path

import click

from .config import ConfigError, SimConfig, seed_from_env
from .ledger import write_event_log
from .learner import serialize_model
from .protocol import RunOutcome, run_task

METRICS_FIELDS = (
    "round",
    "epoch",
    "worker",
    "accuracy",
    "macro_precision",
    "macro_recall",
    "elapsed_ms",
)


class MismatchedModels(Exception):
    """Seed-matched encrypted and plaintext runs disagreed on the final model."""


def _require_identical_models(plain_bytes: bytes, encrypted_bytes: bytes) -> None:
    if plain_bytes != encrypted_bytes:
        raise MismatchedModels(
            "final model bytes differ between encrypted and plaintext runs"
        )


def _build_config(config_file: str | None, flags: dict) -> SimConfig:
    raw: dict = {}
    if config_file:
        try:
            raw = json.loads(Path(config_file).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {config_file}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {config_file} must hold a JSON object")

    merged = SimConfig().to_dict()
    dataset = dict(merged["dataset"])
    file_dataset = raw.get("dataset", {})
    if not isinstance(file_dataset, dict):
        raise ConfigError("config key 'dataset' must be an object")
    dataset.update(file_dataset)
    merged.update({k: v for k, v in raw.items() if k != "dataset"})

    for key, target in (("dataset_n", "n"), ("dataset_dim", "d"), ("classes", "classes"), ("spread", "spread")):
        if flags.get(key) is not None:
            dataset[target] = flags[key]
    merged["dataset"] = dataset

    for key in (
        "workers",
        "rounds",
        "epochs_per_round",
        "top_k",
        "reward",
        "collateral",
        "encrypt",
        "push_window",
        "tolerance_bp",
        "flag_fraction",
        "learning_rate",
        "batch_size",
    ):
        if flags.get(key) is not None:
            merged[key] = flags[key]
    if flags.get("behaviors") is not None:
        merged["behaviors"] = tuple(
            part.strip() for part in flags["behaviors"].split(",") if part.strip()
        )
    if flags.get("parallel"):
        merged["parallel"] = True
    if flags.get("shared_testset"):
        merged["shared_testset"] = True

    if flags.get("seed") is not None:
        merged["seed"] = flags["seed"]
    elif "seed" not in raw:
        merged["seed"] = seed_from_env(merged["seed"])
    if merged["seed"] < 0:
        raise ConfigError(f"seed must be >= 0, got {merged['seed']}")

    config = SimConfig.from_dict(merged)
    config.validate()
    return config


def _metrics_row(row: dict) -> list[str]:
    return [
        row["round"],
        row["epoch"],
        row["worker"],
        f"{row['accuracy']:.6f}",
        f"{row['macro_precision']:.6f}",
        f"{row['macro_recall']:.6f}",
        f"{row['elapsed_ms']:.3f}",
    ]


def _write_metrics_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_FIELDS)
        for row in rows:
            writer.writerow(_metrics_row(row))


def _write_outputs(outcome: RunOutcome, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    events_path = out_dir / "events.jsonl"
    write_event_log(outcome.ledger.events, events_path)
    outcome.report.event_log_path = str(events_path)
    _write_metrics_csv(out_dir / "metrics.csv", outcome.report.epoch_rows)
    (out_dir / "report.json").write_text(
        json.dumps(outcome.report.to_dict(), indent=2, sort_keys=True) + "\n"
    )


def _summary_line(outcome: RunOutcome) -> str:
    summary = outcome.report.summary
    payouts = ", ".join(f"{a}={b}" for a, b in sorted(summary["balances"].items()))
    return (
        f"final accuracy {summary['final_accuracy']:.4f} | "
        f"runtime {summary['total_wall_ms'] / 1000.0:.2f}s | payouts: {payouts}"
    )


_COMMON = [
    click.option("--workers", type=int, default=None, help="Number of workers (>= 2)."),
    click.option("--rounds", type=int, default=None, help="Training rounds."),
    click.option("--epochs-per-round", type=int, default=None, help="Local epochs per round (default 3)."),
    click.option("--top-k", type=int, default=None, help="Workers rewarded each round."),
    click.option("--reward", type=int, default=None, help="Total task reward in tokens."),
    click.option("--collateral", type=int, default=None, help="Join deposit in tokens."),
    click.option("--seed", type=int, default=None, help=f"Run seed (falls back to FEDSIM_SEED, then {SimConfig().seed})."),
    click.option("--dataset-n", type=int, default=None, help="Training pool size."),
    click.option("--dataset-dim", type=int, default=None, help="Feature dimension (default 64)."),
    click.option("--classes", type=int, default=None, help="Class count (default 10)."),
    click.option("--spread", type=float, default=None, help="Class noise std (default 0.3)."),
    click.option("--behaviors", type=str, default=None, help="Comma list, e.g. honest,honest,inflated."),
    click.option("--push-window", type=int, default=None, help="Client hash-list window (default 5)."),
    click.option("--tolerance-bp", type=int, default=None, help="Score outlier tolerance in basis points."),
    click.option("--flag-fraction", type=float, default=None, help="Fraction of flagged models that marks an evaluator dishonest."),
    click.option("--learning-rate", type=float, default=None, help="SGD learning rate (default 0.05)."),
    click.option("--batch-size", type=int, default=None, help="SGD batch size (default 32)."),
    click.option("--parallel", is_flag=True, help="Train and evaluate workers concurrently."),
    click.option("--shared-testset", is_flag=True, help="Score peers on the shared held-out set instead of local slices."),
    click.option("--config", "config_file", type=click.Path(), default=None, help="JSON config file; flags override its values."),
    click.option("--out-dir", type=click.Path(), default="fedsim_out", help="Output directory."),
]


def _with_common(fn):
    for option in reversed(_COMMON):
        fn = option(fn)
    return fn


@click.group()
def cli() -> None:
    """Deterministic decentralized federated learning simulator."""


@cli.command("run")
@_with_common
@click.option("--encrypt/--no-encrypt", "encrypt", default=None, help="Seal pushed models (default on).")
def cmd_run(config_file, out_dir, **flags) -> None:
    """Run one simulation; writes metrics.csv, report.json, events.jsonl."""
    try:
        config = _build_config(config_file, flags)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(1)
    try:
        outcome = run_task(config)
    except Exception as exc:  # noqa: BLE001 - report the abort and signal it
        click.echo(f"run aborted: {exc}", err=True)
        sys.exit(2)
    _write_outputs(outcome, Path(out_dir))
    click.echo(_summary_line(outcome))
    sys.exit(0)


@cli.command("compare-encryption")
@_with_common
def cmd_compare_encryption(config_file, out_dir, **flags) -> None:
    """Run the same config with encryption off and on; compare final models.

    The two runs share one seed by construction, so their final model bytes
    must match exactly; wall-clock overhead is reported, never asserted.
    """
    try:
        config = _build_config(config_file, flags)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(1)

    out_root = Path(out_dir)
    results: dict[str, tuple[RunOutcome, float]] = {}
    try:
        for mode, encrypt in (("plain", False), ("encrypted", True)):
            mode_config = SimConfig.from_dict({**config.to_dict(), "encrypt": encrypt})
            t0 = time.perf_counter()
            outcome = run_task(mode_config)
            results[mode] = (outcome, (time.perf_counter() - t0) * 1000.0)
            _write_outputs(outcome, out_root / mode)
    except Exception as exc:  # noqa: BLE001
        click.echo(f"run aborted: {exc}", err=True)
        sys.exit(2)

    plain_bytes = serialize_model(results["plain"][0].final_model)
    encrypted_bytes = serialize_model(results["encrypted"][0].final_model)
    plain_ms = results["plain"][1]
    encrypted_ms = results["encrypted"][1]
    overhead = (encrypted_ms - plain_ms) / plain_ms if plain_ms > 0 else 0.0

    out_root.mkdir(parents=True, exist_ok=True)
    with open(out_root / "encryption_timing.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", "wall_ms", "overhead_fraction"])
        writer.writerow(["plain", f"{plain_ms:.3f}", "0.000000"])
        writer.writerow(["encrypted", f"{encrypted_ms:.3f}", f"{overhead:.6f}"])

    try:
        _require_identical_models(plain_bytes, encrypted_bytes)
    except MismatchedModels as exc:
        click.echo(f"encryption transparency violated: {exc}", err=True)
        sys.exit(3)
    click.echo(
        f"final models identical | plain {plain_ms:.0f}ms, encrypted {encrypted_ms:.0f}ms, "
        f"overhead {overhead:+.2%}"
    )
    sys.exit(0)


@cli.command("scale-workers")
@_with_common
@click.option("--encrypt/--no-encrypt", "encrypt", default=None, help="Seal pushed models (default on).")
@click.option("--workers-list", type=str, required=True, help="Comma list of worker counts, e.g. 3,5.")
def cmd_scale_workers(config_file, out_dir, workers_list, **flags) -> None:
    """Run one simulation per worker count on the same dataset seed."""
    try:
        counts = [int(part) for part in workers_list.split(",") if part.strip()]
        if not counts or any(c < 2 for c in counts):
            raise ConfigError(f"workers-list needs counts >= 2, got {workers_list!r}")
        base = _build_config(config_file, {**flags, "workers": max(counts)})
    except (ConfigError, ValueError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(1)

    out_root = Path(out_dir)
    combined: list[tuple[int, dict]] = []
    finals = {}
    try:
        for count in counts:
            run_config = SimConfig.from_dict(
                {
                    **base.to_dict(),
                    "workers": count,
                    "top_k": min(base.top_k, count),
                    "behaviors": (),
                }
            )
            run_config.validate()
            outcome = run_task(run_config)
            _write_outputs(outcome, out_root / f"w{count}")
            combined.extend((count, row) for row in outcome.report.epoch_rows)
            finals[count] = outcome.report.summary["final_accuracy"]
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(1)
    except Exception as exc:  # noqa: BLE001
        click.echo(f"run aborted: {exc}", err=True)
        sys.exit(2)

    out_root.mkdir(parents=True, exist_ok=True)
    with open(out_root / "scaling.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("workers",) + METRICS_FIELDS)
        for count, row in combined:
            writer.writerow(
                [
                    count,
                    row["round"],
                    row["epoch"],
                    row["worker"],
                    f"{row['accuracy']:.6f}",
                    f"{row['macro_precision']:.6f}",
                    f"{row['macro_recall']:.6f}",
                    f"{row['elapsed_ms']:.3f}",
                ]
            )
    click.echo(
        " | ".join(f"{c} workers: final accuracy {a:.4f}" for c, a in finals.items())
    )
    sys.exit(0)


def main() -> None:
    cli()


if __name__ == "__main__":
    main()
