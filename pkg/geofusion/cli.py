"""Command line entry point: generate, run, evaluate and benchmark."""

from __future__ import annotations

import argparse
import json
import logging
from pathlib import Path
import sys
from typing import Any, Optional, Sequence

from .config import RunConfig, load_config
from .const import (
    COMMANDS,
    CONF_DATASET,
    CONF_FRAMES,
    CONF_OBJECTS,
    CONF_OUT,
    CONF_SEED,
    CONF_VARIANT,
    DEFAULT_NAME,
    EXIT_OK,
    EXIT_RUNTIME,
    EXIT_USAGE,
    RUNTIME_BUDGET_MS,
    VARIANT_GEOFUSION,
    VARIANTS,
)
from .coordinator import MapSnapshot, read_snapshots, run_pipeline
from .dataset import read_dataset, write_dataset
from .evaluation import MetricReport, evaluate_run, timing_summary, write_report
from .exceptions import ConfigError, DatasetError, GeoFusionError
from .geometry import ModelRegistry
from .scene_sim import SimulatedDataset, simulate_sequence

_LOGGER = logging.getLogger(__name__)


class _ArgumentParser(argparse.ArgumentParser):
    """Parser whose usage errors exit with the configuration error code."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = _ArgumentParser(prog="geofusion", description=f"{DEFAULT_NAME} object-level mapping backend")
    parser.add_argument("command", choices=COMMANDS, help="gen | run | eval | bench | all")
    parser.add_argument("--config", type=Path, help="JSON configuration document")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--variant", choices=VARIANTS)
    parser.add_argument("--objects", type=int)
    parser.add_argument("--frames", type=int)
    parser.add_argument("--out", type=str, help="output directory")
    parser.add_argument("--dataset", type=str, help="dataset directory (default <out>/dataset)")
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    return parser.parse_args(argv)


# === Commands ===


def cmd_gen(cfg: RunConfig) -> Path:
    """Simulate a sequence and write it to the dataset directory."""
    dataset = simulate_sequence(
        ModelRegistry.default(),
        cfg.objects,
        cfg.frames,
        cfg.noise,
        cfg.seed,
        min_visible_pixels=cfg.min_visible_pixels,
        table_extents=cfg.table_extents,
        workers=cfg.workers,
    )
    path = write_dataset(dataset, cfg.dataset_path)
    n_meas = sum(len(m) for m in dataset.measurements)
    print(
        f"dataset {path}: {len(dataset.scene.objects)} objects, {len(dataset.scene.contacts)} contacts, "
        f"{len(dataset.frames)} frames, {n_meas} measurements"
    )
    return path


def cmd_run(
    cfg: RunConfig, variants: Optional[Sequence[str]] = None, dataset: Optional[SimulatedDataset] = None
) -> dict[str, list[MapSnapshot]]:
    """Run each variant over the dataset and write its maps and timings."""
    dataset = dataset if dataset is not None else read_dataset(cfg.dataset_path)
    runs = {}
    for variant in variants or (cfg.variant,):
        _LOGGER.info("Running %s on %s", variant, cfg.dataset_path)
        runs[variant] = run_pipeline(dataset, cfg.pipeline(variant), cfg.run_dir(variant))
        final = runs[variant][-1] if runs[variant] else None
        print(f"{variant}: {len(final.objects) if final else 0} objects in final map -> {cfg.run_dir(variant)}")
    return runs


def cmd_eval(
    cfg: RunConfig,
    runs: Optional[dict[str, list[MapSnapshot]]] = None,
    dataset: Optional[SimulatedDataset] = None,
) -> MetricReport:
    """Evaluate every variant that has run outputs and write the report."""
    dataset = dataset if dataset is not None else read_dataset(cfg.dataset_path)
    if runs is None:
        runs = {v: read_snapshots(cfg.run_dir(v)) for v in VARIANTS if (cfg.run_dir(v) / "maps").is_dir()}
    if not runs:
        raise DatasetError(f"No run outputs under {cfg.out / 'runs'}")
    report = evaluate_run(dataset, runs, cfg.evaluation)
    write_report(report, cfg.eval_dir)
    for name, metrics in report.variants.items():
        print(f"{name}: mAP50 {metrics.map_50:.3f}  mAP75 {metrics.map_75:.3f}  mAP50:95 {metrics.map_50_95:.3f}")
    return report


def cmd_bench(cfg: RunConfig) -> dict[str, Any]:
    """Time the full pipeline per frame against the runtime budget."""
    if not (cfg.dataset_path / "manifest.json").exists():
        cmd_gen(cfg)
    dataset = read_dataset(cfg.dataset_path)
    snapshots = run_pipeline(dataset, cfg.pipeline(VARIANT_GEOFUSION))
    summary = {"objects": len(dataset.scene.objects), "frames": len(snapshots), **timing_summary(snapshots)}
    summary["budget_ms"] = RUNTIME_BUDGET_MS
    summary["within_budget"] = summary["mean_total_ms"] <= RUNTIME_BUDGET_MS
    cfg.out.mkdir(parents=True, exist_ok=True)
    (cfg.out / "bench.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(
        f"per-frame time: mean {summary['mean_total_ms']:.1f} ms, p95 {summary['p95_total_ms']:.1f} ms "
        f"(budget {RUNTIME_BUDGET_MS:.0f} ms)"
    )
    return summary


def cmd_all(cfg: RunConfig) -> MetricReport:
    """Generate, run every variant, evaluate."""
    cmd_gen(cfg)
    dataset = read_dataset(cfg.dataset_path)
    runs = cmd_run(cfg, VARIANTS, dataset)
    return cmd_eval(cfg, runs, dataset)


def run_command(cfg: RunConfig) -> None:
    if cfg.command == "gen":
        cmd_gen(cfg)
    elif cfg.command == "run":
        cmd_run(cfg)
    elif cfg.command == "eval":
        cmd_eval(cfg)
    elif cfg.command == "bench":
        cmd_bench(cfg)
    else:
        cmd_all(cfg)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    overrides = {
        "command": args.command,
        CONF_SEED: args.seed,
        CONF_VARIANT: args.variant,
        CONF_OBJECTS: args.objects,
        CONF_FRAMES: args.frames,
        CONF_OUT: args.out,
        CONF_DATASET: args.dataset,
    }
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as err:
        _LOGGER.error("%s", err)
        return EXIT_USAGE

    try:
        run_command(cfg)
    except ConfigError as err:
        _LOGGER.error("%s", err)
        return EXIT_USAGE
    except (GeoFusionError, OSError) as err:
        _LOGGER.error("%s failed: %s", cfg.command, err)
        return EXIT_RUNTIME
    return EXIT_OK
