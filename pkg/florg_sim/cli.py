"""
florg-sim command line
Runs single experiments, scheme comparisons, ablation sweeps and the verification suite
"""

import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import click
from pydantic import ValidationError

from . import __version__
from .adapter import InitScheme
from .baselines import SchemeId
from .checkpoint import Checkpoint, save_checkpoint
from .config_manager import FlorgConfigManager
from .diagnostics import BoundRecord, estimate_smoothness, theorem2_diagnostics
from .errors import ConfigError, DivergenceError, OutputExistsError
from .federation import Experiment, ExperimentConfig, rounds_to_target
from .metrics_sink import CsvMetricsSink, write_csv
from . import mylogger, verify

logger = mylogger.get_logger(__name__)

EXIT_CONFIG = 1
EXIT_DIVERGENCE = 2
EXIT_VERIFY = 3
EXIT_OUTPUT = 4

RUN_OUTPUTS = ("manifest.yaml", "metrics.csv", "theorem2.csv", "final.ckpt")

SUMMARY_COLUMNS = [
    "scheme", "variant", "seeds",
    "final_loss_mean", "final_loss_min", "final_loss_max",
    "final_accuracy_mean", "final_accuracy_min", "final_accuracy_max",
    "total_params_transmitted", "rounds_to_target",
]

ABLATION_STUDIES: Dict[str, List[Tuple[str, Dict[str, Any]]]] = {
    "align": [("on", {"scheme": SchemeId.FLORG, "align": True}), ("off", {"scheme": SchemeId.FLORG, "align": False})],
    "rank": [(f"r={r}", {"rank": r}) for r in (2, 4, 8, 16)],
    "rho": [(f"rho={rho:g}", {"dirichlet_rho": rho}) for rho in (0.1, 0.5, 1.0, 10.0)],
    "init": [(scheme.value, {"init_scheme": scheme}) for scheme in InitScheme],
    "participation": [(f"p={p:g}", {"participation_ratio": p}) for p in (0.25, 0.5, 1.0)],
}


@dataclass(frozen=True)
class CellResult:
    scheme: str
    variant: str
    seed: int
    final_loss: float
    final_accuracy: float
    total_params: int
    rounds_to_target: Optional[int]


# ============================================================================
# HELPERS
# ============================================================================

def _fail(message: str, code: int) -> None:
    click.echo(f"❌ {message}", err=True)
    sys.exit(code)


def _parse_list(raw: str, name: str) -> List[str]:
    items = [part.strip() for part in raw.split(",") if part.strip()]
    if not items:
        raise ConfigError(f"--{name} needs at least one value", key=name)
    return items


def _parse_seeds(raw: str) -> List[int]:
    seeds = []
    for item in _parse_list(raw, "seeds"):
        try:
            seed = int(item)
        except ValueError as e:
            raise ConfigError(f"--seeds entries must be integers, got: {item!r}", key="seeds") from e
        if seed < 0:
            raise ConfigError(f"--seeds entries must be >= 0, got: {seed}", key="seeds")
        seeds.append(seed)
    return seeds


def _parse_schemes(raw: str) -> List[SchemeId]:
    try:
        return [SchemeId(item) for item in _parse_list(raw, "schemes")]
    except ValueError as e:
        raise ConfigError(f"--schemes: {e}; choose from {[s.value for s in SchemeId]}", key="schemes") from e


def _prepare_output(out: Path, names: Sequence[str], overwrite: bool) -> None:
    existing = [name for name in names if (out / name).exists()]
    if existing and not overwrite:
        raise OutputExistsError(f"{out} already holds {', '.join(existing)}; pass --overwrite to replace")
    out.mkdir(parents=True, exist_ok=True)


def _variant(cfg: ExperimentConfig, **update) -> ExperimentConfig:
    """Copy with field updates, re-validated."""
    try:
        return ExperimentConfig(**{**cfg.model_dump(), **update})
    except ValidationError as e:
        raise ConfigError(f"invalid variant {update}: {e.errors()[0]['msg']}") from e


def _run_cell(cfg: ExperimentConfig, variant: str, csv_path: str) -> CellResult:
    """One (scheme, variant, seed) run; top-level so a process pool can pickle it."""
    experiment = Experiment(cfg)
    with CsvMetricsSink(csv_path) as sink:
        rows = experiment.run(sink)
    final = rows[-1]
    return CellResult(
        scheme=cfg.scheme.value,
        variant=variant,
        seed=cfg.seed,
        final_loss=final.global_loss,
        final_accuracy=final.eval_accuracy,
        total_params=sum(row.uplink_params + row.downlink_params for row in rows),
        rounds_to_target=rounds_to_target(rows, experiment.initial_loss, cfg.target_loss_ratio),
    )


def summarize(results: Sequence[CellResult]) -> List[tuple]:
    """One row per (scheme, variant); mean/min/max over seeds, '-' if any seed misses the target."""
    groups: Dict[Tuple[str, str], List[CellResult]] = {}
    for result in results:
        groups.setdefault((result.scheme, result.variant), []).append(result)
    rows = []
    for (scheme, variant), cells in groups.items():
        losses = [c.final_loss for c in cells]
        accs = [c.final_accuracy for c in cells]
        reached = [c.rounds_to_target for c in cells]
        rows.append((
            scheme, variant, len(cells),
            sum(losses) / len(losses), min(losses), max(losses),
            sum(accs) / len(accs), min(accs), max(accs),
            sum(c.total_params for c in cells) // len(cells),
            "-" if any(r is None for r in reached) else sum(reached) / len(reached),
        ))
    return rows


def _run_cells(cells: List[Tuple[ExperimentConfig, str, str]], workers: int) -> List[CellResult]:
    if workers <= 1:
        return [_run_cell(*cell) for cell in cells]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_run_cell, *cell) for cell in cells]
        return [future.result() for future in futures]


def _print_configuration(cfg: ExperimentConfig, config_path: Optional[str]) -> None:
    click.echo("Using Configuration:")
    click.echo(f"   Config file: {config_path or '(defaults only)'}")
    click.echo(f"   Scheme: {cfg.scheme.value}  Task: {cfg.task.kind.value} {cfg.task.d_out}x{cfg.task.d_in}")
    click.echo(f"   Clients: {cfg.num_clients}  Rounds: {cfg.rounds}  Rank: {cfg.rank}  eta: {cfg.eta:g}")
    click.echo(f"   Seed: {cfg.seed}")


# ============================================================================
# COMMANDS
# ============================================================================

@click.group(epilog=(
    "Exit codes: 0 success, 1 configuration error, 2 divergence, "
    "3 verification failure, 4 output error (including refused overwrite)."
))
@click.version_option(__version__, prog_name="florg-sim")
@click.option("--log-level", default="INFO", show_default=True,
              type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False))
def main(log_level: str) -> None:
    """Desk-scale federated LoRA simulator."""
    mylogger.set_level(log_level)


@main.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Flat key = value experiment file.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Output directory.")
@click.option("--overwrite", is_flag=True, help="Replace existing run outputs.")
@click.option("--seed", type=int, default=None, help="Overrides FLORG_SEED and the file's seed.")
def run(config_path: Optional[str], out_dir: str, overwrite: bool, seed: Optional[int]) -> None:
    """Run one experiment and write metrics, bound diagnostics, a checkpoint and a manifest."""
    manager = FlorgConfigManager()
    out = Path(out_dir)
    try:
        flat = manager.get_merged_config(config_path, {"seed": seed})
        cfg = manager.build(flat)
        _prepare_output(out, RUN_OUTPUTS, overwrite)
    except ConfigError as e:
        _fail(f"Configuration error: {e}", EXIT_CONFIG)
    except (OutputExistsError, OSError) as e:
        _fail(f"Output error: {e}", EXIT_OUTPUT)

    _print_configuration(cfg, config_path)
    started_at = datetime.now(timezone.utc)
    started = time.monotonic()
    try:
        experiment = Experiment(cfg)
        with CsvMetricsSink(out / "metrics.csv") as sink:
            rows = experiment.run(sink)
        records = theorem2_diagnostics(
            experiment.history, cfg, estimate_smoothness(experiment.client_data), experiment.initial_train_loss,
        )
        write_csv(out / "theorem2.csv", BoundRecord.columns(), (rec.as_row() for rec in records))
        size = save_checkpoint(out / "final.ckpt", Checkpoint(
            config=flat, round_idx=experiment.round_idx,
            matrices=experiment.scheme.state_matrices(experiment.state),
        ))
        manager._save_yaml(out / "manifest.yaml", {
            "tool_version": __version__,
            "config_path": str(config_path) if config_path else None,
            "output_dir": str(out),
            "config": manager.to_flat(cfg),
            "started_at": started_at.isoformat(),
            "finished_at": datetime.now(timezone.utc).isoformat(),
            "wall_clock_seconds": round(time.monotonic() - started, 3),
            "initial_loss": experiment.initial_loss,
            "rounds_to_target": rounds_to_target(rows, experiment.initial_loss, cfg.target_loss_ratio),
            "files": list(RUN_OUTPUTS),
        })
    except DivergenceError as e:
        _fail(f"Run diverged: {e}", EXIT_DIVERGENCE)
    except OSError as e:
        _fail(f"Output error: {e}", EXIT_OUTPUT)

    final = rows[-1]
    click.echo("=" * 60)
    click.echo(f"✅ {len(rows)} rounds, final loss {final.global_loss:.6e}, checkpoint {size} bytes")
    click.echo(f"   Outputs: {out}")


def _sweep(
    config_path: Optional[str], out_dir: str, overwrite: bool, workers: int,
    build_cells: Callable[[ExperimentConfig, Path], List[Tuple[ExperimentConfig, str, str]]],
) -> None:
    manager = FlorgConfigManager()
    out = Path(out_dir)
    try:
        base = manager.build(manager.get_merged_config(config_path))
        cells = build_cells(base, out)
        _prepare_output(out, [Path(cell[2]).name for cell in cells] + ["summary.csv"], overwrite)
    except ConfigError as e:
        _fail(f"Configuration error: {e}", EXIT_CONFIG)
    except (OutputExistsError, OSError) as e:
        _fail(f"Output error: {e}", EXIT_OUTPUT)

    click.echo(f"Running {len(cells)} cells with {workers} worker(s)")
    try:
        results = _run_cells(cells, workers)
        write_csv(out / "summary.csv", SUMMARY_COLUMNS, summarize(results))
    except DivergenceError as e:
        _fail(f"Run diverged: {e}", EXIT_DIVERGENCE)
    except OSError as e:
        _fail(f"Output error: {e}", EXIT_OUTPUT)
    click.echo(f"✅ {len(results)} runs, summary written to {out / 'summary.csv'}")


@main.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False))
@click.option("--schemes", required=True, help="Comma-separated, e.g. florg,fedit")
@click.option("--seeds", required=True, help="Comma-separated, e.g. 0,1")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--workers", default=1, show_default=True, type=click.IntRange(min=1))
@click.option("--overwrite", is_flag=True)
def compare(config_path, schemes, seeds, out_dir, workers, overwrite) -> None:
    """Run every (scheme, seed) pair and summarize them side by side."""
    def build_cells(base: ExperimentConfig, out: Path):
        cells = []
        for scheme in _parse_schemes(schemes):
            for seed in _parse_seeds(seeds):
                cfg = _variant(base.with_seed(seed), scheme=scheme)
                cells.append((cfg, "default", str(out / f"{scheme.value}_seed{seed}.csv")))
        return cells

    _sweep(config_path, out_dir, overwrite, workers, build_cells)


@main.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False))
@click.option("--study", required=True, type=click.Choice(sorted(ABLATION_STUDIES)))
@click.option("--seeds", required=True, help="Comma-separated, e.g. 0,1,2")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--workers", default=1, show_default=True, type=click.IntRange(min=1))
@click.option("--overwrite", is_flag=True)
def ablate(config_path, study, seeds, out_dir, workers, overwrite) -> None:
    """Sweep one factor (alignment, rank, rho, init, participation) over seeds."""
    def build_cells(base: ExperimentConfig, out: Path):
        cells = []
        for label, update in ABLATION_STUDIES[study]:
            if "rank" in update and update["rank"] > base.task.k:
                logger.warning(f"skipping {label}: exceeds min(d_in, d_out)={base.task.k}")
                continue
            for seed in _parse_seeds(seeds):
                cfg = _variant(base.with_seed(seed), **update)
                slug = label.replace("=", "")
                cells.append((cfg, label, str(out / f"{study}_{slug}_seed{seed}.csv")))
        return cells

    _sweep(config_path, out_dir, overwrite, workers, build_cells)


@main.command("verify")
@click.option("--quick", is_flag=True, help="Reduced trial counts and instance sizes.")
@click.option("--entropy", type=int, default=None, help="Replay a previous run's seeds.")
def verify_cmd(quick: bool, entropy: Optional[int]) -> None:
    """Check every numerical property with fresh seeds; exit 3 if any fails."""
    entropy, results = verify.run_suite(quick=quick, entropy=entropy)
    click.echo(f"Seed entropy: {entropy}")
    click.echo("=" * 60)
    for result in results:
        mark = "✅ PASS" if result.passed else "❌ FAIL"
        click.echo(f"{mark} {result.name} ({result.seconds:.1f}s): {result.detail}")
    click.echo("=" * 60)
    failed = [r.name for r in results if not r.passed]
    if failed:
        _fail(f"{len(failed)} propert{'y' if len(failed) == 1 else 'ies'} failed: {', '.join(failed)}", EXIT_VERIFY)
    click.echo(f"✅ all {len(results)} properties passed")


if __name__ == "__main__":
    main()
