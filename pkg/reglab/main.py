import json
import logging
import os
from pathlib import Path
from typing import Optional

import typer
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from .config import (
    EXPERIMENTS,
    ExperimentConfig,
    default_config,
    load_config,
    serialize_config,
    validate,
)
from .core.errors import ConfigError, ReglabError, TrialError
from .experiments.report import VerifyReport, write_trajectory
from .experiments.verify import run_experiment

app = typer.Typer(help="Numerical lab for ReGuidance on analytic Gaussian mixtures.", no_args_is_help=True)
console = Console()
logger = logging.getLogger("reglab")

EXIT_VERDICT_FAILED = 1
EXIT_ERROR = 2


@app.callback()
def main(verbose: bool = typer.Option(False, "--verbose", "-v", help="Log integrator details.")):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )


def _presets_dir() -> Path:
    base_dir = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    return Path(base_dir) / "presets"


def _resolve_preset(name_or_path: str) -> Path:
    path = Path(name_or_path)
    if path.exists():
        return path
    candidate = _presets_dir() / f"{name_or_path}.ini"
    if candidate.exists():
        return candidate
    raise ConfigError("config", f"{name_or_path} is neither a file nor a preset in {_presets_dir()}")


def _load(config: Optional[str], experiment: str, command: str) -> ExperimentConfig:
    if config is None:
        return default_config(experiment, command)
    cfg = load_config(_resolve_preset(config))
    if cfg.experiment != experiment:
        raise ConfigError("run.experiment", f"config runs {cfg.experiment}, command expects {experiment}")
    return cfg


def _override(
    cfg: ExperimentConfig,
    seed: Optional[int],
    workers: Optional[int],
    trials: Optional[int],
    out: Optional[str],
    fmt: Optional[str],
    dump_trajectories: bool,
    timing: bool,
) -> ExperimentConfig:
    changes = {}
    if seed is not None:
        changes["seed"] = seed
    if workers is not None:
        changes["workers"] = workers
    if trials is not None:
        changes["trials"] = trials
    if out is not None:
        changes["out"] = out
    if fmt is not None:
        if fmt not in ("csv", "json"):
            raise ConfigError("run.format", "run.format in {csv, json}")
        changes["format"] = fmt
    if dump_trajectories:
        changes["dump_trajectories"] = True
    if not timing:
        changes["timing"] = False
    return validate(cfg.with_run(**changes)) if changes else cfg


def _write_failure(out_dir: Path, payload: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "failure.json"
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return path


def _print_report(report: VerifyReport) -> None:
    table = Table(title=f"{report.experiment}")
    table.add_column("verdict")
    table.add_column("value", justify="right")
    table.add_column("threshold", justify="right")
    table.add_column("result")
    for v in report.verdicts:
        threshold = "" if v.comparison == "strictly_decreasing" else f"{v.comparison} {v.threshold:.6g}"
        table.add_row(v.name, f"{v.value:.6g}", threshold, "[green]pass[/green]" if v.passed else "[red]FAIL[/red]")
    if report.verdicts:
        console.print(table)
    for name, value in report.metrics.items():
        logger.debug("%s = %.17g", name, value)


def run_command(cfg: ExperimentConfig) -> None:
    out_dir = Path(cfg.run.out)
    try:
        report = run_experiment(cfg)
    except TrialError as exc:
        path = _write_failure(out_dir, exc.to_dict())
        console.print(f"[red]{exc}[/red]\nfailure summary: {path}")
        raise typer.Exit(EXIT_ERROR)
    except ReglabError as exc:
        path = _write_failure(
            out_dir,
            {"experiment": cfg.experiment, "trial": None, "seed": cfg.run.seed, "error": f"{type(exc).__name__}: {exc}"},
        )
        console.print(f"[red]{exc}[/red]\nfailure summary: {path}")
        raise typer.Exit(EXIT_ERROR)

    if not cfg.run.timing:
        report = report.without_timing()
    path = report.write(out_dir, cfg.run.format)
    if cfg.run.dump_trajectories:
        for name, traj in report.trajectories.items():
            write_trajectory(traj, out_dir / "trajectories" / f"{name}.csv")
    _print_report(report)
    console.print(f"report: {path}")

    if not report.passed:
        failed = [
            {"verdict": v.name, "metric": v.metric, "value": v.value, "comparison": v.comparison, "threshold": v.threshold}
            for v in report.failed_verdicts()
        ]
        _write_failure(out_dir, {"experiment": cfg.experiment, "trial": None, "seed": cfg.run.seed, "failed": failed})
        raise typer.Exit(EXIT_VERDICT_FAILED)


def _run(command: str, experiment: str, config, seed, workers, trials, out, fmt, dump, timing) -> None:
    try:
        cfg = _override(_load(config, experiment, command), seed, workers, trials, out, fmt, dump, timing)
    except ConfigError as exc:
        console.print(f"[red]config error[/red] {exc}")
        raise typer.Exit(EXIT_ERROR)
    run_command(cfg)


ConfigOpt = typer.Option(None, "--config", "-c", help="Preset file or name under presets/.")
SeedOpt = typer.Option(None, "--seed", help="Base seed (unsigned 64-bit).")
WorkersOpt = typer.Option(None, "--workers", help="Worker processes (falls back to REGLAB_WORKERS).")
TrialsOpt = typer.Option(None, "--trials", help="Override the number of trials.")
OutOpt = typer.Option(None, "--out", help="Output directory.")
FormatOpt = typer.Option(None, "--format", help="csv or json.")
DumpOpt = typer.Option(False, "--dump-trajectories", help="Write per-run trajectory CSVs.")
TimingOpt = typer.Option(True, "--timing/--no-timing", help="Record wall-clock runtimes (off for byte-identical reruns).")


@app.command()
def verify(
    experiment: str = typer.Argument(..., help=f"One of: {', '.join(EXPERIMENTS)}"),
    config: Optional[str] = ConfigOpt,
    seed: Optional[int] = SeedOpt,
    workers: Optional[int] = WorkersOpt,
    trials: Optional[int] = TrialsOpt,
    out: Optional[str] = OutOpt,
    fmt: Optional[str] = FormatOpt,
    dump_trajectories: bool = DumpOpt,
    timing: bool = TimingOpt,
):
    """Runs one reproduction experiment and exits non-zero unless every verdict passes."""
    if experiment not in EXPERIMENTS:
        console.print(f"[red]unknown experiment {experiment!r}[/red]; expected one of {', '.join(EXPERIMENTS)}")
        raise typer.Exit(EXIT_ERROR)
    _run("verify", experiment, config, seed, workers, trials, out, fmt, dump_trajectories, timing)


@app.command()
def score_check(
    config: Optional[str] = ConfigOpt,
    seed: Optional[int] = SeedOpt,
    out: Optional[str] = OutOpt,
    fmt: Optional[str] = FormatOpt,
    timing: bool = TimingOpt,
):
    """Checks scores, denoisers and Jacobians against finite differences."""
    _run("score-check", "analytic", config, seed, None, None, out, fmt, False, timing)


@app.command()
def roundtrip(
    config: Optional[str] = ConfigOpt,
    seed: Optional[int] = SeedOpt,
    workers: Optional[int] = WorkersOpt,
    trials: Optional[int] = TrialsOpt,
    out: Optional[str] = OutOpt,
    fmt: Optional[str] = FormatOpt,
    timing: bool = TimingOpt,
):
    """Measures extract-then-regenerate fidelity of the probability flow ODE."""
    _run("roundtrip", "roundtrip", config, seed, workers, trials, out, fmt, False, timing)


@app.command()
def reguidance(
    config: Optional[str] = ConfigOpt,
    seed: Optional[int] = SeedOpt,
    out: Optional[str] = OutOpt,
    fmt: Optional[str] = FormatOpt,
    dump_trajectories: bool = DumpOpt,
    timing: bool = TimingOpt,
):
    """Runs ReGuidance once on a sampled (or configured) reconstruction."""
    _run("reguidance", "reguidance", config, seed, None, None, out, fmt, dump_trajectories, timing)


@app.command()
def run(
    config: str = typer.Option(..., "--config", "-c", help="Preset file or name under presets/."),
    seed: Optional[int] = SeedOpt,
    workers: Optional[int] = WorkersOpt,
    trials: Optional[int] = TrialsOpt,
    out: Optional[str] = OutOpt,
    fmt: Optional[str] = FormatOpt,
    dump_trajectories: bool = DumpOpt,
    timing: bool = TimingOpt,
):
    """Runs whatever command the preset names."""
    try:
        cfg = load_config(_resolve_preset(config))
        cfg = _override(cfg, seed, workers, trials, out, fmt, dump_trajectories, timing)
    except ConfigError as exc:
        console.print(f"[red]config error[/red] {exc}")
        raise typer.Exit(EXIT_ERROR)
    run_command(cfg)


@app.command()
def show_config(
    experiment: Optional[str] = typer.Argument(None, help="Built-in experiment defaults to print."),
    config: Optional[str] = ConfigOpt,
):
    """Prints the normalized preset (all defaults filled in)."""
    try:
        if config is not None:
            cfg = load_config(_resolve_preset(config))
        elif experiment is not None:
            cfg = default_config(experiment)
        else:
            console.print("[red]give an experiment name or --config[/red]")
            raise typer.Exit(EXIT_ERROR)
    except ConfigError as exc:
        console.print(f"[red]config error[/red] {exc}")
        raise typer.Exit(EXIT_ERROR)
    typer.echo(serialize_config(cfg), nl=False)


if __name__ == "__main__":
    app()
