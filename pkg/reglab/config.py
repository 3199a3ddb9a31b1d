"""
Experiment configuration: flat INI presets and environment fallbacks.

A preset has up to five sections::

    [run]          command, experiment, trials, seed, workers, out, format, dump_trajectories, timing
    [model]        kind, R, d
    [measurement]  kind, indices (1-based), v, sigma, sigmas, noise
    [guidance]     rho, T, sampler, guidance, steps, sde_steps, rel_tol, min_step, mdps_form, refine
    [experiment]   experiment-specific parameters (see DEFAULT_PARAMS)

Keys missing from a preset take the defaults of the named experiment; unknown
sections or keys are rejected.
"""

import configparser
import math
import os
import re
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, Optional, Tuple

from dotenv import load_dotenv

from .core.dynamics import GuidanceConfig, GuidanceKind, MdpsForm, SamplerKind
from .core.errors import ConfigError
from .core.measure import MeasurementKind
from .core.models import ModelKind, ModelSpec

load_dotenv()

EXPERIMENTS = (
    "projection",
    "sde-failure",
    "contraction",
    "dps-bias",
    "roundtrip",
    "latent-geometry",
    "decoupling",
    "analytic",
)
COMMANDS = ("score-check", "roundtrip", "reguidance", "verify")
FORMATS = ("csv", "json")

# Commands other than `verify` run a fixed experiment.
COMMAND_EXPERIMENT = {"score-check": "analytic", "roundtrip": "roundtrip", "reguidance": "reguidance"}

_COS45 = math.cos(math.pi / 4)
_SIN45 = math.sin(math.pi / 4)


@dataclass(frozen=True)
class MeasurementSettings:
    """Measurement block; ``indices`` are 0-based here and 1-based in preset files."""

    kind: MeasurementKind = MeasurementKind.INPAINTING
    indices: Tuple[int, ...] = (0,)
    v: Tuple[float, ...] = ()
    sigma: float = 0.05
    sigmas: Tuple[float, ...] = ()
    noise: float = 0.0

    @property
    def sigma_list(self) -> Tuple[float, ...]:
        return self.sigmas or (self.sigma,)


@dataclass(frozen=True)
class RunSettings:
    trials: int = 1
    seed: int = 0
    workers: Optional[int] = None
    out: str = field(default_factory=lambda: os.getenv("REGLAB_OUT", "results"))
    format: str = "csv"
    dump_trajectories: bool = False
    timing: bool = True

    @property
    def resolved_workers(self) -> int:
        if self.workers is not None:
            return self.workers
        return max(1, int(os.getenv("REGLAB_WORKERS", "1")))


@dataclass(frozen=True)
class ExperimentConfig:
    command: str
    experiment: str
    model: ModelSpec
    measurement: MeasurementSettings
    guidance: GuidanceConfig
    run: RunSettings
    params: Dict[str, Any] = field(default_factory=dict)

    def param(self, name: str) -> Any:
        return self.params[name]

    def with_run(self, **changes) -> "ExperimentConfig":
        return replace(self, run=replace(self.run, **changes))

    def with_params(self, **changes) -> "ExperimentConfig":
        unknown = set(changes) - set(self.params)
        if unknown:
            raise ConfigError(f"experiment.{sorted(unknown)[0]}", f"unknown key for {self.experiment}")
        return replace(self, params={**self.params, **changes})


DEFAULT_PARAMS: Dict[str, Dict[str, Any]] = {
    "projection": {
        "target_sigma": 0.05,
        "tolerance": 0.05,
        "random_latent_arm": False,
        "check_horizon": False,
        "horizon_tolerance": 0.1,
    },
    "sde-failure": {
        "block_size": 250,
        "min_trials": 2000,
        "ode_tolerance": 0.05,
        "min_mode_distance": 0.5,
    },
    "contraction": {
        "offset_min": 3.0,
        "offset_max": 4.0,
        "degenerate_arm": True,
    },
    "dps-bias": {
        "y": 2.0,
        "block_size": 1000,
        "min_trials": 5000,
        "bias_z": 5.0,
    },
    "roundtrip": {
        "grids": (64, 128, 256),
        "tolerance": 1e-4,
        "order_steps": 10,
        "order_band": 0.2,
    },
    "latent-geometry": {
        "n_modes": 4,
        "perturb_stds": (0.0, 0.05, 0.1, 0.3),
        "interpolation_std": 0.3,
    },
    "decoupling": {
        "gap_tolerance": 1e-9,
    },
    "analytic": {
        "cases": 100,
        "fd_step": 1e-5,
        "tau_min": 0.01,
        "tau_max": 2.0,
        "score_tol": 1e-6,
        "tweedie_tol": 1e-10,
        "jacobian_tol": 1e-6,
        "oracle_max_d": 6,
    },
    "reguidance": {
        "x": (),
        "truth": (),
    },
}


def default_config(experiment: str, command: str = "verify") -> ExperimentConfig:
    """The built-in preset of ``experiment`` (acceptance-scale sizes)."""
    if experiment not in DEFAULT_PARAMS:
        raise ConfigError("run.experiment", f"unknown experiment {experiment!r}; expected one of {', '.join(EXPERIMENTS)}")
    hypercube8 = ModelSpec(ModelKind.HYPERCUBE, R=3.0, d=8)
    base = dict(
        command=command,
        experiment=experiment,
        model=hypercube8,
        measurement=MeasurementSettings(),
        guidance=GuidanceConfig(),
        run=RunSettings(),
        params=dict(DEFAULT_PARAMS[experiment]),
    )
    if experiment == "projection":
        base.update(
            measurement=MeasurementSettings(indices=(0, 1, 2), sigma=0.05, sigmas=(0.2, 0.1, 0.05)),
            run=RunSettings(trials=20),
        )
    elif experiment == "sde-failure":
        base.update(
            model=ModelSpec(ModelKind.HYPERCUBE, R=3.0, d=4),
            measurement=MeasurementSettings(indices=(0,), sigma=0.05),
            guidance=GuidanceConfig(sampler=SamplerKind.SDE),
            run=RunSettings(trials=2000),
        )
    elif experiment == "contraction":
        base.update(
            model=ModelSpec(ModelKind.BIMODAL, R=5.0, d=2),
            measurement=MeasurementSettings(
                kind=MeasurementKind.SINGLE_VECTOR,
                indices=(),
                v=(_COS45, _SIN45),
                sigma=0.01,
                sigmas=(0.05, 0.01, 0.005),
            ),
            guidance=GuidanceConfig(guidance=GuidanceKind.MDPS, mdps_form=MdpsForm.TIME_CONSISTENT),
            run=RunSettings(trials=8),
        )
    elif experiment == "dps-bias":
        base.update(
            model=ModelSpec(ModelKind.ISO_GAUSSIAN, R=1.0, d=1),
            measurement=MeasurementSettings(kind=MeasurementKind.SINGLE_VECTOR, indices=(), v=(1.0,), sigma=1.0),
            guidance=GuidanceConfig(T=5.0, sampler=SamplerKind.SDE),
            run=RunSettings(trials=5000),
        )
    elif experiment == "roundtrip":
        base.update(run=RunSettings(trials=10))
    elif experiment == "latent-geometry":
        base.update(
            measurement=MeasurementSettings(indices=(0, 1, 2), sigma=0.05),
            run=RunSettings(trials=10),
        )
    elif experiment == "decoupling":
        base.update(
            model=ModelSpec(ModelKind.HYPERCUBE, R=3.0, d=6),
            measurement=MeasurementSettings(indices=(0, 2), sigma=0.1),
            guidance=GuidanceConfig(steps=4096),
        )
    elif experiment == "analytic":
        base.update(model=ModelSpec(ModelKind.HYPERCUBE, R=3.0, d=4))
    elif experiment == "reguidance":
        base.update(
            model=ModelSpec(ModelKind.HYPERCUBE, R=3.0, d=4),
            measurement=MeasurementSettings(indices=(0, 1), sigma=0.05),
        )
    return ExperimentConfig(**base)


# Parsing

_SECTIONS = ("run", "model", "measurement", "guidance", "experiment")
_RUN_KEYS = ("command", "experiment", "trials", "seed", "workers", "out", "format", "dump_trajectories", "timing")
_MODEL_KEYS = ("kind", "R", "d")
_MEASUREMENT_KEYS = ("kind", "indices", "v", "sigma", "sigmas", "noise")
_GUIDANCE_KEYS = (
    "rho",
    "T",
    "sampler",
    "guidance",
    "steps",
    "sde_steps",
    "rel_tol",
    "min_step",
    "seed",
    "mdps_form",
    "refine",
)
_KEYS = {
    "run": _RUN_KEYS,
    "model": _MODEL_KEYS,
    "measurement": _MEASUREMENT_KEYS,
    "guidance": _GUIDANCE_KEYS,
}


class _Source:
    """Raw INI text plus a key -> line number index for diagnostics."""

    def __init__(self, text: str):
        self.lines: Dict[Tuple[str, str], int] = {}
        section = None
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            header = re.match(r"^\[([^\]]+)\]$", line)
            if header:
                section = header.group(1).strip()
                self.lines.setdefault((section, ""), lineno)
            elif section and line and line[0] not in "#;":
                key = re.split(r"[=:]", line, maxsplit=1)[0].strip()
                self.lines.setdefault((section, key), lineno)

    def error(self, section: str, key: str, message: str) -> ConfigError:
        return ConfigError(f"{section}.{key}" if key else section, message, self.lines.get((section, key)))


def _to_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _to_floats(text: str) -> Tuple[float, ...]:
    return tuple(float(p) for p in re.split(r"[,\s]+", text.strip()) if p)


def _to_ints(text: str) -> Tuple[int, ...]:
    return tuple(int(p) for p in re.split(r"[,\s]+", text.strip()) if p)


def _convert_like(default: Any, text: str) -> Any:
    if isinstance(default, bool):
        return _to_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        if default and all(isinstance(v, int) for v in default):
            return _to_ints(text)
        return _to_floats(text)
    return text.strip()


def parse_config(text: str) -> ExperimentConfig:
    """
    Parse and validate a preset.

    Raises:
        ConfigError: malformed text (with line number), unknown section or
            key, or a violated constraint, named by its dotted key path
            (``measurement.sigma > 0``).
    """
    source = _Source(text)
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"), empty_lines_in_values=False)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.ParsingError as exc:
        errors = getattr(exc, "errors", None)
        lineno = errors[0][0] if errors else getattr(exc, "lineno", None)
        raise ConfigError("config", "malformed line", lineno) from exc
    except configparser.Error as exc:
        raise ConfigError("config", str(exc).splitlines()[0], getattr(exc, "lineno", None)) from exc

    for section in parser.sections():
        if section not in _SECTIONS:
            raise source.error(section, "", f"unknown section; expected one of {', '.join(_SECTIONS)}")
        allowed = _KEYS.get(section)
        if allowed is not None:
            for key in parser[section]:
                if key not in allowed:
                    raise source.error(section, key, "unknown key")

    run = parser["run"] if parser.has_section("run") else {}
    command = run.get("command", "verify").strip()
    if command not in COMMANDS:
        raise source.error("run", "command", f"unknown command {command!r}; expected one of {', '.join(COMMANDS)}")
    if command == "verify":
        experiment = run.get("experiment", "").strip()
        if experiment not in EXPERIMENTS:
            raise source.error("run", "experiment", f"must be one of {', '.join(EXPERIMENTS)}")
    else:
        experiment = COMMAND_EXPERIMENT[command]
        if run.get("experiment", experiment).strip() != experiment:
            raise source.error("run", "experiment", f"command {command} always runs {experiment}")

    cfg = _apply(default_config(experiment, command), parser, source)
    return validate(cfg, source)


def _value(parser, source: _Source, section: str, key: str, convert):
    text = parser[section][key]
    try:
        return convert(text)
    except (TypeError, ValueError) as exc:
        raise source.error(section, key, f"cannot parse {text!r}: {exc}") from exc


def _apply(cfg: ExperimentConfig, parser, source: _Source) -> ExperimentConfig:
    changes: Dict[str, Any] = {}

    if parser.has_section("run"):
        run = {}
        converters = {
            "trials": int,
            "seed": int,
            "workers": lambda s: int(s) if s.strip() else None,
            "out": str.strip,
            "format": lambda s: s.strip().lower(),
            "dump_trajectories": _to_bool,
            "timing": _to_bool,
        }
        for key, convert in converters.items():
            if key in parser["run"]:
                run[key] = _value(parser, source, "run", key, convert)
        changes["run"] = replace(cfg.run, **run)

    if parser.has_section("model"):
        model = {"kind": cfg.model.kind, "R": cfg.model.R, "d": cfg.model.d}
        for key, convert in {"kind": str.strip, "R": float, "d": int}.items():
            if key in parser["model"]:
                model[key] = _value(parser, source, "model", key, convert)
        try:
            changes["model"] = ModelSpec(ModelKind(model["kind"]), R=model["R"], d=model["d"])
        except ValueError as exc:
            raise source.error("model", "", str(exc)) from exc

    if parser.has_section("measurement"):
        meas = {}
        converters = {
            "kind": lambda s: MeasurementKind(s.strip()),
            "indices": lambda s: tuple(i - 1 for i in _to_ints(s)),
            "v": _to_floats,
            "sigma": float,
            "sigmas": _to_floats,
            "noise": float,
        }
        for key, convert in converters.items():
            if key in parser["measurement"]:
                meas[key] = _value(parser, source, "measurement", key, convert)
        changes["measurement"] = replace(cfg.measurement, **meas)

    if parser.has_section("guidance"):
        guidance = {}
        converters = {
            "rho": lambda s: float(s) if s.strip() else None,
            "T": float,
            "sampler": lambda s: SamplerKind(s.strip()),
            "guidance": lambda s: GuidanceKind(s.strip()),
            "steps": int,
            "sde_steps": int,
            "rel_tol": float,
            "min_step": float,
            "seed": int,
            "mdps_form": lambda s: MdpsForm(s.strip()),
            "refine": _to_bool,
        }
        for key, convert in converters.items():
            if key in parser["guidance"]:
                guidance[key] = _value(parser, source, "guidance", key, convert)
        try:
            changes["guidance"] = cfg.guidance.with_(**guidance)
        except ValueError as exc:
            raise source.error("guidance", "", str(exc)) from exc

    if parser.has_section("experiment"):
        params = dict(cfg.params)
        for key in parser["experiment"]:
            if key not in params:
                raise source.error("experiment", key, f"unknown key for {cfg.experiment}")
            default = params[key]
            params[key] = _value(parser, source, "experiment", key, lambda s, d=default: _convert_like(d, s))
        changes["params"] = params

    return replace(cfg, **changes)


def validate(cfg: ExperimentConfig, source: Optional[_Source] = None) -> ExperimentConfig:
    """Check cross-field constraints; errors name the key path and the violated constraint."""
    source = source or _Source("")
    m, run, model = cfg.measurement, cfg.run, cfg.model

    if not m.sigma > 0:
        raise source.error("measurement", "sigma", "measurement.sigma > 0")
    if any(not s > 0 for s in m.sigmas):
        raise source.error("measurement", "sigmas", "measurement.sigmas > 0")
    if m.noise < 0:
        raise source.error("measurement", "noise", "measurement.noise >= 0")
    if m.kind is MeasurementKind.INPAINTING:
        if not m.indices:
            raise source.error("measurement", "indices", "inpainting needs at least one index")
        if len(set(m.indices)) != len(m.indices) or any(i < 0 or i >= model.d for i in m.indices):
            raise source.error("measurement", "indices", f"indices must be distinct and within 1..{model.d}")
    if m.kind is MeasurementKind.SINGLE_VECTOR:
        if len(m.v) != model.d:
            raise source.error("measurement", "v", f"v must have {model.d} entries")
        if abs(math.sqrt(sum(c * c for c in m.v)) - 1.0) > 1e-12:
            raise source.error("measurement", "v", "v must be a unit vector")
    if run.trials < 1:
        raise source.error("run", "trials", "run.trials >= 1")
    if run.workers is not None and run.workers < 1:
        raise source.error("run", "workers", "run.workers >= 1")
    if run.format not in FORMATS:
        raise source.error("run", "format", f"run.format in {{{', '.join(FORMATS)}}}")
    if run.seed < 0 or run.seed >= 2 ** 64:
        raise source.error("run", "seed", "run.seed is an unsigned 64-bit integer")
    if m.kind is MeasurementKind.GENERAL:
        raise source.error("measurement", "kind", "measurement.kind in {inpainting, single_vector}")
    if cfg.guidance.guidance is GuidanceKind.MDPS and (
        model.kind is not ModelKind.BIMODAL or m.kind is not MeasurementKind.SINGLE_VECTOR
    ):
        raise source.error(
            "guidance", "guidance", "guidance.guidance = mdps requires model.kind = bimodal and a single_vector measurement"
        )
    return cfg


def _fmt(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    if hasattr(value, "value"):
        return value.value
    return str(value)


def serialize_config(cfg: ExperimentConfig) -> str:
    """Normalized preset text; ``parse_config(serialize_config(c)) == c``."""
    out = configparser.ConfigParser(interpolation=None)
    out.optionxform = str
    out["run"] = {
        "command": cfg.command,
        "experiment": cfg.experiment,
        "trials": _fmt(cfg.run.trials),
        "seed": _fmt(cfg.run.seed),
        "workers": _fmt(cfg.run.workers),
        "out": cfg.run.out,
        "format": cfg.run.format,
        "dump_trajectories": _fmt(cfg.run.dump_trajectories),
        "timing": _fmt(cfg.run.timing),
    }
    out["model"] = {"kind": cfg.model.kind.value, "R": _fmt(float(cfg.model.R)), "d": _fmt(cfg.model.d)}
    m = cfg.measurement
    out["measurement"] = {
        "kind": m.kind.value,
        "indices": _fmt(tuple(i + 1 for i in m.indices)),
        "v": _fmt(tuple(float(c) for c in m.v)),
        "sigma": _fmt(float(m.sigma)),
        "sigmas": _fmt(tuple(float(s) for s in m.sigmas)),
        "noise": _fmt(float(m.noise)),
    }
    g = cfg.guidance
    out["guidance"] = {f.name: _fmt(getattr(g, f.name)) for f in fields(g)}
    if cfg.params:
        out["experiment"] = {key: _fmt(value) for key, value in cfg.params.items()}
    lines = []
    for section in out.sections():
        lines.append(f"[{section}]")
        for key, value in out[section].items():
            lines.append(f"{key} = {value}".rstrip())
        lines.append("")
    return "\n".join(lines)


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())
