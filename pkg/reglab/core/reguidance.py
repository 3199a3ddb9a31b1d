"""
The ReGuidance pipeline: invert a reconstruction to its latent with the
unconditional probability flow ODE, then run guided sampling from that latent.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dynamics import (
    GuidanceConfig,
    SamplerKind,
    TimeDirection,
    Trajectory,
    TrajectoryDiagnostics,
    guided_drift,
    guided_velocity,
    integrate_ode,
    integrate_sde,
    latent_trajectory,
    refine_window,
)
from .errors import DimensionError, EnumerationLimitError, NoConsistentModeError, NonFiniteError
from .measure import Measurement, project_to_consistent, residual_and_reward
from .models import ModelKind, ModelSpec, all_modes, consistent_modes, nearest_mode

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ReguidanceResult:
    """
    Outcome of one ReGuidance run.

    ``final_distance_to_projection`` is ||Pi x - output|| with Pi the orthogonal
    projection of the *input* onto {Ax = y}; ``nearest_mode_distance`` is taken
    over the measurement-consistent modes when those can be enumerated.
    """

    latent: np.ndarray
    output: np.ndarray
    latent_trajectory: Trajectory
    guided_trajectory: Trajectory
    final_reward: float
    final_distance_to_projection: float
    nearest_mode_distance: float


def _check_input(model: ModelSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (model.d,):
        raise DimensionError(f"reconstruction has shape {x.shape}, model dimension is {model.d}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("reconstruction contains non-finite entries")
    return x


def reference_modes(model: ModelSpec, meas: Optional[Measurement]) -> Optional[np.ndarray]:
    """Consistent modes when the oracle applies, else all modes, else None (hypercube too large)."""
    if meas is not None and model.kind is not ModelKind.ISO_GAUSSIAN:
        try:
            return consistent_modes(model, meas)
        except (EnumerationLimitError, NoConsistentModeError):
            pass
    try:
        return all_modes(model)
    except EnumerationLimitError:
        return None


def guide_from_latent(
    model: ModelSpec,
    meas: Optional[Measurement],
    latent,
    cfg: GuidanceConfig,
    rng: Optional[np.random.Generator] = None,
    noise: Optional[np.ndarray] = None,
) -> Trajectory:
    """Guided sampling from ``latent`` over [0, T] with the configured sampler."""
    cfg.check_compatible(model, meas)
    latent = _check_input(model, latent)
    diagnostics = TrajectoryDiagnostics(model, meas, cfg.T, TimeDirection.REVERSE_GENERATION)
    if cfg.sampler is SamplerKind.SDE:
        return integrate_sde(guided_drift(model, meas, cfg), latent, (0.0, cfg.T), cfg, rng=rng, noise=noise, diagnostics=diagnostics)
    return integrate_ode(
        guided_velocity(model, meas, cfg), latent, (0.0, cfg.T), cfg, diagnostics=diagnostics, window=refine_window(meas)
    )


def summarize(
    model: ModelSpec,
    meas: Measurement,
    x: np.ndarray,
    latent_traj: Trajectory,
    guided: Trajectory,
    modes: Optional[np.ndarray] = None,
) -> ReguidanceResult:
    output = guided.final_state
    _, dist = nearest_mode(model, output, modes if modes is not None else reference_modes(model, meas))
    return ReguidanceResult(
        latent=latent_traj.final_state,
        output=output,
        latent_trajectory=latent_traj,
        guided_trajectory=guided,
        final_reward=residual_and_reward(meas, output).reward,
        final_distance_to_projection=float(np.linalg.norm(project_to_consistent(meas, x) - output)),
        nearest_mode_distance=dist,
    )


def run_reguidance(
    model: ModelSpec,
    meas: Measurement,
    x,
    cfg: GuidanceConfig,
    rng: Optional[np.random.Generator] = None,
    latent_traj: Optional[Trajectory] = None,
) -> ReguidanceResult:
    """
    Extract the latent of ``x`` and run guided sampling from it.

    ``latent_traj`` lets callers reuse an inversion across several guidance
    settings (it only depends on the model, x and T). The SDE sampler draws
    its increments from ``rng``, or from a stream seeded with cfg.seed.
    """
    x = _check_input(model, x)
    cfg.check_compatible(model, meas)
    if latent_traj is None:
        latent_traj = latent_trajectory(model, x, cfg)
    guided = guide_from_latent(model, meas, latent_traj.final_state, cfg, rng=rng)
    result = summarize(model, meas, x, latent_traj, guided)
    logger.debug(
        "reguidance %s/%s: reward %.3e, |Pi x - out| %.3e",
        cfg.sampler.value,
        cfg.guidance.value,
        result.final_reward,
        result.final_distance_to_projection,
    )
    return result


def perturb_latent(latent, std: float, rng: np.random.Generator) -> np.ndarray:
    """latent + std * xi with xi standard normal."""
    if not std >= 0:
        raise ValueError(f"perturbation std must be >= 0, got {std}")
    latent = np.asarray(latent, dtype=float)
    return latent + std * rng.standard_normal(latent.shape)


def random_latent_dps(
    model: ModelSpec, meas: Measurement, cfg: GuidanceConfig, rng: np.random.Generator
) -> Trajectory:
    """Vanilla guided sampling started from a fresh N(0, Id) latent."""
    latent = rng.standard_normal(model.d)
    return guide_from_latent(model, meas, latent, cfg, rng=rng)
