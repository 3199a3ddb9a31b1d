"""
Velocity fields and integrators.

Generation runs on t in [0, T] with noise level tau = T - t fed to the scores;
latent extraction runs the other way, with the noise level equal to the
integration variable. Deterministic runs use classical RK4 with step-doubling
error control on a (refined) base grid; stochastic runs use fixed-step
Euler-Maruyama with diffusion coefficient sqrt(2).
"""

import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Optional, Tuple

import numpy as np
import pandas as pd

from .errors import (
    ConfigMismatchError,
    DimensionError,
    NonFiniteError,
    NonFiniteStateError,
    StepUnderflowError,
)
from .measure import Measurement, MeasurementKind, residual_and_reward
from .models import (
    ModelKind,
    ModelSpec,
    _denoiser,
    _jacobian_diag,
    _score,
    clamped_tanh,
)

logger = logging.getLogger(__name__)

Field = Callable[[float, np.ndarray], np.ndarray]

SQRT2 = math.sqrt(2.0)
REFINE_RATIO = 0.9
REFINE_FLOOR_FRACTION = 1.0 / 64.0


class SamplerKind(str, Enum):
    ODE = "ode"
    SDE = "sde"


class GuidanceKind(str, Enum):
    NONE = "none"
    DPS = "dps"
    MDPS = "mdps"


class MdpsForm(str, Enum):
    # tanh(R x[1]) and residual on x, as the modified equation is written
    PRINTED = "printed"
    # tanh(R e^{-tau} x[1]) and residual on e^{-tau} x, matching its x' = e^{-tau} x rewrite
    TIME_CONSISTENT = "time_consistent"


class TimeDirection(str, Enum):
    FORWARD_NOISING = "forward"
    REVERSE_GENERATION = "reverse"


def noise_level(t: float, T: float, direction: TimeDirection) -> float:
    """Noise level fed to the scores at integration time ``t``."""
    if direction is TimeDirection.FORWARD_NOISING:
        return t
    return T - t


@dataclass(frozen=True)
class GuidanceConfig:
    """
    Controls for one guided run.

    ``rho`` defaults to 1/sigma^2 of the measurement it is paired with.
    ``steps`` sizes the RK4 base grid; ``sde_steps`` the Euler-Maruyama grid.
    ``rel_tol = inf`` switches the ODE integrator to plain fixed-step RK4.
    """

    rho: Optional[float] = None
    T: float = 10.0
    sampler: SamplerKind = SamplerKind.ODE
    guidance: GuidanceKind = GuidanceKind.DPS
    steps: int = 2048
    rel_tol: float = 1e-8
    min_step: float = 1e-9
    seed: int = 0
    sde_steps: int = 8192
    mdps_form: MdpsForm = MdpsForm.PRINTED
    refine: bool = True

    def __post_init__(self):
        object.__setattr__(self, "sampler", SamplerKind(self.sampler))
        object.__setattr__(self, "guidance", GuidanceKind(self.guidance))
        object.__setattr__(self, "mdps_form", MdpsForm(self.mdps_form))
        if self.rho is not None and not self.rho >= 0:
            raise ValueError(f"guidance rho must be >= 0, got {self.rho}")
        if not (self.T > 0 and math.isfinite(self.T)):
            raise ValueError(f"guidance T must be positive, got {self.T}")
        if self.steps < 1 or self.sde_steps < 1:
            raise ValueError("guidance steps and sde_steps must be positive")
        if not self.rel_tol > 0:
            raise ValueError(f"guidance rel_tol must be > 0, got {self.rel_tol}")
        if not self.min_step > 0:
            raise ValueError(f"guidance min_step must be > 0, got {self.min_step}")

    def resolve_rho(self, meas: Optional[Measurement]) -> float:
        if self.rho is not None:
            return float(self.rho)
        if meas is None:
            return 0.0
        return 1.0 / meas.sigma ** 2

    def with_(self, **changes) -> "GuidanceConfig":
        return replace(self, **changes)

    def check_compatible(self, model: ModelSpec, meas: Optional[Measurement]) -> None:
        if self.guidance is GuidanceKind.MDPS:
            if model.kind is not ModelKind.BIMODAL:
                raise ConfigMismatchError("MDPS guidance requires the bimodal model")
            if meas is None or meas.kind is not MeasurementKind.SINGLE_VECTOR:
                raise ConfigMismatchError("MDPS guidance requires a single-vector measurement")
        if self.guidance is not GuidanceKind.NONE and meas is None:
            raise ConfigMismatchError(f"{self.guidance.value} guidance needs a measurement")
        if meas is not None and meas.d != model.d:
            raise DimensionError(f"measurement acts on dimension {meas.d}, model has {model.d}")


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Accepted integration points with per-step diagnostics (NaN where not applicable)."""

    times: np.ndarray
    states: np.ndarray
    reward: np.ndarray
    tanh_diag: np.ndarray
    meas_proj: np.ndarray
    direction: TimeDirection = TimeDirection.REVERSE_GENERATION

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    @property
    def initial_state(self) -> np.ndarray:
        return self.states[0]

    def __len__(self) -> int:
        return len(self.times)

    def to_frame(self) -> pd.DataFrame:
        """One row per accepted step: t, x_0..x_{d-1}, reward, tanh_diag, meas_proj."""
        if self.states.ndim != 2:
            raise DimensionError("only single-trajectory runs can be tabulated")
        d = self.states.shape[1]
        frame = pd.DataFrame(self.states, columns=[f"x_{i}" for i in range(d)])
        frame.insert(0, "t", self.times)
        frame["reward"] = self.reward
        frame["tanh_diag"] = self.tanh_diag
        frame["meas_proj"] = self.meas_proj
        return frame


class TrajectoryDiagnostics:
    """
    Computes the per-step diagnostics recorded along a trajectory.

    tanh_diag is tanh(R e^{-tau} x[0]) for the bimodal model and the entrywise
    minimum of tanh(R e^{-tau} x) for the hypercube; meas_proj is <x, v> for
    single-vector measurements.
    """

    def __init__(self, model: ModelSpec, meas: Optional[Measurement], T: float, direction: TimeDirection):
        self.model = model
        self.meas = meas
        self.T = T
        self.direction = direction

    def __call__(self, t: float, x: np.ndarray) -> Tuple[float, float, float]:
        if x.ndim != 1:
            return math.nan, math.nan, math.nan
        reward = math.nan
        meas_proj = math.nan
        if self.meas is not None:
            reward = residual_and_reward(self.meas, x).reward
            if self.meas.kind is MeasurementKind.SINGLE_VECTOR:
                meas_proj = float(x @ self.meas.v)
        tanh_diag = math.nan
        if self.model.kind is not ModelKind.ISO_GAUSSIAN:
            m = self.model.R * math.exp(-noise_level(t, self.T, self.direction))
            if self.model.kind is ModelKind.BIMODAL:
                tanh_diag = float(clamped_tanh(m * x[0]))
            else:
                tanh_diag = float(np.min(clamped_tanh(m * x)))
        return reward, tanh_diag, meas_proj


def _check_state(model: ModelSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 or x.shape[-1] != model.d:
        raise DimensionError(f"state has shape {x.shape}, model dimension is {model.d}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("state contains non-finite entries")
    return x


def _check_time(t: float, T: float) -> float:
    if not (0.0 <= t <= T):
        raise ValueError(f"time {t} outside [0, {T}]")
    return T - t


# Velocity fields

def uncond_reverse_velocity(model: ModelSpec, x, t: float, T: float) -> np.ndarray:
    """Generation-direction probability flow drift x + grad ln q_{T-t}(x)."""
    x = _check_state(model, x)
    return x + _score(model, x, _check_time(t, T))


def _dps_term(model: ModelSpec, meas: Measurement, rho: float, x: np.ndarray, tau: float) -> np.ndarray:
    mu = _denoiser(model, x, tau)
    residual = meas.y - mu @ meas.A.T
    # grad_x r(mu(x)) = J^T A^T (y - A mu); every in-scope Jacobian is diagonal
    return rho * _jacobian_diag(model, x, tau) * (residual @ meas.A)


def dps_guidance_velocity(model: ModelSpec, meas: Measurement, rho: float, x, t: float, T: float) -> np.ndarray:
    """
    DPS guidance rho * grad_mu(x)^T A^T (y - A mu_{T-t}(x)).

    With rho = 1/sigma^2 this is exactly grad_x r(mu_{T-t}(x)) for the reward
    r = -||y - Ax||^2 / (2 sigma^2): it is ascent on the reward of the denoised
    point. As T - t -> 0 it tends to rho A^T (y - Ax).
    """
    x = _check_state(model, x)
    if meas.d != model.d:
        raise DimensionError(f"measurement acts on dimension {meas.d}, model has {model.d}")
    if not rho >= 0:
        raise ValueError(f"rho must be >= 0, got {rho}")
    return _dps_term(model, meas, rho, x, _check_time(t, T))


def _mdps_term(
    model: ModelSpec, meas: Measurement, rho: float, x: np.ndarray, tau: float, form: MdpsForm
) -> np.ndarray:
    decay = math.exp(-tau)
    R = model.R
    if form is MdpsForm.PRINTED:
        th = clamped_tanh(R * x[..., 0])
        denoised = x.copy()
    else:
        th = clamped_tanh(R * decay * x[..., 0])
        denoised = decay * x
    denoised[..., 0] += (1.0 - decay * decay) * R * th
    v = meas.v
    residual = meas.y[0] - denoised @ v
    out = (rho * decay) * residual[..., None] * v
    out[..., 0] += R * decay * th
    return out


def mdps_velocity(
    meas: Measurement,
    model: ModelSpec,
    x,
    t: float,
    T: float,
    form: MdpsForm = MdpsForm.PRINTED,
    rho: Optional[float] = None,
) -> np.ndarray:
    """
    Full velocity of the modified guided ODE on the bimodal model.

    R e^{-tau} tanh(R x[1]) e_1 + rho e^{-tau} v (y - <v, x + (1 - e^{-2tau}) R tanh(R x[1]) e_1>)
    with tau = T - t and rho = 1/sigma^2 by default. The residual is written
    against y, which equals v^T (R e_1) when y is read off the mode. The
    ``TIME_CONSISTENT`` form evaluates tanh at R e^{-tau} x[1] and the
    residual at e^{-tau} x instead; both agree at t = T.
    """
    if model.kind is not ModelKind.BIMODAL:
        raise ConfigMismatchError("mdps_velocity requires the bimodal model")
    if meas.kind is not MeasurementKind.SINGLE_VECTOR:
        raise ConfigMismatchError("mdps_velocity requires a single-vector measurement")
    x = _check_state(model, x)
    rho = 1.0 / meas.sigma ** 2 if rho is None else rho
    return _mdps_term(model, meas, rho, x, _check_time(t, T), MdpsForm(form))


def posterior_guidance_velocity(model: ModelSpec, meas: Measurement, x, t: float, T: float) -> np.ndarray:
    """
    Exact conditional score grad ln q_{T-t}(y | x) for the standard normal model.

    e^{-tau} A^T (y - e^{-tau} A x) / (sigma^2 + 1 - e^{-2tau}), valid for
    operators with orthonormal rows (inpainting, single vector).
    """
    if model.kind is not ModelKind.ISO_GAUSSIAN:
        raise ConfigMismatchError("exact posterior guidance is only available for the iso model")
    if not np.allclose(meas.A @ meas.A.T, np.eye(meas.m), atol=1e-12):
        raise ConfigMismatchError("exact posterior guidance needs an operator with orthonormal rows")
    x = _check_state(model, x)
    return _posterior_term(meas, x, _check_time(t, T))


def _posterior_term(meas: Measurement, x: np.ndarray, tau: float) -> np.ndarray:
    decay = math.exp(-tau)
    scale = decay / (meas.sigma ** 2 + 1.0 - decay * decay)
    return scale * ((meas.y - decay * (x @ meas.A.T)) @ meas.A)


def guidance_term(model: ModelSpec, meas: Optional[Measurement], cfg: GuidanceConfig) -> Optional[Field]:
    """Guidance velocity as a function of generation time, or None when unguided."""
    cfg.check_compatible(model, meas)
    if cfg.guidance is GuidanceKind.NONE:
        return None
    rho = cfg.resolve_rho(meas)
    T = cfg.T
    if cfg.guidance is GuidanceKind.MDPS:
        form = cfg.mdps_form

        def mdps(t, x):
            # the modified field already includes the unconditional part
            return _mdps_term(model, meas, rho, x, T - t, form) - (x + _score(model, x, T - t))

        return mdps

    def dps(t, x):
        return _dps_term(model, meas, rho, x, T - t)

    return dps


def guided_velocity(model: ModelSpec, meas: Optional[Measurement], cfg: GuidanceConfig) -> Field:
    """ODE field x + score + guidance in generation time."""
    T = cfg.T
    if cfg.guidance is GuidanceKind.MDPS:
        cfg.check_compatible(model, meas)
        rho = cfg.resolve_rho(meas)
        form = cfg.mdps_form
        return lambda t, x: _mdps_term(model, meas, rho, x, T - t, form)

    guide = guidance_term(model, meas, cfg)
    if guide is None:
        return lambda t, x: x + _score(model, x, T - t)
    return lambda t, x: x + _score(model, x, T - t) + guide(t, x)


def guided_drift(model: ModelSpec, meas: Optional[Measurement], cfg: GuidanceConfig) -> Field:
    """Reverse-SDE drift x + 2 score + 2 guidance in generation time (diffusion sqrt 2)."""
    T = cfg.T
    guide = guidance_term(model, meas, cfg)
    if guide is None:
        return lambda t, x: x + 2.0 * _score(model, x, T - t)
    return lambda t, x: x + 2.0 * _score(model, x, T - t) + 2.0 * guide(t, x)


def posterior_drift(model: ModelSpec, meas: Measurement, T: float) -> Field:
    """Correct conditional reverse-SDE drift for the iso model (control arm for DPS bias)."""
    if model.kind is not ModelKind.ISO_GAUSSIAN:
        raise ConfigMismatchError("exact posterior drift is only available for the iso model")
    return lambda t, x: x + 2.0 * _score(model, x, T - t) + 2.0 * _posterior_term(meas, x, T - t)


def refine_window(meas: Optional[Measurement]) -> Optional[float]:
    """Length of the stiff final segment, 2 ln(1/sigma), or None when there is no stiffness."""
    if meas is None or meas.sigma >= 1.0:
        return None
    return 2.0 * math.log(1.0 / meas.sigma)


# Integrators

def build_time_grid(
    t0: float,
    t1: float,
    steps: int,
    window: Optional[float] = None,
    ratio: float = REFINE_RATIO,
) -> np.ndarray:
    """
    Base grid for the RK4 integrator.

    Uniform with spacing (t1 - t0)/steps; inside the final ``window`` the
    spacing is additionally capped at (1 - ratio) times the remaining time so
    that it shrinks geometrically towards t1, down to 1/64 of the base spacing.
    """
    h = (t1 - t0) / steps
    if window is None or window <= 0:
        return np.linspace(t0, t1, steps + 1)
    start = max(t0, t1 - window)
    n_uniform = int(math.ceil((start - t0) / h - 1e-9)) if start > t0 else 0
    points = list(np.linspace(t0, start, n_uniform + 1)) if n_uniform > 0 else [t0]
    floor = h * REFINE_FLOOR_FRACTION
    t = points[-1]
    while t1 - t > 1e-12 * max(1.0, abs(t1)):
        remaining = t1 - t
        spacing = max(min(h, (1.0 - ratio) * remaining), floor)
        t = t1 if spacing >= remaining else t + spacing
        points.append(t)
    points[-1] = t1
    return np.asarray(points)


def _rk4_step(f: Field, t: float, x: np.ndarray, h: float, k1: np.ndarray) -> np.ndarray:
    half = 0.5 * h
    k2 = f(t + half, x + half * k1)
    k3 = f(t + half, x + half * k2)
    k4 = f(t + h, x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _local_gain(f: Field, t: float, x: np.ndarray) -> float:
    """Spectral-norm estimate of the field Jacobian by forward differences."""
    flat = x.reshape(-1)
    base = f(t, x).reshape(-1)
    jac = np.empty((base.size, flat.size))
    for i in range(flat.size):
        eps = 1e-6 * (1.0 + abs(flat[i]))
        bumped = flat.copy()
        bumped[i] += eps
        jac[:, i] = (f(t, bumped.reshape(x.shape)).reshape(-1) - base) / eps
    if not np.all(np.isfinite(jac)):
        return math.inf
    return float(np.linalg.norm(jac, 2))


class _Recorder:
    def __init__(self, diagnostics: Optional[TrajectoryDiagnostics]):
        self.diagnostics = diagnostics
        self.times = []
        self.states = []
        self.diags = []

    def record(self, t: float, x: np.ndarray) -> None:
        self.times.append(t)
        self.states.append(x.copy())
        self.diags.append(self.diagnostics(t, x) if self.diagnostics is not None else (math.nan,) * 3)

    def build(self, direction: TimeDirection) -> Trajectory:
        diags = np.asarray(self.diags, dtype=float).reshape(-1, 3)
        return Trajectory(
            times=np.asarray(self.times),
            states=np.asarray(self.states),
            reward=diags[:, 0],
            tanh_diag=diags[:, 1],
            meas_proj=diags[:, 2],
            direction=direction,
        )


def integrate_ode(
    f: Field,
    x0,
    t_span: Tuple[float, float],
    cfg: GuidanceConfig,
    diagnostics: Optional[TrajectoryDiagnostics] = None,
    window: Optional[float] = None,
    direction: TimeDirection = TimeDirection.REVERSE_GENERATION,
) -> Trajectory:
    """
    Classical RK4 with step-doubling error control.

    Each base-grid interval is covered by steps that are accepted when one
    full step and two half steps agree to rel_tol * (1 + |x|) in max-norm;
    otherwise the step is halved (down to cfg.min_step). After an acceptance
    the next attempt doubles the step again, capped by the grid interval.
    The two-half-step result is kept. With rel_tol = inf plain RK4 runs on
    the base grid.

    Raises:
        NonFiniteStateError: the field or state became non-finite.
        StepUnderflowError: the controller needed a step below cfg.min_step.
    """
    t0, t1 = float(t_span[0]), float(t_span[1])
    if not t1 > t0:
        raise ValueError(f"t_span must be increasing, got {t_span}")
    x = np.array(x0, dtype=float)
    if not np.all(np.isfinite(x)):
        raise NonFiniteStateError(t0)

    grid = build_time_grid(t0, t1, cfg.steps, window if cfg.refine else None)
    recorder = _Recorder(diagnostics)
    recorder.record(t0, x)
    adaptive = math.isfinite(cfg.rel_tol)
    rejected = 0

    h = grid[1] - grid[0]
    for a, b in zip(grid[:-1], grid[1:]):
        t = a
        while t < b:
            remaining = b - t
            if not adaptive or h >= remaining * (1.0 - 1e-12):
                h = remaining
            k1 = f(t, x)
            if not np.all(np.isfinite(k1)):
                raise NonFiniteStateError(t)
            if not adaptive:
                x = _rk4_step(f, t, x, h, k1)
                if not np.all(np.isfinite(x)):
                    raise NonFiniteStateError(t + h)
                t = b
                recorder.record(t, x)
                continue

            full = _rk4_step(f, t, x, h, k1)
            half = _rk4_step(f, t, x, 0.5 * h, k1)
            two_halves = _rk4_step(f, t + 0.5 * h, half, 0.5 * h, f(t + 0.5 * h, half))
            err = np.max(np.abs(full - two_halves))
            scale = 1.0 + np.max(np.abs(x))
            if err <= cfg.rel_tol * scale:
                x = two_halves
                t = b if h == remaining else t + h
                recorder.record(t, x)
                h = 2.0 * h
            else:
                rejected += 1
                h = 0.5 * h
                if h < cfg.min_step:
                    raise StepUnderflowError(t, h, _local_gain(f, t, x))

    logger.debug("RK4 accepted %d steps (%d rejected) on [%g, %g]", len(recorder.times) - 1, rejected, t0, t1)
    return recorder.build(direction)


def integrate_sde(
    drift: Field,
    x0,
    t_span: Tuple[float, float],
    cfg: GuidanceConfig,
    rng: Optional[np.random.Generator] = None,
    noise: Optional[np.ndarray] = None,
    diffusion: float = SQRT2,
    diagnostics: Optional[TrajectoryDiagnostics] = None,
    record: bool = True,
) -> Trajectory:
    """
    Euler-Maruyama with cfg.sde_steps uniform steps:
    x <- x + drift(t, x) dt + diffusion sqrt(dt) xi.

    The standard normal increments are drawn in one ``standard_normal((N,) + x0.shape)``
    call from ``rng`` (a fresh stream seeded with cfg.seed when omitted), or
    taken from ``noise`` when given. ``x0`` may carry leading batch axes; with
    ``record=False`` only the endpoints are kept. ``diffusion=0`` turns the
    scheme into explicit Euler (test hook).
    """
    t0, t1 = float(t_span[0]), float(t_span[1])
    if not t1 > t0:
        raise ValueError(f"t_span must be increasing, got {t_span}")
    x = np.array(x0, dtype=float)
    n = cfg.sde_steps
    if noise is None:
        if rng is None:
            rng = np.random.default_rng(cfg.seed)
        noise = rng.standard_normal((n,) + x.shape)
    elif noise.shape != (n,) + x.shape:
        raise DimensionError(f"noise has shape {noise.shape}, expected {(n,) + x.shape}")

    dt = (t1 - t0) / n
    scale = diffusion * math.sqrt(dt)
    recorder = _Recorder(diagnostics)
    recorder.record(t0, x)
    for k in range(n):
        t = t0 + k * dt
        x = x + drift(t, x) * dt + scale * noise[k]
        if not np.all(np.isfinite(x)):
            raise NonFiniteStateError(t + dt)
        if record and k < n - 1:
            recorder.record(t + dt, x)
    recorder.record(t1, x)
    return recorder.build(TimeDirection.REVERSE_GENERATION)


# Latent extraction and unconditional generation

def latent_trajectory(model: ModelSpec, x, cfg: GuidanceConfig) -> Trajectory:
    """
    Run the unconditional probability flow ODE in reverse:
    dx/dtau = -(x + grad ln q_tau(x)), tau from 0 to T, starting at x.
    """
    x = _check_state(model, x)
    field_ = (lambda tau, z: -(z + _score(model, z, tau)))
    diagnostics = TrajectoryDiagnostics(model, None, cfg.T, TimeDirection.FORWARD_NOISING)
    return integrate_ode(field_, x, (0.0, cfg.T), cfg, diagnostics=diagnostics, direction=TimeDirection.FORWARD_NOISING)


def extract_latent(model: ModelSpec, x, T: float, cfg: GuidanceConfig) -> np.ndarray:
    """Latent x*_T of ``x``: the endpoint of :func:`latent_trajectory` over horizon ``T``."""
    if T != cfg.T:
        cfg = cfg.with_(T=T)
    return latent_trajectory(model, x, cfg).final_state


def unconditional_flow(model: ModelSpec, latent, cfg: GuidanceConfig) -> Trajectory:
    """Forward (generation-direction) probability flow ODE from ``latent`` over [0, T]."""
    latent = _check_state(model, latent)
    T = cfg.T
    diagnostics = TrajectoryDiagnostics(model, None, T, TimeDirection.REVERSE_GENERATION)
    return integrate_ode(lambda t, z: z + _score(model, z, T - t), latent, (0.0, T), cfg, diagnostics=diagnostics)
