"""
Analytic data distributions under the Ornstein-Uhlenbeck noising process.

Three models are supported, all with identity-covariance components so that
the noised marginal q_tau stays a mixture of unit-variance Gaussians whose
means shrink by e^{-tau}:

- ``IsoGaussian``: N(0, Id). Stationary under the OU process.
- ``HypercubeMixture``: uniform mixture over the 2^d points {R, -R}^d. The
  density factorizes over coordinates, so nothing here enumerates modes
  except the explicit oracles.
- ``Bimodal``: uniform mixture over {+R e_1, -R e_1}.

Every function accepts states of shape (..., d) and broadcasts over the
leading axes. ``tau`` is the noise level (time-to-go in the generation
direction).
"""

import itertools
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from .errors import (
    DimensionError,
    EnumerationLimitError,
    NoConsistentModeError,
    NonFiniteError,
)

logger = logging.getLogger(__name__)

# Beyond |arg| > TANH_CLAMP tanh is exactly +-1 and sech^2 underflows in double precision.
TANH_CLAMP = 30.0
MAX_ENUMERATION_DIM = 20
MODE_TOLERANCE = 1e-9
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class ModelKind(str, Enum):
    ISO_GAUSSIAN = "iso"
    HYPERCUBE = "hypercube"
    BIMODAL = "bimodal"


@dataclass(frozen=True)
class ModelSpec:
    kind: ModelKind
    R: float = 1.0
    d: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind(self.kind))
        if not (self.R > 0 and math.isfinite(self.R)):
            raise ValueError(f"model R must be a positive finite number, got {self.R}")
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"model d must be a positive integer, got {self.d}")
        object.__setattr__(self, "d", int(self.d))

    @property
    def n_modes(self) -> int:
        if self.kind is ModelKind.HYPERCUBE:
            return 2 ** self.d
        if self.kind is ModelKind.BIMODAL:
            return 2
        return 1


def _check_state(model: ModelSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 or x.shape[-1] != model.d:
        raise DimensionError(f"state has shape {x.shape}, model dimension is {model.d}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("state contains non-finite entries")
    return x


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if not (tau >= 0.0) or math.isinf(tau):
        raise ValueError(f"noise level tau must be finite and >= 0, got {tau}")
    return tau


def clamped_tanh(arg: np.ndarray) -> np.ndarray:
    return np.tanh(np.clip(arg, -TANH_CLAMP, TANH_CLAMP))


def clamped_sech2(arg: np.ndarray) -> np.ndarray:
    arg = np.asarray(arg, dtype=float)
    inside = np.abs(arg) <= TANH_CLAMP
    safe = np.where(inside, arg, 0.0)
    return np.where(inside, 1.0 / np.cosh(safe) ** 2, 0.0)


def _log_cosh(arg: np.ndarray) -> np.ndarray:
    # ln cosh(a) = logaddexp(a, -a) - ln 2, stable for large |a|
    return np.logaddexp(arg, -arg) - math.log(2.0)


# Unvalidated kernels. The integrators call these in their inner loops.

def _score(model: ModelSpec, x: np.ndarray, tau: float) -> np.ndarray:
    if model.kind is ModelKind.ISO_GAUSSIAN:
        return -x
    m = model.R * math.exp(-tau)
    if model.kind is ModelKind.HYPERCUBE:
        return -x + m * clamped_tanh(m * x)
    out = -x
    out[..., 0] += m * clamped_tanh(m * x[..., 0])
    return out


def _denoiser(model: ModelSpec, x: np.ndarray, tau: float) -> np.ndarray:
    decay = math.exp(-tau)
    if model.kind is ModelKind.ISO_GAUSSIAN:
        return decay * x
    m = model.R * decay
    spread = (1.0 - decay * decay) * model.R
    if model.kind is ModelKind.HYPERCUBE:
        return decay * x + spread * clamped_tanh(m * x)
    out = decay * x
    out[..., 0] += spread * clamped_tanh(m * x[..., 0])
    return out


def _jacobian_diag(model: ModelSpec, x: np.ndarray, tau: float) -> np.ndarray:
    decay = math.exp(-tau)
    diag = np.full(x.shape, decay)
    if model.kind is ModelKind.ISO_GAUSSIAN:
        return diag
    m = model.R * decay
    curvature = (1.0 - decay * decay) * decay * model.R ** 2
    if model.kind is ModelKind.HYPERCUBE:
        return diag + curvature * clamped_sech2(m * x)
    diag[..., 0] += curvature * clamped_sech2(m * x[..., 0])
    return diag


def log_density(model: ModelSpec, x, tau: float):
    """
    Exact log-density ln q_tau(x) of the noised model.

    The additive constant is kept (the result is normalized) for all three
    models, so differences, gradients and absolute values are all meaningful.
    The hypercube mixture is evaluated coordinatewise,
    sum_i [ln cosh(m x_i) - x_i^2/2 - m^2/2] - d/2 ln(2 pi) with m = R e^{-tau},
    which is O(d) instead of O(2^d).
    """
    x = _check_state(model, x)
    tau = _check_tau(tau)
    d = model.d
    base = -0.5 * np.sum(x * x, axis=-1) - d * _HALF_LOG_2PI
    if model.kind is ModelKind.ISO_GAUSSIAN:
        return base
    m = model.R * math.exp(-tau)
    if model.kind is ModelKind.HYPERCUBE:
        return base + np.sum(_log_cosh(m * x), axis=-1) - 0.5 * d * m * m
    return base + _log_cosh(m * x[..., 0]) - 0.5 * m * m


def score(model: ModelSpec, x, tau: float) -> np.ndarray:
    """Score grad ln q_tau(x)."""
    return _score(model, _check_state(model, x), _check_tau(tau))


def denoiser(model: ModelSpec, x, tau: float) -> np.ndarray:
    """
    Posterior mean E[x_0 | x_tau = x].

    Satisfies Tweedie's identity mu = e^tau x + (e^tau - e^-tau) score(x);
    for the mixtures this is e^-tau x + (1 - e^-2tau) R tanh(R e^-tau x),
    applied entrywise (hypercube) or on the first coordinate only (bimodal).
    """
    return _denoiser(model, _check_state(model, x), _check_tau(tau))


def denoiser_jacobian(model: ModelSpec, x, tau: float) -> np.ndarray:
    """Jacobian of the denoiser as a (..., d, d) diagonal matrix."""
    diag = _jacobian_diag(model, _check_state(model, x), _check_tau(tau))
    eye = np.eye(model.d)
    return diag[..., :, None] * eye


def denoiser_jacobian_diag(model: ModelSpec, x, tau: float) -> np.ndarray:
    """Diagonal of the denoiser Jacobian (every in-scope Jacobian is diagonal)."""
    return _jacobian_diag(model, _check_state(model, x), _check_tau(tau))


def sample_prior(model: ModelSpec, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
    """
    Exact sample from q: pick a mode uniformly and add standard normal noise.

    With ``size`` a (size, d) block is returned instead of a single state.
    """
    shape = (model.d,) if size is None else (size, model.d)
    if model.kind is ModelKind.ISO_GAUSSIAN:
        return rng.standard_normal(shape)
    if model.kind is ModelKind.HYPERCUBE:
        signs = 2.0 * rng.integers(0, 2, size=shape) - 1.0
        return model.R * signs + rng.standard_normal(shape)
    lead = shape[:-1]
    signs = 2.0 * rng.integers(0, 2, size=lead) - 1.0
    out = rng.standard_normal(shape)
    out[..., 0] += model.R * signs
    return out


def all_modes(model: ModelSpec) -> np.ndarray:
    """Every mixture mean as an (n_modes, d) array, in lexicographic sign order."""
    if model.kind is ModelKind.ISO_GAUSSIAN:
        return np.zeros((1, model.d))
    if model.kind is ModelKind.BIMODAL:
        modes = np.zeros((2, model.d))
        modes[0, 0] = model.R
        modes[1, 0] = -model.R
        return modes
    if model.d > MAX_ENUMERATION_DIM:
        raise EnumerationLimitError(
            f"refusing to enumerate 2^{model.d} modes (limit d <= {MAX_ENUMERATION_DIM})"
        )
    signs = np.array(list(itertools.product((1.0, -1.0), repeat=model.d)))
    return model.R * signs


def consistent_modes(model: ModelSpec, meas) -> np.ndarray:
    """
    All mixture modes z with A z = y (brute-force posterior-support oracle).

    Inpainting measurements on the hypercube only enumerate the 2^(d-m)
    unmeasured sign patterns; any other combination filters the full mode list.
    """
    from .measure import MeasurementKind

    if model.d > MAX_ENUMERATION_DIM:
        raise EnumerationLimitError(
            f"refusing to enumerate modes for d={model.d} (limit d <= {MAX_ENUMERATION_DIM})"
        )
    if meas.A.shape[1] != model.d:
        raise DimensionError(f"measurement acts on dimension {meas.A.shape[1]}, model has {model.d}")

    if model.kind is ModelKind.HYPERCUBE and meas.kind is MeasurementKind.INPAINTING:
        pinned = np.asarray(meas.y, dtype=float)
        if not np.all(np.abs(np.abs(pinned) - model.R) <= MODE_TOLERANCE):
            raise NoConsistentModeError(f"inpainting observation {pinned} is not in {{+-R}}^m with R={model.R}")
        free = [i for i in range(model.d) if i not in set(meas.indices)]
        patterns = itertools.product((1.0, -1.0), repeat=len(free))
        modes = []
        for pattern in patterns:
            z = np.empty(model.d)
            z[list(meas.indices)] = pinned
            z[free] = model.R * np.asarray(pattern)
            modes.append(z)
        return np.array(modes).reshape(-1, model.d)

    candidates = all_modes(model)
    gap = np.max(np.abs(candidates @ meas.A.T - meas.y), axis=-1)
    hits = candidates[gap <= MODE_TOLERANCE]
    if hits.shape[0] == 0:
        raise NoConsistentModeError("no mixture mode reproduces the observation exactly")
    return hits


def nearest_mode(model: ModelSpec, x, modes: Optional[np.ndarray] = None) -> Tuple[np.ndarray, float]:
    """Closest mode to ``x`` (among ``modes`` when given) and its Euclidean distance."""
    x = _check_state(model, x)
    if modes is None:
        if model.kind is ModelKind.HYPERCUBE:
            # nearest hypercube vertex is the sign pattern of x; no enumeration needed
            z = model.R * np.where(x >= 0.0, 1.0, -1.0)
            return z, float(np.linalg.norm(x - z))
        modes = all_modes(model)
    dist = np.linalg.norm(modes - x, axis=-1)
    k = int(np.argmin(dist))
    return modes[k], float(dist[k])
