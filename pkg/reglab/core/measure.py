"""Linear measurement operators, reconstruction loss / reward, and the consistency projection."""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .errors import DimensionError, NonFiniteError, RankDeficientError
from .models import ModelSpec

logger = logging.getLogger(__name__)

RANK_TOLERANCE = 1e-10
UNIT_TOLERANCE = 1e-12


class MeasurementKind(str, Enum):
    INPAINTING = "inpainting"
    SINGLE_VECTOR = "single_vector"
    GENERAL = "general"


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Measurement:
    """
    Linear observation y = A x with guidance noise scale sigma.

    ``indices`` (0-based) is set for inpainting operators and ``v`` for
    single-vector operators. Arrays are read-only after construction.
    """

    A: np.ndarray
    y: np.ndarray
    sigma: float
    kind: MeasurementKind = MeasurementKind.GENERAL
    indices: Optional[Tuple[int, ...]] = None
    v: Optional[np.ndarray] = None
    _gram_inv: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        A = _frozen(np.atleast_2d(self.A))
        y = _frozen(np.atleast_1d(self.y))
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "kind", MeasurementKind(self.kind))
        m, d = A.shape
        if y.shape != (m,):
            raise DimensionError(f"observation has shape {y.shape}, operator has {m} rows")
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise ValueError(f"measurement sigma must be positive, got {self.sigma}")
        if m > d:
            raise RankDeficientError(f"{m} measurements exceed dimension {d}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(y))):
            raise NonFiniteError("measurement operator or observation has non-finite entries")
        if np.linalg.matrix_rank(A, tol=RANK_TOLERANCE) < m:
            raise RankDeficientError("measurement operator does not have full row rank")
        if self.v is not None:
            object.__setattr__(self, "v", _frozen(self.v))
        if self.indices is not None:
            object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        if self.kind is MeasurementKind.INPAINTING:
            if self.indices is None or not np.array_equal(A, inpainting_operator(self.indices, d)):
                raise ValueError("inpainting rows must be the distinct basis vectors named by indices")
        elif self.kind is MeasurementKind.SINGLE_VECTOR:
            if m != 1 or self.v is None or not np.array_equal(A[0], self.v):
                raise ValueError("single-vector measurement must have A = v^T")
            normalized_vector(self.v, d)
        object.__setattr__(self, "_gram_inv", _frozen(np.linalg.inv(A @ A.T)))

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def d(self) -> int:
        return self.A.shape[1]

    def with_sigma(self, sigma: float) -> "Measurement":
        return Measurement(self.A, self.y, sigma, self.kind, self.indices, self.v)


class RewardBreakdown(NamedTuple):
    residual: np.ndarray
    loss: float
    reward: float


def inpainting_operator(indices: Sequence[int], d: int) -> np.ndarray:
    """Rows are the standard basis vectors e_i for i in ``indices`` (0-based)."""
    indices = [int(i) for i in indices]
    if len(set(indices)) != len(indices):
        raise ValueError(f"inpainting indices must be distinct, got {indices}")
    if any(i < 0 or i >= d for i in indices):
        raise DimensionError(f"inpainting indices {indices} out of range for d={d}")
    A = np.zeros((len(indices), d))
    A[np.arange(len(indices)), indices] = 1.0
    return A


def normalized_vector(v: Sequence[float], d: int) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (d,):
        raise DimensionError(f"measurement vector has shape {v.shape}, expected ({d},)")
    if abs(np.linalg.norm(v) - 1.0) > UNIT_TOLERANCE:
        raise ValueError(f"single-vector measurement must be a unit vector, |v| = {np.linalg.norm(v)!r}")
    return v


def make_measurement(
    kind: MeasurementKind,
    model: ModelSpec,
    source,
    sigma: float,
    indices: Optional[Sequence[int]] = None,
    v: Optional[Sequence[float]] = None,
    matrix=None,
    noise: Optional[float] = None,
    rng: Optional[np.random.Generator] = None,
) -> Measurement:
    """
    Build a measurement whose observation is read off ``source``.

    Args:
        kind: operator family.
        model: supplies the ambient dimension.
        source: the signal being measured, y = A @ source.
        sigma: guidance noise scale.
        indices: 0-based measured coordinates (inpainting).
        v: unit measurement vector (single vector).
        matrix: explicit operator (general).
        noise: optional additive N(0, noise^2) observation noise; needs ``rng``.
    """
    kind = MeasurementKind(kind)
    source = np.asarray(source, dtype=float)
    if source.shape != (model.d,):
        raise DimensionError(f"source has shape {source.shape}, model dimension is {model.d}")

    if kind is MeasurementKind.INPAINTING:
        if indices is None:
            raise ValueError("inpainting measurement needs indices")
        A = inpainting_operator(indices, model.d)
    elif kind is MeasurementKind.SINGLE_VECTOR:
        if v is None:
            raise ValueError("single-vector measurement needs v")
        v = normalized_vector(v, model.d)
        A = v[None, :]
    else:
        if matrix is None:
            raise ValueError("general measurement needs an explicit matrix")
        A = np.atleast_2d(np.asarray(matrix, dtype=float))
        if A.shape[1] != model.d:
            raise DimensionError(f"operator has {A.shape[1]} columns, model dimension is {model.d}")

    y = A @ source
    if noise is not None and noise > 0:
        if rng is None:
            raise ValueError("noisy measurement needs an rng")
        y = y + noise * rng.standard_normal(y.shape)

    return Measurement(A=A, y=y, sigma=sigma, kind=kind, indices=indices, v=v)


def residual_and_reward(meas: Measurement, x) -> RewardBreakdown:
    """Residual y - Ax, reconstruction loss ||y - Ax||^2 and reward -loss / (2 sigma^2)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != meas.d:
        raise DimensionError(f"state has dimension {x.shape[-1]}, measurement acts on {meas.d}")
    residual = meas.y - x @ meas.A.T
    loss = np.sum(residual * residual, axis=-1)
    reward = -loss / (2.0 * meas.sigma ** 2)
    if np.ndim(loss) == 0:
        return RewardBreakdown(residual, float(loss), float(reward))
    return RewardBreakdown(residual, loss, reward)


def project_to_consistent(meas: Measurement, x) -> np.ndarray:
    """
    Orthogonal projection onto {x' : A x' = y}: x + A^T (A A^T)^{-1} (y - A x).

    For inpainting this simply overwrites the measured coordinates with y.
    """
    x = np.array(x, dtype=float)
    if x.shape[-1] != meas.d:
        raise DimensionError(f"state has dimension {x.shape[-1]}, measurement acts on {meas.d}")
    if meas.kind is MeasurementKind.INPAINTING:
        x[..., list(meas.indices)] = meas.y
        return x
    correction = (meas.y - x @ meas.A.T) @ meas._gram_inv.T
    return x + correction @ meas.A
