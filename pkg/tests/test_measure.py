import math

import numpy as np
import pytest

from reglab.core.errors import DimensionError, RankDeficientError
from reglab.core.measure import (
    Measurement,
    MeasurementKind,
    inpainting_operator,
    make_measurement,
    project_to_consistent,
    residual_and_reward,
)
from reglab.core.models import ModelKind, ModelSpec

CUBE = ModelSpec(ModelKind.HYPERCUBE, R=3.0, d=4)


def test_inpainting_operator_rows():
    A = inpainting_operator((2, 0), 4)
    np.testing.assert_array_equal(A, [[0, 0, 1, 0], [1, 0, 0, 0]])
    with pytest.raises(ValueError):
        inpainting_operator((1, 1), 4)
    with pytest.raises(DimensionError):
        inpainting_operator((4,), 4)


def test_make_measurement_reads_source():
    meas = make_measurement(MeasurementKind.INPAINTING, CUBE, [3.0, -3.0, 3.0, 3.0], 0.1, indices=(1, 3))
    np.testing.assert_array_equal(meas.y, [-3.0, 3.0])
    assert (meas.m, meas.d) == (2, 4)
    assert meas.indices == (1, 3)


def test_measurement_arrays_are_read_only():
    meas = make_measurement(MeasurementKind.INPAINTING, CUBE, np.ones(4), 0.1, indices=(0,))
    with pytest.raises(ValueError):
        meas.y[0] = 5.0
    with pytest.raises(ValueError):
        meas.A[0, 0] = 2.0


def test_noisy_measurement_needs_rng():
    with pytest.raises(ValueError):
        make_measurement(MeasurementKind.INPAINTING, CUBE, np.ones(4), 0.1, indices=(0,), noise=0.5)
    meas = make_measurement(
        MeasurementKind.INPAINTING, CUBE, np.ones(4), 0.1, indices=(0,), noise=0.5, rng=np.random.default_rng(0)
    )
    assert meas.y[0] != 1.0


def test_single_vector_must_be_unit():
    model = ModelSpec(ModelKind.BIMODAL, R=5.0, d=2)
    with pytest.raises(ValueError):
        make_measurement(MeasurementKind.SINGLE_VECTOR, model, [5.0, 0.0], 0.1, v=(1.0, 1.0))
    meas = make_measurement(MeasurementKind.SINGLE_VECTOR, model, [5.0, 0.0], 0.1, v=(0.6, 0.8))
    assert meas.y[0] == pytest.approx(3.0)


def test_operator_rank_checks():
    model = ModelSpec(ModelKind.HYPERCUBE, R=1.0, d=2)
    with pytest.raises(RankDeficientError):
        make_measurement(MeasurementKind.GENERAL, model, [1.0, 1.0], 0.1, matrix=[[1.0, 0.0], [2.0, 0.0]])
    with pytest.raises(RankDeficientError):
        Measurement(A=np.ones((3, 2)), y=np.zeros(3), sigma=0.1)
    with pytest.raises(ValueError):
        Measurement(A=np.eye(2), y=np.zeros(2), sigma=0.0)


def test_residual_and_reward():
    meas = make_measurement(MeasurementKind.INPAINTING, CUBE, [3.0, 3.0, 3.0, 3.0], 0.5, indices=(0, 1))
    out = residual_and_reward(meas, [1.0, 2.0, 0.0, 0.0])
    np.testing.assert_array_equal(out.residual, [2.0, 1.0])
    assert out.loss == pytest.approx(5.0)
    assert out.reward == pytest.approx(-5.0 / (2 * 0.25))


def test_with_sigma_keeps_operator():
    meas = make_measurement(MeasurementKind.INPAINTING, CUBE, np.ones(4), 0.1, indices=(0, 2))
    other = meas.with_sigma(0.01)
    assert other.sigma == 0.01
    np.testing.assert_array_equal(other.A, meas.A)
    np.testing.assert_array_equal(other.y, meas.y)
    assert other.kind is MeasurementKind.INPAINTING


def test_inpainting_projection_overwrites_measured_coordinates():
    meas = make_measurement(MeasurementKind.INPAINTING, CUBE, [3.0, -3.0, 3.0, -3.0], 0.1, indices=(0, 3))
    x = np.array([0.1, 0.2, 0.3, 0.4])
    np.testing.assert_array_equal(project_to_consistent(meas, x), [3.0, 0.2, 0.3, -3.0])
    # input is not modified
    np.testing.assert_array_equal(x, [0.1, 0.2, 0.3, 0.4])


def test_general_projection_is_orthogonal_and_idempotent():
    model = ModelSpec(ModelKind.ISO_GAUSSIAN, d=3)
    A = np.array([[1.0, 2.0, 0.0], [0.0, 1.0, -1.0]])
    meas = make_measurement(MeasurementKind.GENERAL, model, [1.0, -1.0, 2.0], 0.1, matrix=A)
    x = np.array([0.5, 0.5, 0.5])
    p = project_to_consistent(meas, x)
    np.testing.assert_allclose(A @ p, meas.y, atol=1e-12)
    np.testing.assert_allclose(project_to_consistent(meas, p), p, atol=1e-12)
    # x - p lies in the row space of A
    coeffs, *_ = np.linalg.lstsq(A.T, x - p, rcond=None)
    np.testing.assert_allclose(A.T @ coeffs, x - p, atol=1e-12)


def test_single_vector_projection():
    model = ModelSpec(ModelKind.BIMODAL, R=5.0, d=2)
    v = (math.cos(math.pi / 4), math.sin(math.pi / 4))
    meas = make_measurement(MeasurementKind.SINGLE_VECTOR, model, [5.0, 0.0], 0.05, v=v)
    p = project_to_consistent(meas, [0.0, 0.0])
    assert float(p @ np.asarray(v)) == pytest.approx(meas.y[0], abs=1e-12)
    np.testing.assert_allclose(p, [2.5, 2.5], atol=1e-12)
