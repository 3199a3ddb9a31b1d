import math

import numpy as np
import pytest

from reglab.core.dynamics import GuidanceConfig, GuidanceKind, SamplerKind, latent_trajectory
from reglab.core.errors import DimensionError, NonFiniteError
from reglab.core.measure import MeasurementKind, make_measurement, residual_and_reward
from reglab.core.models import ModelKind, ModelSpec
from reglab.core.reguidance import (
    guide_from_latent,
    perturb_latent,
    random_latent_dps,
    reference_modes,
    run_reguidance,
)

CUBE = ModelSpec(ModelKind.HYPERCUBE, R=3.0, d=4)
FAST = GuidanceConfig(steps=256)


def _cube_measurement(sigma=0.1):
    return make_measurement(MeasurementKind.INPAINTING, CUBE, [3.0, -3.0, 3.0, 3.0], sigma, indices=(0, 1))


def test_unguided_iso_pipeline_returns_input():
    model = ModelSpec(ModelKind.ISO_GAUSSIAN, d=2)
    meas = make_measurement(MeasurementKind.INPAINTING, model, [1.0, 0.0], 0.5, indices=(0,))
    x = np.array([0.7, -0.3])
    res = run_reguidance(model, meas, x, GuidanceConfig(guidance=GuidanceKind.NONE))
    np.testing.assert_array_equal(res.latent, x)
    np.testing.assert_array_equal(res.output, x)


def test_result_fields_are_consistent():
    meas = _cube_measurement()
    x = np.array([2.5, -1.0, 0.3, 3.4])
    res = run_reguidance(CUBE, meas, x, FAST)
    np.testing.assert_array_equal(res.latent, res.latent_trajectory.final_state)
    np.testing.assert_array_equal(res.guided_trajectory.initial_state, res.latent)
    np.testing.assert_array_equal(res.output, res.guided_trajectory.final_state)
    assert res.guided_trajectory.times[-1] == FAST.T
    assert res.final_reward == pytest.approx(residual_and_reward(meas, res.output).reward)
    projected = x.copy()
    projected[[0, 1]] = meas.y
    assert res.final_distance_to_projection == pytest.approx(np.linalg.norm(projected - res.output))
    assert res.nearest_mode_distance >= 0.0


def test_output_fits_the_measurement():
    meas = _cube_measurement(sigma=0.05)
    x = np.array([2.5, -1.0, 0.3, 3.4])
    res = run_reguidance(CUBE, meas, x, GuidanceConfig())
    assert np.max(np.abs(meas.A @ res.output - meas.y)) <= 0.05


def test_shared_latent_matches_fresh_inversion():
    meas = _cube_measurement()
    x = np.array([1.0, 0.5, -2.0, 0.3])
    lat = latent_trajectory(CUBE, x, FAST)
    a = run_reguidance(CUBE, meas, x, FAST, latent_traj=lat)
    b = run_reguidance(CUBE, meas, x, FAST)
    np.testing.assert_array_equal(a.output, b.output)


def test_ode_pipeline_is_bitwise_deterministic():
    meas = _cube_measurement()
    x = np.array([1.0, 0.5, -2.0, 0.3])
    a = run_reguidance(CUBE, meas, x, FAST)
    b = run_reguidance(CUBE, meas, x, FAST)
    np.testing.assert_array_equal(a.guided_trajectory.states, b.guided_trajectory.states)
    np.testing.assert_array_equal(a.guided_trajectory.times, b.guided_trajectory.times)


def test_sde_sampler_uses_the_given_stream():
    meas = _cube_measurement(sigma=0.3)
    x = np.array([1.0, 0.5, -2.0, 0.3])
    cfg = FAST.with_(sampler=SamplerKind.SDE, sde_steps=1024)
    a = run_reguidance(CUBE, meas, x, cfg, rng=np.random.default_rng(4))
    b = run_reguidance(CUBE, meas, x, cfg, rng=np.random.default_rng(4))
    c = run_reguidance(CUBE, meas, x, cfg, rng=np.random.default_rng(5))
    np.testing.assert_array_equal(a.output, b.output)
    assert not np.array_equal(a.output, c.output)


def test_guide_from_latent_rejects_bad_latents():
    meas = _cube_measurement()
    with pytest.raises(DimensionError):
        guide_from_latent(CUBE, meas, np.zeros(3), FAST)
    with pytest.raises(NonFiniteError):
        guide_from_latent(CUBE, meas, np.array([0.0, math.inf, 0.0, 0.0]), FAST)


def test_perturb_latent():
    latent = np.array([0.1, -0.4, 2.0])
    np.testing.assert_array_equal(perturb_latent(latent, 0.0, np.random.default_rng(0)), latent)
    moved = perturb_latent(latent, 0.3, np.random.default_rng(0))
    assert not np.array_equal(moved, latent)
    with pytest.raises(ValueError):
        perturb_latent(latent, -1.0, np.random.default_rng(0))


def test_random_latent_dps_runs_from_a_fresh_latent():
    meas = _cube_measurement()
    traj = random_latent_dps(CUBE, meas, FAST, np.random.default_rng(9))
    expected_latent = np.random.default_rng(9).standard_normal(4)
    np.testing.assert_array_equal(traj.initial_state, expected_latent)


def test_reference_modes():
    iso = ModelSpec(ModelKind.ISO_GAUSSIAN, d=3)
    np.testing.assert_array_equal(reference_modes(iso, None), np.zeros((1, 3)))
    assert reference_modes(CUBE, _cube_measurement()).shape == (4, 4)
    assert reference_modes(CUBE, None).shape == (16, 4)
    assert reference_modes(ModelSpec(ModelKind.HYPERCUBE, R=1.0, d=25), None) is None


def test_consistent_mode_is_kept():
    meas = _cube_measurement(sigma=0.05)
    mode = np.array([3.0, -3.0, 3.0, 3.0])
    res = run_reguidance(CUBE, meas, mode, GuidanceConfig())
    assert np.linalg.norm(res.output - mode) <= 0.05


def test_guidance_does_not_raise_the_loss():
    meas = _cube_measurement(sigma=0.1)
    for x in ([2.5, -1.0, 0.3, 3.4], [1.0, 0.5, -2.0, 0.3], [-2.0, 2.0, 1.0, -1.0], [3.5, -2.2, -3.1, 0.4]):
        x = np.array(x)
        res = run_reguidance(CUBE, meas, x, FAST)
        assert residual_and_reward(meas, res.output).loss <= residual_and_reward(meas, x).loss
