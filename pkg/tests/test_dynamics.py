import math

import numpy as np
import pytest

from reglab.core.dynamics import (
    GuidanceConfig,
    GuidanceKind,
    MdpsForm,
    SamplerKind,
    TimeDirection,
    build_time_grid,
    dps_guidance_velocity,
    extract_latent,
    guided_drift,
    guided_velocity,
    integrate_ode,
    integrate_sde,
    latent_trajectory,
    mdps_velocity,
    noise_level,
    posterior_guidance_velocity,
    refine_window,
    uncond_reverse_velocity,
    unconditional_flow,
)
from reglab.core.errors import ConfigMismatchError, NonFiniteStateError, StepUnderflowError
from reglab.core.measure import MeasurementKind, make_measurement, residual_and_reward
from reglab.core.models import ModelKind, ModelSpec, denoiser
from reglab.core.reguidance import guide_from_latent

ISO = ModelSpec(ModelKind.ISO_GAUSSIAN, d=3)
CUBE = ModelSpec(ModelKind.HYPERCUBE, R=3.0, d=4)
PAIR = ModelSpec(ModelKind.BIMODAL, R=5.0, d=2)
V45 = (math.cos(math.pi / 4), math.sin(math.pi / 4))


def test_noise_level_directions():
    assert noise_level(2.0, 10.0, TimeDirection.REVERSE_GENERATION) == 8.0
    assert noise_level(2.0, 10.0, TimeDirection.FORWARD_NOISING) == 2.0


def test_iso_unconditional_velocity_is_zero():
    x = np.array([0.3, -1.0, 2.0])
    np.testing.assert_array_equal(uncond_reverse_velocity(ISO, x, 4.0, 10.0), np.zeros(3))


def test_hypercube_unconditional_velocity():
    x = np.array([0.5, -0.2, 1.0, 0.0])
    t, T = 9.0, 10.0
    m = 3.0 * math.exp(-(T - t))
    np.testing.assert_allclose(uncond_reverse_velocity(CUBE, x, t, T), m * np.tanh(m * x), atol=1e-14)


def test_velocity_rejects_time_outside_horizon():
    with pytest.raises(ValueError):
        uncond_reverse_velocity(CUBE, np.zeros(4), 11.0, 10.0)


def test_dps_small_noise_limit():
    meas = make_measurement(MeasurementKind.INPAINTING, CUBE, [3.0, -3.0, 3.0, 3.0], 0.1, indices=(0, 1))
    x = np.array([1.0, 0.5, -2.0, 0.3])
    rho = 100.0
    limit = rho * meas.A.T @ (meas.y - meas.A @ x)
    np.testing.assert_allclose(dps_guidance_velocity(CUBE, meas, rho, x, 10.0, 10.0), limit, atol=1e-12)
    np.testing.assert_allclose(dps_guidance_velocity(CUBE, meas, rho, x, 10.0 - 1e-9, 10.0), limit, rtol=1e-6, atol=1e-6)


def test_dps_is_gradient_of_denoised_reward():
    meas = make_measurement(MeasurementKind.INPAINTING, CUBE, [3.0, -3.0, 3.0, 3.0], 0.5, indices=(0, 2))
    x = np.array([0.4, -0.7, 1.2, 0.1])
    t, T, h = 8.5, 10.0, 1e-6

    def reward_of_denoised(z):
        return residual_and_reward(meas, denoiser(CUBE, z, T - t)).reward

    fd = np.array([(reward_of_denoised(x + h * e) - reward_of_denoised(x - h * e)) / (2 * h) for e in np.eye(4)])
    velocity = dps_guidance_velocity(CUBE, meas, 1.0 / meas.sigma ** 2, x, t, T)
    np.testing.assert_allclose(velocity, fd, rtol=1e-5, atol=1e-7)


def test_mdps_velocity_lies_in_span_of_e1_and_v():
    model = ModelSpec(ModelKind.BIMODAL, R=5.0, d=3)
    v = (0.6, 0.0, 0.8)
    meas = make_measurement(MeasurementKind.SINGLE_VECTOR, model, [5.0, 0.0, 0.0], 0.1, v=v)
    x = np.array([1.0, -2.0, 0.5])
    for form in MdpsForm:
        out = mdps_velocity(meas, model, x, 3.0, 10.0, form=form)
        assert out[1] == 0.0


def test_mdps_forms_agree_at_final_time():
    meas = make_measurement(MeasurementKind.SINGLE_VECTOR, PAIR, [5.0, 0.0], 0.05, v=V45)
    x = np.array([2.0, 1.5])
    printed = mdps_velocity(meas, PAIR, x, 10.0, 10.0, form=MdpsForm.PRINTED)
    consistent = mdps_velocity(meas, PAIR, x, 10.0, 10.0, form=MdpsForm.TIME_CONSISTENT)
    np.testing.assert_allclose(printed, consistent, atol=1e-12)


def test_mdps_requires_bimodal_single_vector():
    meas = make_measurement(MeasurementKind.INPAINTING, CUBE, np.full(4, 3.0), 0.1, indices=(0,))
    with pytest.raises(ConfigMismatchError):
        mdps_velocity(meas, CUBE, np.zeros(4), 1.0, 10.0)
    cfg = GuidanceConfig(guidance=GuidanceKind.MDPS)
    with pytest.raises(ConfigMismatchError):
        guided_velocity(CUBE, meas, cfg)


def test_guided_velocity_without_guidance_is_unconditional():
    cfg = GuidanceConfig(guidance=GuidanceKind.NONE)
    field = guided_velocity(CUBE, None, cfg)
    x = np.array([0.5, -0.2, 1.0, 0.0])
    np.testing.assert_array_equal(field(7.0, x), uncond_reverse_velocity(CUBE, x, 7.0, cfg.T))


def test_dps_guidance_needs_measurement():
    with pytest.raises(ConfigMismatchError):
        guided_velocity(CUBE, None, GuidanceConfig())


def test_posterior_guidance_velocity():
    meas = make_measurement(MeasurementKind.INPAINTING, ISO, [2.0, 0.0, 0.0], 1.0, indices=(0,))
    x = np.array([0.5, 1.0, -1.0])
    tau = 1.0
    decay = math.exp(-tau)
    expected = np.array([decay * (2.0 - decay * 0.5) / (1.0 + 1.0 - decay ** 2), 0.0, 0.0])
    np.testing.assert_allclose(posterior_guidance_velocity(ISO, meas, x, 9.0, 10.0), expected, atol=1e-14)
    with pytest.raises(ConfigMismatchError):
        posterior_guidance_velocity(CUBE, meas, np.zeros(4), 9.0, 10.0)


def test_refine_window():
    meas = make_measurement(MeasurementKind.INPAINTING, CUBE, np.full(4, 3.0), 0.05, indices=(0,))
    assert refine_window(meas) == pytest.approx(2.0 * math.log(20.0))
    assert refine_window(meas.with_sigma(1.0)) is None
    assert refine_window(None) is None


def test_build_time_grid_uniform():
    np.testing.assert_allclose(build_time_grid(0.0, 10.0, 8), np.linspace(0.0, 10.0, 9))


def test_build_time_grid_refines_final_window():
    grid = build_time_grid(0.0, 10.0, 20, window=2.0)
    h = 0.5
    spacing = np.diff(grid)
    assert grid[0] == 0.0 and grid[-1] == 10.0
    assert np.all(spacing > 0)
    assert np.all(spacing <= h * (1 + 1e-12))
    assert len(grid) > 21
    # geometric shrinkage toward the end, bounded below by h/64 (except the closing step)
    assert spacing[-2] < spacing[len(spacing) // 2]
    assert np.all(spacing[:-1] >= h / 64 * (1 - 1e-12))


def test_rk4_order_on_exponential_decay():
    def err(steps):
        cfg = GuidanceConfig(T=1.0, steps=steps, rel_tol=math.inf, refine=False)
        traj = integrate_ode(lambda t, x: -x, np.array([1.0]), (0.0, 1.0), cfg)
        return abs(traj.final_state[0] - math.exp(-1.0))

    ratio = err(10) / err(20)
    assert 16 * 0.8 <= ratio <= 16 * 1.2


def test_adaptive_rk4_is_accurate():
    cfg = GuidanceConfig(T=1.0, steps=4)
    traj = integrate_ode(lambda t, x: -x, np.array([1.0, 2.0]), (0.0, 1.0), cfg)
    np.testing.assert_allclose(traj.final_state, np.array([1.0, 2.0]) * math.exp(-1.0), atol=1e-7)
    assert traj.times[0] == 0.0 and traj.times[-1] == 1.0
    assert np.all(np.diff(traj.times) > 0)


def test_step_underflow_reports_gain():
    cfg = GuidanceConfig(T=1.0, steps=4, rel_tol=1e-8, min_step=1e-9)
    with pytest.raises(StepUnderflowError) as info:
        integrate_ode(lambda t, x: -1e12 * x, np.array([1.0]), (0.0, 1.0), cfg)
    assert info.value.gain > 1e11
    assert info.value.step < 1e-9


def test_non_finite_field_is_reported():
    cfg = GuidanceConfig(T=1.0, steps=4)
    with pytest.raises(NonFiniteStateError):
        integrate_ode(lambda t, x: np.full_like(x, np.nan), np.array([1.0]), (0.0, 1.0), cfg)


def test_sde_without_drift_or_diffusion_is_constant():
    cfg = GuidanceConfig(T=1.0, sde_steps=64)
    x0 = np.array([1.0, -2.0])
    traj = integrate_sde(lambda t, x: np.zeros_like(x), x0, (0.0, 1.0), cfg, diffusion=0.0)
    np.testing.assert_array_equal(traj.final_state, x0)
    assert len(traj) == 65


def test_sde_is_reproducible_and_batches_consistently():
    cfg = GuidanceConfig(T=2.0, sde_steps=128, sampler=SamplerKind.SDE, guidance=GuidanceKind.NONE)
    drift = guided_drift(ISO, None, cfg)
    x0 = np.array([0.5, -0.5, 1.0])
    a = integrate_sde(drift, x0, (0.0, 2.0), cfg, rng=np.random.default_rng(5))
    b = integrate_sde(drift, x0, (0.0, 2.0), cfg, rng=np.random.default_rng(5))
    np.testing.assert_array_equal(a.states, b.states)

    rngs = [np.random.default_rng(k) for k in (1, 2)]
    noise = np.stack([r.standard_normal((128, 3)) for r in rngs], axis=1)
    batched = integrate_sde(drift, np.tile(x0, (2, 1)), (0.0, 2.0), cfg, noise=noise, record=False)
    single = integrate_sde(drift, x0, (0.0, 2.0), cfg, rng=np.random.default_rng(2))
    np.testing.assert_array_equal(batched.final_state[1], single.final_state)
    assert len(batched) == 2


def test_iso_latent_equals_input():
    x = np.array([0.3, -1.2, 2.5])
    np.testing.assert_array_equal(extract_latent(ISO, x, 10.0, GuidanceConfig()), x)


def test_bimodal_latent_keeps_second_coordinate_and_sign():
    x = np.array([2.5, 1.5])
    traj = latent_trajectory(PAIR, x, GuidanceConfig())
    assert traj.direction is TimeDirection.FORWARD_NOISING
    assert traj.final_state[1] == x[1]
    assert np.sign(traj.final_state[0]) == np.sign(x[0])
    assert np.all(traj.states[:, 0] > 0)


def test_extract_then_regenerate_roundtrip():
    cfg = GuidanceConfig()
    x = np.array([3.2, -2.1, 0.4, -3.9])
    latent = extract_latent(CUBE, x, cfg.T, cfg)
    back = unconditional_flow(CUBE, latent, cfg).final_state
    assert np.linalg.norm(back - x) / np.linalg.norm(x) <= 1e-4


def test_trajectory_frame_columns():
    meas = make_measurement(MeasurementKind.SINGLE_VECTOR, PAIR, [5.0, 0.0], 0.5, v=V45)
    cfg = GuidanceConfig(guidance=GuidanceKind.MDPS, steps=512, rel_tol=math.inf, refine=False)

    traj = guide_from_latent(PAIR, meas, np.array([0.5, 0.2]), cfg)
    frame = traj.to_frame()
    assert list(frame.columns) == ["t", "x_0", "x_1", "reward", "tanh_diag", "meas_proj"]
    assert len(frame) == 513
    assert frame["meas_proj"].notna().all()
    assert frame["tanh_diag"].between(-1, 1).all()


def test_ou_sde_reaches_unit_variance():
    cfg = GuidanceConfig(T=5.0, sde_steps=500)
    x0 = np.zeros((10_000, 1))
    traj = integrate_sde(lambda t, x: -x, x0, (0.0, 5.0), cfg, rng=np.random.default_rng(0), record=False)
    final = traj.final_state[:, 0]
    assert abs(final.mean()) <= 0.05
    assert final.var() == pytest.approx(1.0, abs=0.06)
