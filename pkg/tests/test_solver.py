from dataclasses import replace

import numpy as np
import pytest

from iid_errors import EmptyMask, ShapeMismatch, ValidationError
from imagecore import rgb_to_gray
from losses import LossWeights, ScaleBias
from solver import (SolverConfig, baseline_r, baseline_s, decompose, initial_log_shade, objective_gradient,
                    objective_value, prepare_state, project, refit_scale_bias, retinex, shadow_step)
from synth_scene import SynthConfig, synth_scene

FAST = SolverConfig(max_outer=3, max_inner=40)


def interior_state(seed, side=8):
    rng = np.random.default_rng(seed)
    I = rng.uniform(0.05, 1.0, size=(side, side, 3))
    L = rng.uniform(0.1, 0.9, size=(side, side))
    mask = rng.random((side, side)) < 0.5
    mask[0, 0] = True
    state = prepare_state(I, L, mask, SolverConfig(), ScaleBias(0.8, 0.05, 1.2, -0.1))
    u = state.lower + (state.upper - state.lower) * rng.uniform(0.1, 0.9, size=(side, side))
    return state, u


def central_difference(u, state, h=1e-5):
    grad = np.zeros_like(u)
    for idx in np.ndindex(u.shape):
        plus, minus = u.copy(), u.copy()
        plus[idx] += h
        minus[idx] -= h
        grad[idx] = (objective_value(plus, state) - objective_value(minus, state)) / (2 * h)
    return grad


class TestObjective:
    @pytest.mark.parametrize("seed", range(20))
    def test_gradient_matches_finite_differences(self, seed):
        state, u = interior_state(seed)
        analytic = objective_gradient(u, state)
        numeric = central_difference(u, state)
        assert np.linalg.norm(analytic - numeric) <= 1e-4 * np.linalg.norm(numeric)

    def test_constant_image_is_stationary(self):
        I = np.full((6, 6, 3), 0.5)
        L = np.full((6, 6), 0.5)
        state = prepare_state(I, L, np.ones((6, 6)), SolverConfig())
        u = initial_log_shade(I, state, 'constant')
        state = replace(state, sb=refit_scale_bias(u, state))
        np.testing.assert_allclose(objective_gradient(u, state), 0.0, atol=1e-9)

    @pytest.mark.parametrize("seed", range(10))
    def test_refit_never_raises_objective(self, seed):
        state, u = interior_state(seed)
        refit = replace(state, sb=refit_scale_bias(u, state))
        assert objective_value(u, refit) <= objective_value(u, state) + 1e-12

    def test_refit_moves_off_a_poor_start(self):
        rng = np.random.default_rng(5)
        R = rng.uniform(0.2, 0.8, size=(8, 8, 3))
        S = rng.uniform(0.3, 1.0, size=(8, 8))
        L = 2.0 * rgb_to_gray(R) - 0.1
        state = prepare_state(R * S[..., None], L, np.ones((8, 8)), SolverConfig(), ScaleBias(1.0, 0.0, 0.0, 0.5))
        u = np.log(S)
        sb = refit_scale_bias(u, state)
        assert sb.s1 == pytest.approx(0.5, abs=1e-6)
        assert sb.b1 == pytest.approx(0.05, abs=1e-6)
        assert sb.s2 > 0.0
        assert objective_value(u, replace(state, sb=sb)) < 0.2 * objective_value(u, state)

    def test_intensity_init_zeroes_shade_term(self, small_scene):
        state = prepare_state(small_scene.image, rgb_to_gray(small_scene.albedo.data), np.ones(small_scene.shape))
        assert state.sb == ScaleBias()
        u = initial_log_shade(small_scene.image, state, 'intensity')
        np.testing.assert_allclose(np.exp(u), small_scene.shade.data, rtol=1e-9)

    def test_intensity_init_without_intensity_term_is_constant(self, random_image):
        state = prepare_state(random_image, np.full((8, 8), 0.5), np.ones((8, 8)),
                              SolverConfig(weights=LossWeights(lambda7=0.0)))
        u = initial_log_shade(random_image, state, 'intensity')
        np.testing.assert_array_equal(u, initial_log_shade(random_image, state, 'constant'))

    def test_gradient_is_local(self):
        state, u = interior_state(11)
        base = objective_gradient(u, state)
        bumped = u.copy()
        bumped[4, 4] = 0.5 * (state.lower[4, 4] + bumped[4, 4])
        changed = np.argwhere(np.abs(objective_gradient(bumped, state) - base) > 0)
        for y, x in changed:
            assert abs(y - 4) + abs(x - 4) <= 1

    def test_box_keeps_albedo_in_range(self):
        state, u = interior_state(2)
        for candidate in (project(u + 10.0, state), project(u - 10.0, state)):
            albedo = np.exp(state.log_image - candidate[..., None])
            assert albedo.max() <= 1.0 + 1e-12
            assert albedo.min() >= 1e-4 * (1 - 1e-12)

    def test_empty_mask_rejected_unless_intensity_term_off(self, random_image):
        L = np.full((8, 8), 0.5)
        with pytest.raises(EmptyMask):
            prepare_state(random_image, L, np.zeros((8, 8)), SolverConfig())
        no_int = SolverConfig(weights=LossWeights(lambda7=0.0))
        prepare_state(random_image, L, np.zeros((8, 8)), no_int)

    def test_shape_mismatch(self, random_image):
        with pytest.raises(ShapeMismatch):
            prepare_state(random_image, np.zeros((4, 8)), np.ones((4, 8)))

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            SolverConfig(init='random')
        with pytest.raises(ValidationError):
            SolverConfig(optimizer='adam')
        with pytest.raises(ValidationError):
            SolverConfig(max_inner=0)


class TestDecompose:
    def test_reconstructs_the_image(self, small_scene):
        result = decompose(small_scene.image, small_scene.lidar.values, small_scene.lidar.mask, FAST)
        assert result.reconstruction_error(small_scene.image) <= 1e-6
        assert result.albedo.data.min() >= 0.0 and result.albedo.data.max() <= 1.0 + 1e-6
        assert result.shade.data.min() > 0.0

    def test_objective_never_increases(self, small_scene):
        result = decompose(small_scene.image, small_scene.lidar.values, small_scene.lidar.mask, FAST)
        history = result.history
        assert all(b <= a + 1e-12 for a, b in zip(history, history[1:]))
        assert result.objective == history[-1]

    def test_deterministic(self, small_scene):
        first = decompose(small_scene.image, small_scene.lidar.values, small_scene.lidar.mask, FAST)
        second = decompose(small_scene.image, small_scene.lidar.values, small_scene.lidar.mask, FAST)
        assert np.array_equal(first.albedo.data, second.albedo.data)
        assert first.history == second.history

    def test_constant_image(self):
        I = np.full((6, 6, 3), 0.5)
        result = decompose(I, np.full((6, 6), 0.5), np.ones((6, 6)), FAST)
        assert result.objective == pytest.approx(0.0, abs=1e-9)
        assert result.reconstruction_error(I) <= 1e-9

    def test_exact_lidar_recovers_albedo(self):
        scene = synth_scene(5, 48, 48, SynthConfig(n_regions=4, noise_sigma=0.0, lidar_density=1.0))
        truth = rgb_to_gray(scene.albedo.data)
        cfg = SolverConfig(weights=LossWeights(lambda7=200.0), max_outer=3, max_inner=40)
        result = decompose(scene.image, truth, np.ones(scene.shape), cfg)
        lum = rgb_to_gray(result.albedo.data)
        design = np.column_stack([lum.ravel(), np.ones(lum.size)])
        (s, b), *_ = np.linalg.lstsq(design, truth.ravel(), rcond=None)
        assert np.max(np.abs(s * lum + b - truth)) <= 0.02

    def test_cast_shadow_goes_to_shade(self, shadow_scene):
        L = rgb_to_gray(shadow_scene.albedo.data)
        mask = np.ones(shadow_scene.shape)
        reference = rgb_to_gray(shadow_scene.albedo.data)
        steps = {}
        for name, lambda7 in (("with_intensity", 20.0), ("without_intensity", 0.0)):
            cfg = SolverConfig(weights=LossWeights(lambda7=lambda7), max_outer=3, max_inner=40)
            result = decompose(shadow_scene.image, L, mask, cfg)
            steps[name] = shadow_step(rgb_to_gray(result.albedo.data), shadow_scene.shadow_mask,
                                      reference=reference)
        assert steps["with_intensity"] < 0.01
        assert steps["without_intensity"] > 0.05

    def test_intensity_term_off_accepts_empty_mask(self, small_scene):
        cfg = SolverConfig(weights=LossWeights(lambda7=0.0), max_outer=2, max_inner=20)
        result = decompose(small_scene.image, np.zeros(small_scene.shape), np.zeros(small_scene.shape), cfg)
        assert result.reconstruction_error(small_scene.image) <= 1e-6

    def test_lbfgsb_optimizer(self, small_scene):
        cfg = SolverConfig(max_outer=2, max_inner=30, optimizer='lbfgsb')
        result = decompose(small_scene.image, small_scene.lidar.values, small_scene.lidar.mask, cfg)
        assert result.reconstruction_error(small_scene.image) <= 1e-6
        assert result.history[-1] <= result.history[0]

    def test_luminance_init(self, small_scene):
        cfg = SolverConfig(max_outer=2, max_inner=20, init='luminance')
        result = decompose(small_scene.image, small_scene.lidar.values, small_scene.lidar.mask, cfg)
        assert result.reconstruction_error(small_scene.image) <= 1e-6

    def test_empty_mask(self, small_scene):
        with pytest.raises(EmptyMask):
            decompose(small_scene.image, small_scene.lidar.values, np.zeros(small_scene.shape), FAST)


class TestBaselines:
    def test_baseline_r(self):
        I = np.full((2, 2, 3), 0.5)
        result = baseline_r(I)
        assert np.all(result.albedo.data == 1.0)
        np.testing.assert_allclose(result.shade.data, 0.5)

    def test_baseline_s(self, random_image):
        result = baseline_s(random_image)
        assert np.all(result.shade.data == 1.0)
        np.testing.assert_allclose(result.albedo.data, random_image)

    def test_black_image(self):
        result = baseline_r(np.zeros((2, 2, 3)))
        assert np.all(result.shade.data == 0.0)


class TestRetinex:
    def test_constant_image(self):
        result = retinex(np.full((8, 8, 3), 0.5))
        assert np.ptp(result.albedo.data) < 1e-9
        assert np.ptp(result.shade.data) < 1e-9

    def test_step_goes_to_albedo(self):
        I = np.full((16, 16, 3), 0.2)
        I[:, 8:] = 0.6
        result = retinex(I)
        assert np.ptp(result.shade.data) < 1e-5
        albedo_lum = rgb_to_gray(result.albedo.data)
        assert albedo_lum[0, 12] / albedo_lum[0, 2] == pytest.approx(3.0, rel=1e-5)

    def test_ramp_goes_to_shade(self):
        ramp = np.linspace(0.4, 0.6, 32)
        I = np.broadcast_to(ramp[None, :, None], (8, 32, 3)).copy()
        result = retinex(I)
        assert np.ptp(rgb_to_gray(result.albedo.data)) < 1e-6
        assert result.shade.data.max() / result.shade.data.min() == pytest.approx(1.5, rel=1e-6)

    def test_color_edge_goes_to_albedo(self):
        I = np.empty((8, 16, 3))
        I[:, :8] = (0.4, 0.4, 0.4)
        I[:, 8:] = (0.6, 0.4, (0.42 - 0.2126 * 0.6 - 0.7152 * 0.4) / 0.0722)
        plain = retinex(I)
        color = retinex(I, use_color=True)
        assert np.ptp(plain.shade.data) == pytest.approx(0.02, abs=1e-6)
        assert np.ptp(color.shade.data) < 1e-5

    def test_rejects_bad_threshold(self):
        with pytest.raises(ValidationError):
            retinex(np.full((4, 4, 3), 0.5), threshold=0.0)


class TestShadowStep:
    def setup_method(self):
        self.shadow = np.zeros((16, 16), dtype=bool)
        self.shadow[:, :8] = True

    def test_flat_albedo(self):
        assert shadow_step(np.full((16, 16), 0.5), self.shadow) == 0.0

    def test_halved_albedo(self):
        lum = np.where(self.shadow, 0.25, 0.5)
        assert shadow_step(lum, self.shadow) == pytest.approx(0.5)
        assert shadow_step(lum, self.shadow, reference=lum) == pytest.approx(0.0)

    def test_needs_boundary(self):
        with pytest.raises(EmptyMask):
            shadow_step(np.full((4, 4), 0.5), np.zeros((4, 4), dtype=bool))
