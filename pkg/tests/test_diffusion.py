"""
Unit tests for the noise schedule, latent conditioning, the denoising loss and the DDIM sampler.
"""
import math

import numpy as np
import pytest

from hiedit.diffusion import (
    LatentEditor, LatentInjector, NoiseSchedule, condition_inputs, ddim_timesteps, denoise, diffusion_loss,
    forward_noising, guidance_context, sample_edit, timestep_embedding, total_loss,
)
from hiedit.edit_models import GuidanceBundle
from hiedit.errors import NonFiniteLossError, ShapeError
from hiedit.selftest import check_sampler_inversion, composite_cases
from hiedit.tensor import constant, grad_check

N_GRID, D_ENC, D_DIFF, HEADS = 6, 4, 8, 2


@pytest.fixture
def editor():
    return LatentEditor(N_GRID, 5, 3, D_ENC, D_DIFF, HEADS, np.random.default_rng(0), np.random.default_rng(1))


@pytest.fixture
def bundle():
    rng = np.random.default_rng(2)
    t = lambda *shape: constant(rng.normal(size=shape))
    return GuidanceBundle(v=t(3, 12), v_hat=t(4, D_DIFF), r_bar_vis=t(5, D_DIFF), e_bar_vis=t(3, D_DIFF),
                          r_bar_txt=t(3, D_DIFF), e_bar_txt=t(3, D_DIFF))


class NoisePredictor:
    """Stand-in editor: conditioning passes z_t through, prediction comes from ``predict``."""

    def __init__(self, predict):
        self.predict = predict

    def condition(self, z_t, img_lat, bundle):
        return z_t

    def denoise(self, t, conditioned, context):
        return constant(self.predict(t, conditioned.values))


class TestNoiseSchedule:
    """Linear β schedule and forward noising."""

    def test_alpha_bar_strictly_decreasing(self):
        sched = NoiseSchedule.linear(100)
        values = [sched.alpha_bar(t) for t in range(1, 101)]
        assert all(b < a for a, b in zip(values, values[1:]))
        assert sched.alpha_bar(1) == pytest.approx(1.0 - 1e-4)

    @pytest.mark.parametrize("betas", [[], [0.0, 0.1], [0.5, 1.0]])
    def test_rejects_invalid_betas(self, betas):
        with pytest.raises(ValueError):
            NoiseSchedule(betas)

    def test_timestep_range(self):
        sched = NoiseSchedule.linear(10)
        with pytest.raises(ValueError):
            sched.alpha_bar(0)
        with pytest.raises(ValueError):
            sched.alpha_bar(11)

    def test_forward_noising_formula(self):
        sched = NoiseSchedule.linear(50)
        rng = np.random.default_rng(0)
        z0, eps = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
        a = sched.alpha_bar(30)
        expected = math.sqrt(a) * z0 + math.sqrt(1 - a) * eps
        assert np.allclose(forward_noising(z0, 30, eps, sched), expected)

    @pytest.mark.parametrize("t", [1, 250, 500, 1000])
    def test_noised_variance_matches_schedule(self, t):
        sched = NoiseSchedule.linear(1000)
        rng = np.random.default_rng(t)
        z0 = rng.normal(0.0, 2.0, size=10_000)
        z_t = forward_noising(z0, t, rng.standard_normal(z0.shape), sched)
        a = sched.alpha_bar(t)
        expected = a * z0.var() + (1.0 - a)
        assert z_t.var() == pytest.approx(expected, rel=0.05)

    def test_forward_noising_shape_mismatch(self):
        with pytest.raises(ShapeError):
            forward_noising(np.zeros((3, 2)), 1, np.zeros((2, 3)), NoiseSchedule.linear(10))

    def test_timestep_embedding_odd_width(self):
        emb = timestep_embedding(7, 5)
        assert emb.shape == (5,)
        assert emb[-1] == 0.0


class TestConditioning:
    """Channel concatenation and zero-initialised injections."""

    def test_fresh_injector_adds_nothing(self):
        injector = LatentInjector(N_GRID, 5, D_DIFF, D_ENC, np.random.default_rng(0))
        out = injector(constant(np.random.default_rng(1).normal(size=(5, D_DIFF))))
        assert out.shape == (N_GRID, 2 * D_ENC)
        assert not out.values.any()

    def test_injector_row_count(self):
        injector = LatentInjector(N_GRID, 5, D_DIFF, D_ENC, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            injector(constant(np.ones((4, D_DIFF))))

    def test_condition_concatenates_channels(self, editor, bundle):
        z_t, img_lat = constant(np.ones((N_GRID, D_ENC))), constant(np.zeros((N_GRID, D_ENC)))
        out = editor.condition(z_t, img_lat, bundle)
        assert out.shape == (N_GRID, 2 * D_ENC)
        assert np.array_equal(out.values[:, :D_ENC], np.ones((N_GRID, D_ENC)))

    def test_trained_injection_changes_inputs(self, editor, bundle):
        editor.injector_vis.channels.weight.values[...] = 0.5
        z_t, img_lat = constant(np.ones((N_GRID, D_ENC))), constant(np.zeros((N_GRID, D_ENC)))
        with_feature = editor.condition(z_t, img_lat, bundle).values
        without = condition_inputs(z_t, img_lat, None, bundle.r_bar_txt, editor.injector_vis,
                                   editor.injector_txt).values
        assert not np.allclose(with_feature, without)

    def test_grid_mismatch(self, editor, bundle):
        with pytest.raises(ShapeError):
            editor.condition(constant(np.ones((N_GRID, D_ENC))), constant(np.ones((N_GRID - 1, D_ENC))), bundle)

    def test_context_stacks_refined_guidance(self, bundle):
        assert guidance_context(bundle).shape == (6, D_DIFF)

    def test_context_falls_back_to_aligned_guidance(self, bundle):
        bare = GuidanceBundle(v=bundle.v, v_hat=bundle.v_hat)
        assert guidance_context(bare) is bare.v_hat


class TestLoss:
    """Noise-prediction loss and the combined objective."""

    def test_fixed_pair_matches_direct_prediction(self, editor, bundle):
        sched = NoiseSchedule.linear(20)
        rng = np.random.default_rng(4)
        z0, img_lat = rng.normal(size=(N_GRID, D_ENC)), constant(rng.normal(size=(N_GRID, D_ENC)))
        eps = rng.normal(size=z0.shape)
        loss = diffusion_loss(z0, img_lat, bundle, sched, editor, fixed=(7, eps))
        z_t = constant(forward_noising(z0, 7, eps, sched))
        predicted = denoise(7, editor.condition(z_t, img_lat, bundle), guidance_context(bundle), editor.denoiser)
        assert loss.item() == pytest.approx(np.mean((eps - predicted.values) ** 2))

    def test_true_noise_predictor_has_zero_loss(self, bundle):
        sched = NoiseSchedule.linear(100)
        rng = np.random.default_rng(9)
        z0 = rng.normal(size=(N_GRID, D_ENC))
        a = sched.alpha_bar
        oracle = NoisePredictor(lambda t, z_t: (z_t - math.sqrt(a(t)) * z0) / math.sqrt(1.0 - a(t)))
        for _ in range(20):
            loss = diffusion_loss(z0, constant(z0), bundle, sched, oracle, rng=rng)
            assert loss.item() < 1e-20

    def test_zero_predictor_loss_is_noise_power(self, bundle):
        sched = NoiseSchedule.linear(100)
        rng = np.random.default_rng(10)
        z0 = rng.normal(size=(N_GRID, D_ENC))
        zero = NoisePredictor(lambda t, z_t: np.zeros_like(z_t))
        losses = [diffusion_loss(z0, constant(z0), bundle, sched, zero, rng=rng).item() for _ in range(1000)]
        assert np.mean(losses) == pytest.approx(1.0, rel=0.05)

    def test_needs_rng_or_fixed_pair(self, editor, bundle):
        with pytest.raises(ValueError):
            diffusion_loss(np.zeros((N_GRID, D_ENC)), constant(np.zeros((N_GRID, D_ENC))), bundle,
                           NoiseSchedule.linear(10), editor)

    def test_total_loss_adds_terms(self):
        assert total_loss(constant(1.5), constant(0.25)).item() == pytest.approx(1.75)

    def test_total_loss_rejects_non_finite(self):
        with pytest.raises(NonFiniteLossError) as info:
            total_loss(constant(np.nan), constant(0.1), step=12)
        assert info.value.step == 12

    def test_denoiser_gradients(self):
        f, inputs = composite_cases(np.random.default_rng(5))["denoiser"]
        assert grad_check(f, inputs, coords=10, seed=5) < 1e-4


class TestSampler:
    """Deterministic DDIM reverse process."""

    def test_grid_endpoints(self):
        grid = ddim_timesteps(100, 10)
        assert len(grid) == 10
        assert grid[0] == 100 and grid[-1] == 1

    @pytest.mark.parametrize("steps", [0, 101])
    def test_invalid_step_counts(self, steps):
        with pytest.raises(ValueError):
            ddim_timesteps(100, steps)

    def test_true_noise_predictor_recovers_latent(self):
        assert check_sampler_inversion(np.random.default_rng(6))

    def test_same_seed_same_output(self, editor, bundle):
        sched = NoiseSchedule.linear(20)
        img_lat = constant(np.random.default_rng(7).normal(size=(N_GRID, D_ENC)))
        a = sample_edit(img_lat, bundle, sched, editor, 4, np.random.default_rng(8))
        b = sample_edit(img_lat, bundle, sched, editor, 4, np.random.default_rng(8))
        assert a.shape == (N_GRID, D_ENC)
        assert np.array_equal(a, b)
