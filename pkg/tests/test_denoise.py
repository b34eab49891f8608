"""Tests for the denoiser interface, DCT baseline, and the residual CNN."""

import numpy as np
import pytest

from manifuse.autodiff import Tensor, mse_loss
from manifuse.denoise import (
    DctThresholdDenoiser,
    DenoiserTrainConfig,
    IdentityDenoiser,
    TinyDenoiser,
    dct_threshold_denoise,
    denoiser_lr,
    train_denoiser,
)
from manifuse.image import add_awgn, clip_unit, psnr
from manifuse.nn import gradient_check


def small_patches(rng, n=16, size=16):
    return rng.uniform(0.1, 0.9, size=(n, size, size))


class TestDctThreshold:
    def test_sigma_zero_is_clip(self, rng):
        noisy = rng.uniform(-0.1, 1.1, size=(12, 12))
        np.testing.assert_allclose(
            dct_threshold_denoise(noisy, 0.0), clip_unit(noisy), atol=1e-12
        )

    def test_constant_preserved(self):
        img = np.full((16, 16), 0.37)
        np.testing.assert_allclose(dct_threshold_denoise(img, 50.0), img, atol=1e-12)

    def test_reduces_noise_mse(self):
        clean = np.full((64, 64), 0.5)
        noisy = np.clip(add_awgn(clean, 25.0, seed=13), 0.0, 1.0)
        den = dct_threshold_denoise(noisy, 25.0)
        assert np.mean((den - clean) ** 2) < np.mean((noisy - clean) ** 2)

    def test_idempotent_for_fixed_sigma(self, rng):
        noisy = rng.uniform(0, 1, size=(16, 16))
        once = dct_threshold_denoise(noisy, 25.0)
        twice = dct_threshold_denoise(once, 25.0)
        # Surviving coefficients are above threshold already, so a second
        # pass only re-applies the clip.
        np.testing.assert_allclose(twice, once, atol=1e-9)

    def test_negative_sigma_rejected(self):
        with pytest.raises(ValueError):
            dct_threshold_denoise(np.zeros((4, 4)), -1.0)

    def test_wrapper_name_and_output_range(self, rng):
        d = DctThresholdDenoiser(25.0)
        assert d.name == "dct-threshold-25"
        out = d.denoise(rng.uniform(0, 1, size=(16, 16)))
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestIdentityDenoiser:
    def test_passes_through_clipped(self, rng):
        noisy = rng.uniform(-0.2, 1.2, size=(8, 8))
        np.testing.assert_array_equal(IdentityDenoiser().denoise(noisy), clip_unit(noisy))

    def test_parallel_safe_flag(self):
        assert IdentityDenoiser().parallel_safe


class TestTinyDenoiser:
    def test_zero_residual_head_is_identity(self, rng):
        model = TinyDenoiser(depth=4, width=6, rng=np.random.default_rng(0))
        model.tail.weight.values[:] = 0.0
        model.tail.bias.values[:] = 0.0
        noisy = rng.uniform(0, 1, size=(9, 11))
        np.testing.assert_allclose(model.denoise(noisy), noisy, atol=1e-15)

    @pytest.mark.parametrize("shape", [(8, 8), (16, 24), (33, 7)])
    def test_shape_preserved(self, shape, rng):
        model = TinyDenoiser(depth=3, width=4, rng=np.random.default_rng(1))
        out = model.denoise(rng.uniform(0, 1, size=shape))
        assert out.shape == shape

    def test_output_in_unit_range(self, rng):
        model = TinyDenoiser(depth=3, width=4, rng=np.random.default_rng(2))
        out = model.denoise(rng.uniform(0, 1, size=(16, 16)))
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_denoise_restores_training_flag(self, rng):
        model = TinyDenoiser(depth=3, width=4, rng=np.random.default_rng(3))
        model.train()
        model.denoise(rng.uniform(0, 1, size=(8, 8)))
        assert model.training

    def test_same_seed_same_init(self):
        a = TinyDenoiser(depth=4, width=6, rng=np.random.default_rng(5))
        b = TinyDenoiser(depth=4, width=6, rng=np.random.default_rng(5))
        for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(pa.values, pb.values)

    def test_batch_channel_mismatch_rejected(self, rng):
        model = TinyDenoiser(depth=3, width=4, rng=np.random.default_rng(6))
        with pytest.raises(ValueError):
            model.forward(Tensor(rng.uniform(size=(2, 3, 8, 8))))

    def test_not_dihedral_equivariant(self, rng):
        # Random kernels are asymmetric, so rotating the input does not
        # rotate the output.
        model = TinyDenoiser(depth=4, width=6, rng=np.random.default_rng(7))
        img = rng.uniform(0, 1, size=(16, 16))
        direct = model.denoise(np.rot90(img))
        rotated = np.rot90(model.denoise(img))
        assert np.max(np.abs(direct - rotated)) > 1e-6

    def test_depth_validation(self):
        with pytest.raises(ValueError):
            TinyDenoiser(depth=1, width=4)

    def test_end_to_end_gradient_check(self):
        rng = np.random.default_rng(8)
        model = TinyDenoiser(depth=4, width=5, rng=rng)
        model.train()
        x = Tensor(rng.uniform(0.05, 0.95, size=(2, 1, 8, 8)))
        target = rng.uniform(size=(2, 1, 8, 8))
        err = gradient_check(
            lambda: mse_loss(model.forward(x), Tensor(target)),
            model,
            rng=np.random.default_rng(9),
        )
        assert err < 1e-3


class TestLrSchedule:
    def test_halves_every_ten_epochs(self):
        cfg = DenoiserTrainConfig(lr=1e-3, lr_halve_every=10)
        assert denoiser_lr(1, cfg) == 1e-3
        assert denoiser_lr(10, cfg) == 1e-3
        assert denoiser_lr(11, cfg) == 5e-4
        assert denoiser_lr(20, cfg) == 5e-4
        assert denoiser_lr(21, cfg) == 2.5e-4
        assert denoiser_lr(50, cfg) == 1e-3 / 16.0


class TestTrainDenoiser:
    def test_smoke_one_epoch_constant_data(self):
        patches = np.full((8, 16, 16), 0.5)
        model = TinyDenoiser(depth=3, width=4, rng=np.random.default_rng(10))
        history = train_denoiser(
            model, patches, DenoiserTrainConfig(epochs=1, batch_size=4, seed=1)
        )
        assert len(history) == 1
        assert np.isfinite(history[0].train_loss)
        assert np.isfinite(history[0].val_psnr_db)

    def test_history_follows_lr_schedule(self, rng):
        patches = small_patches(rng)
        model = TinyDenoiser(depth=3, width=4, rng=np.random.default_rng(11))
        cfg = DenoiserTrainConfig(epochs=12, batch_size=8, seed=2)
        history = train_denoiser(model, patches, cfg)
        assert [rec.epoch for rec in history] == list(range(1, 13))
        for rec in history:
            assert rec.lr == denoiser_lr(rec.epoch, cfg)

    def test_fixed_seed_reproducible(self, rng):
        patches = small_patches(rng)
        cfg = DenoiserTrainConfig(epochs=2, batch_size=8, seed=3)
        params = []
        histories = []
        for _ in range(2):
            model = TinyDenoiser(depth=3, width=4, rng=np.random.default_rng(12))
            histories.append(train_denoiser(model, patches, cfg))
            params.append({n: p.values.copy() for n, p in model.named_parameters()})
        for name in params[0]:
            np.testing.assert_array_equal(params[0][name], params[1][name])
        assert histories[0] == histories[1]

    def test_seed_changes_training(self, rng):
        patches = small_patches(rng)
        finals = []
        for seed in (4, 5):
            model = TinyDenoiser(depth=3, width=4, rng=np.random.default_rng(13))
            train_denoiser(
                model, patches, DenoiserTrainConfig(epochs=1, batch_size=8, seed=seed)
            )
            finals.append(model.tail.weight.values.copy())
        assert not np.array_equal(finals[0], finals[1])

    def test_training_improves_validation_psnr(self, trained_denoiser):
        _, history = trained_denoiser
        assert history[-1].val_psnr_db > history[0].val_psnr_db

    def test_trained_model_beats_noisy_input(self, trained_denoiser, toy_images):
        model, _ = trained_denoiser
        clean = toy_images[0]
        noisy = clip_unit(add_awgn(clean, 25.0, seed=4242))
        assert psnr(clean, model.denoise(noisy)) > psnr(clean, noisy)

    def test_empty_patch_set_rejected(self):
        model = TinyDenoiser(depth=3, width=4, rng=np.random.default_rng(15))
        with pytest.raises(ValueError):
            train_denoiser(model, np.zeros((0, 16, 16)), DenoiserTrainConfig(epochs=1))
