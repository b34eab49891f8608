"""Tests for the dual-attention fusion model, its trainer, and stack files."""

import numpy as np
import pytest

from manifuse.autodiff import Tensor, mse_loss
from manifuse.fusion import (
    STRATEGIES,
    FusionModel,
    FusionTrainConfig,
    evaluate_ensembles,
    fusion_lr,
    load_stack,
    save_stack,
    train_fusion,
)
from manifuse.manip import BranchStack, simple_average
from manifuse.nn import gradient_check


def random_stack_batch(rng, b=2, n=4, size=8):
    return Tensor(rng.uniform(0, 1, size=(b, n, size, size)))


def make_model(n=4, seed=0):
    return FusionModel(n, rng=np.random.default_rng(seed))


def randomize(model, rng):
    """Give every parameter (including the zero-initialized heads) random
    values, so weight-normalization tests exercise a generic model."""
    for _, p in model.named_parameters():
        p.values[:] = rng.standard_normal(p.values.shape) * 0.5
    return model


class TestAttentionNormalization:
    def test_spatial_weights_sum_to_one(self, rng):
        model = randomize(make_model(), rng)
        x = random_stack_batch(rng)
        w = model.spatial_weights(x).values
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)

    def test_channel_weights_sum_to_one(self, rng):
        model = randomize(make_model(), rng)
        x = random_stack_batch(rng)
        w = model.channel_weights(x).values
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)

    def test_weights_strictly_positive(self, rng):
        model = randomize(make_model(), rng)
        x = random_stack_batch(rng)
        assert model.spatial_weights(x).values.min() > 0.0
        assert model.channel_weights(x).values.min() > 0.0


class TestSpatialPath:
    def test_identical_branches_pass_through(self, rng):
        model = randomize(make_model(), rng)
        branch = rng.uniform(0, 1, size=(8, 8))
        x = Tensor(np.broadcast_to(branch, (1, 4, 8, 8)).copy())
        out = model.spatial_forward(x).values[0, 0]
        np.testing.assert_allclose(out, branch, atol=1e-9)

    def test_output_within_branch_envelope(self, rng):
        model = randomize(make_model(), rng)
        x = random_stack_batch(rng)
        out = model.spatial_forward(x).values
        lo = x.values.min(axis=1)
        hi = x.values.max(axis=1)
        assert np.all(out[:, 0] >= lo - 1e-12)
        assert np.all(out[:, 0] <= hi + 1e-12)

    def test_forced_one_hot_selects_branch(self, rng):
        model = make_model()
        # Zero conv weights plus a large bias on branch 2 make the softmax
        # logits constant over space and one-hot over branches.
        model.sp_conv3.weight.values[:] = 0.0
        model.sp_conv3.bias.values[:] = 0.0
        model.sp_conv3.bias.values[2] = 50.0
        x = random_stack_batch(rng)
        out = model.spatial_forward(x).values[:, 0]
        np.testing.assert_allclose(out, x.values[:, 2], atol=1e-9)


class TestChannelPath:
    def test_identical_branches_pass_through(self, rng):
        model = randomize(make_model(), rng)
        branch = rng.uniform(0, 1, size=(8, 8))
        x = Tensor(np.broadcast_to(branch, (1, 4, 8, 8)).copy())
        out = model.channel_forward(x).values[0, 0]
        np.testing.assert_allclose(out, branch, atol=1e-9)

    def test_constant_branches_blend_to_constant(self, rng):
        model = randomize(make_model(2), rng)
        x = Tensor(
            np.stack([np.full((1, 6, 6), 0.2), np.full((1, 6, 6), 0.8)], axis=1)
        )
        out = model.channel_forward(x).values[0, 0]
        # Spatially constant weights blend constants into a constant.
        assert out.max() - out.min() < 1e-9
        assert 0.2 - 1e-9 <= out[0, 0] <= 0.8 + 1e-9

    def test_weights_spatially_constant_by_construction(self, rng):
        model = randomize(make_model(), rng)
        w = model.channel_weights(random_stack_batch(rng)).values
        assert w.shape[-2:] == (1, 1)


class TestZeroInitBaseline:
    def test_untrained_modules_equal_simple_average(self, rng):
        model = make_model(n=5, seed=3)
        x = Tensor(rng.uniform(0, 1, size=(2, 5, 10, 10)))
        avg = x.values.mean(axis=1)
        np.testing.assert_allclose(model.spatial_forward(x).values[:, 0], avg, atol=1e-9)
        np.testing.assert_allclose(model.channel_forward(x).values[:, 0], avg, atol=1e-9)

    def test_untrained_full_model_equals_simple_average(self, rng):
        model = make_model(n=3, seed=4)
        stack = BranchStack(
            modes=(0, 1, 2), images=rng.uniform(0, 1, size=(3, 12, 12))
        )
        np.testing.assert_allclose(
            model.fuse(stack), simple_average(stack), atol=1e-9
        )


class TestFullModel:
    def test_fuse_shape_and_range(self, rng):
        model = randomize(make_model(), rng)
        stack = BranchStack(
            modes=(0, 1, 2, 3), images=rng.uniform(0, 1, size=(4, 9, 13))
        )
        out = model.fuse(stack)
        assert out.shape == (9, 13)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_branch_count_mismatch_rejected(self, rng):
        model = make_model(n=4)
        stack = BranchStack(modes=(0, 1), images=rng.uniform(0, 1, size=(2, 8, 8)))
        with pytest.raises(ValueError):
            model.fuse(stack)

    def test_end_to_end_gradient_check(self):
        rng = np.random.default_rng(17)
        model = FusionModel(2, rng=rng)
        randomize(model, rng)
        model.train()
        x = Tensor(rng.uniform(0, 1, size=(1, 2, 6, 6)))
        target = rng.uniform(size=(1, 1, 6, 6))
        err = gradient_check(
            lambda: mse_loss(model.forward(x), Tensor(target)),
            model,
            rng=np.random.default_rng(18),
        )
        assert err < 1e-3


class TestLrSchedule:
    def test_pinned_breakpoints(self):
        cfg = FusionTrainConfig()
        assert fusion_lr(1, cfg) == pytest.approx(0.01)
        assert fusion_lr(50, cfg) == pytest.approx(0.01)
        assert fusion_lr(51, cfg) == pytest.approx(0.006)
        assert fusion_lr(80, cfg) == pytest.approx(0.006)
        assert fusion_lr(81, cfg) == pytest.approx(0.0036)
        assert fusion_lr(100, cfg) == pytest.approx(0.0036)


def oracle_samples(rng, n_samples=4, n_branches=3, size=16):
    """Branch 1 is the clean image; the others are heavily corrupted."""
    samples = []
    for _ in range(n_samples):
        clean = rng.uniform(0.2, 0.8, size=(size, size))
        branches = np.clip(
            np.stack(
                [
                    clean + 0.3 * rng.standard_normal((size, size)),
                    clean,
                    clean + 0.3 * rng.standard_normal((size, size)),
                ]
            ),
            0.0,
            1.0,
        )
        samples.append((BranchStack(modes=(0, 1, 2), images=branches), clean))
    return samples


class TestTrainFusion:
    def test_history_and_determinism(self, rng):
        samples = oracle_samples(rng)
        cfg = FusionTrainConfig(
            epochs=3, batch_size=2, patch_size=16, stride=16, seed=9
        )
        results = []
        for _ in range(2):
            model = FusionModel(3, rng=np.random.default_rng(19))
            history = train_fusion(model, samples, cfg)
            assert len(history) == 3
            results.append(
                (history, {n: p.values.copy() for n, p in model.named_parameters()})
            )
        assert results[0][0] == results[1][0]
        for name in results[0][1]:
            np.testing.assert_array_equal(results[0][1][name], results[1][1][name])

    def test_smoothed_loss_non_increasing(self, rng):
        samples = oracle_samples(rng)
        model = FusionModel(3, rng=np.random.default_rng(20))
        cfg = FusionTrainConfig(
            epochs=20, batch_size=4, patch_size=16, stride=16, seed=10
        )
        history = train_fusion(model, samples, cfg)
        losses = np.array([rec.train_loss for rec in history])
        smoothed = np.convolve(losses, np.ones(10) / 10.0, mode="valid")
        assert np.all(np.diff(smoothed) <= 1e-6)

    def test_inconsistent_branch_count_rejected(self, rng):
        good = oracle_samples(rng, n_samples=1)
        bad = (
            BranchStack(modes=(0, 1), images=rng.uniform(0, 1, size=(2, 16, 16))),
            rng.uniform(0, 1, size=(16, 16)),
        )
        model = FusionModel(3, rng=np.random.default_rng(21))
        with pytest.raises(ValueError):
            train_fusion(model, good + [bad], FusionTrainConfig(epochs=1, patch_size=16, stride=16))

    def test_images_smaller_than_patch_rejected(self, rng):
        samples = oracle_samples(rng, size=16)
        model = FusionModel(3, rng=np.random.default_rng(22))
        with pytest.raises(ValueError):
            train_fusion(model, samples, FusionTrainConfig(epochs=1, patch_size=50, stride=50))


class TestEvaluateEnsembles:
    def test_identical_branches_tie_exactly(self, rng):
        clean = rng.uniform(0, 1, size=(8, 8))
        branch = np.clip(clean + 0.05 * rng.standard_normal((8, 8)), 0, 1)
        stack = BranchStack(modes=(0, 1, 2), images=np.stack([branch] * 3))
        model = FusionModel(3, rng=np.random.default_rng(23))
        rows = evaluate_ensembles([(stack, clean)], model)
        assert [r["strategy"] for r in rows] == list(STRATEGIES)
        scores = {r["strategy"]: r["mean_psnr_db"] for r in rows}
        # Every strategy sees the same single branch; the zero-initialized
        # head reproduces it exactly.
        for strategy in STRATEGIES:
            assert scores[strategy] == pytest.approx(scores["branch-0"], abs=1e-6)

    def test_without_model_reports_baselines_only(self, rng):
        samples = oracle_samples(rng, n_samples=2)
        rows = evaluate_ensembles(samples)
        assert [r["strategy"] for r in rows] == ["branch-0", "simple-average"]
        for row in rows:
            assert row["n_images"] == 2
            assert np.isfinite(row["mean_psnr_db"])

    def test_empty_sample_list_rejected(self):
        with pytest.raises(ValueError):
            evaluate_ensembles([])


class TestStackSerialization:
    def test_round_trip(self, tmp_path, rng):
        stack = BranchStack(
            modes=(0, 5, 10), images=rng.uniform(0, 1, size=(3, 7, 9))
        )
        path = tmp_path / "probe.stack"
        save_stack(path, stack)
        back = load_stack(path)
        assert back.modes == stack.modes
        np.testing.assert_array_equal(back.images, stack.images)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.stack"
        path.write_bytes(b"NOTSTACK" + bytes(64))
        with pytest.raises(ValueError):
            load_stack(path)

    def test_truncated_file_rejected(self, tmp_path, rng):
        stack = BranchStack(modes=(0, 1), images=rng.uniform(0, 1, size=(2, 8, 8)))
        path = tmp_path / "cut.stack"
        save_stack(path, stack)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(ValueError):
            load_stack(path)
