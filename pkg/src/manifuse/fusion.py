"""Dual-attention fusion of realigned ensemble branches.

A spatial path produces a per-pixel weight map per branch; a channel path
produces one scalar weight per branch via squeeze-and-excitation; a final
convolution blends the two weighted sums. Both weight-producing layers are
zero-initialized and the blending kernel starts as an averaging delta, so
the untrained model reproduces the simple branch average exactly and
training starts from the ensemble baseline.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import (Tensor, concat_channels, global_avg_pool, mse_loss,
                       mul, relu, reshape, softmax_channels, sum_channels)
from .denoise import EpochRecord
from .image import psnr
from .manip import BranchStack, get_mode
from .nn import Adam, BatchNorm2d, Conv2d, Dense, Module

_STACK_MAGIC = b"MFSTACK1"


class FusionModel(Module):
    """Spatial + channel attention over an N-branch stack, blended by a
    3x3 convolution."""

    def __init__(self, n_branches: int, rng: np.random.Generator | None = None):
        super().__init__()
        if n_branches < 1:
            raise ValueError(f"need at least one branch, got {n_branches}")
        if rng is None:
            rng = np.random.default_rng()
        self.n_branches = n_branches
        self.sp_conv1 = Conv2d(n_branches, 32, 3, rng=rng, bias=False)
        self.sp_norm1 = BatchNorm2d(32)
        self.sp_conv2 = Conv2d(32, 32, 3, rng=rng, bias=False)
        self.sp_norm2 = BatchNorm2d(32)
        self.sp_conv3 = Conv2d(32, n_branches, 3, rng=rng)
        self.ch_dense1 = Dense(n_branches, 8, rng=rng)
        self.ch_dense2 = Dense(8, n_branches, rng=rng)
        self.head = Conv2d(2, 1, 3, rng=rng)
        # Zero the weight-producing layers: softmax of zeros is uniform,
        # so both paths start as the simple average.
        self.sp_conv3.weight.values[...] = 0.0
        self.sp_conv3.bias.values[...] = 0.0
        self.ch_dense2.weight.values[...] = 0.0
        self.ch_dense2.bias.values[...] = 0.0
        # Averaging delta: the head starts as the mean of its two inputs.
        self.head.weight.values[...] = 0.0
        self.head.weight.values[0, :, 1, 1] = 0.5
        self.head.bias.values[...] = 0.0

    def _check(self, x: Tensor) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if len(x.shape) != 4 or x.shape[1] != self.n_branches:
            raise ValueError(
                f"expected (B,{self.n_branches},H,W), got {x.shape}")
        return x

    def spatial_weights(self, x) -> Tensor:
        """Per-pixel branch weights, softmaxed over the branch axis."""
        x = self._check(x)
        t = relu(self.sp_norm1(self.sp_conv1(x)))
        t = relu(self.sp_norm2(self.sp_conv2(t)))
        return softmax_channels(self.sp_conv3(t))

    def spatial_forward(self, x) -> Tensor:
        x = self._check(x)
        return sum_channels(mul(self.spatial_weights(x), x))

    def channel_weights(self, x) -> Tensor:
        """One weight per branch, shaped (B,N,1,1), summing to 1."""
        x = self._check(x)
        squeezed = reshape(global_avg_pool(x), (x.shape[0], self.n_branches))
        t = relu(self.ch_dense1(squeezed))
        t = self.ch_dense2(t)
        return softmax_channels(reshape(t, (x.shape[0], self.n_branches, 1, 1)))

    def channel_forward(self, x) -> Tensor:
        x = self._check(x)
        return sum_channels(mul(self.channel_weights(x), x))

    def forward(self, x) -> Tensor:
        x = self._check(x)
        paths = concat_channels([self.spatial_forward(x), self.channel_forward(x)])
        return self.head(paths)

    def fuse(self, stack: BranchStack) -> np.ndarray:
        """Run one stack through the model in eval mode; clipped output."""
        was_training = self.training
        self.eval()
        try:
            out = self.forward(Tensor(stack.images[None])).values[0, 0]
        finally:
            if was_training:
                self.train()
        return np.clip(out, 0.0, 1.0)


@dataclass
class FusionTrainConfig:
    """Training recipe: 100 epochs of Adam on 50x50 patches, lr 0.01 held
    for 50 epochs then scaled by 0.6 every 30."""

    epochs: int = 100
    batch_size: int = 8
    lr: float = 0.01
    lr_decay: float = 0.6
    lr_hold: int = 50
    lr_step: int = 30
    patch_size: int = 50
    stride: int = 50
    val_fraction: float = 0.125
    seed: int = 0


def fusion_lr(epoch: int, config: FusionTrainConfig) -> float:
    """lr for a 1-based epoch: constant through lr_hold, then one decay
    factor per started lr_step window."""
    if epoch < 1:
        raise ValueError(f"epoch is 1-based, got {epoch}")
    steps = max(0, math.ceil((epoch - config.lr_hold) / config.lr_step))
    return config.lr * config.lr_decay**steps


def _stack_patches(samples, patch_size: int, stride: int):
    """Aligned (stack-patch, clean-patch) pairs from every sample.

    samples: iterable of (BranchStack, clean image). Returns X (M,N,p,p)
    and Y (M,1,p,p). Rejects inconsistent branch counts.
    """
    xs, ys = [], []
    n_branches = None
    for stack, clean in samples:
        clean = np.asarray(clean, dtype=np.float64)
        if stack.images.shape[1:] != clean.shape:
            raise ValueError(
                f"stack {stack.images.shape[1:]} does not match clean {clean.shape}")
        if n_branches is None:
            n_branches = stack.n_branches
        elif stack.n_branches != n_branches:
            raise ValueError(
                f"inconsistent branch counts: {stack.n_branches} vs {n_branches}")
        h, w = clean.shape
        for top in range(0, h - patch_size + 1, stride):
            for left in range(0, w - patch_size + 1, stride):
                sl = np.s_[top:top + patch_size, left:left + patch_size]
                xs.append(stack.images[(slice(None),) + sl])
                ys.append(clean[sl][None])
    if not xs:
        raise ValueError("no usable patches: images smaller than patch_size?")
    return np.stack(xs), np.stack(ys)


def train_fusion(model: FusionModel, samples,
                 config: FusionTrainConfig | None = None) -> list[EpochRecord]:
    """Minimize MSE(fused, clean) over aligned stack patches. Deterministic
    under a fixed seed; returns per-epoch held-out PSNR."""
    if config is None:
        config = FusionTrainConfig()
    x, y = _stack_patches(samples, config.patch_size, config.stride)
    if x.shape[1] != model.n_branches:
        raise ValueError(
            f"stacks have {x.shape[1]} branches, model wants {model.n_branches}")
    n = x.shape[0]
    n_val = min(n - 1, max(1, round(n * config.val_fraction))) if n > 1 else 0
    x_train, y_train = x[: n - n_val], y[: n - n_val]
    x_val, y_val = x[n - n_val:], y[n - n_val:]
    rng = np.random.default_rng([config.seed, 1])

    model.train()
    opt = Adam(model.named_parameters(), lr=config.lr)
    history: list[EpochRecord] = []
    for epoch in range(1, config.epochs + 1):
        opt.lr = fusion_lr(epoch, config)
        losses = []
        order = rng.permutation(x_train.shape[0])
        for start in range(0, x_train.shape[0], config.batch_size):
            batch = order[start:start + config.batch_size]
            loss = mse_loss(model(Tensor(x_train[batch])), Tensor(y_train[batch]))
            if not math.isfinite(loss.item()):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            loss.backward()
            opt.step()
            losses.append(loss.item())
        history.append(EpochRecord(
            epoch=epoch, lr=opt.lr, train_loss=float(np.mean(losses)),
            val_psnr_db=_fusion_val_psnr(model, x_val, y_val)))
    return history


def _fusion_val_psnr(model: FusionModel, x_val, y_val) -> float:
    if x_val.shape[0] == 0:
        return float("nan")
    model.eval()
    try:
        out = model(Tensor(x_val)).values
    finally:
        model.train()
    scores = [psnr(t[0], np.clip(o[0], 0.0, 1.0)) for t, o in zip(y_val, out)]
    return float(np.mean(scores))


STRATEGIES = ("branch-0", "simple-average", "spatial-only", "channel-only",
              "dual-fusion")


def evaluate_ensembles(samples, model: FusionModel | None = None) -> list[dict]:
    """Mean PSNR per ensemble strategy over (stack, clean) samples.

    Without a model only the two training-free strategies are scored; with
    one, its spatial path, channel path, and full output are scored too.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("no samples to evaluate")
    per_strategy: dict[str, list[float]] = {s: [] for s in STRATEGIES}
    if model is not None:
        model.eval()
    for stack, clean in samples:
        clean = np.asarray(clean, dtype=np.float64)
        mean = np.clip(stack.images.mean(axis=0), 0.0, 1.0)
        per_strategy["branch-0"].append(psnr(clean, np.clip(stack.images[0], 0.0, 1.0)))
        per_strategy["simple-average"].append(psnr(clean, mean))
        if model is None:
            continue
        x = Tensor(stack.images[None])
        sp = np.clip(model.spatial_forward(x).values[0, 0], 0.0, 1.0)
        ch = np.clip(model.channel_forward(x).values[0, 0], 0.0, 1.0)
        du = np.clip(model(x).values[0, 0], 0.0, 1.0)
        per_strategy["spatial-only"].append(psnr(clean, sp))
        per_strategy["channel-only"].append(psnr(clean, ch))
        per_strategy["dual-fusion"].append(psnr(clean, du))
    rows = []
    for strategy in STRATEGIES:
        scores = per_strategy[strategy]
        if not scores:
            continue
        rows.append({"strategy": strategy,
                     "mean_psnr_db": float(np.mean(scores)),
                     "n_images": len(scores)})
    return rows


# ---------------------------------------------------------------------------
# Stack cache: magic, N/H/W, mode ids, then branch data (float64 LE).


def save_stack(path, stack: BranchStack) -> None:
    n, h, w = stack.images.shape
    with open(path, "wb") as fh:
        fh.write(_STACK_MAGIC)
        fh.write(struct.pack("<III", n, h, w))
        fh.write(struct.pack(f"<{n}I", *stack.modes))
        fh.write(np.ascontiguousarray(stack.images, dtype="<f8").tobytes())


def load_stack(path) -> BranchStack:
    with open(path, "rb") as fh:
        magic = fh.read(len(_STACK_MAGIC))
        if magic != _STACK_MAGIC:
            raise ValueError(f"not a stack file: bad magic {magic!r}")
        n, h, w = struct.unpack("<III", fh.read(12))
        mode_ids = struct.unpack(f"<{n}I", fh.read(4 * n))
        raw = fh.read(n * h * w * 8)
        if len(raw) != n * h * w * 8:
            raise ValueError("stack file truncated")
        images = np.frombuffer(raw, dtype="<f8").reshape(n, h, w).copy()
    return BranchStack(modes=tuple(get_mode(m).id for m in mode_ids),
                       images=images)
