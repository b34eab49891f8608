"""Denoisers: the pluggable interface, a DCT hard-threshold baseline, and a
small residual CNN, with its blind-noise trainer."""

from __future__ import annotations

import abc
import math
from dataclasses import dataclass

import numpy as np

from . import freq
from .autodiff import Tensor, mse_loss, relu, sub
from .image import add_awgn, as_image, clip_unit, psnr
from .nn import Adam, BatchNorm2d, Conv2d, Module


class Denoiser(abc.ABC):
    """A denoiser maps a noisy [0,1] grayscale image to a same-size
    denoised image in [0,1]. parallel_safe denoisers may be called from
    several worker threads at once."""

    name: str = "denoiser"
    parallel_safe: bool = True

    @abc.abstractmethod
    def denoise(self, noisy: np.ndarray) -> np.ndarray:
        ...


class IdentityDenoiser(Denoiser):
    """Passes the input through; the do-nothing ensemble baseline."""

    name = "identity"

    def denoise(self, noisy: np.ndarray) -> np.ndarray:
        return clip_unit(as_image(noisy, "noisy"))


def dct_threshold_denoise(noisy: np.ndarray, sigma: float) -> np.ndarray:
    """Hard-threshold DCT denoising.

    Zeroes every non-DC coefficient with magnitude below
    3 * (sigma/255) * sqrt(2 * ln(H*W)), the universal threshold scaled to
    unit range, then inverts and clips. sigma 0 keeps everything.
    """
    img = as_image(noisy, "noisy")
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    h, w = img.shape
    coeff = freq.dct2(img)
    thr = 3.0 * (sigma / 255.0) * math.sqrt(2.0 * math.log(h * w))
    keep = np.abs(coeff) >= thr
    keep[0, 0] = True
    return clip_unit(freq.idct2(coeff * keep))


class DctThresholdDenoiser(Denoiser):
    """dct_threshold_denoise with a fixed noise level baked in."""

    def __init__(self, sigma: float):
        if sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {sigma}")
        self.sigma = float(sigma)
        self.name = f"dct-threshold-{self.sigma:g}"

    def denoise(self, noisy: np.ndarray) -> np.ndarray:
        return dct_threshold_denoise(noisy, self.sigma)


class TinyDenoiser(Module, Denoiser):
    """Small residual CNN: predicts the noise, the clean estimate is the
    input minus the prediction.

    Layers: conv(1->w)+relu, (depth-2) x [conv(w->w)+BN+relu], conv(w->1).
    Training works on the unclipped estimate; denoise() clips.
    """

    def __init__(self, depth: int = 7, width: int = 24,
                 rng: np.random.Generator | None = None):
        super().__init__()
        if depth < 3:
            raise ValueError(f"depth must be >= 3, got {depth}")
        if width < 1:
            raise ValueError(f"width must be >= 1, got {width}")
        if rng is None:
            rng = np.random.default_rng()
        self.depth = depth
        self.width = width
        self.head = Conv2d(1, width, 3, rng=rng)
        self.blocks = [Conv2d(width, width, 3, rng=rng, bias=False)
                       for _ in range(depth - 2)]
        self.norms = [BatchNorm2d(width) for _ in range(depth - 2)]
        self.tail = Conv2d(width, 1, 3, rng=rng)
        self.name = f"tiny-{depth}x{width}"

    parallel_safe = True

    def features(self, x: Tensor) -> Tensor:
        """Activations feeding the final conv, shaped (B,width,H,W)."""
        if len(x.shape) != 4 or x.shape[1] != 1:
            raise ValueError(f"expected a (B,1,H,W) batch, got {x.shape}")
        t = relu(self.head(x))
        for conv, norm in zip(self.blocks, self.norms):
            t = relu(norm(conv(t)))
        return t

    def residual(self, x: Tensor) -> Tensor:
        """The predicted noise map for a (B,1,H,W) batch."""
        return self.tail(self.features(x))

    def forward(self, x: Tensor) -> Tensor:
        """Unclipped denoised batch: x minus the predicted noise."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        return sub(x, self.residual(x))

    def denoise(self, noisy: np.ndarray) -> np.ndarray:
        img = as_image(noisy, "noisy")
        was_training = self.training
        self.eval()
        try:
            out = self.forward(Tensor(img[None, None])).values[0, 0]
        finally:
            if was_training:
                self.train()
        return clip_unit(out)


@dataclass
class DenoiserTrainConfig:
    """Blind-denoiser training knobs. Noise levels are drawn per patch
    from [sigma_min, sigma_max]; held-out PSNR is measured at val_sigma."""

    epochs: int = 50
    batch_size: int = 8
    lr: float = 1e-3
    lr_halve_every: int = 10
    sigma_min: float = 0.0
    sigma_max: float = 55.0
    val_sigma: float = 25.0
    val_fraction: float = 0.125
    augment: bool = True
    seed: int = 0


def denoiser_lr(epoch: int, config: DenoiserTrainConfig) -> float:
    """Learning rate for a 1-based epoch: halved every lr_halve_every."""
    if epoch < 1:
        raise ValueError(f"epoch is 1-based, got {epoch}")
    return config.lr * 0.5 ** ((epoch - 1) // config.lr_halve_every)


def _as_patch_array(patches) -> np.ndarray:
    arr = np.asarray(patches, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] == 0:
        raise ValueError(f"expected a non-empty (N,H,W) patch array, got {arr.shape}")
    return arr


def _split_train_val(patches: np.ndarray, val_fraction: float):
    """Deterministic split: the tail of the array is held out."""
    n = patches.shape[0]
    n_val = min(n - 1, max(1, round(n * val_fraction)))
    return patches[: n - n_val], patches[n - n_val:]


def _augment_batch(clean: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    ks = rng.integers(0, 4, size=clean.shape[0])
    flips = rng.integers(0, 2, size=clean.shape[0])
    out = np.empty_like(clean)
    for i, (k, f) in enumerate(zip(ks, flips)):
        patch = np.rot90(clean[i], k)
        if f:
            patch = np.flipud(patch)
        out[i] = patch
    return out


def _epoch_batches(train: np.ndarray, config: DenoiserTrainConfig,
                   rng: np.random.Generator):
    """Yield (clean, noisy) batches, both (B,1,H,W), for one epoch.

    The draw order (permutation, flips, sigmas, noise) is fixed so any
    trainer consuming this generator with an identically seeded rng sees
    bit-identical data.
    """
    order = rng.permutation(train.shape[0])
    for start in range(0, order.size, config.batch_size):
        idx = order[start:start + config.batch_size]
        clean = train[idx]
        if config.augment:
            clean = _augment_batch(clean, rng)
        sigmas = rng.uniform(config.sigma_min, config.sigma_max, size=idx.size)
        noise = rng.standard_normal(clean.shape)
        noisy = clean + noise * (sigmas / 255.0)[:, None, None]
        yield clean[:, None], noisy[:, None]


def _make_val_set(val: np.ndarray, config: DenoiserTrainConfig,
                  rng: np.random.Generator):
    noise = rng.standard_normal(val.shape)
    return val, val + noise * (config.val_sigma / 255.0)


def _val_psnr(model: TinyDenoiser, val_clean: np.ndarray,
              val_noisy: np.ndarray) -> float:
    model.eval()
    try:
        out = model.forward(Tensor(val_noisy[:, None])).values[:, 0]
    finally:
        model.train()
    scores = [psnr(c, np.clip(o, 0.0, 1.0)) for c, o in zip(val_clean, out)]
    return float(np.mean(scores))


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_psnr_db: float
    aux_loss: float = 0.0


def train_denoiser(model: TinyDenoiser, clean_patches,
                   config: DenoiserTrainConfig | None = None) -> list[EpochRecord]:
    """Blind residual training: per-patch sigma from [sigma_min, sigma_max],
    unclipped AWGN, MSE against the clean patch, Adam with the halving
    schedule. Returns one record per epoch with held-out PSNR at val_sigma.
    """
    if config is None:
        config = DenoiserTrainConfig()
    patches = _as_patch_array(clean_patches)
    train, val = _split_train_val(patches, config.val_fraction)
    rng_data = np.random.default_rng([config.seed, 1])
    rng_val = np.random.default_rng([config.seed, 2])
    val_clean, val_noisy = _make_val_set(val, config, rng_val)

    model.train()
    opt = Adam(model.named_parameters(), lr=config.lr)
    history: list[EpochRecord] = []
    for epoch in range(1, config.epochs + 1):
        opt.lr = denoiser_lr(epoch, config)
        losses = []
        for batch_no, (clean, noisy) in enumerate(
                _epoch_batches(train, config, rng_data)):
            out = model.forward(Tensor(noisy))
            loss = mse_loss(out, Tensor(clean))
            if not math.isfinite(loss.item()):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch} batch {batch_no}")
            loss.backward()
            opt.step()
            losses.append(loss.item())
        history.append(EpochRecord(
            epoch=epoch, lr=opt.lr, train_loss=float(np.mean(losses)),
            val_psnr_db=_val_psnr(model, val_clean, val_noisy)))
    return history
