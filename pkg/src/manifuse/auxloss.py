"""Auxiliary-loss retraining for the residual denoiser.

Three couplings are supported. The L1/L2 estimator modes train a separate
error-estimator network alternately with the denoiser: within each batch
the estimator fits the denoiser's current per-pixel error, then the
denoiser minimizes its usual MSE plus a weighted term pushing its error
map toward the (frozen) estimator's prediction. The image-learning mode
attaches a second head to the denoiser trunk that predicts the clean image
directly, with its loss added to the residual loss.

The frozen side of every alternating step runs in inference mode and is
left bit-identical: no parameter, moment, or running statistic moves.
With aux_weight 0 every trainer here reproduces plain train_denoiser
exactly, batch for batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, absolute, add, mse_loss, mul, relu, scale, sub
from .denoise import (DenoiserTrainConfig, EpochRecord, TinyDenoiser,
                      _as_patch_array, _epoch_batches, _make_val_set,
                      _split_train_val, _val_psnr, denoiser_lr)
from .nn import Adam, BatchNorm2d, Conv2d, Module

AUX_MODES = ("l1", "l2", "image")


class ErrorEstimator(Module):
    """Fully convolutional map from a noisy image to a non-negative
    per-pixel error prediction: three conv+BN+relu blocks, then a conv
    with a final relu clamping the output at zero."""

    def __init__(self, width: int = 32, rng: np.random.Generator | None = None):
        super().__init__()
        if rng is None:
            rng = np.random.default_rng()
        self.width = width
        self.convs = [Conv2d(1, width, 3, rng=rng, bias=False),
                      Conv2d(width, width, 3, rng=rng, bias=False),
                      Conv2d(width, width, 3, rng=rng, bias=False)]
        self.norms = [BatchNorm2d(width) for _ in range(3)]
        self.out = Conv2d(width, 1, 3, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if len(x.shape) != 4 or x.shape[1] != 1:
            raise ValueError(f"expected a (B,1,H,W) batch, got {x.shape}")
        t = x
        for conv, norm in zip(self.convs, self.norms):
            t = relu(norm(conv(t)))
        return relu(self.out(t))

    def predict(self, noisy: np.ndarray) -> np.ndarray:
        """Inference-mode error map for one image."""
        was_training = self.training
        self.eval()
        try:
            out = self.forward(Tensor(np.asarray(noisy, dtype=np.float64)[None, None]))
        finally:
            if was_training:
                self.train()
        return out.values[0, 0]


@dataclass
class AuxTrainConfig(DenoiserTrainConfig):
    """Denoiser training knobs plus the auxiliary coupling."""

    mode: str = "l1"
    aux_weight: float = 0.1
    stability_window: int = 10

    def __post_init__(self):
        if self.mode not in AUX_MODES:
            raise ValueError(f"mode must be one of {AUX_MODES}, got {self.mode!r}")
        if self.aux_weight < 0:
            raise ValueError(f"aux_weight must be >= 0, got {self.aux_weight}")

    @property
    def p(self) -> int:
        if self.mode == "image":
            raise ValueError("image-learning mode has no error order p")
        return 1 if self.mode == "l1" else 2


def estimator_target(denoised, clean, p: int) -> np.ndarray:
    """Per-pixel error map: |denoised - clean| for p=1, squared for p=2."""
    denoised = np.asarray(denoised, dtype=np.float64)
    clean = np.asarray(clean, dtype=np.float64)
    if denoised.shape != clean.shape:
        raise ValueError(
            f"shape mismatch: denoised {denoised.shape} vs clean {clean.shape}")
    if p not in (1, 2):
        raise ValueError(f"p must be 1 or 2, got {p}")
    diff = np.abs(denoised - clean)
    return diff if p == 1 else diff**2


def _target_graph(denoised: Tensor, clean: Tensor, p: int) -> Tensor:
    diff = sub(denoised, clean)
    return absolute(diff) if p == 1 else mul(diff, diff)


def _frozen_forward(model: Module, noisy: np.ndarray) -> np.ndarray:
    """Inference-mode forward with no state left behind."""
    was_training = model.training
    model.eval()
    try:
        return model.forward(Tensor(noisy)).values
    finally:
        if was_training:
            model.train()


def aux_estimator_step(denoiser: TinyDenoiser, estimator: ErrorEstimator,
                       opt: Adam, clean: np.ndarray, noisy: np.ndarray,
                       p: int) -> float:
    """One estimator update: fit the frozen denoiser's current error map.
    The target is a constant; the denoiser is untouched."""
    denoised = _frozen_forward(denoiser, noisy)
    target = estimator_target(denoised, clean, p)
    loss = mse_loss(estimator.forward(Tensor(noisy)), Tensor(target))
    if not math.isfinite(loss.item()):
        raise FloatingPointError("non-finite estimator loss")
    loss.backward()
    opt.step()
    return loss.item()


def aux_denoiser_step(denoiser: TinyDenoiser, estimator: ErrorEstimator,
                      opt: Adam, clean: np.ndarray, noisy: np.ndarray,
                      p: int, aux_weight: float) -> tuple[float, float]:
    """One denoiser update: plain MSE plus the coupling term, whose
    gradient reaches the denoiser through the error-map target. The
    estimator output is a frozen constant. Returns (main, aux) losses."""
    denoised = denoiser.forward(Tensor(noisy))
    clean_t = Tensor(clean)
    main = mse_loss(denoised, clean_t)
    aux_value = 0.0
    if aux_weight > 0.0:
        est_out = _frozen_forward(estimator, noisy)
        aux = mse_loss(Tensor(est_out), _target_graph(denoised, clean_t, p))
        total = add(main, scale(aux, aux_weight))
        aux_value = aux.item()
    else:
        total = main
    if not math.isfinite(total.item()):
        raise FloatingPointError("non-finite denoiser loss")
    total.backward()
    opt.step()
    return main.item(), aux_value


def train_with_auxiliary_loss(denoiser: TinyDenoiser, estimator: ErrorEstimator,
                              clean_patches,
                              config: AuxTrainConfig) -> list[EpochRecord]:
    """Alternating estimator/denoiser training, estimator first within each
    batch. Data draws mirror train_denoiser exactly, so aux_weight 0 yields
    a bit-identical denoiser under the same seed."""
    if config.mode not in ("l1", "l2"):
        raise ValueError(f"estimator training needs mode l1 or l2, got {config.mode!r}")
    patches = _as_patch_array(clean_patches)
    train, val = _split_train_val(patches, config.val_fraction)
    rng_data = np.random.default_rng([config.seed, 1])
    rng_val = np.random.default_rng([config.seed, 2])
    val_clean, val_noisy = _make_val_set(val, config, rng_val)

    denoiser.train()
    estimator.train()
    opt_d = Adam(denoiser.named_parameters(), lr=config.lr)
    opt_e = Adam(estimator.named_parameters(), lr=config.lr)
    history: list[EpochRecord] = []
    for epoch in range(1, config.epochs + 1):
        lr = denoiser_lr(epoch, config)
        opt_d.lr = lr
        opt_e.lr = lr
        mains, auxes = [], []
        for batch_no, (clean, noisy) in enumerate(
                _epoch_batches(train, config, rng_data)):
            try:
                aux_estimator_step(denoiser, estimator, opt_e, clean, noisy,
                                   config.p)
                main, aux = aux_denoiser_step(denoiser, estimator, opt_d,
                                              clean, noisy, config.p,
                                              config.aux_weight)
            except FloatingPointError as exc:
                raise FloatingPointError(
                    f"epoch {epoch} batch {batch_no}: {exc}") from exc
            mains.append(main)
            auxes.append(aux)
        history.append(EpochRecord(
            epoch=epoch, lr=lr, train_loss=float(np.mean(mains)),
            val_psnr_db=_val_psnr(denoiser, val_clean, val_noisy),
            aux_loss=float(np.mean(auxes))))
    return history


def train_estimator(denoiser: TinyDenoiser, estimator: ErrorEstimator,
                    clean_patches, config: AuxTrainConfig) -> list[float]:
    """Fit the estimator against a fully frozen denoiser. Returns the mean
    estimator loss per epoch."""
    patches = _as_patch_array(clean_patches)
    train, _ = _split_train_val(patches, config.val_fraction)
    rng_data = np.random.default_rng([config.seed, 1])
    estimator.train()
    opt_e = Adam(estimator.named_parameters(), lr=config.lr)
    losses: list[float] = []
    for epoch in range(1, config.epochs + 1):
        opt_e.lr = denoiser_lr(epoch, config)
        batch_losses = [
            aux_estimator_step(denoiser, estimator, opt_e, clean, noisy, config.p)
            for clean, noisy in _epoch_batches(train, config, rng_data)]
        losses.append(float(np.mean(batch_losses)))
    return losses


class ImageLearningDenoiser(Module):
    """A residual denoiser with a second head that predicts the clean
    image from the shared trunk. The auxiliary image loss reaches the
    trunk through this head."""

    def __init__(self, base: TinyDenoiser, rng: np.random.Generator | None = None):
        super().__init__()
        self.base = base
        self.image_head = Conv2d(base.width, 1, 3,
                                 rng=rng if rng is not None else np.random.default_rng())

    def forward(self, x) -> tuple[Tensor, Tensor]:
        """(denoised via noise head, direct image prediction)."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        feats = self.base.features(x)
        denoised = sub(x, self.base.tail(feats))
        return denoised, self.image_head(feats)

    def denoise(self, noisy: np.ndarray) -> np.ndarray:
        return self.base.denoise(noisy)


def train_image_learning_aux(model: ImageLearningDenoiser, clean_patches,
                             config: AuxTrainConfig) -> list[EpochRecord]:
    """Single-step training of both heads: residual MSE plus aux_weight
    times the image head's MSE. aux_weight 0 reduces to plain residual
    training of the base model, bit for bit."""
    if config.mode != "image":
        raise ValueError(f"expected mode 'image', got {config.mode!r}")
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
        mains, auxes = [], []
        for batch_no, (clean, noisy) in enumerate(
                _epoch_batches(train, config, rng_data)):
            denoised, image_pred = model.forward(Tensor(noisy))
            clean_t = Tensor(clean)
            main = mse_loss(denoised, clean_t)
            aux_value = 0.0
            if config.aux_weight > 0.0:
                aux = mse_loss(image_pred, clean_t)
                total = add(main, scale(aux, config.aux_weight))
                aux_value = aux.item()
            else:
                total = main
            if not math.isfinite(total.item()):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch} batch {batch_no}")
            total.backward()
            opt.step()
            mains.append(main.item())
            auxes.append(aux_value)
        history.append(EpochRecord(
            epoch=epoch, lr=opt.lr, train_loss=float(np.mean(mains)),
            val_psnr_db=_val_psnr(model.base, val_clean, val_noisy),
            aux_loss=float(np.mean(auxes))))
    return history


def head_gap(model: ImageLearningDenoiser, noisy: np.ndarray) -> float:
    """Mean absolute disagreement between the two heads' clean estimates
    on a (B,1,H,W) batch, inference mode."""
    was_training = model.training
    model.eval()
    try:
        denoised, image_pred = model.forward(Tensor(noisy))
    finally:
        if was_training:
            model.train()
    return float(np.mean(np.abs(denoised.values - image_pred.values)))


def psnr_stability(psnr_history, window: int = 10) -> float:
    """Oscillation score: population standard deviation of the last
    `window` per-epoch PSNR values."""
    values = np.asarray(list(psnr_history), dtype=np.float64)
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    if values.size < window:
        raise ValueError(
            f"history has {values.size} epochs, needs at least {window}")
    return float(np.std(values[-window:], ddof=0))


def stability_report(clean_patches, config: AuxTrainConfig,
                     depth: int = 7, width: int = 24) -> list[dict]:
    """Train the plain baseline and all three auxiliary configurations
    from identical initial weights, and score each PSNR history's final
    oscillation. Returns one row per configuration."""
    from .denoise import train_denoiser

    rows: list[dict] = []
    runs: list[tuple[str, list[EpochRecord]]] = []

    def fresh_denoiser() -> TinyDenoiser:
        return TinyDenoiser(depth, width, rng=np.random.default_rng([config.seed, 0]))

    base_cfg = DenoiserTrainConfig(
        epochs=config.epochs, batch_size=config.batch_size, lr=config.lr,
        lr_halve_every=config.lr_halve_every, sigma_min=config.sigma_min,
        sigma_max=config.sigma_max, val_sigma=config.val_sigma,
        val_fraction=config.val_fraction, augment=config.augment,
        seed=config.seed)
    runs.append(("baseline", train_denoiser(fresh_denoiser(), clean_patches,
                                            base_cfg)))
    for mode in ("l1", "l2"):
        cfg = AuxTrainConfig(**{**vars(base_cfg), "mode": mode,
                                "aux_weight": config.aux_weight,
                                "stability_window": config.stability_window})
        estimator = ErrorEstimator(rng=np.random.default_rng([config.seed, 3]))
        runs.append((mode, train_with_auxiliary_loss(
            fresh_denoiser(), estimator, clean_patches, cfg)))
    image_cfg = AuxTrainConfig(**{**vars(base_cfg), "mode": "image",
                                  "aux_weight": config.aux_weight,
                                  "stability_window": config.stability_window})
    wrapped = ImageLearningDenoiser(fresh_denoiser(),
                                    rng=np.random.default_rng([config.seed, 4]))
    runs.append(("image", train_image_learning_aux(wrapped, clean_patches,
                                                   image_cfg)))
    for name, history in runs:
        psnrs = [r.val_psnr_db for r in history]
        rows.append({"config": name, "window": config.stability_window,
                     "score": psnr_stability(psnrs, config.stability_window),
                     "final_psnr_db": psnrs[-1]})
    return rows
