"""Layers, parameter containers, Adam, and parameter-file serialization.

Everything here rides on the Tensor graph in autodiff.py. Layers are plain
Python objects; parameters are discovered by scanning attributes in
definition order, which keeps save/load stable without a registration
ceremony.
"""

from __future__ import annotations

import json
import struct
from typing import Callable, Iterator

import numpy as np

from .autodiff import Tensor, _make, as_tensor

_PARAM_MAGIC = b"MFPARAM1"
_PARAM_VERSION = 1


class Parameter(Tensor):
    """A Tensor that always participates in backward passes."""

    def __init__(self, values):
        super().__init__(values, requires_grad=True)


class Module:
    """Base class: attribute-scanned parameters, buffers, train/eval."""

    def __init__(self):
        self.training = True
        self._buffers: dict[str, np.ndarray] = {}

    # -- construction helpers ------------------------------------------

    def register_buffer(self, name: str, values: np.ndarray) -> None:
        """Attach non-learned state (running stats) that still serializes."""
        arr = np.asarray(values, dtype=np.float64)
        self._buffers[name] = arr
        object.__setattr__(self, name, arr)

    # -- traversal -----------------------------------------------------

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for attr, value in vars(self).items():
            if attr.startswith("_"):
                continue
            if isinstance(value, Module):
                yield attr, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{attr}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + attr, value
        for name, child in self._children():
            yield from child.named_parameters(prefix=f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield prefix + name, self._buffers[name]
        for name, child in self._children():
            yield from child.named_buffers(prefix=f"{prefix}{name}.")

    # -- mode and gradient plumbing -------------------------------------

    def train(self) -> "Module":
        self.training = True
        for _, child in self._children():
            child.train()
        return self

    def eval(self) -> "Module":
        self.training = False
        for _, child in self._children():
            child.eval()
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Conv2d(Module):
    """2-D cross-correlation with same padding. Odd kernels only, so the
    output grid lands exactly on the input grid."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 rng: np.random.Generator | None = None, bias: bool = True):
        super().__init__()
        if kernel_size % 2 == 0 or kernel_size < 1:
            raise ValueError(f"kernel_size must be odd and positive, got {kernel_size}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        fan_in = in_channels * kernel_size * kernel_size
        fan_out = out_channels * kernel_size * kernel_size
        if rng is None:
            rng = np.random.default_rng()
        self.weight = Parameter(
            glorot_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size),
                           fan_in, fan_out))
        # A bias ahead of batchnorm is a dead parameter (the mean subtraction
        # cancels it), so conv+BN blocks build with bias=False.
        self.bias = Parameter(np.zeros(out_channels)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        b, c, h, w = x.shape
        if c != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {c}")
        k = self.kernel_size
        pad = k // 2
        weight, bias = self.weight, self.bias
        # One GEMM per kernel tap, in channels-last layout so every
        # contraction is a plain BLAS matmul over the channel axis.
        xp = np.ascontiguousarray(
            np.pad(x.values, ((0, 0), (0, 0), (pad, pad), (pad, pad))
                   ).transpose(0, 2, 3, 1))
        wt = np.ascontiguousarray(weight.values.transpose(2, 3, 1, 0))
        out_t = np.zeros((b, h, w, self.out_channels))
        for di in range(k):
            for dj in range(k):
                out_t += xp[:, di:di + h, dj:dj + w, :] @ wt[di, dj]
        if bias is not None:
            out_t += bias.values
        out = np.ascontiguousarray(out_t.transpose(0, 3, 1, 2))

        def bwd(g):
            g_t = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
            gxp = np.zeros_like(xp)
            gw = np.zeros_like(weight.values)
            for di in range(k):
                for dj in range(k):
                    patch = xp[:, di:di + h, dj:dj + w, :]
                    gw[:, :, di, dj] = np.tensordot(
                        g_t, patch, axes=([0, 1, 2], [0, 1, 2]))
                    gxp[:, di:di + h, dj:dj + w, :] += g_t @ wt[di, dj].T
            gx = np.ascontiguousarray(
                gxp[:, pad:pad + h, pad:pad + w, :].transpose(0, 3, 1, 2))
            if bias is None:
                return gx, gw
            return gx, gw, g.sum(axis=(0, 2, 3))

        parents = (x, weight) if bias is None else (x, weight, bias)
        return _make(out, parents, bwd)


class BatchNorm2d(Module):
    """Per-channel batch normalization over (batch, height, width).

    Normalization uses the biased batch variance; running statistics are
    updated with the unbiased estimate, matching the convention most
    frameworks settled on. Eval mode normalizes with the running stats,
    treated as constants."""

    def __init__(self, num_channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.num_channels = num_channels
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.gamma = Parameter(np.ones(num_channels))
        self.beta = Parameter(np.zeros(num_channels))
        self.register_buffer("running_mean", np.zeros(num_channels))
        self.register_buffer("running_var", np.ones(num_channels))

    def forward(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        b, c, h, w = x.shape
        if c != self.num_channels:
            raise ValueError(f"expected {self.num_channels} channels, got {c}")
        gamma, beta = self.gamma, self.beta
        gshape = (1, c, 1, 1)

        if self.training:
            m = b * h * w
            mu = x.values.mean(axis=(0, 2, 3))
            var = x.values.var(axis=(0, 2, 3))
            if m > 1:
                unbiased = var * m / (m - 1)
            else:
                unbiased = var
            self.running_mean *= 1.0 - self.momentum
            self.running_mean += self.momentum * mu
            self.running_var *= 1.0 - self.momentum
            self.running_var += self.momentum * unbiased
            inv = 1.0 / np.sqrt(var + self.eps)
            xhat = (x.values - mu.reshape(gshape)) * inv.reshape(gshape)
            out = gamma.values.reshape(gshape) * xhat + beta.values.reshape(gshape)

            def bwd(g):
                inv4 = inv.reshape(gshape)
                dxhat = g * gamma.values.reshape(gshape)
                # Classic fused form: folds the mean/variance chain rule
                # into one expression per channel.
                sum_dxhat = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = (inv4 / m) * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
                dgamma = (g * xhat).sum(axis=(0, 2, 3))
                dbeta = g.sum(axis=(0, 2, 3))
                return gx, dgamma, dbeta

            return _make(out, (x, gamma, beta), bwd)

        inv = 1.0 / np.sqrt(self.running_var + self.eps)
        xhat = (x.values - self.running_mean.reshape(gshape)) * inv.reshape(gshape)
        out = gamma.values.reshape(gshape) * xhat + beta.values.reshape(gshape)

        def bwd_eval(g):
            gx = g * (gamma.values * inv).reshape(gshape)
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            return gx, dgamma, dbeta

        return _make(out, (x, gamma, beta), bwd_eval)


class Dense(Module):
    """Fully connected layer on (batch, features) inputs."""

    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        if rng is None:
            rng = np.random.default_rng()
        self.weight = Parameter(
            glorot_uniform(rng, (in_features, out_features), in_features, out_features))
        self.bias = Parameter(np.zeros(out_features))

    def forward(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        if x.values.ndim != 2 or x.shape[1] != self.in_features:
            raise ValueError(
                f"expected (batch, {self.in_features}), got {x.shape}")
        weight, bias = self.weight, self.bias
        out = x.values @ weight.values + bias.values

        def bwd(g):
            return g @ weight.values.T, x.values.T @ g, g.sum(axis=0)

        return _make(out, (x, weight, bias), bwd)


class Adam:
    """Adam with bias correction. step() consumes and clears the gradients;
    non-finite gradients abort with the offending parameter's path."""

    def __init__(self, named_params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params: list[tuple[str, Parameter]] = list(named_params)
        if not self.params:
            raise ValueError("Adam got no parameters")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self._m = [np.zeros_like(p.values) for _, p in self.params]
        self._v = [np.zeros_like(p.values) for _, p in self.params]

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for (name, p), m, v in zip(self.params, self._m, self._v):
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in '{name}'")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.values -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            p.zero_grad()


# ---------------------------------------------------------------------------
# Parameter-file format: magic, version, JSON manifest, raw float64 LE blobs.


def save_params(module: Module, path) -> None:
    entries = []
    blobs = []
    for name, p in module.named_parameters():
        entries.append({"name": name, "kind": "param", "shape": list(p.shape)})
        blobs.append(np.ascontiguousarray(p.values, dtype="<f8"))
    for name, buf in module.named_buffers():
        entries.append({"name": name, "kind": "buffer", "shape": list(buf.shape)})
        blobs.append(np.ascontiguousarray(buf, dtype="<f8"))
    manifest = json.dumps(entries).encode()
    with open(path, "wb") as fh:
        fh.write(_PARAM_MAGIC)
        fh.write(struct.pack("<II", _PARAM_VERSION, len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob.tobytes())


def load_params(module: Module, path) -> None:
    with open(path, "rb") as fh:
        magic = fh.read(len(_PARAM_MAGIC))
        if magic != _PARAM_MAGIC:
            raise ValueError(f"not a parameter file: bad magic {magic!r}")
        version, mlen = struct.unpack("<II", fh.read(8))
        if version != _PARAM_VERSION:
            raise ValueError(f"unsupported parameter file version {version}")
        entries = json.loads(fh.read(mlen).decode())
        params = dict(module.named_parameters())
        buffers = dict(module.named_buffers())
        expected = [("param", n) for n in params] + [("buffer", n) for n in buffers]
        got = [(e["kind"], e["name"]) for e in entries]
        if sorted(expected) != sorted(got):
            raise ValueError(
                f"parameter file does not match module: file has {got}, "
                f"module wants {expected}")
        for entry in entries:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ValueError("parameter file truncated")
            arr = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
            target = params[entry["name"]] if entry["kind"] == "param" else None
            if target is not None:
                if target.shape != shape:
                    raise ValueError(
                        f"shape mismatch for '{entry['name']}': "
                        f"file {shape}, module {target.shape}")
                target.values[...] = arr
            else:
                buf = buffers[entry["name"]]
                if buf.shape != shape:
                    raise ValueError(
                        f"shape mismatch for buffer '{entry['name']}': "
                        f"file {shape}, module {buf.shape}")
                buf[...] = arr


# ---------------------------------------------------------------------------


def gradient_check(loss_fn: Callable[[], Tensor], module: Module,
                   eps: float = 1e-6, n_samples: int = 24,
                   rng: np.random.Generator | None = None) -> float:
    """Compare backward gradients to central differences.

    Returns the worst relative error max|a - n| / (|a| + |n| + 1e-12) over
    sampled coordinates of every parameter. loss_fn must rebuild the graph
    on each call (it is invoked 2 per checked coordinate + once for the
    analytic pass).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    module.zero_grad()
    loss_fn().backward()
    analytic = {name: p.grad.copy() for name, p in module.named_parameters()}
    module.zero_grad()

    worst = 0.0
    for name, p in module.named_parameters():
        flat = p.values.reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= n_samples else rng.choice(n, size=n_samples, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss_fn().item()
            flat[i] = orig - eps
            lo = loss_fn().item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            a = analytic[name].reshape(-1)[i]
            err = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12)
            worst = max(worst, err)
    return worst
