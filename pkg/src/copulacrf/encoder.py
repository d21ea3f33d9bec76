"""Trainable feature encoder: a small from-scratch CNN plus preprocessing.

Images are (H, W) or (H, W, C) float arrays in [0, 1]. The default
architecture is conv(32,9) -> relu -> maxpool(2) -> conv(64,9) -> relu ->
maxpool(2) -> conv(128,9) -> relu -> maxpool(2) -> fc(128). A passthrough
encoder accepts precomputed feature vectors so the structured layers can be
exercised without image data.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError

DEFAULT_LAYER_SPECS = (
    ("conv", 32, 9), ("relu",), ("pool", 2),
    ("conv", 64, 9), ("relu",), ("pool", 2),
    ("conv", 128, 9), ("relu",), ("pool", 2),
    ("fc", 128),
)

# smallest square input the default stack accepts with valid padding
DEFAULT_INPUT_SIZE = 64


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(C, H, W) -> (C*k*k, Ho*Wo) patch matrix, valid windows only."""
    C, H, W = x.shape
    Ho, Wo = H - k + 1, W - k + 1
    s = x.strides
    patches = np.lib.stride_tricks.as_strided(
        x, (C, k, k, Ho, Wo), (s[0], s[1], s[2], s[1], s[2]))
    return patches.reshape(C * k * k, Ho * Wo)


class ConvLayer:
    """2-D convolution (cross-correlation), stride 1."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray, padding: str = "valid"):
        self.weight = np.asarray(weight, dtype=float)  # (F, C, k, k)
        self.bias = np.asarray(bias, dtype=float)      # (F,)
        if padding not in ("valid", "same"):
            raise ConfigurationError(f"unknown padding mode {padding!r}")
        self.padding = padding

    @property
    def ksize(self) -> int:
        return self.weight.shape[2]

    def out_shape(self, in_shape):
        C, H, W = in_shape
        if C != self.weight.shape[1]:
            raise ConfigurationError(
                f"conv expects {self.weight.shape[1]} input channels, got {C}")
        k = self.ksize
        if self.padding == "same":
            return (self.weight.shape[0], H, W)
        if H < k or W < k:
            raise ConfigurationError(
                f"input {H}x{W} smaller than {k}x{k} valid convolution")
        return (self.weight.shape[0], H - k + 1, W - k + 1)

    def _pad(self, x):
        if self.padding == "valid":
            return x, 0
        p = (self.ksize - 1) // 2
        q = self.ksize - 1 - p
        return np.pad(x, ((0, 0), (p, q), (p, q))), p

    def forward(self, x):
        F, C, k, _ = self.weight.shape
        out_c, Ho, Wo = self.out_shape(x.shape)
        xp, _ = self._pad(x)
        cols = _im2col(xp, k)
        y = (self.weight.reshape(F, -1) @ cols + self.bias[:, None]).reshape(F, Ho, Wo)
        return y, (x.shape, cols)

    def backward(self, grad_y, cache):
        in_shape, cols = cache
        F, C, k, _ = self.weight.shape
        g = grad_y.reshape(F, -1)
        grad_w = (g @ cols.T).reshape(self.weight.shape)
        grad_b = g.sum(axis=1)
        grad_cols = self.weight.reshape(F, -1).T @ g
        # fold patches back onto the (padded) image
        _, H, W = in_shape
        if self.padding == "same":
            p = (k - 1) // 2
            Hp, Wp = H + k - 1, W + k - 1
        else:
            p = 0
            Hp, Wp = H, W
        Ho, Wo = Hp - k + 1, Wp - k + 1
        patches = grad_cols.reshape(C, k, k, Ho, Wo)
        grad_xp = np.zeros((C, Hp, Wp))
        for i in range(k):
            for j in range(k):
                grad_xp[:, i:i + Ho, j:j + Wo] += patches[:, i, j]
        grad_x = grad_xp[:, p:p + H, p:p + W] if self.padding == "same" else grad_xp
        return grad_x, [grad_w, grad_b]

    def params(self):
        return [self.weight, self.bias]

    def set_params(self, arrays):
        self.weight, self.bias = arrays


class ReluLayer:
    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, grad_y, mask):
        return grad_y * mask, []

    def params(self):
        return []

    def set_params(self, arrays):
        pass


class MaxPoolLayer:
    """Non-overlapping max pooling; odd trailing rows/columns are dropped."""

    def __init__(self, size: int = 2):
        self.size = size

    def out_shape(self, in_shape):
        C, H, W = in_shape
        Ho, Wo = H // self.size, W // self.size
        if Ho < 1 or Wo < 1:
            raise ConfigurationError(f"input {H}x{W} too small for pool({self.size})")
        return (C, Ho, Wo)

    def forward(self, x):
        p = self.size
        C, H, W = x.shape
        Ho, Wo = H // p, W // p
        blocks = x[:, :Ho * p, :Wo * p].reshape(C, Ho, p, Wo, p)
        windows = blocks.transpose(0, 1, 3, 2, 4).reshape(C, Ho, Wo, p * p)
        arg = windows.argmax(axis=3)
        y = np.take_along_axis(windows, arg[..., None], axis=3)[..., 0]
        return y, (x.shape, arg)

    def backward(self, grad_y, cache):
        in_shape, arg = cache
        p = self.size
        C, H, W = in_shape
        Ho, Wo = H // p, W // p
        gwin = np.zeros((C, Ho, Wo, p * p))
        np.put_along_axis(gwin, arg[..., None], grad_y[..., None], axis=3)
        grad_x = np.zeros((C, H, W))
        grad_x[:, :Ho * p, :Wo * p] = (
            gwin.reshape(C, Ho, Wo, p, p).transpose(0, 1, 3, 2, 4).reshape(C, Ho * p, Wo * p))
        return grad_x, []

    def params(self):
        return []

    def set_params(self, arrays):
        pass


class FcLayer:
    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        self.weight = np.asarray(weight, dtype=float)  # (out, in)
        self.bias = np.asarray(bias, dtype=float)

    def out_shape(self, in_shape):
        n = int(np.prod(in_shape))
        if n != self.weight.shape[1]:
            raise ConfigurationError(
                f"fc expects {self.weight.shape[1]} inputs, got {n}")
        return (self.weight.shape[0],)

    def forward(self, x):
        flat = x.reshape(-1)
        return self.weight @ flat + self.bias, (x.shape, flat)

    def backward(self, grad_y, cache):
        in_shape, flat = cache
        grad_w = np.outer(grad_y, flat)
        grad_b = grad_y.copy()
        grad_x = (self.weight.T @ grad_y).reshape(in_shape)
        return grad_x, [grad_w, grad_b]

    def params(self):
        return [self.weight, self.bias]

    def set_params(self, arrays):
        self.weight, self.bias = arrays


@dataclass
class EncoderParams:
    """Encoder weights plus architecture; kind 'conv' or 'passthrough'."""

    kind: str
    feature_dim: int
    input_shape: tuple | None = None        # (H, W, C) for conv
    padding: str = "valid"
    layers: list = field(default_factory=list)

    def n_params(self) -> int:
        return sum(a.size for layer in self.layers for a in layer.params())

    def pack(self) -> np.ndarray:
        arrays = [a.ravel() for layer in self.layers for a in layer.params()]
        return np.concatenate(arrays) if arrays else np.empty(0)

    def unpack(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.n_params(),):
            raise ValueError(f"expected {self.n_params()} encoder parameters")
        pos = 0
        for layer in self.layers:
            new = []
            for a in layer.params():
                new.append(flat[pos:pos + a.size].reshape(a.shape).copy())
                pos += a.size
            layer.set_params(new)

    def layer_specs(self):
        specs = []
        for layer in self.layers:
            if isinstance(layer, ConvLayer):
                specs.append(("conv", layer.weight.shape[0], layer.ksize))
            elif isinstance(layer, ReluLayer):
                specs.append(("relu",))
            elif isinstance(layer, MaxPoolLayer):
                specs.append(("pool", layer.size))
            elif isinstance(layer, FcLayer):
                specs.append(("fc", layer.weight.shape[0]))
        return specs


def passthrough_encoder(feature_dim: int) -> EncoderParams:
    """Identity encoder over precomputed feature vectors."""
    if feature_dim < 1:
        raise ConfigurationError("feature_dim must be >= 1")
    return EncoderParams(kind="passthrough", feature_dim=feature_dim)


def build_encoder(layer_specs=DEFAULT_LAYER_SPECS,
                  input_shape=(DEFAULT_INPUT_SIZE, DEFAULT_INPUT_SIZE, 1),
                  padding: str = "valid", seed: int = 0) -> EncoderParams:
    """Initialize a conv encoder: zero biases, fan-in-scaled uniform weights."""
    rng = np.random.default_rng(seed)
    H, W, C = input_shape
    if H < 1 or W < 1 or C < 1:
        raise ConfigurationError(f"bad input shape {input_shape}")
    shape = (C, H, W)
    layers = []
    feature_dim = None
    for spec in layer_specs:
        kind = spec[0]
        if kind == "conv":
            _, filters, ksize = spec
            fan_in = shape[0] * ksize * ksize
            limit = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-limit, limit, size=(filters, shape[0], ksize, ksize))
            layer = ConvLayer(w, np.zeros(filters), padding)
        elif kind == "relu":
            layer = ReluLayer()
        elif kind == "pool":
            layer = MaxPoolLayer(spec[1] if len(spec) > 1 else 2)
        elif kind == "fc":
            out_dim = spec[1]
            fan_in = int(np.prod(shape))
            limit = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-limit, limit, size=(out_dim, fan_in))
            layer = FcLayer(w, np.zeros(out_dim))
            feature_dim = out_dim
        else:
            raise ConfigurationError(f"unknown layer kind {kind!r}")
        shape = layer.out_shape(shape)
        layers.append(layer)
    if feature_dim is None or len(shape) != 1:
        raise ConfigurationError("encoder must end with a fully-connected layer")
    return EncoderParams(kind="conv", feature_dim=feature_dim,
                         input_shape=(H, W, C), padding=padding, layers=layers)


def _to_chw(x: np.ndarray, params: EncoderParams) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        x = x[None, :, :]
    elif x.ndim == 3:
        x = np.moveaxis(x, 2, 0)
    else:
        raise ConfigurationError(f"image must be 2-D or 3-D, got shape {x.shape}")
    H, W, C = params.input_shape
    if x.shape != (C, H, W):
        raise ConfigurationError(
            f"image shape {x.shape[1:]} x{x.shape[0]}ch does not match encoder "
            f"input {H}x{W} x{C}ch")
    return x


def forward(x, params: EncoderParams) -> np.ndarray:
    """Feature vector f(x); identity for passthrough encoders."""
    if params.kind == "passthrough":
        f = np.asarray(x, dtype=float)
        if f.shape != (params.feature_dim,):
            raise ConfigurationError(
                f"passthrough input shape {f.shape} != ({params.feature_dim},)")
        return f.copy()
    h = _to_chw(x, params)
    for layer in params.layers:
        h, _ = layer.forward(h)
    return h


def backward(x, params: EncoderParams, upstream_grad):
    """Gradients (flat parameter vector in pack() order, grad w.r.t. x)."""
    upstream_grad = np.asarray(upstream_grad, dtype=float)
    if upstream_grad.shape != (params.feature_dim,):
        raise ValueError(
            f"upstream gradient shape {upstream_grad.shape} != ({params.feature_dim},)")
    if params.kind == "passthrough":
        return np.empty(0), upstream_grad.copy()
    h = _to_chw(x, params)
    caches = []
    for layer in params.layers:
        h, cache = layer.forward(h)
        caches.append(cache)
    grad = upstream_grad
    param_grads = [None] * len(params.layers)
    for i in range(len(params.layers) - 1, -1, -1):
        grad, pg = params.layers[i].backward(grad, caches[i])
        param_grads[i] = pg
    flat = [a.ravel() for pg in param_grads for a in pg]
    grad_flat = np.concatenate(flat) if flat else np.empty(0)
    return grad_flat, grad


def contrast_normalize(x) -> np.ndarray:
    """Standardize per image then rescale affinely to [0, 1].

    A constant image carries no contrast; it maps to all 0.5 with a warning.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("image contains non-finite values")
    std = x.std()
    if std == 0.0:
        warnings.warn("constant image: contrast normalization degenerate, "
                      "returning all 0.5", RuntimeWarning, stacklevel=2)
        return np.full_like(x, 0.5)
    z = (x - x.mean()) / std
    return (z - z.min()) / (z.max() - z.min())


def random_crop(x, fraction: float, rng_seed: int) -> np.ndarray:
    """Crop a uniformly placed box of floor(fraction * dims); seeded."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"crop fraction must be in (0, 1], got {fraction}")
    x = np.asarray(x, dtype=float)
    H, W = x.shape[:2]
    h, w = int(np.floor(fraction * H)), int(np.floor(fraction * W))
    if h < 1 or w < 1:
        raise ValueError(f"crop fraction {fraction} collapses a {H}x{W} image")
    rng = np.random.default_rng(rng_seed)
    top = int(rng.integers(0, H - h + 1))
    left = int(rng.integers(0, W - w + 1))
    return x[top:top + h, left:left + w, ...].copy()
