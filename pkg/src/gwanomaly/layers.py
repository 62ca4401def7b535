"""1-D sequence layers on top of :mod:`gwanomaly.autodiff`.

All sequence tensors are channels-first: ``(batch, channels, length)``.
Convolution, batch normalization, max pooling and softmax are single tape
primitives with hand-written backward passes; pooling heads and dense layers
are compositions of autodiff ops.
"""
from __future__ import annotations

import math
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from .autodiff import DiffArray
from .errors import DomainError, ShapeError

_DTYPES = {"single": np.float32, "double": np.float64}


def same_out_len(length: int, stride: int) -> int:
    return -(-length // stride)


def conv_out_len(length: int, kernel: int, stride: int, padding: str) -> int:
    if padding == "same":
        return same_out_len(length, stride)
    if padding == "valid":
        return (length - kernel) // stride + 1
    raise ValueError(f"unknown padding {padding!r}")


# ---------------------------------------------------------------------------
# functional primitives
# ---------------------------------------------------------------------------

def conv1d(x: DiffArray, weight: DiffArray, bias: Optional[DiffArray] = None,
           stride: int = 1, padding: str = "same") -> DiffArray:
    """Cross-correlation of ``x`` (B, C, L) with ``weight`` (O, C, K).

    ``same`` padding yields ``ceil(L / stride)`` outputs and pads zeros
    symmetrically, putting the odd zero on the right.
    """
    if x.ndim != 3:
        raise ShapeError(f"conv1d expects (batch, channels, length), got {x.shape}")
    B, C, L = x.shape
    O, Ci, K = weight.shape
    if Ci != C:
        raise ShapeError(f"conv1d channel mismatch: input has {C}, weight expects {Ci}")
    if stride < 1:
        raise ValueError("stride must be positive")
    if padding == "same":
        out_len = same_out_len(L, stride)
        total = max((out_len - 1) * stride + K - L, 0)
        left, right = total // 2, total - total // 2
    elif padding == "valid":
        if L < K:
            raise ShapeError(f"input length {L} shorter than kernel {K}")
        out_len = (L - K) // stride + 1
        left = right = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    # (C, B*Lp) layout: each kernel tap becomes one large GEMM over a shifted view.
    Lp = L + left + right
    xt = np.zeros((C, B, Lp), dtype=x.dtype)
    xt[:, :, left:left + L] = x.data.transpose(1, 0, 2)
    xt = xt.reshape(C, B * Lp)
    span = B * Lp - K + 1
    w = weight.data
    taps = [np.ascontiguousarray(w[:, :, k]) for k in range(K)]
    if C < 16:
        # few input channels: one GEMM over stacked taps beats K skinny ones
        cols = np.empty((K, C, span), dtype=x.dtype)
        for k in range(K):
            cols[k] = xt[:, k:k + span]
        acc = np.concatenate(taps, axis=1) @ cols.reshape(K * C, span)
    else:
        acc = taps[0] @ xt[:, :span]
        for k in range(1, K):
            acc += taps[k] @ xt[:, k:k + span]
    full = np.empty((O, B * Lp), dtype=acc.dtype)
    full[:, :span] = acc
    full[:, span:] = 0
    full = full.reshape(O, B, Lp)
    sel = slice(0, stride * (out_len - 1) + 1, stride)
    out = full[:, :, sel].transpose(1, 0, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, O, 1)
    out = np.ascontiguousarray(out)

    def bw(g, needs):
        gfull = np.zeros((O, B, Lp), dtype=g.dtype)
        gfull[:, :, sel] = g.transpose(1, 0, 2)
        gflat = gfull.reshape(O, B * Lp)[:, :span]
        dx = dw = db = None
        if needs[0]:
            dxt = np.zeros((C, B * Lp), dtype=g.dtype)
            for k in range(K):
                dxt[:, k:k + span] += taps[k].T @ gflat
            dx = dxt.reshape(C, B, Lp)[:, :, left:left + L].transpose(1, 0, 2)
        if needs[1]:
            dw = np.empty_like(w)
            for k in range(K):
                dw[:, :, k] = gflat @ xt[:, k:k + span].T
        if len(needs) > 2 and needs[2]:
            db = g.sum(axis=(0, 2))
        return dx, dw, db

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return ad.record("conv1d", inputs, out, bw)


def batch_norm(x: DiffArray, gamma: DiffArray, beta: DiffArray,
               running_mean: np.ndarray, running_var: np.ndarray, training: bool,
               momentum: float = 0.1, eps: float = 1e-5) -> DiffArray:
    """Per-channel normalization over every axis except axis 1.

    In training mode the batch statistics (population variance) are used and
    the running buffers are updated in place by an exponential moving average.
    """
    if x.ndim < 2:
        raise ShapeError(f"batch_norm needs at least 2 dims, got {x.shape}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"affine parameters must have shape ({C},)")
    axes = (0,) + tuple(range(2, x.ndim))
    view = (1, C) + (1,) * (x.ndim - 2)
    count = x.size // C if C else 0
    if training:
        if count < 2:
            raise DomainError("training-mode batch norm needs at least 2 values per channel")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean, var = running_mean.copy(), running_var.copy()
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype).reshape(view)
    xhat = (x.data - mean.reshape(view).astype(x.dtype)) * inv
    gview = gamma.data.reshape(view)
    out = gview * xhat + beta.data.reshape(view)

    def bw(g, needs):
        dbeta = g.sum(axis=axes)
        dgamma = (g * xhat).sum(axis=axes)
        if training:
            # sum(dxhat) = gamma * dbeta and sum(dxhat * xhat) = gamma * dgamma
            scale = gview * inv / count
            dx = scale * (count * g - dbeta.reshape(view) - xhat * dgamma.reshape(view))
        else:
            dx = g * (gview * inv)
        return dx, dgamma, dbeta

    return ad.record("batch_norm", (x, gamma, beta), out, bw)


def maxpool1d(x: DiffArray, window: int, stride: Optional[int] = None) -> DiffArray:
    """Sliding-window maximum along the last axis; trailing partial windows are dropped."""
    stride = window if stride is None else stride
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be positive")
    L = x.shape[-1]
    if L < window:
        raise ShapeError(f"length {L} shorter than pooling window {window}")
    out_len = (L - window) // stride + 1
    win = sliding_window_view(x.data, window, axis=-1)[..., ::stride, :][..., :out_len, :]
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    src = x.shape

    def bw(g, needs):
        dx = np.zeros(src, dtype=g.dtype)
        span = stride * (out_len - 1) + 1
        for k in range(window):
            dx[..., k:k + span:stride] += np.where(idx == k, g, 0)
        return (dx,)

    return ad.record("maxpool1d", (x,), np.ascontiguousarray(out), bw)


def global_pool_head(x: DiffArray) -> DiffArray:
    """(B, C, L) -> (B, 2C): per-channel max over time followed by per-channel mean."""
    if x.ndim != 3:
        raise ShapeError(f"expected (batch, channels, length), got {x.shape}")
    return ad.concat([ad.reduce("max", x, axis=2), ad.reduce("mean", x, axis=2)], axis=1)


def softmax(logits: DiffArray) -> DiffArray:
    if logits.ndim != 2:
        raise ShapeError(f"softmax expects (batch, classes), got {logits.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g, needs):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return ad.record("softmax", (logits,), out, bw)


def dense(x: DiffArray, weight: DiffArray, bias: Optional[DiffArray] = None) -> DiffArray:
    y = ad.matmul(x, ad.transpose(weight))
    return y if bias is None else ad.add(y, bias)


# ---------------------------------------------------------------------------
# parameterized layers
# ---------------------------------------------------------------------------

def _he_normal(rng: np.random.Generator, shape, fan_in: int, precision: str) -> DiffArray:
    w = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
    return DiffArray(w.astype(_DTYPES[precision]), requires_grad=True, precision=precision)


def _zeros(shape, precision: str) -> DiffArray:
    return DiffArray(np.zeros(shape, _DTYPES[precision]), requires_grad=True, precision=precision)


def _ones(shape, precision: str) -> DiffArray:
    return DiffArray(np.ones(shape, _DTYPES[precision]), requires_grad=True, precision=precision)


class Layer:
    """Minimal container protocol: named parameters, named buffers, forward."""

    def parameters(self) -> dict[str, DiffArray]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def __call__(self, x: DiffArray, train: bool = False) -> DiffArray:
        return self.forward(x, train)


class Conv1dLayer(Layer):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int = 1,
                 padding: str = "same", rng: Optional[np.random.Generator] = None,
                 precision: str = "single"):
        if kernel < 1:
            raise ValueError("kernel must be >= 1")
        if stride < 1:
            raise ValueError("stride must be >= 1")
        if padding not in ("same", "valid"):
            raise ValueError(f"unknown padding {padding!r}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.in_channels, self.out_channels, self.kernel = in_channels, out_channels, kernel
        self.stride, self.padding = stride, padding
        self.weight = _he_normal(rng, (out_channels, in_channels, kernel), in_channels * kernel, precision)
        self.bias = _zeros((out_channels,), precision)

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def out_len(self, length: int) -> int:
        return conv_out_len(length, self.kernel, self.stride, self.padding)

    def forward(self, x, train=False):
        return conv1d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm1dLayer(Layer):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5,
                 precision: str = "single"):
        if not 0.0 < momentum <= 1.0:
            raise ValueError("momentum must lie in (0, 1]")
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.gamma = _ones((channels,), precision)
        self.beta = _zeros((channels,), precision)
        self.running_mean = np.zeros(channels, _DTYPES[precision])
        self.running_var = np.ones(channels, _DTYPES[precision])

    def parameters(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, train=False):
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                          training=train, momentum=self.momentum, eps=self.eps)


class DenseLayer(Layer):
    def __init__(self, in_features: int, out_features: int,
                 rng: Optional[np.random.Generator] = None, precision: str = "single"):
        rng = np.random.default_rng(0) if rng is None else rng
        self.weight = _he_normal(rng, (out_features, in_features), in_features, precision)
        self.bias = _zeros((out_features,), precision)

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x, train=False):
        return dense(x, self.weight, self.bias)


class ResidualDifferenceBlock(Layer):
    """Conv-BN-ReLU-Conv-BN path producing C, combined as ``C - P(x)``.

    ``P`` is the identity when channels and length are preserved, otherwise a
    1x1 convolution with the path's stride. With ``post_relu`` the difference
    goes through a ReLU on the way out.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3, stride: int = 1,
                 post_relu: bool = True, rng: Optional[np.random.Generator] = None,
                 precision: str = "single"):
        rng = np.random.default_rng(0) if rng is None else rng
        self.conv1 = Conv1dLayer(in_channels, out_channels, kernel, stride, "same", rng, precision)
        self.bn1 = BatchNorm1dLayer(out_channels, precision=precision)
        self.conv2 = Conv1dLayer(out_channels, out_channels, kernel, 1, "same", rng, precision)
        self.bn2 = BatchNorm1dLayer(out_channels, precision=precision)
        if in_channels == out_channels and stride == 1:
            self.proj: Optional[Conv1dLayer] = None
        else:
            self.proj = Conv1dLayer(in_channels, out_channels, 1, stride, "same", rng, precision)
        self.post_relu = post_relu

    def _children(self):
        kids = {"conv1": self.conv1, "bn1": self.bn1, "conv2": self.conv2, "bn2": self.bn2}
        if self.proj is not None:
            kids["proj"] = self.proj
        return kids

    def parameters(self):
        return {f"{k}.{n}": p for k, layer in self._children().items() for n, p in layer.parameters().items()}

    def buffers(self):
        return {f"{k}.{n}": b for k, layer in self._children().items() for n, b in layer.buffers().items()}

    def conv_path(self, x: DiffArray, train: bool = False) -> DiffArray:
        h = ad.relu(self.bn1(self.conv1(x, train), train))
        return self.bn2(self.conv2(h, train), train)

    def project(self, x: DiffArray, train: bool = False) -> DiffArray:
        return x if self.proj is None else self.proj(x, train)

    def forward(self, x, train=False):
        y = ad.sub(self.conv_path(x, train), self.project(x, train))
        return ad.relu(y) if self.post_relu else y


def residual_difference_forward(block: ResidualDifferenceBlock, x: DiffArray, train: bool = False) -> DiffArray:
    return block.forward(x, train)
