"""Forward/backward kernels over NHWC numpy arrays.

Every kernel takes a leading batch axis. A temporal input of ``t`` frames and
``f`` coefficients is ``(N, t, 1, f)``; the 2D image form is ``(N, t, f, 1)``.
Convolution weights are ``(k_h, k_w, c_in, c_out)`` and never carry a bias,
except in batch-norm-folded inference models.

Padding is always SAME: the output length is ``ceil(in / stride)`` and the
extra zero falls on the trailing side when the total padding is odd.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

BN_EPSILON = 1e-3
BN_MOMENTUM = 0.99

_op_counter = None


class OpCounter:
    """Multiply and add counts accumulated by conv/FC kernels while active."""

    def __init__(self):
        self.mults = 0
        self.adds = 0

    @property
    def flops(self) -> int:
        return self.mults + self.adds

    def _matmul(self, rows: int, inner: int, cols: int) -> None:
        # one multiply and one accumulate per term
        self.mults += rows * inner * cols
        self.adds += rows * inner * cols


@contextlib.contextmanager
def count_ops():
    global _op_counter
    prev, _op_counter = _op_counter, OpCounter()
    try:
        yield _op_counter
    finally:
        _op_counter = prev


def same_padding(in_len: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """Return ``(out_len, pad_before, pad_after)`` for SAME padding."""
    out = math.ceil(in_len / stride)
    total = max((out - 1) * stride + kernel - in_len, 0)
    return out, total // 2, total - total // 2


def _as_pair(v) -> tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


# ---------------------------------------------------------------------------
# Convolution


def _pad_hw(x, ph0, ph1, pw0, pw1):
    if not (ph0 or ph1 or pw0 or pw1):
        return x
    n, h, w, c = x.shape
    xp = np.zeros((n, h + ph0 + ph1, w + pw0 + pw1, c), dtype=x.dtype)
    xp[:, ph0 : ph0 + h, pw0 : pw0 + w] = x
    return xp


def _im2col(x, kh, kw, sh, sw):
    # columns ordered (k_h, k_w, c_in) to match w.reshape(-1, c_out)
    n, h, w, c = x.shape
    ho, ph0, ph1 = same_padding(h, kh, sh)
    wo, pw0, pw1 = same_padding(w, kw, sw)
    xp = _pad_hw(x, ph0, ph1, pw0, pw1)
    taps = [
        xp[:, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw, :]
        for i in range(kh)
        for j in range(kw)
    ]
    # a lone strided tap must be copied too: matmul on a strided view takes a
    # different summation path and the result would differ in the last bit
    cols = np.ascontiguousarray(taps[0]) if len(taps) == 1 else np.concatenate(taps, axis=-1)
    return cols.reshape(n * ho * wo, kh * kw * c), (ho, wo), (ph0, pw0), xp.shape


def conv2d_forward(x, w, stride=(1, 1), bias=None) -> np.ndarray:
    """SAME 2D convolution. ``x``: (N, H, W, C_in); ``w``: (k_h, k_w, C_in, C_out)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    kh, kw, cin, cout = w.shape
    sh, sw = _as_pair(stride)
    cols, (ho, wo), _, _ = _im2col(x, kh, kw, sh, sw)
    out = cols @ w.reshape(kh * kw * cin, cout)
    if _op_counter is not None:
        _op_counter._matmul(cols.shape[0], cols.shape[1], cout)
    if bias is not None:
        out += bias
    return out.reshape(x.shape[0], ho, wo, cout)


def conv_temporal_forward(x, w, stride: int = 1, bias=None) -> np.ndarray:
    """SAME convolution along time. ``x``: (N, t, 1, C_in); ``w``: (k, 1, C_in, C_out).

    Every output frame sees all input channels, i.e. the whole MFCC vector.
    """
    if x.ndim != 4 or x.shape[2] != 1 or w.ndim != 4 or w.shape[1] != 1 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"temporal conv: input {x.shape} incompatible with kernel {w.shape}")
    k, _, cin, cout = w.shape
    n, t = x.shape[:2]
    to, p0, p1 = same_padding(t, k, stride)
    seq = np.zeros((n, t + p0 + p1, cin), dtype=x.dtype)
    seq[:, p0 : p0 + t] = x[:, :, 0, :]
    # k consecutive frames are one contiguous run of k*cin values, so the
    # im2col matrix is a strided view of the padded sequence; one copy makes
    # it BLAS-compatible
    item = seq.itemsize
    view = np.ndarray(
        (n, to, k * cin), dtype=seq.dtype, buffer=seq,
        strides=(seq.shape[1] * cin * item, stride * cin * item, item),
    )
    cols = np.ascontiguousarray(view).reshape(n * to, k * cin)
    out = cols @ w.reshape(k * cin, cout)
    if _op_counter is not None:
        _op_counter._matmul(cols.shape[0], cols.shape[1], cout)
    if bias is not None:
        out += bias
    return out.reshape(n, to, 1, cout)


def conv_backward(x, w, grad_out, stride=(1, 1)) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``sum(grad_out * conv2d_forward(x, w, stride))`` w.r.t. ``x`` and ``w``.

    Also serves the temporal case, which is the ``k_w = 1`` special case.
    """
    kh, kw, cin, cout = w.shape
    sh, sw = _as_pair(stride)
    if x.ndim != 4 or x.shape[3] != cin:
        raise ShapeError(f"conv backward: input {x.shape} incompatible with kernel {w.shape}")
    cols, (ho, wo), (ph0, pw0), padded_shape = _im2col(x, kh, kw, sh, sw)
    if grad_out.shape != (x.shape[0], ho, wo, cout):
        raise ShapeError(f"conv backward: grad shape {grad_out.shape} != {(x.shape[0], ho, wo, cout)}")
    g = grad_out.reshape(-1, cout)
    grad_w = (cols.T @ g).reshape(w.shape)
    gcols = (g @ w.reshape(-1, cout).T).reshape(x.shape[0], ho, wo, kh, kw, cin)
    gxp = np.zeros(padded_shape, dtype=grad_out.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, i : i + sh * ho : sh, j : j + sw * wo : sw, :] += gcols[:, :, :, i, j, :]
    h, wd = x.shape[1:3]
    return gxp[:, ph0 : ph0 + h, pw0 : pw0 + wd, :], grad_w


# ---------------------------------------------------------------------------
# Batch normalization


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    moving_mean: np.ndarray
    moving_var: np.ndarray
    epsilon: float = BN_EPSILON
    momentum: float = BN_MOMENTUM

    @classmethod
    def identity(cls, channels: int, dtype=np.float32) -> "BatchNormParams":
        return cls(
            np.ones(channels, dtype),
            np.zeros(channels, dtype),
            np.zeros(channels, dtype),
            np.ones(channels, dtype),
        )


def batch_moments(x) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and (biased) variance over every non-channel axis."""
    axes = tuple(range(x.ndim - 1))
    return x.mean(axis=axes), x.var(axis=axes)


def batchnorm_forward(x, params: BatchNormParams, mode: str = "infer") -> np.ndarray:
    """Normalize the last axis.

    ``infer`` uses the moving statistics. ``train`` normalizes with the batch
    moments and folds them into the moving statistics in place.
    """
    if x.shape[-1] != params.gamma.shape[0]:
        raise ShapeError(f"batchnorm: {x.shape[-1]} channels, params for {params.gamma.shape[0]}")
    if mode == "infer":
        mean, var = params.moving_mean, params.moving_var
    elif mode == "train":
        mean, var = batch_moments(x)
        m = params.momentum
        params.moving_mean *= m
        params.moving_mean += ((1 - m) * mean).astype(params.moving_mean.dtype)
        params.moving_var *= m
        params.moving_var += ((1 - m) * var).astype(params.moving_var.dtype)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    scale = params.gamma / np.sqrt(var + params.epsilon)
    return (x - mean) * scale.astype(x.dtype) + params.beta.astype(x.dtype)


def batchnorm_backward(x, params: BatchNormParams, grad_out):
    """Train-mode gradients, propagated through the batch mean and variance."""
    mean, var = batch_moments(x)
    inv_std = 1.0 / np.sqrt(var + params.epsilon)
    xhat = (x - mean) * inv_std
    axes = tuple(range(x.ndim - 1))
    m = x.size // x.shape[-1]
    grad_beta = grad_out.sum(axis=axes)
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    gxhat = grad_out * params.gamma
    grad_x = (inv_std / m) * (m * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes))
    return grad_x.astype(x.dtype), grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# Elementwise, pooling, dense


def relu(x) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x, grad_out) -> np.ndarray:
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype)


def global_avg_pool(x) -> np.ndarray:
    """Mean over the spatial axes: (N, H, W, C) -> (N, 1, 1, C)."""
    if x.shape[1] * x.shape[2] == 0:
        raise ShapeError("global_avg_pool over an empty spatial extent")
    return x.mean(axis=(1, 2), keepdims=True)


def global_avg_pool_backward(x_shape, grad_out) -> np.ndarray:
    n, h, w, c = x_shape
    return np.broadcast_to(grad_out / (h * w), x_shape).copy()


def avg_pool2d(x, window=4, stride=4) -> np.ndarray:
    """SAME average pooling; padded cells count toward the window area."""
    kh, kw = _as_pair(window)
    sh, sw = _as_pair(stride)
    n, h, w, c = x.shape
    ho, ph0, ph1 = same_padding(h, kh, sh)
    wo, pw0, pw1 = same_padding(w, kw, sw)
    xp = np.pad(x, ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0)))
    out = np.zeros((n, ho, wo, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i : i + sh * ho : sh, j : j + sw * wo : sw, :]
    return out / (kh * kw)


def avg_pool2d_backward(x_shape, grad_out, window=4, stride=4) -> np.ndarray:
    kh, kw = _as_pair(window)
    sh, sw = _as_pair(stride)
    n, h, w, c = x_shape
    ho, ph0, ph1 = same_padding(h, kh, sh)
    wo, pw0, pw1 = same_padding(w, kw, sw)
    gxp = np.zeros((n, h + ph0 + ph1, w + pw0 + pw1, c), dtype=grad_out.dtype)
    g = grad_out / (kh * kw)
    for i in range(kh):
        for j in range(kw):
            gxp[:, i : i + sh * ho : sh, j : j + sw * wo : sw, :] += g
    return gxp[:, ph0 : ph0 + h, pw0 : pw0 + w, :]


def fully_connected(x, w) -> np.ndarray:
    """``x @ w`` with ``x``: (N, c_in) or (c_in,), ``w``: (c_in, c_out). No bias."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"fully_connected: input {x.shape} vs weights {w.shape}")
    if _op_counter is not None:
        rows = 1 if x.ndim == 1 else x.shape[0]
        _op_counter._matmul(rows, w.shape[0], w.shape[1])
    return x @ w


def fully_connected_backward(x, w, grad_out) -> tuple[np.ndarray, np.ndarray]:
    if x.ndim == 1:
        return w @ grad_out, np.outer(x, grad_out)
    return grad_out @ w.T, x.T @ grad_out


def dropout_mask(shape, p: float, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Inverted-dropout mask: zeros with probability ``p``, survivors scaled by ``1/(1-p)``."""
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must lie in [0, 1)")
    if p == 0:
        return np.ones(shape, dtype)
    keep = rng.random(shape) >= p
    return (keep / (1.0 - p)).astype(dtype)


def dropout(x, p: float = 0.5, mode: str = "infer", rng: np.random.Generator | None = None):
    if mode == "infer" or p == 0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    return x * dropout_mask(x.shape, p, rng, x.dtype)


def log_softmax(logits) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits.

    ``logits`` is (C,) with an integer label, or (N, C) with N labels.
    """
    logits = np.asarray(logits)
    single = logits.ndim == 1
    z = logits[None] if single else logits
    y = np.atleast_1d(np.asarray(labels))
    n, c = z.shape
    if y.shape != (n,) or y.min() < 0 or y.max() >= c:
        raise ValueError(f"labels must be {n} integers in [0, {c})")
    logp = log_softmax(z)
    loss = -logp[np.arange(n), y].mean()
    grad = np.exp(logp)
    grad[np.arange(n), y] -= 1.0
    grad /= n
    return float(loss), grad[0] if single else grad
