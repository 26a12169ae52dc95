"""Forward and backward kernels for the fixed layer set.

All tensors are CHW numpy arrays (batch dimension fixed at 1). Filters are
(out_ch, in_ch, kh, kw). Kernels keep the dtype of their inputs, so the same
code runs in float32 for training and float64 for gradient checks.
"""
from __future__ import annotations

from functools import lru_cache
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .. import TRIP


def check_tensor(x: np.ndarray, name: str = "tensor", ndim: int | None = None) -> np.ndarray:
    x = np.asarray(x)
    if ndim is not None and x.ndim != ndim:
        raise ValueError(f"{name}: expected {ndim} dims, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{name}: contains non-finite values")
    return x


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """(C, H, W) -> (Ho*Wo, C*kh*kw) patch matrix."""
    c = x.shape[0]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    return win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, c * kh * kw)


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    if x.ndim != 3 or w.ndim != 4 or x.shape[0] != w.shape[1]:
        raise ValueError(
            f"conv2d shape mismatch: input {tuple(x.shape)} vs weights {tuple(w.shape)}"
        )
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: bad stride={stride} / pad={pad}")
    o, _, kh, kw = w.shape
    ho = _out_size(x.shape[1], kh, stride, pad)
    wo = _out_size(x.shape[2], kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {tuple(x.shape)}")
    cols = im2col(x, kh, kw, stride, pad)
    y = cols @ w.reshape(o, -1).T + b
    return np.ascontiguousarray(y.T.reshape(o, ho, wo))


def conv2d_backward(grad: np.ndarray, x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0):
    """Returns (d_input, d_weights, d_bias)."""
    o, c, kh, kw = w.shape
    _, ho, wo = grad.shape
    g = grad.reshape(o, ho * wo)
    cols = im2col(x, kh, kw, stride, pad)
    dw = (g @ cols).reshape(w.shape)
    db = g.sum(axis=1)
    dcols = (g.T @ w.reshape(o, -1)).reshape(ho, wo, c, kh, kw)
    h, wd = x.shape[1], x.shape[2]
    dxp = np.zeros((c, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, :, i, j].transpose(2, 0, 1)
    dx = dxp[:, pad:pad + h, pad:pad + wd] if pad else dxp
    return np.ascontiguousarray(dx), dw, db


def maxpool(x: np.ndarray, kernel: int, stride: int):
    """Max over kernel x kernel windows.

    Returns the pooled tensor and, per output cell, the linear (row-major)
    index into the input plane of the winning element. Ties go to the lowest
    linear index.
    """
    if kernel < 1 or stride < 1:
        raise ValueError(f"maxpool: bad kernel={kernel} / stride={stride}")
    c, h, w = x.shape
    if h < kernel or w < kernel:
        raise ValueError(f"maxpool: window {kernel} larger than input {tuple(x.shape)}")
    win = sliding_window_view(x, (kernel, kernel), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    flat = win.reshape(c, ho, wo, kernel * kernel)
    # np.argmax returns the first maximum in row-major window order, which is
    # also the lowest linear index in the input plane.
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    rows = np.arange(ho)[:, None] * stride + arg // kernel
    cols = np.arange(wo)[None, :] * stride + arg % kernel
    return np.ascontiguousarray(out), rows * w + cols


def maxpool_backward(grad: np.ndarray, argmax: np.ndarray, input_shape) -> np.ndarray:
    c, h, w = input_shape
    dx = np.zeros((c, h * w), dtype=grad.dtype)
    chan = np.broadcast_to(np.arange(c)[:, None, None], argmax.shape)
    np.add.at(dx, (chan.ravel(), argmax.ravel()), grad.ravel())
    return dx.reshape(c, h, w)


@lru_cache(maxsize=64)
def _interp_matrix(n: int, factor: int) -> np.ndarray:
    """(n*factor, n) linear interpolation weights, half-pixel centres."""
    m = np.zeros((n * factor, n))
    src = (np.arange(n * factor) + 0.5) / factor - 0.5
    src = np.clip(src, 0, n - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = src - lo
    rows = np.arange(n * factor)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    m.setflags(write=False)
    return m


def bilinear_upsample(x: np.ndarray, factor: int) -> np.ndarray:
    if factor < 1:
        raise ValueError(f"bilinear_upsample: factor must be >= 1, got {factor}")
    if factor == 1:
        return x.copy()
    _, h, w = x.shape
    uh = _interp_matrix(h, factor).astype(x.dtype)
    uw = _interp_matrix(w, factor).astype(x.dtype)
    return np.ascontiguousarray(uh @ x @ uw.T)


def bilinear_upsample_backward(grad: np.ndarray, factor: int) -> np.ndarray:
    if factor < 1:
        raise ValueError(f"bilinear_upsample: factor must be >= 1, got {factor}")
    if factor == 1:
        return grad.copy()
    _, h, w = grad.shape
    uh = _interp_matrix(h // factor, factor).astype(grad.dtype)
    uw = _interp_matrix(w // factor, factor).astype(grad.dtype)
    return np.ascontiguousarray(uh.T @ grad @ uw)


def softmax(scores: np.ndarray, axis: int = 0) -> np.ndarray:
    z = scores - scores.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(scores: np.ndarray, axis: int = 0) -> np.ndarray:
    z = scores - scores.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


class XentResult(NamedTuple):
    loss: float
    grad: np.ndarray
    all_ignored: bool


def class_index(target: np.ndarray) -> np.ndarray:
    """Binary trip mask -> per-pixel class index (trip is channel 0)."""
    return np.where(np.asarray(target, dtype=bool), TRIP, 1 - TRIP)


def softmax_xent_sum(scores: np.ndarray, target: np.ndarray, ignore: np.ndarray | None = None) -> XentResult:
    """Per-pixel softmax cross-entropy, summed (not averaged) over pixels.

    ``target`` is a binary trip mask; ``ignore`` marks pixels that contribute
    neither loss nor gradient.
    """
    if scores.ndim != 3 or scores.shape[0] != 2:
        raise ValueError(f"softmax_xent_sum: expected 2xHxW scores, got {scores.shape}")
    if target.shape != scores.shape[1:]:
        raise ValueError(f"softmax_xent_sum: target {target.shape} vs scores {scores.shape}")
    keep = np.ones(target.shape, dtype=bool) if ignore is None else ~np.asarray(ignore, dtype=bool)
    if ignore is not None and ignore.shape != target.shape:
        raise ValueError(f"softmax_xent_sum: ignore {ignore.shape} vs target {target.shape}")
    if not keep.any():
        return XentResult(0.0, np.zeros_like(scores), True)
    cls = class_index(target)
    logp = log_softmax(scores)
    picked = np.take_along_axis(logp, cls[None], axis=0)[0]
    loss = float(-picked[keep].sum(dtype=np.float64))
    grad = np.exp(logp)
    onehot = np.zeros_like(scores)
    np.put_along_axis(onehot, cls[None], 1.0, axis=0)
    grad -= onehot
    grad *= keep
    return XentResult(loss, grad, False)
