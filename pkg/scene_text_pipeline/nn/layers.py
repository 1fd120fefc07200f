# nn/layers.py

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import log_softmax as _log_softmax

from ..services.errors import IndivisiblePool, NonUnitHeight, ShapeMismatch
from ..services.shared_config import BATCHNORM_EPS


# ---------------- Convolution ----------------
@dataclass
class ConvCache:
    windows: np.ndarray  # [C_in, H', W', kh, kw] view into the padded input
    weight: np.ndarray
    input_shape: Tuple[int, int, int]
    pad: int
    stride: int


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, pad: int = 0, stride: int = 1) -> Tuple[np.ndarray, ConvCache]:
    """Direct cross-correlation of x [C_in, H, W] with w [C_out, C_in, kh, kw]."""
    if x.ndim != 3 or w.ndim != 4 or w.shape[1] != x.shape[0] or b.shape != (w.shape[0],):
        raise ShapeMismatch(f"conv2d: input {x.shape}, weight {w.shape}, bias {b.shape} do not agree")
    _, height, width = x.shape
    kh, kw = w.shape[2:]
    span_h, span_w = height + 2 * pad - kh, width + 2 * pad - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ShapeMismatch(f"conv2d: kernel {kh}x{kw} / pad {pad} / stride {stride} does not tile {height}x{width}")

    padded = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    windows = sliding_window_view(padded, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    y = np.tensordot(w, windows, axes=([1, 2, 3], [0, 3, 4])) + b[:, None, None]
    return y, ConvCache(windows, w, x.shape, pad, stride)


def conv2d_backward(dy: np.ndarray, cache: ConvCache) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (dx, dw, db)."""
    w, pad, stride = cache.weight, cache.pad, cache.stride
    channels, height, width = cache.input_shape
    kh, kw = w.shape[2:]
    out_h, out_w = dy.shape[1:]

    db = dy.sum(axis=(1, 2))
    dw = np.tensordot(dy, cache.windows, axes=([1, 2], [1, 2]))
    dpadded = np.zeros((channels, height + 2 * pad, width + 2 * pad), dtype=dy.dtype)
    for i in range(kh):
        for j in range(kw):
            dpadded[:, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += np.tensordot(
                w[:, :, i, j], dy, axes=([0], [0])
            )
    dx = dpadded[:, pad:pad + height, pad:pad + width] if pad else dpadded
    return dx, dw, db


# ---------------- Max pooling ----------------
@dataclass
class PoolCache:
    argmax: np.ndarray
    input_shape: Tuple[int, int, int]
    window: Tuple[int, int]


def _pool_blocks(x: np.ndarray, wh: int, ww: int) -> np.ndarray:
    channels, height, width = x.shape
    blocks = x.reshape(channels, height // wh, wh, width // ww, ww).transpose(0, 1, 3, 2, 4)
    return blocks.reshape(channels, height // wh, width // ww, wh * ww)


def maxpool2d(x: np.ndarray, window: Tuple[int, int]) -> Tuple[np.ndarray, PoolCache]:
    """Non-overlapping max pool (stride = window); ties route to the first element in row-major order."""
    wh, ww = window
    _, height, width = x.shape
    if height % wh or width % ww:
        raise IndivisiblePool(f"pool {wh}x{ww} does not divide feature map {height}x{width}")
    blocks = _pool_blocks(x, wh, ww)
    argmax = np.argmax(blocks, axis=-1)
    y = np.take_along_axis(blocks, argmax[..., None], axis=-1)[..., 0]
    return y, PoolCache(argmax, x.shape, window)


def maxpool2d_backward(dy: np.ndarray, cache: PoolCache) -> np.ndarray:
    wh, ww = cache.window
    channels, height, width = cache.input_shape
    dblocks = np.zeros((channels, height // wh, width // ww, wh * ww), dtype=dy.dtype)
    np.put_along_axis(dblocks, cache.argmax[..., None], dy[..., None], axis=-1)
    dblocks = dblocks.reshape(channels, height // wh, width // ww, wh, ww).transpose(0, 1, 3, 2, 4)
    return dblocks.reshape(channels, height, width)


# ---------------- Batch normalization ----------------
@dataclass
class BatchNormCache:
    xhat: np.ndarray  # [C, M] over every position of every sample
    inv_std: np.ndarray
    gamma: np.ndarray
    splits: List[int]
    shapes: List[Tuple[int, ...]]
    train: bool
    mean: np.ndarray
    var: np.ndarray


def batchnorm(
    xs: Sequence[np.ndarray],
    gamma: np.ndarray,
    beta: np.ndarray,
    eps: float = BATCHNORM_EPS,
    train: bool = True,
    running_mean: Optional[np.ndarray] = None,
    running_var: Optional[np.ndarray] = None,
) -> Tuple[List[np.ndarray], BatchNormCache]:
    """
    Per-channel normalization of a batch of [C, ...] samples (widths may differ).
    Train mode uses the biased statistics of the whole batch; infer mode uses the
    running statistics. The batch statistics are returned in the cache.
    """
    xs = list(xs)
    if not xs:
        raise ShapeMismatch("batchnorm needs at least one sample")
    channels = xs[0].shape[0]
    flat = np.concatenate([x.reshape(channels, -1) for x in xs], axis=1)
    if train:
        mean = flat.mean(axis=1)
        var = flat.var(axis=1)
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (flat - mean[:, None]) * inv_std[:, None]
    out = gamma[:, None] * xhat + beta[:, None]

    sizes = [x[0].size for x in xs]
    splits = list(np.cumsum(sizes)[:-1])
    ys = [part.reshape(x.shape) for part, x in zip(np.split(out, splits, axis=1), xs)]
    cache = BatchNormCache(xhat, inv_std, gamma, splits, [x.shape for x in xs], train, mean, var)
    return ys, cache


def batchnorm_backward(dys: Sequence[np.ndarray], cache: BatchNormCache) -> Tuple[List[np.ndarray], np.ndarray, np.ndarray]:
    """Returns (dxs, dgamma, dbeta)."""
    channels = cache.xhat.shape[0]
    dy = np.concatenate([d.reshape(channels, -1) for d in dys], axis=1)
    dgamma = (dy * cache.xhat).sum(axis=1)
    dbeta = dy.sum(axis=1)
    dxhat = dy * cache.gamma[:, None]
    if cache.train:
        count = dy.shape[1]
        dx = (cache.inv_std[:, None] / count) * (
            count * dxhat - dxhat.sum(axis=1, keepdims=True) - cache.xhat * (dxhat * cache.xhat).sum(axis=1, keepdims=True)
        )
    else:
        dx = dxhat * cache.inv_std[:, None]
    dxs = [part.reshape(shape) for part, shape in zip(np.split(dx, cache.splits, axis=1), cache.shapes)]
    return dxs, dgamma, dbeta


# ---------------- Elementwise / head ----------------
def relu(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype, copy=False), mask


def relu_backward(dy: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.where(mask, dy, 0).astype(dy.dtype, copy=False)


def feature_columns(feature_map: np.ndarray) -> np.ndarray:
    """[C, 1, W] map -> [W, C] sequence; column t is timestep t, left to right."""
    if feature_map.ndim != 3 or feature_map.shape[1] != 1:
        raise NonUnitHeight(f"feature map must have height 1, got shape {feature_map.shape}")
    return feature_map[:, 0, :].T.copy()


def feature_columns_backward(dseq: np.ndarray) -> np.ndarray:
    return dseq.T[:, None, :].copy()


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """x [T, D] -> x W^T + b, W [K, D]."""
    if x.shape[-1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeMismatch(f"linear: input {x.shape}, weight {w.shape}, bias {b.shape} do not agree")
    return x @ w.T + b


def linear_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (dx, dw, db)."""
    return dy @ w, dy.T @ x, dy.sum(axis=0)


def log_softmax(y: np.ndarray) -> np.ndarray:
    return _log_softmax(y, axis=-1)


def log_softmax_backward(dlp: np.ndarray, lp: np.ndarray) -> np.ndarray:
    return dlp - np.exp(lp) * dlp.sum(axis=-1, keepdims=True)
