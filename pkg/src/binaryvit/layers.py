"""Network building blocks operating on token matrices.

Everything here works on a single image's tokens, shape [N, D], in the
caller's float dtype. The binary fully-connected layer is the workhorse:
sign-quantized activations times packed sign weights, rescaled, normalized,
and re-activated around a real-valued shortcut.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bittensor import BitMatrix, binary_gemm
from .errors import ShapeError
from .quant import BinWeight, RSignParams, rsign

RPRELU_INIT_SLOPE = 0.25
LAYERSCALE_INIT = 0.1
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class RPReLUParams:
    """Per-channel shifted PReLU: kink moved to gamma, output lifted by zeta."""

    gamma: np.ndarray
    zeta: np.ndarray
    slope: np.ndarray

    @staticmethod
    def init(channels: int, dtype=np.float32) -> "RPReLUParams":
        return RPReLUParams(
            gamma=np.zeros(channels, dtype=dtype),
            zeta=np.zeros(channels, dtype=dtype),
            slope=np.full(channels, RPRELU_INIT_SLOPE, dtype=dtype),
        )


def rprelu(x: np.ndarray, p: RPReLUParams) -> np.ndarray:
    shifted = x - p.gamma
    return np.where(shifted > 0, shifted, p.slope * shifted) + p.zeta


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    @staticmethod
    def init(channels: int, dtype=np.float32) -> "BatchNormParams":
        return BatchNormParams(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )


def batchnorm_forward(x: np.ndarray, p: BatchNormParams, training: bool = False) -> np.ndarray:
    """Normalize per channel (last axis).

    Inference uses the stored running statistics. Training mode normalizes
    with biased batch statistics over all leading axes and folds them into
    the running buffers (unbiased variance, momentum update).
    """
    if training:
        axes = tuple(range(x.ndim - 1))
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        n = x.size // x.shape[-1]
        unbiased = var * n / (n - 1) if n > 1 else var
        # in-place so views held elsewhere (the model's tensor store) track it
        p.running_mean[...] = (1 - p.momentum) * p.running_mean + p.momentum * mean
        p.running_var[...] = (1 - p.momentum) * p.running_var + p.momentum * unbiased
    else:
        mean, var = p.running_mean, p.running_var
    inv = 1.0 / np.sqrt(var + p.eps)
    return (x - mean) * inv * p.gamma + p.beta


@dataclass
class LayerScaleParams:
    """Learnable per-channel scale and bias applied to a residual branch."""

    alpha: np.ndarray
    beta: np.ndarray

    @staticmethod
    def init(channels: int, dtype=np.float32) -> "LayerScaleParams":
        return LayerScaleParams(
            alpha=np.full(channels, LAYERSCALE_INIT, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
        )


def layerscale_residual(branch: np.ndarray, p: LayerScaleParams, residual: np.ndarray) -> np.ndarray:
    return p.alpha * branch + p.beta + residual


def shortcut_map(x: np.ndarray, c_out: int) -> np.ndarray:
    """Match channel counts for a real-valued shortcut without parameters.

    Identity when widths agree; replicate the channels n times when the
    layer expands by an integer factor; when it contracts by an integer
    factor, average element i over the n chunks of size c_out (so
    [1, 2, 3, 4] -> [2, 3] for c_out = 2).
    """
    c_in = x.shape[-1]
    if c_in == c_out:
        return x
    if c_out % c_in == 0:
        return np.tile(x, (1,) * (x.ndim - 1) + (c_out // c_in,))
    if c_in % c_out == 0:
        n = c_in // c_out
        return x.reshape(x.shape[:-1] + (n, c_out)).mean(axis=-2)
    raise ShapeError(f"no shortcut mapping from {c_in} to {c_out} channels")


@dataclass
class BiFCLayer:
    """Binary fully-connected layer with its normalization and activation.

    Holds the packed weight signs (plus a cached transpose for the matmul),
    the sign threshold for incoming activations, and the BN/activation that
    wrap the matmul result around a channel-matched shortcut.
    """

    in_features: int
    out_features: int
    rsign_beta: RSignParams
    weight: BinWeight
    bn: BatchNormParams
    act: RPReLUParams
    bits_t: BitMatrix = field(repr=False, default=None)

    def __post_init__(self):
        if self.bits_t is None:
            self.bits_t = self.weight.bits.transpose()


def bifc_forward(x: np.ndarray, layer: BiFCLayer, training: bool = False) -> np.ndarray:
    """y = alpha * (sign(x + beta) @ sign_weights); out = rprelu(bn(y) + shortcut(x))."""
    if x.shape[-1] != layer.in_features:
        raise ShapeError(
            f"layer expects {layer.in_features} input features, got {x.shape[-1]}"
        )
    xb = rsign(x, layer.rsign_beta)
    prod = binary_gemm(xb, layer.bits_t, b_transposed=True)
    y = layer.weight.alpha * prod.astype(x.dtype)
    y = batchnorm_forward(y, layer.bn, training)
    return rprelu(y + shortcut_map(x, layer.out_features), layer.act)


def _avg_pool_axis(x: np.ndarray, axis: int, size: int) -> np.ndarray:
    # stride-1 pooling; windows at the edges average over the in-bounds
    # elements only, so the output keeps the input's shape and scale
    moved = np.moveaxis(x, axis, 0)
    n = moved.shape[0]
    pad = (size - 1) // 2
    acc = np.zeros_like(moved)
    cnt = np.zeros((n,) + (1,) * (moved.ndim - 1), dtype=x.dtype)
    for d in range(-pad, pad + 1):
        lo, hi = max(0, -d), n - max(0, d)
        if lo >= hi:
            continue
        acc[lo:hi] += moved[lo + d : hi + d]
        cnt[lo:hi] += 1
    return np.moveaxis(acc / cnt, 0, axis)


MULTI_POOL_WINDOWS = ((1, 3), (3, 1), (1, 5), (5, 1))


def multi_pool_branches(tokens: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Sum of four directional stride-1 average pools over the token grid.

    Tokens are laid out raster order on an (h, w) grid. Each window pools
    along a single axis (3 and 5 wide, both orientations); edge windows
    average over the elements that exist.
    """
    h, w = grid
    n, d = tokens.shape
    if n != h * w:
        raise ShapeError(f"{n} tokens do not fill a {h}x{w} grid")
    img = tokens.reshape(h, w, d)
    out = np.zeros_like(img)
    for kh, kw in MULTI_POOL_WINDOWS:
        pooled = img
        if kh > 1:
            pooled = _avg_pool_axis(pooled, 0, kh)
        if kw > 1:
            pooled = _avg_pool_axis(pooled, 1, kw)
        out += pooled
    return out.reshape(n, d)


@dataclass
class LinearParams:
    """Real-valued affine map, used where the network stays full precision."""

    weight: np.ndarray  # [d_in, d_out]
    bias: np.ndarray


def linear_forward(x: np.ndarray, p: LinearParams) -> np.ndarray:
    return x @ p.weight + p.bias


def extract_patches(img: np.ndarray, patch: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Cut a [C, H, W] image into non-overlapping patch tokens.

    Returns ([h*w, C*patch*patch], (h, w)) with tokens in raster order and
    each patch flattened channel-slowest.
    """
    if img.ndim != 3:
        raise ShapeError(f"expected a [C, H, W] image, got shape {img.shape}")
    c, height, width = img.shape
    if height % patch or width % patch:
        raise ShapeError(f"image {height}x{width} not divisible by patch size {patch}")
    h, w = height // patch, width // patch
    x = img.reshape(c, h, patch, w, patch)
    x = x.transpose(1, 3, 0, 2, 4)
    return np.ascontiguousarray(x).reshape(h * w, c * patch * patch), (h, w)


def merge_tokens(tokens: np.ndarray, grid: tuple[int, int]) -> tuple[np.ndarray, tuple[int, int]]:
    """Concatenate each 2x2 neighborhood of tokens into one wider token."""
    h, w = grid
    n, d = tokens.shape
    if n != h * w:
        raise ShapeError(f"{n} tokens do not fill a {h}x{w} grid")
    if h % 2 or w % 2:
        raise ShapeError(f"grid {h}x{w} not divisible by the 2x2 merge")
    x = tokens.reshape(h // 2, 2, w // 2, 2, d).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(x).reshape(n // 4, 4 * d), (h // 2, w // 2)


def global_avg_pool(tokens: np.ndarray) -> np.ndarray:
    return tokens.mean(axis=0)
