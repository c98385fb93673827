"""Binary multi-head attention, with optional token-grid reduction.

Queries, keys and values come from full-width binary FC layers. Attention
scores are popcount products of sign-quantized head slices; the softmax
stays real-valued and its probabilities are snapped to {0, alpha_p} before
a gated popcount product with sign-quantized values. Keys and values can be
computed on an average-pooled token grid and are then upsampled for the
real-valued residuals.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .bittensor import binary_gemm, gate_gemm, pack_mask, pack_signs
from .errors import ConfigError, ShapeError
from .layers import (
    BatchNormParams,
    BiFCLayer,
    RPReLUParams,
    batchnorm_forward,
    bifc_forward,
    rprelu,
)
from .quant import AttnProbScale, RSignParams, quantize_attention_probs


def avg_pool_tokens(
    tokens: np.ndarray, grid: tuple[int, int], r: int
) -> tuple[np.ndarray, tuple[int, int]]:
    """Non-overlapping r x r mean pooling of a raster token grid."""
    h, w = grid
    n, d = tokens.shape
    if n != h * w:
        raise ShapeError(f"{n} tokens do not fill a {h}x{w} grid")
    if r == 1:
        return tokens, grid
    if h % r or w % r:
        raise ShapeError(f"grid {h}x{w} not divisible by pooling ratio {r}")
    img = tokens.reshape(h // r, r, w // r, r, d).mean(axis=(1, 3))
    return img.reshape((h // r) * (w // r), d), (h // r, w // r)


def upsample_tokens(
    tokens: np.ndarray, grid: tuple[int, int], out_grid: tuple[int, int]
) -> np.ndarray:
    """Nearest-neighbor upsampling: out[i, j] = in[i*h // H, j*w // W]."""
    sh, sw = grid
    bh, bw = out_grid
    n, d = tokens.shape
    if n != sh * sw:
        raise ShapeError(f"{n} tokens do not fill a {sh}x{sw} grid")
    img = tokens.reshape(sh, sw, d)
    rows = (np.arange(bh) * sh) // bh
    cols = (np.arange(bw) * sw) // bw
    return img[rows][:, cols].reshape(bh * bw, d)


@dataclass
class BiMHAParams:
    """All weights of one attention layer.

    ``sr`` is the reduction FC applied to the pooled tokens before K/V when
    ``sr_ratio`` > 1; for ratio 1 it stays None and the layer degenerates to
    plain attention over the full grid.
    """

    dim: int
    heads: int
    sr_ratio: int
    q: BiFCLayer
    k: BiFCLayer
    v: BiFCLayer
    o: BiFCLayer
    sr: Optional[BiFCLayer]
    q_sign: RSignParams
    k_sign: RSignParams
    v_sign: RSignParams
    bn_at: BatchNormParams
    act_at: RPReLUParams
    prob_scale: AttnProbScale

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError(f"{self.heads} heads do not divide width {self.dim}")
        if self.sr_ratio > 1 and self.sr is None:
            raise ConfigError("reduction ratio > 1 requires a reduction layer")


def bi_mha_forward(
    x: np.ndarray,
    grid: tuple[int, int],
    p: BiMHAParams,
    training: bool = False,
    with_internals: bool = False,
):
    """One attention layer over [N, dim] tokens on an (h, w) grid.

    Returns the [N, dim] output; with ``with_internals`` also returns a dict
    of intermediate tensors for inspection.
    """
    n, d = x.shape
    if d != p.dim:
        raise ShapeError(f"attention expects width {p.dim}, got {d}")

    q_out = bifc_forward(x, p.q, training)
    if p.sr_ratio > 1:
        pooled, sgrid = avg_pool_tokens(x, grid, p.sr_ratio)
        reduced = bifc_forward(pooled, p.sr, training)
        k_out = bifc_forward(reduced, p.k, training)
        v_out = bifc_forward(reduced, p.v, training)
        k_res = upsample_tokens(k_out, sgrid, grid)
        v_res = upsample_tokens(v_out, sgrid, grid)
    else:
        k_out = bifc_forward(x, p.k, training)
        v_out = bifc_forward(x, p.v, training)
        k_res, v_res = k_out, v_out

    d_h = d // p.heads
    scale = 1.0 / np.sqrt(d_h)
    m = k_out.shape[0]
    ctx = np.empty((n, d), dtype=x.dtype)
    scores = np.empty((p.heads, n, m), dtype=x.dtype)
    probs = np.empty_like(scores)
    quant = np.empty_like(scores)
    for h in range(p.heads):
        sl = slice(h * d_h, (h + 1) * d_h)
        qb = pack_signs(q_out[:, sl] + p.q_sign.beta[sl])
        kb = pack_signs(k_out[:, sl] + p.k_sign.beta[sl])
        vb = pack_signs(v_out[:, sl] + p.v_sign.beta[sl])
        a = binary_gemm(qb, kb, b_transposed=True).astype(x.dtype) * scale
        s = _softmax_rows(a)
        pq = quantize_attention_probs(s, p.prob_scale)
        gates = pack_mask(pq > 0)
        ctx[:, sl] = p.prob_scale.alpha_p * gate_gemm(gates, vb).astype(x.dtype)
        scores[h], probs[h], quant[h] = a, s, pq

    pre = batchnorm_forward(ctx, p.bn_at, training) + q_out + k_res + v_res
    act = rprelu(pre, p.act_at)
    out = bifc_forward(act, p.o, training)
    if with_internals:
        internals = {
            "q": q_out,
            "k": k_out,
            "v": v_out,
            "k_res": k_res,
            "v_res": v_res,
            "scores": scores,
            "probs": probs,
            "quantized": quant,
            "context": ctx,
            "pre_output": act,
        }
        return out, internals
    return out


def _softmax_rows(a: np.ndarray) -> np.ndarray:
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)
