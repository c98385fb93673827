"""Quantizers and their straight-through gradient rules.

Covers the four quantization sites of the network: thresholded sign for
activations, mean-centered sign with an L1 scale for weights, the clipped
straight-through estimator, and round-to-nearest quantization of attention
probabilities with a learnable scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bittensor import BitMatrix, pack_signs
from .errors import ParameterError, ShapeError


@dataclass
class RSignParams:
    """Learnable per-input-channel threshold applied before the sign."""

    beta: np.ndarray


@dataclass
class BinWeight:
    """A binarized weight matrix: packed signs plus its real statistics.

    ``alpha`` is the mean absolute value of the source weights and ``mu``
    the per-output-column mean subtracted before taking signs. Both are
    frozen at binarization time.
    """

    bits: BitMatrix
    alpha: float
    mu: np.ndarray


@dataclass
class AttnProbScale:
    """Learnable scale for quantized attention probabilities."""

    alpha_p: float


def rsign(x: np.ndarray, p: RSignParams) -> BitMatrix:
    """Pack sign(x + beta), broadcasting beta over rows."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise ShapeError(f"rsign expects a 2-D input, got shape {x.shape}")
    if x.shape[1] != p.beta.shape[0]:
        raise ShapeError(
            f"input has {x.shape[1]} channels but beta has {p.beta.shape[0]}"
        )
    return pack_signs(x + p.beta)


def binarize_weights(w: np.ndarray) -> BinWeight:
    """Center each output column on its mean, take signs, keep the L1 scale.

    ``mu[j]`` is the mean of column j, ``alpha`` the mean of |w| over all
    entries, and ``bits`` the packed signs of ``w - mu``.
    """
    w = np.asarray(w)
    if w.ndim != 2:
        raise ShapeError(f"binarize_weights expects a 2-D matrix, got {w.shape}")
    if w.size == 0:
        raise ShapeError("binarize_weights: empty weight matrix")
    mu = w.mean(axis=0)
    alpha = float(np.abs(w).mean())
    return BinWeight(bits=pack_signs(w - mu), alpha=alpha, mu=mu)


def ste_backward(x, upstream):
    """Clipped straight-through gradient of sign: passes where |x| <= 1."""
    x = np.asarray(x)
    upstream = np.asarray(upstream, dtype=np.float64)
    if x.shape != upstream.shape:
        raise ShapeError(f"shape mismatch: {x.shape} vs {upstream.shape}")
    return np.where(np.abs(x) <= 1.0, upstream, 0.0)


def round_half_away(v: np.ndarray) -> np.ndarray:
    """Round to nearest with halves away from zero (not banker's rounding)."""
    v = np.asarray(v)
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def quantize_attention_probs(softmax_out: np.ndarray, s: AttnProbScale) -> np.ndarray:
    """Snap softmax probabilities to {0, alpha_p}.

    out = alpha_p * round(clip(softmax_out / alpha_p, 0, 1)), with halves
    rounded away from zero. Idempotent, and exact: outputs are produced as
    alpha_p times a 0/1 value.
    """
    if not s.alpha_p > 0:
        raise ParameterError(f"alpha_p must be positive, got {s.alpha_p}")
    v = np.clip(np.asarray(softmax_out) / s.alpha_p, 0.0, 1.0)
    return s.alpha_p * round_half_away(v)


def lsq_grad_scale(n_elements: int) -> float:
    """Learned-step-size gradient scale, 1/sqrt(N * Q_max) with Q_max = 1."""
    return 1.0 / float(np.sqrt(n_elements))


def attn_scale_gradient(
    softmax_out: np.ndarray, s: AttnProbScale, upstream: np.ndarray
) -> float:
    """Straight-through gradient of the probability quantizer w.r.t. alpha_p.

    Per element, with v = softmax_out / alpha_p, the local derivative is
    round(clip(v, 0, 1)) - v * 1[0 < v < 1]; the result is the sum against
    ``upstream`` times the learned-step-size scale for this matrix.
    """
    softmax_out = np.asarray(softmax_out)
    upstream = np.asarray(upstream)
    if softmax_out.shape != upstream.shape:
        raise ShapeError(
            f"shape mismatch: {softmax_out.shape} vs {upstream.shape}"
        )
    v = softmax_out / s.alpha_p
    inside = (v > 0.0) & (v < 1.0)
    local = round_half_away(np.clip(v, 0.0, 1.0)) - v * inside
    return lsq_grad_scale(softmax_out.size) * float((upstream * local).sum())
