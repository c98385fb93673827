"""Differentiable mirror of the inference network.

The inference engine runs packed popcount kernels on frozen weights; this
module rebuilds the same arithmetic out of autodiff ops over float latent
weights so the whole thing can be trained. Sign and rounding sites carry
straight-through gradients; the weight scale alpha and column means mu are
recomputed from the latent weights every forward pass but treated as
constants by the backward pass.

State is a flat dict of float64 arrays keyed by the inference tensor names,
except that each packed weight "X.bits" is held as a latent matrix
"X.latent" (its alpha/mu have no slot; they are derived). Batch norm running
statistics live in the state dict but are not learnable.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError, ShapeError
from ..layers import (
    BN_EPS,
    BN_MOMENTUM,
    LAYERSCALE_INIT,
    MULTI_POOL_WINDOWS,
    RPRELU_INIT_SLOPE,
)
from ..model import (
    PROB_ALPHA_INIT,
    ModelConfig,
    assemble,
    tensor_layout,
    trunc_normal,
)
from ..quant import binarize_weights
from . import autograd as ag
from .autograd import Var


def init_state(cfg: ModelConfig, seed: int) -> dict:
    """Fresh float64 training state for a config, deterministic in the seed."""
    cfg.validate()
    if cfg.pooling != "global_avg":
        raise ConfigError("the training path supports global_avg pooling only")
    rng = np.random.default_rng(seed)
    state: dict = {}
    for name, kind, shape, tag in tensor_layout(cfg):
        if kind == "bits":
            latent = name[: -len("bits")] + "latent"
            state[latent] = trunc_normal(rng, shape).astype(np.float64)
        elif tag == "stat":
            continue  # alpha/mu are derived from the latent weights
        elif tag == "weight":
            state[name] = trunc_normal(rng, shape).astype(np.float64)
        elif tag == "zeros":
            state[name] = np.zeros(shape, dtype=np.float64)
        elif tag == "ones":
            state[name] = np.ones(shape, dtype=np.float64)
        elif tag == "slope":
            state[name] = np.full(shape, RPRELU_INIT_SLOPE, dtype=np.float64)
        elif tag == "ls_alpha":
            state[name] = np.full(shape, LAYERSCALE_INIT, dtype=np.float64)
        elif tag == "prob_alpha":
            state[name] = np.full(shape, PROB_ALPHA_INIT, dtype=np.float64)
        else:
            raise AssertionError(f"unhandled init tag {tag}")
    return state


def learnable_names(state: dict) -> list:
    """Everything except the batch norm running statistics."""
    return [n for n in state if not (n.endswith(".mean") or n.endswith(".var"))]


def make_params(state: dict, names=None) -> dict:
    names = learnable_names(state) if names is None else names
    return {n: Var(state[n]) for n in names}


def weight_stats(latent_value: np.ndarray) -> tuple:
    """Detached binarization statistics of a latent weight matrix."""
    mu = latent_value.mean(axis=0)
    alpha = float(np.abs(latent_value).mean())
    return alpha, mu


def collect_weight_stats(state: dict) -> dict:
    """alpha/mu for every latent weight, for freezing across a gradient check."""
    return {
        n[: -len("latent")]: weight_stats(v)
        for n, v in state.items()
        if n.endswith(".latent")
    }


# --- layer composites -------------------------------------------------------


def bn_op(x, gamma, beta, running_mean, running_var, batch_mode, eps=BN_EPS):
    """Batch norm composite. Returns (out, (batch_mean, unbiased_var) or None).

    batch_mode normalizes with differentiable biased batch statistics over
    all leading axes; otherwise the running arrays enter as constants.
    """
    if batch_mode:
        axes = tuple(range(x.value.ndim - 1))
        m = ag.vmean(x, axis=axes)
        centered = ag.sub(x, m)
        v = ag.vmean(ag.mul(centered, centered), axis=axes)
        inv = ag.div(ag.const(1.0), ag.sqrt(ag.add(v, ag.const(eps))))
        n = x.value.size // x.value.shape[-1]
        unbiased = v.value * n / (n - 1) if n > 1 else v.value
        stats = (m.value.copy(), unbiased)
    else:
        m = ag.const(running_mean)
        centered = ag.sub(x, m)
        inv = ag.const(1.0 / np.sqrt(running_var + eps))
        stats = None
    out = ag.add(ag.mul(ag.mul(centered, inv), gamma), beta)
    return out, stats


def rprelu_op(x, gamma, zeta, slope):
    shifted = ag.sub(x, gamma)
    pos = ag.const((shifted.value > 0).astype(shifted.value.dtype))
    neg = ag.const(1.0 - pos.value)
    kept = ag.add(ag.mul(pos, shifted), ag.mul(ag.mul(neg, slope), shifted))
    return ag.add(kept, zeta)


def shortcut_op(x, c_out):
    c_in = x.value.shape[-1]
    if c_in == c_out:
        return x
    if c_out % c_in == 0:
        k = c_out // c_in
        lead = x.value.shape[:-1]
        widened = ag.reshape(x, lead + (1, c_in))
        tiled = ag.mul(widened, ag.const(np.ones((k, 1), dtype=x.value.dtype)))
        return ag.reshape(tiled, lead + (c_out,))
    if c_in % c_out == 0:
        n = c_in // c_out
        regrouped = ag.reshape(x, x.value.shape[:-1] + (n, c_out))
        return ag.vmean(regrouped, axis=-2)
    raise ShapeError(f"no shortcut mapping from {c_in} to {c_out} channels")


class _Net:
    """Carries the pieces every composite needs while building one graph."""

    def __init__(self, cfg, params, state, surrogate, bn_batch, frozen_stats):
        self.cfg = cfg
        self.params = params
        self.state = state
        self.surrogate = surrogate
        self.bn_batch = bn_batch
        self.frozen_stats = frozen_stats or {}
        self.stat_updates = []  # (bn prefix, batch mean, unbiased batch var)
        self.lsq_sizes = {}  # prob_alpha name -> quantized element count

    def bn(self, x, prefix):
        out, stats = bn_op(
            x,
            self.params[prefix + "gamma"],
            self.params[prefix + "beta"],
            self.state[prefix + "mean"],
            self.state[prefix + "var"],
            self.bn_batch,
        )
        if stats is not None:
            self.stat_updates.append((prefix, stats[0], stats[1]))
        return out

    def act(self, x, prefix):
        return rprelu_op(
            x, self.params[prefix + "gamma"], self.params[prefix + "zeta"], self.params[prefix + "slope"]
        )

    def bifc(self, x, prefix, d_out):
        latent = self.params[prefix + "latent"]
        if prefix in self.frozen_stats:
            alpha, mu = self.frozen_stats[prefix]
        else:
            alpha, mu = weight_stats(latent.value)
        w_b = ag.sign_ste(ag.sub(latent, ag.const(mu)), self.surrogate)
        x_b = ag.sign_ste(ag.add(x, self.params[prefix + "beta"]), self.surrogate)
        y = ag.scale(ag.matmul(x_b, w_b), alpha)
        y = self.bn(y, prefix + "bn.")
        return self.act(ag.add(y, shortcut_op(x, d_out)), prefix + "act.")

    def attention(self, x, grid, prefix, stage):
        heads, r = stage.heads, stage.reduction
        batch, n, d = x.value.shape
        h, w = grid
        q_out = self.bifc(x, prefix + "q.", d)
        if r > 1:
            img = ag.reshape(x, (batch, h // r, r, w // r, r, d))
            pooled = ag.reshape(ag.vmean(img, axis=(2, 4)), (batch, (h // r) * (w // r), d))
            reduced = self.bifc(pooled, prefix + "sr.", d)
            k_out = self.bifc(reduced, prefix + "k.", d)
            v_out = self.bifc(reduced, prefix + "v.", d)
            sgrid = (h // r, w // r)
            k_res = ag.upsample_tokens_op(k_out, sgrid, grid)
            v_res = ag.upsample_tokens_op(v_out, sgrid, grid)
        else:
            k_out = self.bifc(x, prefix + "k.", d)
            v_out = self.bifc(x, prefix + "v.", d)
            k_res, v_res = k_out, v_out

        d_h = d // heads
        m = k_out.value.shape[1]

        def split(t, rows):
            per_head = ag.reshape(t, (batch, rows, heads, d_h))
            return ag.transpose(per_head, (0, 2, 1, 3))

        q_b = split(ag.sign_ste(ag.add(q_out, self.params[prefix + "q_sign.beta"]), self.surrogate), n)
        k_b = split(ag.sign_ste(ag.add(k_out, self.params[prefix + "k_sign.beta"]), self.surrogate), m)
        v_b = split(ag.sign_ste(ag.add(v_out, self.params[prefix + "v_sign.beta"]), self.surrogate), m)

        scores = ag.scale(ag.matmul(q_b, ag.transpose(k_b, (0, 1, 3, 2))), 1.0 / np.sqrt(d_h))
        probs = ag.softmax_last(scores)
        alpha_var = self.params[prefix + "prob_alpha"]
        snapped = ag.round_ste(ag.clip01(ag.div(probs, alpha_var)), self.surrogate)
        pq = ag.mul(alpha_var, snapped)
        self.lsq_sizes[prefix + "prob_alpha"] = probs.value.size

        ctx = ag.matmul(pq, v_b)
        ctx = ag.reshape(ag.transpose(ctx, (0, 2, 1, 3)), (batch, n, d))
        pre = ag.add(ag.add(ag.add(self.bn(ctx, prefix + "bn_at."), q_out), k_res), v_res)
        return self.bifc(self.act(pre, prefix + "act_at."), prefix + "o.", d)

    def multi_pool(self, tokens, grid):
        batch, n, d = tokens.value.shape
        h, w = grid
        img = ag.reshape(tokens, (batch, h, w, d))
        out = None
        for kh, kw in MULTI_POOL_WINDOWS:
            pooled = img
            if kh > 1:
                pooled = ag.avg_pool_axis_op(pooled, 1, kh)
            if kw > 1:
                pooled = ag.avg_pool_axis_op(pooled, 2, kw)
            out = pooled if out is None else ag.add(out, pooled)
        return ag.reshape(out, (batch, n, d))

    def block(self, tokens, grid, prefix, stage):
        attn_out = self.attention(self.bn(tokens, prefix + "bn1."), grid, prefix + "attn.", stage)
        if self.cfg.use_layerscale:
            scaled = ag.add(ag.mul(self.params[prefix + "ls1.alpha"], attn_out), self.params[prefix + "ls1.beta"])
            tokens = ag.add(scaled, tokens)
        else:
            tokens = ag.add(attn_out, tokens)
        f_norm = self.bn(tokens, prefix + "bn2.")
        branch = self.bifc(f_norm, prefix + "ffn1.", stage.dim * stage.ffn_expansion)
        branch = self.bifc(branch, prefix + "ffn2.", stage.dim)
        if self.cfg.use_multibranch:
            branch = ag.add(branch, self.multi_pool(f_norm, grid))
        if self.cfg.use_layerscale:
            scaled = ag.add(ag.mul(self.params[prefix + "ls2.alpha"], branch), self.params[prefix + "ls2.beta"])
            tokens = ag.add(scaled, tokens)
        else:
            tokens = ag.add(branch, tokens)
        return tokens


def batch_patches(images: np.ndarray, patch: int) -> np.ndarray:
    """Batched patch extraction, same token and channel-slowest layout as the
    single-image path."""
    b, height, width, c = images.shape
    h, w = height // patch, width // patch
    x = images.transpose(0, 3, 1, 2).reshape(b, c, h, patch, w, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x).reshape(b, h * w, c * patch * patch)


def network_forward(
    cfg: ModelConfig,
    params: dict,
    state: dict,
    images: np.ndarray,
    surrogate: bool = True,
    bn_batch: bool = True,
    frozen_stats: dict | None = None,
):
    """Run a batch [B, H, W, C] through the differentiable network.

    Returns (logits Var [B, num_classes], aux) where aux carries the batch
    norm statistics observed this pass and the quantized-tensor sizes used
    to scale the probability-step gradients at update time.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1:] != (cfg.img_size, cfg.img_size, cfg.in_channels):
        raise ShapeError(
            f"expected images [B, {cfg.img_size}, {cfg.img_size}, {cfg.in_channels}], "
            f"got shape {images.shape}"
        )
    net = _Net(cfg, params, state, surrogate, bn_batch, frozen_stats)
    batch = images.shape[0]

    tokens = None
    grid = None
    for i, s in enumerate(cfg.stages):
        p = f"stage{i}."
        if i == 0:
            tokens = ag.const(batch_patches(images, s.patch))
            tokens = ag.add(ag.matmul(tokens, params[p + "embed.weight"]), params[p + "embed.bias"])
            grid = (cfg.img_size // s.patch,) * 2
        else:
            h, w = grid
            b, n, d = tokens.value.shape
            blocks2 = ag.reshape(tokens, (b, h // 2, 2, w // 2, 2, d))
            raster = ag.transpose(blocks2, (0, 1, 3, 2, 4, 5))
            tokens = ag.reshape(raster, (b, n // 4, 4 * d))
            grid = (h // 2, w // 2)
            if cfg.mid_patch_embed == "full":
                tokens = ag.add(ag.matmul(tokens, params[p + "embed.weight"]), params[p + "embed.bias"])
            else:
                tokens = net.bifc(tokens, p + "embed.", s.dim)
        if cfg.use_pos_embed:
            tokens = ag.add(tokens, params[p + "pos"])
        for bidx in range(s.blocks):
            tokens = net.block(tokens, grid, f"{p}block{bidx}.", s)

    normed = net.bn(tokens, "final_bn.")
    pooled = ag.vmean(normed, axis=1)
    logits = ag.add(ag.matmul(pooled, params["classifier.weight"]), params["classifier.bias"])
    aux = {"stat_updates": net.stat_updates, "lsq_sizes": net.lsq_sizes}
    return logits, aux


def apply_stat_updates(state: dict, stat_updates, momentum: float = BN_MOMENTUM) -> None:
    """Fold one pass's batch statistics into the running buffers."""
    for prefix, mean, var in stat_updates:
        state[prefix + "mean"] = (1 - momentum) * state[prefix + "mean"] + momentum * mean
        state[prefix + "var"] = (1 - momentum) * state[prefix + "var"] + momentum * var


def predict(cfg: ModelConfig, state: dict, images: np.ndarray) -> np.ndarray:
    """Hard-quantized forward with running statistics; returns logit values."""
    params = make_params(state)
    logits, _ = network_forward(cfg, params, state, images, surrogate=False, bn_batch=False)
    return logits.value


def export_model(cfg: ModelConfig, state: dict):
    """Freeze the training state into a runnable inference model."""
    tensors: dict = {}
    for name, kind, shape, tag in tensor_layout(cfg):
        if kind == "bits":
            prefix = name[: -len("bits")]
            bw = binarize_weights(state[prefix + "latent"].astype(np.float32))
            tensors[name] = bw.bits
            tensors[prefix + "alpha"] = np.array([bw.alpha], dtype=np.float32)
            tensors[prefix + "mu"] = bw.mu.astype(np.float32)
        elif tag == "stat":
            continue
        else:
            tensors[name] = state[name].astype(np.float32)
    return assemble(cfg, tensors)
