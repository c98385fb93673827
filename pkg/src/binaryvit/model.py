"""Model assembly: configs to runnable networks, forward pass, weight files.

A model is a list of stages. Each stage owns a patch embedding (always full
precision for the first stage, binary or full precision for the rest), an
optional learnable position embedding, and a run of transformer blocks. The
blocks wire normalization, attention, FFN, pooling branches and residual
scaling; everything numeric happens in float32.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attention import BiMHAParams, bi_mha_forward
from .bittensor import WORD_BITS, BitMatrix
from .errors import ConfigError, ShapeError, WeightFormatError
from .layers import (
    BatchNormParams,
    BiFCLayer,
    LayerScaleParams,
    LinearParams,
    RPReLUParams,
    batchnorm_forward,
    bifc_forward,
    extract_patches,
    global_avg_pool,
    layerscale_residual,
    linear_forward,
    merge_tokens,
    multi_pool_branches,
)
from .quant import AttnProbScale, BinWeight, RSignParams, binarize_weights

INIT_STD = 0.02
PROB_ALPHA_INIT = 0.05

MAGIC = b"BVIT"
FORMAT_VERSION = 1
DTYPE_F32 = 0
DTYPE_PACKED = 1


@dataclass
class StageConfig:
    """One pyramid stage: width, attention shape, depth, and its downsample."""

    dim: int
    reduction: int
    heads: int
    ffn_expansion: int
    blocks: int
    patch: int


@dataclass
class ModelConfig:
    stages: list
    img_size: int = 224
    in_channels: int = 3
    num_classes: int = 1000
    pooling: str = "global_avg"  # or cls_token
    use_multibranch: bool = True
    use_layerscale: bool = True
    use_pos_embed: bool = True
    mid_patch_embed: str = "binary"  # or full
    norm_mean: tuple = (127.5, 127.5, 127.5)
    norm_std: tuple = (127.5, 127.5, 127.5)
    name: str = "model"

    def validate(self) -> None:
        """Raise ConfigError naming the first violated constraint."""
        if not self.stages:
            raise ConfigError("config needs at least one stage")
        if self.pooling not in ("global_avg", "cls_token"):
            raise ConfigError(f"pooling must be global_avg or cls_token, got {self.pooling!r}")
        if self.mid_patch_embed not in ("binary", "full"):
            raise ConfigError(
                f"mid_patch_embed must be binary or full, got {self.mid_patch_embed!r}"
            )
        if len(self.norm_mean) != self.in_channels or len(self.norm_std) != self.in_channels:
            raise ConfigError("norm_mean/norm_std must list one value per input channel")
        if any(s == 0 for s in self.norm_std):
            raise ConfigError("norm_std entries must be nonzero")

        for i, s in enumerate(self.stages, start=1):
            for fld in ("dim", "reduction", "heads", "ffn_expansion", "patch"):
                if getattr(s, fld) < 1:
                    raise ConfigError(f"stage{i}.{fld} must be a positive integer")
            if s.blocks < 0:
                raise ConfigError(f"stage{i}.blocks must be non-negative")
            if s.dim % s.heads:
                raise ConfigError(f"stage{i}: {s.heads} heads do not divide dim {s.dim}")
            if i > 1 and s.patch != 2:
                raise ConfigError(
                    f"stage{i}: mid-stage downsampling is a 2x2 merge, patch must be 2"
                )

        if self.pooling == "cls_token":
            if len(self.stages) > 1:
                raise ConfigError("cls_token pooling supports single-stage configs only")
            if self.use_multibranch:
                raise ConfigError("cls_token pooling is incompatible with pooling branches")
            if self.stages[0].reduction != 1:
                raise ConfigError("cls_token pooling requires reduction 1")

        grid = self.img_size
        for i, s in enumerate(self.stages, start=1):
            if grid % s.patch:
                raise ConfigError(
                    f"stage{i}: grid {grid} not divisible by downsample {s.patch}"
                )
            grid //= s.patch
            if grid % s.reduction:
                raise ConfigError(
                    f"stage{i}: reduction {s.reduction} does not divide grid {grid}"
                )
            if i > 1:
                d_in = 4 * self.stages[i - 2].dim
                if self.mid_patch_embed == "binary" and d_in % s.dim and s.dim % d_in:
                    raise ConfigError(
                        f"stage{i}: binary embed needs an integer ratio between "
                        f"{d_in} merged and {s.dim} output channels"
                    )

    def stage_grids(self) -> list:
        """Token grid (h, w) per stage for a full-size input."""
        grids = []
        side = self.img_size
        for s in self.stages:
            side //= s.patch
            grids.append((side, side))
        return grids


@dataclass
class BlockParams:
    bn1: BatchNormParams
    attn: BiMHAParams
    ls1: Optional[LayerScaleParams]
    bn2: BatchNormParams
    ffn1: BiFCLayer
    ffn2: BiFCLayer
    ls2: Optional[LayerScaleParams]


@dataclass
class StageParams:
    embed_full: Optional[LinearParams]
    embed_bin: Optional[BiFCLayer]
    pos: Optional[np.ndarray]
    blocks: list


@dataclass
class Model:
    cfg: ModelConfig
    stages: list
    cls_token: Optional[np.ndarray]
    final_bn: BatchNormParams
    classifier: LinearParams
    tensors: dict = field(repr=False, default_factory=dict)


def _stage_in_features(cfg: ModelConfig, i: int) -> int:
    if i == 0:
        return cfg.in_channels * cfg.stages[0].patch ** 2
    return 4 * cfg.stages[i - 1].dim


def tensor_layout(cfg: ModelConfig) -> list:
    """Ordered (name, kind, shape, init_tag) records for every stored tensor.

    kind is "f32" or "bits"; the order here is the serialization order and
    the initialization draw order, so it must stay stable.
    """
    out = []

    def bn(prefix, d):
        out.append((prefix + "gamma", "f32", (d,), "ones"))
        out.append((prefix + "beta", "f32", (d,), "zeros"))
        out.append((prefix + "mean", "f32", (d,), "zeros"))
        out.append((prefix + "var", "f32", (d,), "ones"))

    def act(prefix, d):
        out.append((prefix + "gamma", "f32", (d,), "zeros"))
        out.append((prefix + "zeta", "f32", (d,), "zeros"))
        out.append((prefix + "slope", "f32", (d,), "slope"))

    def bifc(prefix, d_in, d_out):
        out.append((prefix + "bits", "bits", (d_in, d_out), "weight"))
        out.append((prefix + "alpha", "f32", (1,), "stat"))
        out.append((prefix + "mu", "f32", (d_out,), "stat"))
        out.append((prefix + "beta", "f32", (d_in,), "zeros"))
        bn(prefix + "bn.", d_out)
        act(prefix + "act.", d_out)

    grids = cfg.stage_grids()
    for i, s in enumerate(cfg.stages):
        p = f"stage{i}."
        d_in = _stage_in_features(cfg, i)
        if i == 0 or cfg.mid_patch_embed == "full":
            out.append((p + "embed.weight", "f32", (d_in, s.dim), "weight"))
            out.append((p + "embed.bias", "f32", (s.dim,), "zeros"))
        else:
            bifc(p + "embed.", d_in, s.dim)
        if i == 0 and cfg.pooling == "cls_token":
            out.append(("cls_token", "f32", (1, s.dim), "weight"))
        if cfg.use_pos_embed:
            n = grids[i][0] * grids[i][1]
            if i == 0 and cfg.pooling == "cls_token":
                n += 1
            out.append((p + "pos", "f32", (n, s.dim), "weight"))
        for b in range(s.blocks):
            q = f"{p}block{b}."
            bn(q + "bn1.", s.dim)
            for proj in ("q", "k", "v", "o"):
                bifc(f"{q}attn.{proj}.", s.dim, s.dim)
            if s.reduction > 1:
                bifc(q + "attn.sr.", s.dim, s.dim)
            for sgn in ("q_sign", "k_sign", "v_sign"):
                out.append((f"{q}attn.{sgn}.beta", "f32", (s.dim,), "zeros"))
            bn(q + "attn.bn_at.", s.dim)
            act(q + "attn.act_at.", s.dim)
            out.append((q + "attn.prob_alpha", "f32", (1,), "prob_alpha"))
            if cfg.use_layerscale:
                out.append((q + "ls1.alpha", "f32", (s.dim,), "ls_alpha"))
                out.append((q + "ls1.beta", "f32", (s.dim,), "zeros"))
            bn(q + "bn2.", s.dim)
            hidden = s.dim * s.ffn_expansion
            bifc(q + "ffn1.", s.dim, hidden)
            bifc(q + "ffn2.", hidden, s.dim)
            if cfg.use_layerscale:
                out.append((q + "ls2.alpha", "f32", (s.dim,), "ls_alpha"))
                out.append((q + "ls2.beta", "f32", (s.dim,), "zeros"))

    d_last = cfg.stages[-1].dim
    bn("final_bn.", d_last)
    out.append(("classifier.weight", "f32", (d_last, cfg.num_classes), "weight"))
    out.append(("classifier.bias", "f32", (cfg.num_classes,), "zeros"))
    return out


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) with draws beyond 2 std redrawn."""
    x = rng.standard_normal(shape) * std
    bad = np.abs(x) > 2 * std
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(x) > 2 * std
    return x.astype(np.float32)


def init_tensors(cfg: ModelConfig, seed: int) -> dict:
    """Deterministic fresh tensor set for a config."""
    rng = np.random.default_rng(seed)
    tensors: dict = {}
    for name, kind, shape, tag in tensor_layout(cfg):
        if kind == "bits":
            latent = trunc_normal(rng, shape)
            bw = binarize_weights(latent)
            prefix = name[: -len("bits")]
            tensors[name] = bw.bits
            tensors[prefix + "alpha"] = np.array([bw.alpha], dtype=np.float32)
            tensors[prefix + "mu"] = bw.mu.astype(np.float32)
        elif tag == "stat":
            if name not in tensors:
                raise AssertionError(f"statistic {name} has no producing weight")
        elif tag == "weight":
            tensors[name] = trunc_normal(rng, shape)
        elif tag == "zeros":
            tensors[name] = np.zeros(shape, dtype=np.float32)
        elif tag == "ones":
            tensors[name] = np.ones(shape, dtype=np.float32)
        elif tag == "slope":
            tensors[name] = np.full(shape, 0.25, dtype=np.float32)
        elif tag == "ls_alpha":
            tensors[name] = np.full(shape, 0.1, dtype=np.float32)
        elif tag == "prob_alpha":
            tensors[name] = np.full(shape, PROB_ALPHA_INIT, dtype=np.float32)
        else:
            raise AssertionError(f"unhandled init tag {tag}")
    return tensors


def _bn_from(t: dict, prefix: str) -> BatchNormParams:
    return BatchNormParams(
        gamma=t[prefix + "gamma"],
        beta=t[prefix + "beta"],
        running_mean=t[prefix + "mean"],
        running_var=t[prefix + "var"],
    )


def _act_from(t: dict, prefix: str) -> RPReLUParams:
    return RPReLUParams(
        gamma=t[prefix + "gamma"], zeta=t[prefix + "zeta"], slope=t[prefix + "slope"]
    )


def _bifc_from(t: dict, prefix: str, d_in: int, d_out: int) -> BiFCLayer:
    return BiFCLayer(
        in_features=d_in,
        out_features=d_out,
        rsign_beta=RSignParams(beta=t[prefix + "beta"]),
        weight=BinWeight(
            bits=t[prefix + "bits"],
            alpha=float(t[prefix + "alpha"][0]),
            mu=t[prefix + "mu"],
        ),
        bn=_bn_from(t, prefix + "bn."),
        act=_act_from(t, prefix + "act."),
    )


def assemble(cfg: ModelConfig, tensors: dict) -> Model:
    """Build the runnable structure over a named tensor store."""
    stages = []
    for i, s in enumerate(cfg.stages):
        p = f"stage{i}."
        d_in = _stage_in_features(cfg, i)
        if i == 0 or cfg.mid_patch_embed == "full":
            embed_full = LinearParams(
                weight=tensors[p + "embed.weight"], bias=tensors[p + "embed.bias"]
            )
            embed_bin = None
        else:
            embed_full = None
            embed_bin = _bifc_from(tensors, p + "embed.", d_in, s.dim)
        pos = tensors.get(p + "pos") if cfg.use_pos_embed else None
        blocks = []
        for b in range(s.blocks):
            q = f"{p}block{b}."
            attn = BiMHAParams(
                dim=s.dim,
                heads=s.heads,
                sr_ratio=s.reduction,
                q=_bifc_from(tensors, q + "attn.q.", s.dim, s.dim),
                k=_bifc_from(tensors, q + "attn.k.", s.dim, s.dim),
                v=_bifc_from(tensors, q + "attn.v.", s.dim, s.dim),
                o=_bifc_from(tensors, q + "attn.o.", s.dim, s.dim),
                sr=_bifc_from(tensors, q + "attn.sr.", s.dim, s.dim)
                if s.reduction > 1
                else None,
                q_sign=RSignParams(beta=tensors[q + "attn.q_sign.beta"]),
                k_sign=RSignParams(beta=tensors[q + "attn.k_sign.beta"]),
                v_sign=RSignParams(beta=tensors[q + "attn.v_sign.beta"]),
                bn_at=_bn_from(tensors, q + "attn.bn_at."),
                act_at=_act_from(tensors, q + "attn.act_at."),
                prob_scale=AttnProbScale(alpha_p=float(tensors[q + "attn.prob_alpha"][0])),
            )
            hidden = s.dim * s.ffn_expansion
            blocks.append(
                BlockParams(
                    bn1=_bn_from(tensors, q + "bn1."),
                    attn=attn,
                    ls1=LayerScaleParams(
                        alpha=tensors[q + "ls1.alpha"], beta=tensors[q + "ls1.beta"]
                    )
                    if cfg.use_layerscale
                    else None,
                    bn2=_bn_from(tensors, q + "bn2."),
                    ffn1=_bifc_from(tensors, q + "ffn1.", s.dim, hidden),
                    ffn2=_bifc_from(tensors, q + "ffn2.", hidden, s.dim),
                    ls2=LayerScaleParams(
                        alpha=tensors[q + "ls2.alpha"], beta=tensors[q + "ls2.beta"]
                    )
                    if cfg.use_layerscale
                    else None,
                )
            )
        stages.append(
            StageParams(embed_full=embed_full, embed_bin=embed_bin, pos=pos, blocks=blocks)
        )
    return Model(
        cfg=cfg,
        stages=stages,
        cls_token=tensors.get("cls_token"),
        final_bn=_bn_from(tensors, "final_bn."),
        classifier=LinearParams(
            weight=tensors["classifier.weight"], bias=tensors["classifier.bias"]
        ),
        tensors=tensors,
    )


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    cfg.validate()
    return assemble(cfg, init_tensors(cfg, seed))


def _block_forward(tokens, grid, blk: BlockParams, cfg: ModelConfig, training=False):
    attn_in = batchnorm_forward(tokens, blk.bn1, training)
    attn_out = bi_mha_forward(attn_in, grid, blk.attn, training)
    if blk.ls1 is not None:
        tokens = layerscale_residual(attn_out, blk.ls1, tokens)
    else:
        tokens = attn_out + tokens
    f_norm = batchnorm_forward(tokens, blk.bn2, training)
    branch = bifc_forward(bifc_forward(f_norm, blk.ffn1, training), blk.ffn2, training)
    if cfg.use_multibranch:
        branch = branch + multi_pool_branches(f_norm, grid)
    if blk.ls2 is not None:
        tokens = layerscale_residual(branch, blk.ls2, tokens)
    else:
        tokens = branch + tokens
    return tokens


def backbone_forward(model: Model, image: np.ndarray):
    """Image [H, W, C] to final token matrix. Returns (tokens, trace).

    The trace maps stage index to the token grid entered by that stage's
    blocks; with a cls token the extra row rides in front of the grid rows.
    """
    cfg = model.cfg
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3 or img.shape != (cfg.img_size, cfg.img_size, cfg.in_channels):
        raise ShapeError(
            f"expected a {cfg.img_size}x{cfg.img_size}x{cfg.in_channels} image, "
            f"got shape {img.shape}"
        )
    chw = np.ascontiguousarray(img.transpose(2, 0, 1))

    tokens, grid = None, None
    grids = []
    for i, (s, sp) in enumerate(zip(cfg.stages, model.stages)):
        if i == 0:
            tokens, grid = extract_patches(chw, s.patch)
            tokens = linear_forward(tokens, sp.embed_full)
            if model.cls_token is not None:
                tokens = np.concatenate([model.cls_token, tokens], axis=0)
        else:
            tokens, grid = merge_tokens(tokens, grid)
            if sp.embed_full is not None:
                tokens = linear_forward(tokens, sp.embed_full)
            else:
                tokens = bifc_forward(tokens, sp.embed_bin)
        if sp.pos is not None:
            tokens = tokens + sp.pos
        grids.append(grid)
        for blk in sp.blocks:
            tokens = _block_forward(tokens, grid, blk, cfg)
    return tokens, {"grids": grids}


def head_forward(model: Model, tokens: np.ndarray) -> np.ndarray:
    """Final norm, pooling, and the full-precision classifier."""
    normed = batchnorm_forward(tokens, model.final_bn)
    if model.cfg.pooling == "cls_token":
        pooled = normed[0]
    else:
        pooled = global_avg_pool(normed)
    return linear_forward(pooled[None, :], model.classifier)[0]


def forward(model: Model, image: np.ndarray) -> np.ndarray:
    tokens, _ = backbone_forward(model, image)
    return head_forward(model, tokens)


def forward_with_trace(model: Model, image: np.ndarray):
    tokens, trace = backbone_forward(model, image)
    return head_forward(model, tokens), trace


# --- weight container ---


def save_weights(model: Model, path: str) -> None:
    """Write the model to the packed little-endian container."""
    from .configio import render_model_config

    cfg_blob = render_model_config(model.cfg).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<I", len(cfg_blob)))
        f.write(cfg_blob)
        f.write(struct.pack("<I", len(model.tensors)))
        for name, t in model.tensors.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            if isinstance(t, BitMatrix):
                f.write(struct.pack("<BB", DTYPE_PACKED, 2))
                f.write(struct.pack("<QQ", t.rows, t.cols))
                f.write(np.ascontiguousarray(t.data).astype("<u8").tobytes())
            else:
                arr = np.ascontiguousarray(t, dtype="<f4")
                f.write(struct.pack("<BB", DTYPE_F32, arr.ndim))
                f.write(struct.pack("<" + "Q" * arr.ndim, *arr.shape))
                f.write(arr.tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise WeightFormatError(f"truncated file while reading {what}")
    return data


def load_weights(path: str) -> Model:
    """Read a weight container back into a runnable model.

    Rejects wrong magic/version, truncated payloads, tensors the config's
    layout does not expect, shape or dtype mismatches, and missing tensors.
    """
    from .configio import parse_model_config

    with open(path, "rb") as fh:
        f = io.BytesIO(fh.read())

    if _read_exact(f, 4, "magic") != MAGIC:
        raise WeightFormatError("bad magic: not a weight container")
    (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
    if version != FORMAT_VERSION:
        raise WeightFormatError(f"unsupported container version {version}")
    (cfg_len,) = struct.unpack("<I", _read_exact(f, 4, "config length"))
    try:
        cfg_text = _read_exact(f, cfg_len, "config blob").decode("utf-8")
    except UnicodeDecodeError as e:
        raise WeightFormatError(f"config blob is not UTF-8: {e}") from None
    try:
        cfg = parse_model_config(cfg_text)
    except ConfigError as e:
        raise WeightFormatError(f"embedded config invalid: {e}") from None

    expected = {
        name: (kind, shape) for name, kind, shape, _ in tensor_layout(cfg)
    }
    (count,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
    tensors: dict = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
        name = _read_exact(f, name_len, "tensor name").decode("utf-8")
        dtype, rank = struct.unpack("<BB", _read_exact(f, 2, "tensor header"))
        dims = struct.unpack(
            "<" + "Q" * rank, _read_exact(f, 8 * rank, f"dims of {name}")
        )
        if name not in expected:
            raise WeightFormatError(f"unknown tensor {name!r} for this config")
        kind, shape = expected[name]
        want_dtype = DTYPE_PACKED if kind == "bits" else DTYPE_F32
        if dtype != want_dtype:
            raise WeightFormatError(f"tensor {name!r} has wrong dtype code {dtype}")
        if tuple(dims) != tuple(shape):
            raise WeightFormatError(
                f"tensor {name!r} has shape {tuple(dims)}, expected {tuple(shape)}"
            )
        if dtype == DTYPE_PACKED:
            rows, cols = dims
            words = (cols + WORD_BITS - 1) // WORD_BITS
            payload = _read_exact(f, rows * words * 8, f"payload of {name}")
            data = np.frombuffer(payload, dtype="<u8").reshape(rows, words)
            tensors[name] = BitMatrix(rows, cols, data.astype(np.uint64))
        else:
            n_elem = int(np.prod(dims, dtype=np.int64)) if rank else 1
            payload = _read_exact(f, n_elem * 4, f"payload of {name}")
            arr = np.frombuffer(payload, dtype="<f4").reshape(dims)
            tensors[name] = arr.astype(np.float32)
    missing = sorted(set(expected) - set(tensors))
    if missing:
        raise WeightFormatError(f"missing tensors: {', '.join(missing[:5])}")
    if f.read(1):
        raise WeightFormatError("trailing bytes after final tensor")
    return assemble(cfg, tensors)
