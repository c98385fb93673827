"""Static analyzers: operation/parameter accounting and capability chains.

Cost accounting follows one rule: every matrix multiply contributes one
multiply-accumulate per output element per inner index, to ``bops`` when both
operands are binarized and ``flops`` when the layer is full precision.
Elementwise work, softmax, normalization, and pooling are not counted.
Parameters count learnable tensors only; derived statistics and running
buffers are excluded.

The capability calculus tracks how many distinct absolute values one tensor
element can take: a first full-precision layer seeds it, every binary layer
adds its input fan-in, and every aggregating transition multiplies it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .configio import CapabilityDescription, CapAdd, CapMultiply
from .errors import ParameterError
from .model import ModelConfig


@dataclass
class LayerCost:
    name: str
    kind: str
    flops: int
    bops: int
    params: int


@dataclass
class CostReport:
    model_name: str
    per_layer: list
    flops: int
    bops: int
    params: int

    @property
    def ops(self) -> float:
        return self.bops / 64 + self.flops


def _bifc_params(d_in: int, d_out: int) -> int:
    # weight + sign threshold + BN scale/shift + activation shifts/slope
    return d_in * d_out + d_in + 2 * d_out + 3 * d_out


def count_costs(cfg: ModelConfig) -> CostReport:
    """Walk a config and price every layer."""
    cfg.validate()
    layers: list = []

    def add(name, kind, flops=0, bops=0, params=0):
        layers.append(LayerCost(name, kind, flops, bops, params))

    grids = cfg.stage_grids()
    for i, s in enumerate(cfg.stages):
        n = grids[i][0] * grids[i][1]
        d = s.dim
        if i == 0:
            d_in = cfg.in_channels * s.patch**2
            add(
                f"stage{i}.embed",
                "patch_embed",
                flops=n * d_in * d,
                params=d_in * d + d,
            )
            if cfg.pooling == "cls_token":
                add("cls_token", "token", params=d)
        else:
            d_in = 4 * cfg.stages[i - 1].dim
            if cfg.mid_patch_embed == "full":
                add(
                    f"stage{i}.embed",
                    "patch_embed",
                    flops=n * d_in * d,
                    params=d_in * d + d,
                )
            else:
                add(
                    f"stage{i}.embed",
                    "patch_embed",
                    bops=n * d_in * d,
                    params=_bifc_params(d_in, d),
                )
        if cfg.use_pos_embed:
            n_pos = n + 1 if (i == 0 and cfg.pooling == "cls_token") else n
            add(f"stage{i}.pos", "pos_embed", params=n_pos * d)

        n_tok = n + 1 if (i == 0 and cfg.pooling == "cls_token") else n
        m = (grids[i][0] // s.reduction) * (grids[i][1] // s.reduction)
        if cfg.pooling == "cls_token":
            m = n_tok
        for b in range(s.blocks):
            base = f"stage{i}.block{b}"
            add(f"{base}.bn1", "norm", params=2 * d)
            attn_bops = (
                n_tok * d * d  # queries
                + 2 * m * d * d  # keys and values
                + n_tok * d * d  # output projection
                + n_tok * m * d  # scores, summed over heads
                + n_tok * m * d  # probabilities x values
            )
            attn_params = 4 * _bifc_params(d, d) + 3 * d + 2 * d + 3 * d + 1
            if s.reduction > 1:
                attn_bops += m * d * d
                attn_params += _bifc_params(d, d)
            add(f"{base}.attn", "attention", bops=attn_bops, params=attn_params)
            if cfg.use_layerscale:
                add(f"{base}.ls1", "layerscale", params=2 * d)
            add(f"{base}.bn2", "norm", params=2 * d)
            hidden = d * s.ffn_expansion
            add(
                f"{base}.ffn",
                "ffn",
                bops=2 * n_tok * d * hidden,
                params=_bifc_params(d, hidden) + _bifc_params(hidden, d),
            )
            if cfg.use_layerscale:
                add(f"{base}.ls2", "layerscale", params=2 * d)

    d_last = cfg.stages[-1].dim
    add("final_bn", "norm", params=2 * d_last)
    add(
        "classifier",
        "classifier",
        flops=d_last * cfg.num_classes,
        params=d_last * cfg.num_classes + cfg.num_classes,
    )

    return CostReport(
        model_name=cfg.name,
        per_layer=layers,
        flops=sum(l.flops for l in layers),
        bops=sum(l.bops for l in layers),
        params=sum(l.params for l in layers),
    )


def render_cost_report(report: CostReport) -> str:
    lines = [f"model\t{report.model_name}"]
    lines.append("layer\tkind\tflops\tbops\tparams")
    for l in report.per_layer:
        lines.append(f"{l.name}\t{l.kind}\t{l.flops}\t{l.bops}\t{l.params}")
    lines.append(f"total_flops\t{report.flops}")
    lines.append(f"total_bops\t{report.bops}")
    lines.append(f"total_params\t{report.params}")
    lines.append(f"ops\t{report.ops}")
    return "\n".join(lines) + "\n"


def cost_report_json(report: CostReport) -> dict:
    return {
        "model": report.model_name,
        "flops": report.flops,
        "bops": report.bops,
        "ops": report.ops,
        "params": report.params,
        "per_layer": [
            {
                "name": l.name,
                "kind": l.kind,
                "flops": l.flops,
                "bops": l.bops,
                "params": l.params,
            }
            for l in report.per_layer
        ],
    }


# --- representational capability ---


@dataclass
class CapStep:
    label: str
    kind: str  # first_layer | add_contribution | multiply_transition
    value: int
    running: int


@dataclass
class RepCapChain:
    name: str
    steps: list
    total: int
    published_total: Optional[int] = None

    @property
    def diverges(self) -> bool:
        return self.published_total is not None and self.published_total != self.total


def repcap(desc: CapabilityDescription) -> RepCapChain:
    """Evaluate a capability description left to right.

    The first layer seeds floor(K^2 * C * max_input / 2): the affine output
    range is symmetrized around zero, and only absolute values count. Each
    add step contributes contribution*count; each multiply step scales the
    running total by its aggregation factor.
    """
    steps: list = []
    running = 0
    if desc.first_layer is not None:
        fl = desc.first_layer
        if fl.kernel < 1 or fl.channels < 1 or fl.max_input < 1:
            raise ParameterError("first-layer parameters must be positive")
        value = (fl.kernel**2 * fl.channels * fl.max_input) // 2
        running = value
        steps.append(CapStep("first_layer", "first_layer", value, running))
    for item in desc.items:
        if isinstance(item, CapAdd):
            if item.contribution < 1 or item.count < 1:
                raise ParameterError(f"{item.label}: contributions must be positive")
            value = item.contribution * item.count
            running += value
            steps.append(CapStep(item.label, "add_contribution", value, running))
        elif isinstance(item, CapMultiply):
            if item.factor < 1:
                raise ParameterError(f"{item.label}: factor must be positive")
            running *= item.factor
            steps.append(CapStep(item.label, "multiply_transition", item.factor, running))
        else:
            raise ParameterError(f"unknown capability item {item!r}")
    return RepCapChain(
        name=desc.name,
        steps=steps,
        total=running,
        published_total=desc.published_total,
    )


def render_repcap(chain: RepCapChain) -> str:
    lines = [f"capability\t{chain.name}"]
    lines.append("step\tkind\tvalue\trunning")
    for s in chain.steps:
        lines.append(f"{s.label}\t{s.kind}\t{s.value}\t{s.running}")
    lines.append(f"total\t{chain.total}")
    if chain.published_total is not None:
        lines.append(f"published_total\t{chain.published_total}")
        if chain.diverges:
            lines.append(
                f"divergence\tcomputed {chain.total} != published "
                f"{chain.published_total} (literal chain evaluated as written)"
            )
        else:
            lines.append("divergence\tnone")
    return "\n".join(lines) + "\n"


def repcap_json(chain: RepCapChain) -> dict:
    return {
        "name": chain.name,
        "total": chain.total,
        "published_total": chain.published_total,
        "diverges": chain.diverges,
        "steps": [
            {"label": s.label, "kind": s.kind, "value": s.value, "running": s.running}
            for s in chain.steps
        ],
    }
