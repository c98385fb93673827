"""Reading and writing the two text formats the tools consume.

Model configurations are INI files: one ``[model]`` section plus ordered
``[stage1]``..``[stageN]`` sections. Capability descriptions are line-based:
one directive per line (shlex rules, ``#`` comments), describing the
capability chain of a network as first-layer parameters, additive
contributions, and transition multipliers.
"""

from __future__ import annotations

import configparser
import shlex
from dataclasses import dataclass
from typing import Optional

from .errors import ConfigError


@dataclass
class FirstLayerSpec:
    kernel: int
    channels: int
    max_input: int


@dataclass
class CapAdd:
    label: str
    contribution: int
    count: int


@dataclass
class CapMultiply:
    label: str
    factor: int


@dataclass
class CapabilityDescription:
    """Parsed capability chain: what each layer adds, what each transition multiplies."""

    name: str
    first_layer: Optional[FirstLayerSpec]
    items: list  # CapAdd / CapMultiply in order
    published_total: Optional[int] = None


def parse_capability(text: str) -> CapabilityDescription:
    name = "unnamed"
    first = None
    items: list = []
    published = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        try:
            tokens = shlex.split(raw, comments=True)
        except ValueError as e:
            raise ConfigError(f"line {lineno}: {e}") from None
        if not tokens:
            continue
        directive, args = tokens[0], tokens[1:]
        try:
            if directive == "name":
                name = " ".join(args)
            elif directive == "first_layer":
                kv = _keyvals(args, {"kernel", "channels", "max_input"}, lineno)
                first = FirstLayerSpec(
                    kernel=_pos_int(kv, "kernel", lineno),
                    channels=_pos_int(kv, "channels", lineno),
                    max_input=_pos_int(kv, "max_input", lineno),
                )
            elif directive == "add":
                kv = _keyvals(args, {"label", "contribution", "count"}, lineno)
                items.append(
                    CapAdd(
                        label=kv.get("label", f"add{len(items)}"),
                        contribution=_pos_int(kv, "contribution", lineno),
                        count=_pos_int(kv, "count", lineno, default=1),
                    )
                )
            elif directive == "multiply":
                kv = _keyvals(args, {"label", "factor"}, lineno)
                items.append(
                    CapMultiply(
                        label=kv.get("label", f"multiply{len(items)}"),
                        factor=_pos_int(kv, "factor", lineno),
                    )
                )
            elif directive == "published_total":
                if len(args) != 1:
                    raise ConfigError(f"line {lineno}: published_total takes one value")
                published = int(args[0].replace(",", ""))
            else:
                raise ConfigError(f"line {lineno}: unknown directive {directive!r}")
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(f"line {lineno}: {e}") from None
    return CapabilityDescription(
        name=name, first_layer=first, items=items, published_total=published
    )


def read_capability(path: str) -> CapabilityDescription:
    with open(path, "r", encoding="utf-8") as f:
        return parse_capability(f.read())


def _keyvals(args, allowed, lineno):
    kv = {}
    for a in args:
        if "=" not in a:
            raise ConfigError(f"line {lineno}: expected key=value, got {a!r}")
        k, v = a.split("=", 1)
        if k not in allowed:
            raise ConfigError(f"line {lineno}: unknown key {k!r}")
        kv[k] = v
    return kv


def _pos_int(kv, key, lineno, default=None):
    if key not in kv:
        if default is not None:
            return default
        raise ConfigError(f"line {lineno}: missing required key {key!r}")
    value = int(kv[key].replace(",", ""))
    if value <= 0:
        raise ConfigError(f"line {lineno}: {key} must be positive, got {value}")
    return value


# --- model configuration files ---

_MODEL_BOOLS = ("use_multibranch", "use_layerscale", "use_pos_embed")


def parse_model_config(text: str):
    """Parse an INI model description into a ModelConfig (validated)."""
    from .model import ModelConfig, StageConfig

    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"bad config syntax: {e}") from None
    if "model" not in parser:
        raise ConfigError("missing [model] section")
    m = parser["model"]

    stage_names = [s for s in parser.sections() if s.startswith("stage")]
    expected = [f"stage{i}" for i in range(1, len(stage_names) + 1)]
    if sorted(stage_names) != sorted(expected):
        raise ConfigError(
            f"stage sections must be stage1..stageN, got {sorted(stage_names)}"
        )

    stages = []
    for name in expected:
        s = parser[name]
        try:
            stages.append(
                StageConfig(
                    dim=s.getint("dim"),
                    reduction=s.getint("reduction", 1),
                    heads=s.getint("heads"),
                    ffn_expansion=s.getint("ffn_expansion"),
                    blocks=s.getint("blocks"),
                    patch=s.getint("patch"),
                )
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(f"[{name}]: {e}") from None

    try:
        kwargs = dict(
            name=m.get("name", "model"),
            stages=stages,
            img_size=m.getint("img_size", 224),
            in_channels=m.getint("in_channels", 3),
            num_classes=m.getint("num_classes", 1000),
            pooling=m.get("pooling", "global_avg"),
            mid_patch_embed=m.get("mid_patch_embed", "binary"),
            norm_mean=_float_triplet(m.get("norm_mean", "127.5, 127.5, 127.5")),
            norm_std=_float_triplet(m.get("norm_std", "127.5, 127.5, 127.5")),
        )
        for key in _MODEL_BOOLS:
            if m.get(key) is not None:
                kwargs[key] = m.getboolean(key)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[model]: {e}") from None

    cfg = ModelConfig(**kwargs)
    cfg.validate()
    return cfg


def _float_triplet(s: str) -> tuple:
    parts = [p for p in s.replace(",", " ").split() if p]
    return tuple(float(p) for p in parts)


def render_model_config(cfg) -> str:
    """Inverse of parse_model_config, up to formatting."""
    lines = [
        "[model]",
        f"name = {cfg.name}",
        f"img_size = {cfg.img_size}",
        f"in_channels = {cfg.in_channels}",
        f"num_classes = {cfg.num_classes}",
        f"pooling = {cfg.pooling}",
        f"use_multibranch = {str(cfg.use_multibranch).lower()}",
        f"use_layerscale = {str(cfg.use_layerscale).lower()}",
        f"use_pos_embed = {str(cfg.use_pos_embed).lower()}",
        f"mid_patch_embed = {cfg.mid_patch_embed}",
        "norm_mean = " + ", ".join(repr(v) for v in cfg.norm_mean),
        "norm_std = " + ", ".join(repr(v) for v in cfg.norm_std),
    ]
    for i, s in enumerate(cfg.stages, start=1):
        lines += [
            "",
            f"[stage{i}]",
            f"dim = {s.dim}",
            f"reduction = {s.reduction}",
            f"heads = {s.heads}",
            f"ffn_expansion = {s.ffn_expansion}",
            f"blocks = {s.blocks}",
            f"patch = {s.patch}",
        ]
    return "\n".join(lines) + "\n"


def read_model_config(path: str):
    with open(path, "r", encoding="utf-8") as f:
        return parse_model_config(f.read())


def bundled_path(filename: str) -> str:
    """Absolute path of a config file shipped inside the package."""
    from importlib import resources

    p = resources.files("binaryvit").joinpath("configs", filename)
    if not p.is_file():
        raise ConfigError(f"no bundled file named {filename!r}")
    return str(p)


def load_bundled_model_config(name: str):
    return read_model_config(bundled_path(name + ".cfg"))
