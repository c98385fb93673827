"""Command line entry point.

Verbs: infer, count, repcap, train-toy, selftest. Reports print their
delimited tables to stdout and render companion figures next to any files
they write. Exit codes: 0 success, 1 selftest failure, 2 bad arguments,
3 unreadable or malformed files.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .analysis import (
    cost_report_json,
    count_costs,
    render_cost_report,
    render_repcap,
    repcap,
    repcap_json,
)
from .configio import bundled_path, read_capability, read_model_config
from .errors import BinaryViTError, ImageFormatError
from .model import forward, load_weights, save_weights


def _resolve(value: str, suffix: str) -> str:
    """A config argument is a path if one exists, else a bundled name."""
    if os.path.exists(value):
        return value
    return bundled_path(value + suffix)


def read_ppm(data: bytes) -> np.ndarray:
    """Parse a binary P6 image into a [H, W, 3] float array scaled to 0..255."""
    pos = 0

    def token():
        nonlocal pos
        while pos < len(data):
            if data[pos : pos + 1].isspace():
                pos += 1
            elif data[pos : pos + 1] == b"#":
                while pos < len(data) and data[pos : pos + 1] != b"\n":
                    pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated image header")
        return data[start:pos]

    if token() != b"P6":
        raise ImageFormatError("not a binary P6 image")
    try:
        width, height, maxval = int(token()), int(token()), int(token())
    except ValueError as e:
        raise ImageFormatError(f"bad image header: {e}") from None
    if maxval <= 0 or maxval > 255:
        raise ImageFormatError(f"unsupported sample range {maxval}")
    pos += 1  # exactly one whitespace byte separates header and pixels
    pixels = data[pos : pos + width * height * 3]
    if len(pixels) != width * height * 3:
        raise ImageFormatError("pixel data shorter than the header promises")
    arr = np.frombuffer(pixels, dtype=np.uint8).reshape(height, width, 3)
    return arr.astype(np.float32) * (255.0 / maxval)


def read_image(path: str, side: int, channels: int) -> np.ndarray:
    """Load a .ppm/.pnm file or raw 8-bit H*W*C bytes as [H, W, C] 0..255."""
    with open(path, "rb") as f:
        data = f.read()
    if path.lower().endswith((".ppm", ".pnm")):
        img = read_ppm(data)
    else:
        expected = side * side * channels
        if len(data) != expected:
            raise ImageFormatError(
                f"raw image must be exactly {expected} bytes "
                f"({side}x{side}x{channels}), got {len(data)}"
            )
        img = np.frombuffer(data, dtype=np.uint8).reshape(side, side, channels)
        img = img.astype(np.float32)
    if img.shape != (side, side, channels):
        raise ImageFormatError(
            f"image is {img.shape[0]}x{img.shape[1]}x{img.shape[2]}, "
            f"model wants {side}x{side}x{channels}"
        )
    return img


def preprocess(img: np.ndarray, cfg) -> np.ndarray:
    mean = np.asarray(cfg.norm_mean, dtype=np.float32)
    std = np.asarray(cfg.norm_std, dtype=np.float32)
    return (img - mean) / std


def cmd_infer(args) -> int:
    model = load_weights(args.weights)
    cfg = model.cfg
    img = read_image(args.image, cfg.img_size, cfg.in_channels)
    logits = forward(model, preprocess(img, cfg))
    order = np.argsort(-logits)[: args.top]
    for cls in order:
        print(f"{cls}\t{logits[cls]}")
    return 0


def cmd_count(args) -> int:
    cfg = read_model_config(_resolve(args.config, ".cfg"))
    report = count_costs(cfg)
    sys.stdout.write(render_cost_report(report))
    os.makedirs(args.out, exist_ok=True)
    if not args.no_figure:
        from .report import save_cost_figure

        fig = save_cost_figure(report, os.path.join(args.out, f"{cfg.name}_costs.png"))
        print(f"figure: {fig}", file=sys.stderr)
    if args.json:
        path = os.path.join(args.out, f"{cfg.name}_costs.json")
        with open(path, "w") as f:
            json.dump(cost_report_json(report), f, indent=2)
        print(f"json: {path}", file=sys.stderr)
    return 0


def cmd_repcap(args) -> int:
    chain = repcap(read_capability(_resolve(args.chain, ".cap")))
    sys.stdout.write(render_repcap(chain))
    os.makedirs(args.out, exist_ok=True)
    if not args.no_figure:
        from .report import save_repcap_figure

        fig = save_repcap_figure(chain, os.path.join(args.out, f"{chain.name}_capacity.png"))
        print(f"figure: {fig}", file=sys.stderr)
    if args.json:
        path = os.path.join(args.out, f"{chain.name}_capacity.json")
        with open(path, "w") as f:
            json.dump(repcap_json(chain), f, indent=2)
        print(f"json: {path}", file=sys.stderr)
    return 0


def cmd_train_toy(args) -> int:
    from .train.loop import render_trace, train_toy
    from .train.network import export_model

    cfg = read_model_config(_resolve(args.config, ".cfg"))
    result = train_toy(
        cfg,
        steps=args.steps,
        batch_size=args.batch_size,
        dataset_size=args.data_size,
        base_lr=args.lr,
        seed=args.seed,
    )
    sys.stdout.write(render_trace(result.trace))
    print(f"final_accuracy\t{result.final_accuracy!r}")
    os.makedirs(args.out, exist_ok=True)
    if not args.no_figure:
        from .report import save_training_figure

        fig = save_training_figure(
            result.trace, os.path.join(args.out, f"{cfg.name}_training.png")
        )
        print(f"figure: {fig}", file=sys.stderr)
    weights = os.path.join(args.out, f"{cfg.name}_trained.bvw")
    save_weights(export_model(cfg, result.train_state.state), weights)
    print(f"weights: {weights}", file=sys.stderr)
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    return 0 if run_selftest() else 1


def _positive(kind, what):
    def parse(s):
        try:
            v = kind(s)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{what} must be a {kind.__name__}")
        if v <= 0:
            raise argparse.ArgumentTypeError(f"{what} must be positive")
        return v

    return parse


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="binaryvit",
        description="Binary vision transformer inference and analysis.",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("infer", help="classify one image with saved weights")
    p.add_argument("--weights", required=True, help="weight container file")
    p.add_argument("--image", required=True, help=".ppm/.pnm or raw 8-bit RGB file")
    p.add_argument("--top", type=_positive(int, "--top"), default=5)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("count", help="per-layer compute and parameter table")
    p.add_argument("--config", required=True, help="bundled config name or path")
    p.add_argument("--out", default=".", help="directory for figures and json")
    p.add_argument("--json", action="store_true", help="also write the report as json")
    p.add_argument("--no-figure", action="store_true")
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("repcap", help="evaluate a capacity accumulation chain")
    p.add_argument("--chain", required=True, help="bundled chain name or path")
    p.add_argument("--out", default=".")
    p.add_argument("--json", action="store_true")
    p.add_argument("--no-figure", action="store_true")
    p.set_defaults(func=cmd_repcap)

    p = sub.add_parser("train-toy", help="fit the toy config on synthetic data")
    p.add_argument("--config", default="toy")
    p.add_argument("--steps", type=_positive(int, "--steps"), default=2000)
    p.add_argument("--batch-size", type=_positive(int, "--batch-size"), default=32)
    p.add_argument("--data-size", type=_positive(int, "--data-size"), default=256)
    p.add_argument("--lr", type=_positive(float, "--lr"), default=2e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".")
    p.add_argument("--no-figure", action="store_true")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("selftest", help="kernel oracles and gradient checks")
    p.set_defaults(func=cmd_selftest)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BinaryViTError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
