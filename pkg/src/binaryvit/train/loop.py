"""Optimizer, schedule, synthetic data, and the toy training entry point."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import TrainingDiverged
from ..model import ModelConfig
from ..quant import lsq_grad_scale
from . import autograd as ag
from .network import (
    apply_stat_updates,
    init_state,
    learnable_names,
    make_params,
    network_forward,
    predict,
)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def distill_loss(student_logits, teacher_logits, temperature: float = 1.0) -> float:
    """Soft cross-entropy between teacher and student logits.

    -sum softmax(teacher/T) * log_softmax(student/T) over classes, averaged
    over any leading axes.
    """
    s = np.asarray(student_logits, dtype=np.float64) / temperature
    t = np.asarray(teacher_logits, dtype=np.float64) / temperature
    if s.shape != t.shape:
        raise ValueError(f"logit shapes differ: {s.shape} vs {t.shape}")
    s_shift = s - s.max(axis=-1, keepdims=True)
    log_q = s_shift - np.log(np.exp(s_shift).sum(axis=-1, keepdims=True))
    t_shift = t - t.max(axis=-1, keepdims=True)
    e = np.exp(t_shift)
    p = e / e.sum(axis=-1, keepdims=True)
    return float(-(p * log_q).sum(axis=-1).mean())


def one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    out = np.zeros((len(labels), classes), dtype=np.float64)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * step / total_steps))


@dataclass
class TrainState:
    """Parameters plus Adam moments and the step counter."""

    state: dict
    m: dict
    v: dict
    step: int = 0


def init_train_state(cfg: ModelConfig, seed: int) -> TrainState:
    state = init_state(cfg, seed)
    names = learnable_names(state)
    return TrainState(
        state=state,
        m={n: np.zeros_like(state[n]) for n in names},
        v={n: np.zeros_like(state[n]) for n in names},
    )


def adam_step(ts: TrainState, grads: dict, lr: float) -> TrainState:
    """One Adam update in place. A zero learning rate changes nothing."""
    if lr == 0.0:
        return ts
    ts.step += 1
    t = ts.step
    for name, g in grads.items():
        m = ts.m[name] = ADAM_BETA1 * ts.m[name] + (1 - ADAM_BETA1) * g
        v = ts.v[name] = ADAM_BETA2 * ts.v[name] + (1 - ADAM_BETA2) * g * g
        m_hat = m / (1 - ADAM_BETA1**t)
        v_hat = v / (1 - ADAM_BETA2**t)
        ts.state[name] = ts.state[name] - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return ts


def make_toy_dataset(
    n: int, seed: int, img_size: int = 32, channels: int = 3, classes: int = 10
):
    """Synthetic classification set: smooth per-class templates plus noise.

    Each class gets a low-frequency template (a coarse random grid blown up
    to full resolution); samples are the template with additive noise.
    Labels cycle round-robin so every class appears equally often.
    """
    rng = np.random.default_rng(seed)
    coarse = 4
    reps = img_size // coarse
    templates = np.empty((classes, img_size, img_size, channels))
    for c in range(classes):
        low = rng.normal(size=(coarse, coarse, channels))
        templates[c] = np.repeat(np.repeat(low, reps, axis=0), reps, axis=1)
    labels = np.arange(n) % classes
    images = templates[labels] + 0.35 * rng.normal(size=(n, img_size, img_size, channels))
    return images, labels


@dataclass
class TrainResult:
    trace: list = field(default_factory=list)
    final_accuracy: float = 0.0
    train_state: TrainState = None


def train_toy(
    cfg: ModelConfig,
    steps: int = 2000,
    batch_size: int = 32,
    dataset_size: int = 256,
    base_lr: float = 2e-3,
    seed: int = 0,
) -> TrainResult:
    """Fit the network to the synthetic set and record a metrics trace.

    The batch order, initialization, and data are all derived from the seed,
    so the trace is reproducible bit for bit. Raises TrainingDiverged if the
    loss stops being finite.
    """
    images, labels = make_toy_dataset(
        dataset_size, seed, img_size=cfg.img_size, channels=cfg.in_channels,
        classes=cfg.num_classes,
    )
    ts = init_train_state(cfg, seed)
    result = TrainResult(train_state=ts)

    for step in range(steps):
        idx = (np.arange(batch_size) + step * batch_size) % dataset_size
        batch_x, batch_y = images[idx], labels[idx]
        params = make_params(ts.state)
        # hard quantizers in the forward pass; the straight-through rules
        # shape only the backward, so train and eval see the same arithmetic
        logits, aux = network_forward(cfg, params, ts.state, batch_x, surrogate=False)
        targets = one_hot(batch_y, cfg.num_classes)
        log_probs = ag.log_softmax_last(logits)
        loss = ag.scale(ag.vsum(ag.mul(log_probs, ag.const(targets))), -1.0 / batch_size)
        loss_val = float(loss.value)
        if not np.isfinite(loss_val):
            raise TrainingDiverged(step)
        accuracy = float((logits.value.argmax(axis=1) == batch_y).mean())

        ag.backward(loss)
        grads = {
            n: (p.grad if p.grad is not None else np.zeros_like(p.value))
            for n, p in params.items()
        }
        for name, size in aux["lsq_sizes"].items():
            grads[name] = grads[name] * lsq_grad_scale(size)
        apply_stat_updates(ts.state, aux["stat_updates"])
        lr = float(cosine_lr(base_lr, step, steps))
        adam_step(ts, grads, lr)
        result.trace.append({"step": step, "loss": loss_val, "accuracy": accuracy, "lr": lr})

    preds = predict(cfg, ts.state, images).argmax(axis=1)
    result.final_accuracy = float((preds == labels).mean())
    return result


def render_trace(trace) -> str:
    """Line-delimited metrics: step, loss, accuracy, lr."""
    lines = ["step\tloss\taccuracy\tlr"]
    for row in trace:
        lines.append(f"{row['step']}\t{row['loss']!r}\t{row['accuracy']!r}\t{row['lr']!r}")
    return "\n".join(lines) + "\n"
