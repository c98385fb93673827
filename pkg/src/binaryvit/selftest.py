"""Built-in consistency suites for the command line's selftest verb.

Two families: the packed GEMM kernels against dense references, and the
training gradients against central finite differences. Both are seeded, so
a failure reproduces exactly.
"""

from __future__ import annotations

import numpy as np

from .bittensor import (
    binary_gemm,
    gate_gemm,
    naive_gate_gemm,
    naive_gemm,
    pack_mask,
    pack_signs,
)
from .train import autograd as ag
from .train.autograd import Var

FD_STEP = 1e-5
FD_TOL = 1e-4
KINK_MARGIN = 1e-2


def gemm_oracle_suite(cases: int = 200, max_dim: int = 96, seed: int = 2024):
    """Random packed products against the dense reference."""
    rng = np.random.default_rng(seed)
    for case in range(cases):
        n, k, m = (int(rng.integers(1, max_dim + 1)) for _ in range(3))
        a = rng.standard_normal((n, k))
        b = rng.standard_normal((k, m))
        pa, pb = pack_signs(a), pack_signs(b)
        if not np.array_equal(binary_gemm(pa, pb), naive_gemm(pa, pb)):
            return False, f"sign product mismatch at case {case} ({n}x{k}x{m})"
        gates = pack_mask(rng.random((n, k)) < 0.5)
        if not np.array_equal(gate_gemm(gates, pb), naive_gate_gemm(gates, pb)):
            return False, f"gated product mismatch at case {case} ({n}x{k}x{m})"
    return True, f"{cases} randomized cases"


def _margin_sample(rng, shape, kinks, margin=KINK_MARGIN, low=-1.5, high=1.5):
    """Uniform draw rejection-sampled to stay `margin` away from every kink."""
    x = rng.uniform(low, high, size=shape)
    for _ in range(64):
        bad = np.zeros(x.shape, dtype=bool)
        for kink in kinks:
            bad |= np.abs(x - kink) < margin
        if not bad.any():
            return x
        x[bad] = rng.uniform(low, high, size=int(bad.sum()))
    raise RuntimeError("margin sampling did not converge")


def _fd_check(build, arrays: dict, rng, coords_per_param: int = 3):
    """Central finite differences against the tape's gradient.

    ``build`` maps {name: Var} to a scalar Var; ``arrays`` holds the float64
    leaf values. Returns the worst relative error over sampled coordinates.
    """
    leaves = {n: Var(a) for n, a in arrays.items()}
    loss = build(leaves)
    ag.backward(loss)
    worst = 0.0
    for name, arr in arrays.items():
        grad = leaves[name].grad
        if grad is None:
            grad = np.zeros_like(arr)
        flat = arr.reshape(-1)
        picks = rng.choice(flat.size, size=min(coords_per_param, flat.size), replace=False)
        for j in picks:
            orig = flat[j]
            flat[j] = orig + FD_STEP
            up = float(build({n: Var(a) for n, a in arrays.items()}).value)
            flat[j] = orig - FD_STEP
            dn = float(build({n: Var(a) for n, a in arrays.items()}).value)
            flat[j] = orig
            fd = (up - dn) / (2 * FD_STEP)
            an = float(grad.reshape(-1)[j])
            err = abs(fd - an)
            denom = max(abs(fd), abs(an))
            if denom > 1e-6:
                rel = err / denom
            else:
                # both effectively zero: require absolute agreement instead
                rel = 0.0 if err < 1e-9 else 1.0
            worst = max(worst, rel)
    return worst


def gradient_suite(seed: int = 77):
    """Finite-difference checks of the straight-through training graph."""
    from .train.network import bn_op, rprelu_op, shortcut_op  # keep import light

    rng = np.random.default_rng(seed)
    worst = {}

    d_in, d_out, n = 8, 4, 5
    # mu is frozen at zero, so the sampled margins of the latent weights are
    # exactly their distances from the sign and gate kinks
    latent = _margin_sample(rng, (d_in, d_out), kinks=(-1.0, 0.0, 1.0))
    alpha = float(np.abs(latent).mean())
    x = _margin_sample(rng, (n, d_in), kinks=(-1.0, 0.0, 1.0))
    proj = rng.standard_normal((n, d_out))
    arrays = {
        "x": x,
        "latent": latent,
        "sign_beta": np.zeros(d_in),
        "bn_gamma": rng.uniform(0.5, 1.5, d_out),
        "bn_beta": rng.standard_normal(d_out) * 0.1,
        "act_gamma": rng.standard_normal(d_out) * 0.05,
        "act_zeta": rng.standard_normal(d_out) * 0.05,
        "act_slope": rng.uniform(0.1, 0.4, d_out),
    }

    def build_bifc(leaves):
        w_b = ag.sign_ste(leaves["latent"], True)
        x_b = ag.sign_ste(ag.add(leaves["x"], leaves["sign_beta"]), True)
        y = ag.scale(ag.matmul(x_b, w_b), alpha)
        y, _ = bn_op(y, leaves["bn_gamma"], leaves["bn_beta"], None, None, True)
        y = ag.add(y, shortcut_op(leaves["x"], d_out))
        y = rprelu_op(y, leaves["act_gamma"], leaves["act_zeta"], leaves["act_slope"])
        return ag.vsum(ag.mul(y, ag.const(proj)))

    worst["binary-fc"] = _fd_check(build_bifc, arrays, rng)

    rows, cols = 4, 6
    alpha_p = 0.5
    margin = 1e-3
    for _ in range(100):
        scores = rng.standard_normal((rows, cols))
        e = np.exp(scores - scores.max(axis=-1, keepdims=True))
        v = e / e.sum(axis=-1, keepdims=True) / alpha_p
        if (v >= margin).all() and (np.abs(v - 1.0) >= margin).all():
            break
    else:
        raise RuntimeError("no kink-free quantizer sample found")
    upstream = rng.standard_normal((rows, cols))

    def build_quant(leaves):
        p = ag.softmax_last(leaves["scores"])
        snapped = ag.round_ste(ag.clip01(ag.div(p, leaves["alpha_p"])), True)
        q = ag.mul(leaves["alpha_p"], snapped)
        return ag.vsum(ag.mul(q, ag.const(upstream)))

    worst["prob-quantizer"] = _fd_check(
        build_quant, {"scores": scores, "alpha_p": np.array([alpha_p])}, rng
    )

    tokens = _margin_sample(rng, (2, 3, 4, 5), kinks=(0.0,))
    pool_proj = rng.standard_normal(tokens.shape)

    def build_pool(leaves):
        pooled = ag.avg_pool_axis_op(ag.avg_pool_axis_op(leaves["tokens"], 1, 3), 2, 5)
        return ag.vsum(ag.mul(pooled, ag.const(pool_proj)))

    worst["avg-pool"] = _fd_check(build_pool, {"tokens": tokens}, rng)

    failures = {k: v for k, v in worst.items() if v > FD_TOL}
    if failures:
        return False, ", ".join(f"{k} rel {v:.2e}" for k, v in failures.items())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    return True, detail


def run_selftest(write=print) -> bool:
    """Run both suites, print one line per suite, return overall success."""
    ok_all = True
    for name, suite in (("gemm-oracle", gemm_oracle_suite), ("gradient-check", gradient_suite)):
        ok, detail = suite()
        ok_all &= ok
        write(f"{'PASS' if ok else 'FAIL'}\t{name}\t{detail}")
    return ok_all
