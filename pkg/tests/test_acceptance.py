"""Release acceptance: one test per shipping criterion.

Run ``pytest -v tests/test_acceptance.py`` to get a single pass/fail line
per criterion. The checks pin tolerances and budgets; everything else in
tests/ exists to localize failures, this file decides whether the build
is acceptable.
"""

import time

import numpy as np
import pytest

from binaryvit.analysis import count_costs, render_repcap, repcap
from binaryvit.attention import BiMHAParams, bi_mha_forward
from binaryvit.bittensor import (
    binary_gemm,
    gate_gemm,
    naive_gate_gemm,
    naive_gemm,
    pack_mask,
    pack_signs,
)
from binaryvit.configio import bundled_path, load_bundled_model_config, read_capability
from binaryvit.errors import WeightFormatError
from binaryvit.layers import (
    BatchNormParams,
    BiFCLayer,
    RPReLUParams,
    batchnorm_forward,
    bifc_forward,
    extract_patches,
    global_avg_pool,
    linear_forward,
    merge_tokens,
    rprelu,
)
from binaryvit.model import build_model, forward, forward_with_trace, load_weights, save_weights
from binaryvit.quant import (
    AttnProbScale,
    RSignParams,
    binarize_weights,
    quantize_attention_probs,
    round_half_away,
)
from binaryvit.train import autograd as ag
from binaryvit.train.autograd import Var
from binaryvit.train.loop import train_toy
from binaryvit.train.network import bn_op, rprelu_op, shortcut_op

FD_H = 1e-5
FD_TOL = 1e-4


# --- criterion 1: packed gemm equals the dense reference ---------------------


def test_criterion_1_gemm_matches_dense_reference():
    rng = np.random.default_rng(20260817)
    start = time.perf_counter()
    for case in range(1000):
        n, k, m = (int(v) for v in rng.integers(1, 257, size=3))
        a = rng.standard_normal((n, k))
        b = rng.standard_normal((k, m))
        if case % 5 == 0:
            a[rng.random(a.shape) < 0.1] = 0.0  # zeros sign as +1 at pack time
        pa, pb = pack_signs(a), pack_signs(b)
        ref = naive_gemm(pa, pb)
        if case % 2:
            got = binary_gemm(pa, pack_signs(b.T), b_transposed=True)
        else:
            got = binary_gemm(pa, pb)
        assert np.array_equal(got, ref), f"case {case} ({n}x{k}x{m})"
        if case % 3 == 0:
            gates = pack_mask(a > 0.3)
            assert np.array_equal(gate_gemm(gates, pb), naive_gate_gemm(gates, pb))
    elapsed = time.perf_counter() - start
    assert elapsed < 30.0, f"1000 cases took {elapsed:.1f}s"


# --- criterion 2: representational capacity chains ---------------------------


def test_criterion_2_capacity_chains():
    res = repcap(read_capability(bundled_path("resnet34.cap")))
    assert res.steps[0].running == 18_742
    mults = [s.running for s in res.steps if s.kind == "multiply_transition"]
    assert mults == [81_880, 345_952, 1_439_104, 71_193_472]
    assert res.total == 71_193_472 == res.published_total
    assert not res.diverges

    vit = repcap(read_capability(bundled_path("deit_s.cap")))
    assert vit.steps[0].running == 97_920
    assert vit.total == 155_568
    assert vit.published_total == 153_216
    assert vit.diverges
    assert "divergence" in render_repcap(vit)

    pyr = repcap(read_capability(bundled_path("pyramid_stage1_fc.cap")))
    assert pyr.total == 200_704


# --- criterion 3: cost model within published tolerances ---------------------


def test_criterion_3_cost_model_tolerances():
    base = count_costs(load_bundled_model_config("deit_s_baseline"))
    assert abs(base.params - 22.1e6) <= 0.01 * 22.1e6
    assert abs(base.flops - 0.57e8) <= 0.05 * 0.57e8
    assert abs(base.bops - 4.51e9) <= 0.05 * 4.51e9

    pyramid = count_costs(load_bundled_model_config("binaryvit"))
    assert abs(pyramid.params - 22.6e6) <= 0.02 * 22.6e6

    star = count_costs(load_bundled_model_config("binaryvit_star"))
    assert abs(star.flops - 0.95e8) <= 0.10 * 0.95e8
    assert abs(star.bops - 3.75e9) <= 0.10 * 3.75e9

    for report in (base, pyramid, star):
        assert report.ops == report.bops // 64 + report.flops


# --- criterion 4: attention probabilities snap to two levels -----------------


def test_criterion_4_probability_quantizer_two_level_idempotent():
    rng = np.random.default_rng(44)
    for case in range(100):
        alpha = float(np.exp(rng.uniform(np.log(1e-3), np.log(3.0))))
        s = AttnProbScale(alpha_p=alpha)
        if case % 2:
            logits = rng.normal(size=(7, 9)) * 3
            e = np.exp(logits - logits.max(axis=-1, keepdims=True))
            probs = e / e.sum(axis=-1, keepdims=True)
        else:
            probs = rng.uniform(0.0, 1.0, size=(8, 5))
        out = quantize_attention_probs(probs, s)
        assert ((out == 0.0) | (out == alpha)).all()
        assert np.array_equal(quantize_attention_probs(out, s), out)


# --- criterion 5: full-resolution forward and the plain-attention limit ------


def _rand_bifc(d_in, d_out, rng):
    return BiFCLayer(
        in_features=d_in,
        out_features=d_out,
        rsign_beta=RSignParams(beta=rng.standard_normal(d_in) * 0.1),
        weight=binarize_weights(rng.standard_normal((d_in, d_out))),
        bn=BatchNormParams(
            gamma=rng.uniform(0.5, 1.5, d_out),
            beta=rng.standard_normal(d_out) * 0.1,
            running_mean=rng.standard_normal(d_out) * 0.1,
            running_var=rng.uniform(0.5, 2.0, d_out),
        ),
        act=RPReLUParams(
            gamma=rng.standard_normal(d_out) * 0.1,
            zeta=rng.standard_normal(d_out) * 0.1,
            slope=np.full(d_out, 0.25),
        ),
    )


def _plain_attention_reference(x, p):
    """Attention with no reduction path at all, assembled from scratch."""
    q = bifc_forward(x, p.q)
    k = bifc_forward(x, p.k)
    v = bifc_forward(x, p.v)
    d_h = p.dim // p.heads
    scale = 1.0 / np.sqrt(d_h)
    alpha = p.prob_scale.alpha_p
    ctx = np.empty_like(q)
    for h in range(p.heads):
        sl = slice(h * d_h, (h + 1) * d_h)
        qb = pack_signs(q[:, sl] + p.q_sign.beta[sl])
        kb = pack_signs(k[:, sl] + p.k_sign.beta[sl])
        vb = pack_signs(v[:, sl] + p.v_sign.beta[sl])
        a = binary_gemm(qb, kb, b_transposed=True).astype(x.dtype) * scale
        shifted = a - a.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        probs = e / e.sum(axis=-1, keepdims=True)
        pq = alpha * round_half_away(np.clip(probs / alpha, 0.0, 1.0))
        ctx[:, sl] = alpha * gate_gemm(pack_mask(pq > 0), vb).astype(x.dtype)
    pre = batchnorm_forward(ctx, p.bn_at) + q + k + v
    return bifc_forward(rprelu(pre, p.act_at), p.o)


def test_criterion_5_full_resolution_forward_and_plain_attention_limit():
    cfg = load_bundled_model_config("binaryvit")
    model = build_model(cfg, seed=11)
    rng = np.random.default_rng(55)
    img = rng.uniform(0, 255, size=(224, 224, 3)).astype(np.float32)
    logits, trace = forward_with_trace(model, img)
    assert trace["grids"] == [(56, 56), (28, 28), (14, 14), (7, 7)]
    assert logits.shape == (1000,)
    assert np.isfinite(logits).all()

    dim, heads = 32, 4
    p = BiMHAParams(
        dim=dim,
        heads=heads,
        sr_ratio=1,
        q=_rand_bifc(dim, dim, rng),
        k=_rand_bifc(dim, dim, rng),
        v=_rand_bifc(dim, dim, rng),
        o=_rand_bifc(dim, dim, rng),
        sr=None,
        q_sign=RSignParams(beta=rng.standard_normal(dim) * 0.1),
        k_sign=RSignParams(beta=rng.standard_normal(dim) * 0.1),
        v_sign=RSignParams(beta=rng.standard_normal(dim) * 0.1),
        bn_at=BatchNormParams(
            gamma=rng.uniform(0.5, 1.5, dim),
            beta=rng.standard_normal(dim) * 0.1,
            running_mean=rng.standard_normal(dim) * 0.1,
            running_var=rng.uniform(0.5, 2.0, dim),
        ),
        act_at=RPReLUParams(
            gamma=rng.standard_normal(dim) * 0.1,
            zeta=rng.standard_normal(dim) * 0.1,
            slope=np.full(dim, 0.25),
        ),
        prob_scale=AttnProbScale(alpha_p=0.05),
    )
    x = rng.standard_normal((36, dim))
    assert np.array_equal(bi_mha_forward(x, (6, 6), p), _plain_attention_reference(x, p))


# --- criterion 6: straight-through gradients against central differences -----


def _margin_sample(rng, shape, kinks, margin=1e-2, low=-1.5, high=1.5):
    x = rng.uniform(low, high, size=shape)
    for _ in range(200):
        bad = np.zeros(x.shape, dtype=bool)
        for k in kinks:
            bad |= np.abs(x - k) < margin
        if not bad.any():
            return x
        x[bad] = rng.uniform(low, high, size=int(bad.sum()))
    raise AssertionError("margin sampling failed")


def _rel_err(fd, an):
    denom = max(abs(fd), abs(an))
    if denom <= 1e-6:
        return 0.0 if abs(fd - an) < 1e-9 else 1.0
    return abs(fd - an) / denom


def _fd_check(build, arrays, h=FD_H):
    leaves = {n: Var(a) for n, a in arrays.items()}
    ag.backward(build(leaves))
    checked, worst = 0, 0.0
    for name, arr in arrays.items():
        grad = leaves[name].grad
        if grad is None:
            grad = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = float(build({n: Var(a) for n, a in arrays.items()}).value)
            flat[j] = orig - h
            dn = float(build({n: Var(a) for n, a in arrays.items()}).value)
            flat[j] = orig
            worst = max(worst, _rel_err((up - dn) / (2 * h), float(grad.reshape(-1)[j])))
            checked += 1
    return checked, worst


def test_criterion_6_gradient_checks_per_layer():
    rng = np.random.default_rng(66)
    total, worst = 0, 0.0

    # binary fc with scale, normalization, activation, and shortcut
    d_in, d_out, n = 8, 4, 5
    latent = _margin_sample(rng, (d_in, d_out), kinks=(-1.0, 0.0, 1.0))
    alpha_w = float(np.abs(latent).mean())
    x = _margin_sample(rng, (n, d_in), kinks=(-1.0, 0.0, 1.0))
    proj = rng.normal(size=(n, d_out))
    fc_arrays = {
        "x": x,
        "latent": latent,
        "sign_beta": np.zeros(d_in),
        "bn_gamma": rng.uniform(0.5, 1.5, d_out),
        "bn_beta": rng.normal(size=d_out) * 0.1,
        "act_gamma": rng.normal(size=d_out) * 0.05,
        "act_zeta": rng.normal(size=d_out) * 0.05,
        "act_slope": rng.uniform(0.1, 0.4, d_out),
    }

    def build_fc(lv):
        w_b = ag.sign_ste(lv["latent"], True)
        x_b = ag.sign_ste(ag.add(lv["x"], lv["sign_beta"]), True)
        y = ag.scale(ag.matmul(x_b, w_b), alpha_w)
        y, _ = bn_op(y, lv["bn_gamma"], lv["bn_beta"], None, None, True)
        out = rprelu_op(
            ag.add(y, shortcut_op(lv["x"], d_out)),
            lv["act_gamma"], lv["act_zeta"], lv["act_slope"],
        )
        return ag.vsum(ag.mul(out, ag.const(proj)))

    c, w = _fd_check(build_fc, fc_arrays)
    total, worst = total + c, max(worst, w)

    # probability quantizer, inputs kept clear of the clip and round kinks
    alpha_p = 0.5
    for _ in range(100):
        scores = rng.normal(size=(4, 6))
        e = np.exp(scores - scores.max(axis=-1, keepdims=True))
        v = e / e.sum(axis=-1, keepdims=True) / alpha_p
        if (v >= 1e-3).all() and (np.abs(v - 1.0) >= 1e-3).all():
            break
    else:
        raise AssertionError("no kink-free sample found")
    up = rng.normal(size=(4, 6))

    def build_q(lv):
        p = ag.softmax_last(lv["scores"])
        q = ag.mul(lv["alpha_p"], ag.round_ste(ag.clip01(ag.div(p, lv["alpha_p"])), True))
        return ag.vsum(ag.mul(q, ag.const(up)))

    c, w = _fd_check(build_q, {"scores": scores, "alpha_p": np.array([alpha_p])})
    total, worst = total + c, max(worst, w)

    # token pooling and nearest upsampling
    tokens = rng.normal(size=(2, 3, 4, 5))
    proj_pool = rng.normal(size=(2, 3, 4, 5))

    def build_pool(lv):
        out = ag.avg_pool_axis_op(ag.avg_pool_axis_op(lv["t"], 1, 3), 2, 5)
        return ag.vsum(ag.mul(out, ag.const(proj_pool)))

    c, w = _fd_check(build_pool, {"t": tokens})
    total, worst = total + c, max(worst, w)

    small = rng.normal(size=(2, 4, 3))
    proj_up = rng.normal(size=(2, 16, 3))

    def build_up(lv):
        out = ag.upsample_tokens_op(lv["t"], (2, 2), (4, 4))
        return ag.vsum(ag.mul(out, ag.const(proj_up)))

    c, w = _fd_check(build_up, {"t": small})
    total, worst = total + c, max(worst, w)

    # residual scaling stacked on batch statistics
    xs = rng.normal(size=(5, 4))
    res = rng.normal(size=(5, 4))
    proj_ls = rng.normal(size=(5, 4))
    ls_arrays = {
        "x": xs,
        "ls_alpha": rng.normal(size=4),
        "ls_beta": rng.normal(size=4),
        "gamma": rng.uniform(0.5, 1.5, 4),
        "beta": rng.normal(size=4),
    }

    def build_ls(lv):
        y, _ = bn_op(lv["x"], lv["gamma"], lv["beta"], None, None, True)
        out = ag.add(ag.add(ag.mul(lv["ls_alpha"], y), lv["ls_beta"]), ag.const(res))
        return ag.vsum(ag.mul(out, ag.const(proj_ls)))

    c, w = _fd_check(build_ls, ls_arrays)
    total, worst = total + c, max(worst, w)

    assert total >= 100, f"only {total} coordinates checked"
    assert worst < FD_TOL, f"worst relative error {worst}"


# --- criterion 7: zeroed residual scaling exposes the skip path --------------


def test_criterion_7_zero_layerscale_equals_skip_path():
    cfg = load_bundled_model_config("toy")
    model = build_model(cfg, seed=7)
    for sp in model.stages:
        for blk in sp.blocks:
            for ls in (blk.ls1, blk.ls2):
                ls.alpha[:] = 0.0
                ls.beta[:] = 0.0

    rng = np.random.default_rng(77)
    img = rng.uniform(0, 255, size=(32, 32, 3)).astype(np.float32)
    logits = forward(model, img)

    # skip path assembled without touching the block code at all
    chw = np.ascontiguousarray(np.asarray(img, dtype=np.float32).transpose(2, 0, 1))
    tokens, grid = extract_patches(chw, cfg.stages[0].patch)
    tokens = linear_forward(tokens, model.stages[0].embed_full)
    tokens = tokens + model.stages[0].pos
    tokens, grid = merge_tokens(tokens, grid)
    tokens = bifc_forward(tokens, model.stages[1].embed_bin)
    tokens = tokens + model.stages[1].pos
    normed = batchnorm_forward(tokens, model.final_bn)
    ref = linear_forward(global_avg_pool(normed)[None, :], model.classifier)[0]

    assert np.array_equal(logits, ref)


# --- criterion 8: the toy task is learnable, fast, and reproducible ----------


def test_criterion_8_toy_training_learns_and_reproduces():
    cfg = load_bundled_model_config("toy")

    short_a = train_toy(cfg, steps=50, batch_size=32, dataset_size=256, base_lr=2e-3, seed=0)
    short_b = train_toy(cfg, steps=50, batch_size=32, dataset_size=256, base_lr=2e-3, seed=0)
    assert short_a.trace == short_b.trace
    assert short_a.final_accuracy == short_b.final_accuracy

    start = time.perf_counter()
    result = train_toy(cfg, steps=2000, batch_size=32, dataset_size=256, base_lr=2e-3, seed=0)
    elapsed = time.perf_counter() - start
    assert elapsed < 600.0, f"training took {elapsed:.0f}s"
    assert len(result.trace) == 2000
    assert result.final_accuracy > 0.80, f"final accuracy {result.final_accuracy}"

    losses = np.array([r["loss"] for r in result.trace])
    assert np.isfinite(losses).all()
    window = 25
    smooth = np.convolve(losses, np.ones(window) / window, mode="valid")
    quarter = len(smooth) // 4
    assert smooth[-1] < smooth[0]
    assert smooth[-quarter:].mean() < smooth[:quarter].mean()


# --- criterion 9: the weight container round-trips bitwise -------------------


def test_criterion_9_weight_container_round_trip(tmp_path):
    cfg = load_bundled_model_config("toy")
    model = build_model(cfg, seed=9)
    rng = np.random.default_rng(99)
    img = rng.uniform(0, 255, size=(32, 32, 3)).astype(np.float32)

    path = tmp_path / "model.bvw"
    save_weights(model, str(path))
    loaded = load_weights(str(path))
    assert np.array_equal(forward(model, img), forward(loaded, img))

    blob = bytearray(path.read_bytes())
    blob[:4] = b"XXXX"
    bad = tmp_path / "corrupt.bvw"
    bad.write_bytes(bytes(blob))
    with pytest.raises(WeightFormatError):
        load_weights(str(bad))
