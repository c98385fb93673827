"""Command line surface: verbs, outputs, figures, and exit codes."""

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from binaryvit.analysis import count_costs, render_repcap, repcap
from binaryvit.cli import main, preprocess, read_image, read_ppm
from binaryvit.configio import load_bundled_model_config, read_capability, bundled_path
from binaryvit.errors import ImageFormatError
from binaryvit.model import build_model, forward, save_weights


def run_cli(*args, cwd=None):
    proc = subprocess.run(
        [sys.executable, "-m", "binaryvit.cli", *args],
        capture_output=True,
        text=True,
        cwd=cwd,
    )
    return proc.returncode, proc.stdout, proc.stderr


@pytest.fixture(scope="module")
def toy_setup(tmp_path_factory):
    """A saved toy model plus matching ppm and raw images."""
    root = tmp_path_factory.mktemp("cli")
    cfg = load_bundled_model_config("toy")
    model = build_model(cfg, seed=5)
    weights = root / "toy.bvw"
    save_weights(model, str(weights))
    rng = np.random.default_rng(0)
    px = rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
    ppm = root / "img.ppm"
    ppm.write_bytes(b"P6\n# comment line\n32 32\n255\n" + px.tobytes())
    raw = root / "img.raw"
    raw.write_bytes(px.tobytes())
    return root, cfg, model, px


def test_ppm_reader_parses_header_and_comments():
    data = b"P6 # hi\n2 1\n255\n" + bytes([10, 20, 30, 40, 50, 60])
    img = read_ppm(data)
    assert img.shape == (1, 2, 3)
    assert np.array_equal(img[0, 0], [10, 20, 30])


def test_ppm_reader_scales_small_maxval():
    data = b"P6\n1 1\n51\n" + bytes([51, 0, 25])
    img = read_ppm(data)
    assert img[0, 0, 0] == pytest.approx(255.0)
    assert img[0, 0, 2] == pytest.approx(125.0)


def test_ppm_reader_rejects_bad_files():
    with pytest.raises(ImageFormatError):
        read_ppm(b"P5\n1 1\n255\n\x00")
    with pytest.raises(ImageFormatError):
        read_ppm(b"P6\n2 2\n255\n\x00\x00")  # short pixel data
    with pytest.raises(ImageFormatError):
        read_ppm(b"P6\n1 1\n70000\n\x00\x00")


def test_read_image_raw_requires_exact_size(tmp_path):
    path = tmp_path / "img.bin"
    path.write_bytes(bytes(10))
    with pytest.raises(ImageFormatError):
        read_image(str(path), 32, 3)


def test_preprocess_uses_config_constants():
    cfg = load_bundled_model_config("toy")
    img = np.full((32, 32, 3), 255.0, dtype=np.float32)
    out = preprocess(img, cfg)
    assert np.allclose(out, (255.0 - 127.5) / 127.5)


def test_infer_matches_library_forward(toy_setup):
    root, cfg, model, px = toy_setup
    code, out, err = run_cli(
        "infer", "--weights", str(root / "toy.bvw"), "--image", str(root / "img.ppm"),
        "--top", "3",
    )
    assert code == 0
    lines = out.strip().split("\n")
    assert len(lines) == 3
    logits = forward(model, preprocess(px.astype(np.float32), cfg))
    best = int(np.argmax(logits))
    cls, val = lines[0].split("\t")
    assert int(cls) == best
    assert float(val) == pytest.approx(float(logits[best]), rel=1e-6)


def test_infer_ppm_and_raw_agree(toy_setup):
    root, *_ = toy_setup
    w = str(root / "toy.bvw")
    code_a, out_a, _ = run_cli("infer", "--weights", w, "--image", str(root / "img.ppm"))
    code_b, out_b, _ = run_cli("infer", "--weights", w, "--image", str(root / "img.raw"))
    assert code_a == 0 and code_b == 0
    assert out_a == out_b


def test_infer_error_exit_codes(toy_setup, tmp_path):
    root, *_ = toy_setup
    w = str(root / "toy.bvw")
    bad = tmp_path / "short.raw"
    bad.write_bytes(bytes(64))
    assert run_cli("infer", "--weights", w, "--image", str(bad))[0] == 3
    assert run_cli("infer", "--weights", w, "--image", str(tmp_path / "nope.raw"))[0] == 3
    assert run_cli("infer", "--weights", str(root / "img.ppm"), "--image", str(root / "img.ppm"))[0] == 3
    assert run_cli("infer", "--weights", w)[0] == 2  # missing --image
    assert run_cli("infer", "--weights", w, "--image", str(root / "img.ppm"), "--top", "0")[0] == 2


def test_count_table_and_artifacts(tmp_path):
    code, out, err = run_cli(
        "count", "--config", "binaryvit", "--json", "--out", str(tmp_path)
    )
    assert code == 0
    report = count_costs(load_bundled_model_config("binaryvit"))
    assert f"total_params\t{report.params}" in out
    assert f"total_bops\t{report.bops}" in out
    fig = tmp_path / "binaryvit_costs.png"
    blob = tmp_path / "binaryvit_costs.json"
    assert fig.exists() and fig.stat().st_size > 1000
    data = json.loads(blob.read_text())
    assert data["params"] == report.params
    assert data["bops"] == report.bops


def test_count_no_figure_flag(tmp_path):
    code, out, err = run_cli(
        "count", "--config", "toy", "--no-figure", "--out", str(tmp_path)
    )
    assert code == 0
    assert not (tmp_path / "toy_costs.png").exists()


def test_count_accepts_config_path(tmp_path):
    code_name, out_name, _ = run_cli("count", "--config", "deit_s_baseline", "--no-figure", "--out", str(tmp_path))
    code_path, out_path, _ = run_cli(
        "count", "--config", bundled_path("deit_s_baseline.cfg"), "--no-figure", "--out", str(tmp_path)
    )
    assert code_name == 0 and code_path == 0
    assert out_name == out_path


def test_repcap_output_and_divergence(tmp_path):
    code, out, err = run_cli("repcap", "--chain", "deit_s", "--json", "--out", str(tmp_path))
    assert code == 0
    chain = repcap(read_capability(bundled_path("deit_s.cap")))
    assert out == render_repcap(chain)
    assert "divergence" in out
    data = json.loads((tmp_path / f"{chain.name}_capacity.json").read_text())
    assert data["total"] == chain.total
    assert (tmp_path / f"{chain.name}_capacity.png").exists()


def test_repcap_missing_chain_exits_3():
    assert run_cli("repcap", "--chain", "missing_chain")[0] == 3


def test_train_toy_verb_trace_and_artifacts(tmp_path):
    code, out, err = run_cli(
        "train-toy", "--steps", "4", "--batch-size", "4", "--data-size", "8",
        "--seed", "1", "--out", str(tmp_path),
    )
    assert code == 0
    lines = out.strip().split("\n")
    assert lines[0] == "step\tloss\taccuracy\tlr"
    assert len(lines) == 1 + 4 + 1  # header, steps, final accuracy
    assert lines[-1].startswith("final_accuracy\t")
    assert (tmp_path / "toy_training.png").exists()
    assert (tmp_path / "toy_trained.bvw").exists()
    # trained weights load back into the infer verb
    px = np.random.default_rng(2).integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
    img = tmp_path / "x.raw"
    img.write_bytes(px.tobytes())
    code2, out2, _ = run_cli(
        "infer", "--weights", str(tmp_path / "toy_trained.bvw"), "--image", str(img)
    )
    assert code2 == 0 and len(out2.strip().split("\n")) == 5


def test_selftest_passes():
    code, out, err = run_cli("selftest")
    assert code == 0
    assert out.count("PASS") == 2 and "FAIL" not in out


def test_unknown_verb_and_bad_args_exit_2():
    assert run_cli("frobnicate")[0] == 2
    assert run_cli("count")[0] == 2  # missing --config
    assert run_cli("train-toy", "--steps", "-3")[0] == 2


def test_main_callable_in_process(tmp_path, capsys):
    assert main(["count", "--config", "toy", "--no-figure", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("model\ttoy\n")
    assert main(["count", "--config", "not_a_config", "--out", str(tmp_path)]) == 3


def test_figures_render_training_curves(tmp_path):
    from binaryvit.report import save_training_figure

    trace = [
        {"step": s, "loss": 2.0 * np.exp(-s / 30) + 0.05, "accuracy": min(1.0, s / 50), "lr": 1e-3}
        for s in range(60)
    ]
    path = save_training_figure(trace, str(tmp_path / "curves.png"))
    assert os.path.getsize(path) > 1000
