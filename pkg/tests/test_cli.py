"""End-to-end CLI runs, in-process via main()."""

import json

import numpy as np
import pytest
from PIL import Image

from bnnkit import data
from bnnkit.cli import EXIT_FORMAT, EXIT_IO, EXIT_OK, EXIT_USAGE, main


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr().out
    summary = json.loads(out) if out.strip() else None
    return code, summary


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "ucnv.bnck"
    code = main(
        [
            "train", "--arch", "u-cnv", "--synthetic", "8", "--epochs", "2",
            "--seed", "3", "--out", str(path),
        ]
    )
    assert code == EXIT_OK
    return path


@pytest.fixture(scope="module")
def compiled(checkpoint, tmp_path_factory):
    path = tmp_path_factory.mktemp("bin") / "ucnv.bcop"
    code = main(
        ["compile", "--checkpoint", str(checkpoint), "--out", str(path)]
    )
    assert code == EXIT_OK
    return path


@pytest.fixture(scope="module")
def image_files(tmp_path_factory):
    d = tmp_path_factory.mktemp("imgs")
    ds = data.synth_quadrant_dataset(1, seed=77)
    paths = []
    for i, img in enumerate(ds.images):
        p = d / f"img_{i}.png"
        Image.fromarray(img, mode="RGB").save(p)
        paths.append(str(p))
    return paths


def test_train_summary(capsys, tmp_path):
    out = tmp_path / "m.bnck"
    code, summary = run(
        capsys, "train", "--arch", "u-cnv", "--synthetic", "6",
        "--epochs", "1", "--out", str(out),
    )
    assert code == EXIT_OK
    assert summary["command"] == "train"
    assert summary["arch"] == "u-cnv"
    assert summary["epochs"] == 1
    assert summary["samples"] == 24
    assert out.exists()


def test_train_requires_exactly_one_source(capsys, tmp_path):
    code, _ = run(
        capsys, "train", "--arch", "u-cnv", "--epochs", "1",
        "--out", str(tmp_path / "m.bnck"),
    )
    assert code == EXIT_USAGE
    code, _ = run(
        capsys, "train", "--synthetic", "4", "--data", str(tmp_path),
        "--epochs", "1", "--out", str(tmp_path / "m.bnck"),
    )
    assert code == EXIT_USAGE


def test_train_from_directory_with_balance(capsys, tmp_path):
    ds = data.synth_quadrant_dataset(3, seed=5)
    for name in data.CLASS_NAMES:
        (tmp_path / name).mkdir()
    counts = [0] * 4
    for img, label in zip(ds.images, ds.labels):
        name = data.CLASS_NAMES[label]
        Image.fromarray(img, mode="RGB").save(tmp_path / name / f"{counts[label]}.png")
        counts[label] += 1
    out = tmp_path / "m.bnck"
    code, summary = run(
        capsys, "train", "--arch", "u-cnv", "--data", str(tmp_path),
        "--balance", "--epochs", "1", "--out", str(out),
    )
    assert code == EXIT_OK
    assert summary["samples"] == 12


def test_compile_summary(capsys, checkpoint, tmp_path):
    out = tmp_path / "m.bcop"
    code, summary = run(
        capsys, "compile", "--checkpoint", str(checkpoint), "--out", str(out)
    )
    assert code == EXIT_OK
    assert summary["command"] == "compile"
    assert summary["bytes"] == out.stat().st_size
    assert out.read_bytes()[:4] == b"BCOP"


def test_compile_missing_checkpoint_is_io_error(capsys, tmp_path):
    code, _ = run(
        capsys, "compile", "--checkpoint", str(tmp_path / "none.bnck"),
        "--out", str(tmp_path / "m.bcop"),
    )
    assert code == EXIT_IO


def test_compile_corrupt_checkpoint_is_format_error(capsys, tmp_path):
    bad = tmp_path / "bad.bnck"
    bad.write_bytes(b"XXXX not a checkpoint")
    code, _ = run(
        capsys, "compile", "--checkpoint", str(bad), "--out", str(tmp_path / "m.bcop")
    )
    assert code == EXIT_FORMAT


def test_infer_lists_predictions(capsys, compiled, image_files):
    code, summary = run(capsys, "infer", "--model", str(compiled), *image_files)
    assert code == EXIT_OK
    assert len(summary["predictions"]) == 4
    for entry in summary["predictions"]:
        assert entry["class_name"] == data.CLASS_NAMES[entry["class_id"]]
        assert len(entry["scores"]) == 4


def test_infer_truncated_model_is_format_error(capsys, compiled, image_files, tmp_path):
    clipped = tmp_path / "clipped.bcop"
    clipped.write_bytes(compiled.read_bytes()[:40])
    code, _ = run(capsys, "infer", "--model", str(clipped), image_files[0])
    assert code == EXIT_FORMAT


def test_eval_reports_confusion(capsys, compiled):
    code, summary = run(
        capsys, "eval", "--model", str(compiled), "--synthetic", "5"
    )
    assert code == EXIT_OK
    matrix = np.array(summary["confusion"])
    assert matrix.shape == (4, 4)
    assert matrix.sum() == 20
    assert 0.0 <= summary["accuracy"] <= 1.0
    assert len(summary["per_class"]) == 4


def test_bench_default_folding(capsys):
    code, summary = run(capsys, "bench", "--arch", "n-cnv")
    assert code == EXIT_OK
    assert summary["latency_cycles"] == 34284
    assert summary["bottleneck"] == "fc3"
    assert summary["throughput_fps"] == 100_000_000 / 8192


def test_bench_custom_folding_and_clock(capsys):
    pe = "16,16,16,16,4,1,1,1,1"
    simd = "3,16,16,32,32,32,4,8,1"
    code, summary = run(
        capsys, "bench", "--arch", "n-cnv", "--pe", pe, "--simd", simd,
        "--clock-mhz", "50",
    )
    assert code == EXIT_OK
    assert summary["clock_hz"] == 50_000_000
    assert summary["throughput_fps"] == 50_000_000 / 8192


def test_bench_rejects_partial_folding(capsys):
    code, _ = run(capsys, "bench", "--arch", "n-cnv", "--pe", "1,2,3")
    assert code == EXIT_USAGE
    code, _ = run(
        capsys, "bench", "--arch", "n-cnv", "--pe", "1,1,1,1,1,1,1,1,1",
        "--simd", "1,1",
    )
    assert code == EXIT_USAGE


def test_dse_respects_budgets(capsys):
    code, summary = run(
        capsys, "dse", "--arch", "n-cnv", "--pe-budget", "72",
        "--simd-budget", "144",
    )
    assert code == EXIT_OK
    assert summary["pe_used"] <= 72
    assert summary["simd_used"] <= 144
    cycles = [e["cycles"] for e in summary["layers"]]
    assert max(cycles) <= 8192


def test_dse_budget_too_small_is_usage_error(capsys):
    code, _ = run(
        capsys, "dse", "--arch", "n-cnv", "--pe-budget", "2", "--simd-budget", "144"
    )
    assert code == EXIT_USAGE


def test_gradcam_writes_overlays(capsys, checkpoint, image_files, tmp_path):
    out_dir = tmp_path / "cams"
    code, summary = run(
        capsys, "gradcam", "--checkpoint", str(checkpoint),
        "--out-dir", str(out_dir), *image_files,
    )
    assert code == EXIT_OK
    assert summary["count"] == 4
    for item in summary["items"]:
        assert (out_dir / item["file"]).exists()
    assert (out_dir / "manifest.json").exists()


def test_gradcam_fixed_class(capsys, checkpoint, image_files, tmp_path):
    out_dir = tmp_path / "cams"
    code, summary = run(
        capsys, "gradcam", "--checkpoint", str(checkpoint),
        "--out-dir", str(out_dir), "--class-id", "2", image_files[0],
    )
    assert code == EXIT_OK
    assert summary["items"][0]["class_id"] == 2


def test_gradcam_bad_class_is_usage_error(capsys, checkpoint, image_files, tmp_path):
    code, _ = run(
        capsys, "gradcam", "--checkpoint", str(checkpoint),
        "--out-dir", str(tmp_path / "cams"), "--class-id", "9", image_files[0],
    )
    assert code == EXIT_USAGE


def test_unknown_subcommand_is_usage_error(capsys):
    assert main(["frobnicate"]) == EXIT_USAGE


def test_missing_required_option_is_usage_error(capsys):
    assert main(["train", "--synthetic", "2"]) == EXIT_USAGE  # no --out
