import csv

import numpy as np
import pytest
from click.testing import CliRunner

from helpers import color_crop
from srfusion.cli import main
from srfusion.imaging import ColorImage, save_png


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus"
    corpus.mkdir()
    for i, (name, r, c) in enumerate([("astronaut", 50, 100), ("chelsea", 30, 80)]):
        save_png(corpus / f"train_{i}.png", color_crop(name, r, c, 96))
    dataset = root / "dataset"
    dataset.mkdir()
    save_png(dataset / "img_0.png", color_crop("camera", 100, 100, 64))
    return root


@pytest.fixture(scope="module")
def trained(workspace):
    runner = CliRunner()
    out = workspace / "train_out"
    result = runner.invoke(
        main,
        [
            "--seed", "3", "--out", str(out),
            "train", "--corpus", str(workspace / "corpus"),
            "--scale", "2", "--m", "2", "--atoms", "16",
            "--epochs", "1", "--samples", "3000",
        ],
        catch_exceptions=False,
    )
    assert result.exit_code == 0, result.output
    return out / "dicts"


def test_train_command_writes_containers(trained):
    assert (trained / "pipeline.npz").exists()
    assert len(sorted(trained.glob("dict_*.npz"))) == 2
    assert (trained / "training_log.csv").exists()


def test_sr_command(workspace, trained):
    runner = CliRunner()
    out = workspace / "sr_out"
    result = runner.invoke(
        main,
        [
            "--seed", "3", "--out", str(out),
            "sr", "--input", str(workspace / "dataset" / "img_0.png"),
            "--dicts", str(trained), "--scale", "2",
            "--k-max", "2", "--m", "2", "--bank-size", "8",
        ],
        catch_exceptions=False,
    )
    assert result.exit_code == 0, result.output
    assert (out / "img_0_fused.png").exists()
    assert (out / "img_0_bank" / "manifest.csv").exists()


def test_bench_command(workspace, trained):
    runner = CliRunner()
    out = workspace / "bench_out"
    result = runner.invoke(
        main,
        [
            "--seed", "3", "--out", str(out),
            "bench", "--dataset", str(workspace / "dataset"),
            "--dicts", str(trained), "--scale", "2",
            "--k-max", "2", "--m", "2", "--bank-size", "8", "--no-timing",
        ],
        catch_exceptions=False,
    )
    assert result.exit_code == 0, result.output
    assert "fused" in result.output
    with open(out / "report.csv", newline="") as fh:
        header = next(csv.reader(fh))
    assert header == ["image", "method", "psnr_db", "ssim", "wall_ms"]


def test_noise_sweep_command(workspace, trained):
    runner = CliRunner()
    out = workspace / "sweep_out"
    result = runner.invoke(
        main,
        [
            "--seed", "3", "--out", str(out),
            "noise-sweep", "--dataset", str(workspace / "dataset"),
            "--dicts", str(trained), "--scale", "2",
            "--sigmas", "4,20", "--k-max", "2", "--m", "2", "--bank-size", "8",
        ],
        catch_exceptions=False,
    )
    assert result.exit_code == 0, result.output
    assert (out / "noise_sweep.csv").exists()


def test_quantity_curve_command(workspace, trained):
    runner = CliRunner()
    out = workspace / "curve_out"
    result = runner.invoke(
        main,
        [
            "--seed", "3", "--out", str(out),
            "quantity-curve", "--dataset", str(workspace / "dataset"),
            "--dicts", str(trained), "--scale", "2",
            "--j-values", "2,8", "--k-max", "2", "--m", "2",
        ],
        catch_exceptions=False,
    )
    assert result.exit_code == 0, result.output
    assert (out / "quantity_curve.csv").exists()


def test_analyze_command(workspace):
    runner = CliRunner()
    out = workspace / "analyze_out"
    rng = np.random.default_rng(0)
    truth = color_crop("camera", 100, 100, 64)
    noisy_a = ColorImage(np.clip(truth.data + rng.normal(0, 0.02, truth.data.shape), 0, 1))
    noisy_b = ColorImage(np.clip(truth.data + rng.normal(0, 0.04, truth.data.shape), 0, 1))
    save_png(workspace / "sr_a.png", noisy_a)
    save_png(workspace / "sr_b.png", noisy_b)
    result = runner.invoke(
        main,
        [
            "--out", str(out),
            "analyze", "--truth", str(workspace / "dataset" / "img_0.png"),
            "--internal", str(workspace / "sr_a.png"),
            "--external", str(workspace / "sr_b.png"),
            "-t", "7",
        ],
        catch_exceptions=False,
    )
    assert result.exit_code == 0, result.output
    assert (out / "preference.png").exists()
    assert (out / "overlap.csv").exists()
    assert (out / "sparsity.csv").exists()
    assert "C_int=" in result.output


def test_help_lists_subcommands():
    runner = CliRunner()
    result = runner.invoke(main, ["--help"])
    assert result.exit_code == 0
    for cmd in ("train", "sr", "bench", "noise-sweep", "quantity-curve", "analyze"):
        assert cmd in result.output
