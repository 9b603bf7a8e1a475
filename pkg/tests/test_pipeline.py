import csv
import math
from pathlib import Path

import numpy as np
import pytest
import yaml

from helpers import color_crop, gray_crop
from srfusion.bank import BankLabel, ImageBank, load_bank, save_bank
from srfusion.imaging import ColorImage, ImagePlane, load_gray, save_png
from srfusion.metrics import psnr, ssim
from srfusion.pipeline import (
    BenchmarkReport,
    ExperimentConfig,
    ExternalOptions,
    FusionOptions,
    InternalOptions,
    ReportRow,
    load_config,
    load_dictionaries,
    run_benchmark,
    run_noise_sweep,
    run_quantity_curve,
    run_sr_pipeline,
    select_bank,
    train_dictionaries,
    write_report_csv,
)


def _tiny_cfg(**kw) -> ExperimentConfig:
    defaults = dict(
        scale=2,
        internal=InternalOptions(k_max=2, query_stride=9),
        external=ExternalOptions(
            n_dicts=2, n_atoms=16, epochs=2, sample_budget=4000, infer_stride=9
        ),
        fusion=FusionOptions(max_iter=60),
        bank_size=8,
        seed=0,
        record_timing=False,
    )
    defaults.update(kw)
    return ExperimentConfig(**defaults)


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    for i, (name, r, c) in enumerate([("astronaut", 50, 100), ("chelsea", 30, 80)]):
        save_png(d / f"train_{i}.png", color_crop(name, r, c, 96))
    return d


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("dataset")
    for i, (name, r, c) in enumerate([("camera", 100, 100), ("coins", 60, 100)]):
        save_png(d / f"img_{i}.png", color_crop(name, r, c, 72))
    return d


@pytest.fixture(scope="module")
def trained_dir(corpus_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("dicts")
    cfg = _tiny_cfg()
    train_dictionaries(cfg, corpus_dir, out)
    return out


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def test_config_defaults_and_validation():
    cfg = ExperimentConfig()
    assert cfg.scale == 2
    assert cfg.noise_sigmas == (4.0, 8.0, 12.0, 16.0, 20.0)
    assert cfg.border == 2
    with pytest.raises(ValueError):
        ExperimentConfig(scale=5)


def test_config_yaml_and_overrides(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text(
        yaml.safe_dump(
            {
                "scale": 3,
                "seed": 7,
                "internal": {"k_max": 4},
                "external": {"n_atoms": 32},
                "noise_sigmas": [4, 8],
            }
        )
    )
    cfg = load_config(path, seed=11, internal={"h": 20.0})
    assert cfg.scale == 3
    assert cfg.seed == 11  # override wins
    assert cfg.internal.k_max == 4
    assert cfg.internal.h == 20.0
    assert cfg.external.n_atoms == 32
    assert cfg.noise_sigmas == (4.0, 8.0)


def test_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump({"scale": 2, "typo_key": 1}))
    with pytest.raises(ValueError):
        load_config(path)
    path.write_text(yaml.safe_dump({"internal": {"bogus": 3}}))
    with pytest.raises(ValueError):
        load_config(path)


# ---------------------------------------------------------------------------
# bank selection
# ---------------------------------------------------------------------------

def _dummy_bank(method, count, shape=(6, 6)):
    rng = np.random.default_rng(count)
    images = tuple(ImagePlane(rng.random(shape)) for _ in range(count))
    labels = tuple(BankLabel(method, i // 4 + 1, i % 4) for i in range(count))
    return ImageBank(images, labels)


def test_select_bank_equal_split():
    internal = _dummy_bank("internal", 8)
    external = _dummy_bank("external", 8)
    picked = select_bank(internal, external, 2)
    assert len(picked) == 2
    assert picked.labels[0].method == "internal"
    assert picked.labels[1].method == "external"


def test_select_bank_full_concat():
    internal = _dummy_bank("internal", 8)
    external = _dummy_bank("external", 4)
    picked = select_bank(internal, external, None)
    assert len(picked) == 12


def test_select_bank_rejects_odd_and_oversized():
    internal = _dummy_bank("internal", 8)
    external = _dummy_bank("external", 8)
    with pytest.raises(ValueError):
        select_bank(internal, external, 5)
    with pytest.raises(ValueError):
        select_bank(internal, external, 20)


# ---------------------------------------------------------------------------
# bank persistence
# ---------------------------------------------------------------------------

def test_bank_save_load_manifest(tmp_path):
    bank = _dummy_bank("internal", 4)
    manifest = save_bank(bank, tmp_path / "bank")
    rows = list(csv.DictReader(open(manifest, newline="")))
    assert [r["method"] for r in rows] == ["internal"] * 4
    back = load_bank(tmp_path / "bank")
    assert back.labels == bank.labels
    assert len(back) == 4


# ---------------------------------------------------------------------------
# full pipeline
# ---------------------------------------------------------------------------

def test_pipeline_bank_composition_36(trained_dir):
    # 36 stacked inputs split evenly between the two methods
    pipe, dicts = load_dictionaries(trained_dir)
    cfg = _tiny_cfg(
        internal=InternalOptions(k_max=5, query_stride=9),
        external=ExternalOptions(n_dicts=2, n_atoms=16, epochs=2, infer_stride=9),
        bank_size=None,
    )
    lr = color_crop("camera", 100, 100, 36)
    result = run_sr_pipeline(lr, cfg, dicts, pipe)
    assert len(result.internal_bank) == 20  # k_max x 4
    assert len(result.external_bank) == 8  # m x 4
    methods = [l.method for l in result.bank.labels]
    assert methods == ["internal"] * 20 + ["external"] * 8


def test_pipeline_constant_input_gives_constant_output(trained_dir):
    pipe, dicts = load_dictionaries(trained_dir)
    cfg = _tiny_cfg()
    lr = ColorImage(np.full((24, 24, 3), 0.47))
    result = run_sr_pipeline(lr, cfg, dicts, pipe)
    assert result.sr_luma.shape == (48, 48)
    assert np.ptp(result.sr_luma.data) < 1e-9
    assert abs(result.sr_luma.data[0, 0] - 0.47) < 1e-9
    assert np.allclose(result.sr_color.data, 0.47, atol=1e-6)


def test_pipeline_deterministic(trained_dir):
    pipe, dicts = load_dictionaries(trained_dir)
    cfg = _tiny_cfg()
    lr = color_crop("coins", 60, 100, 32)
    a = run_sr_pipeline(lr, cfg, dicts, pipe)
    b = run_sr_pipeline(lr, cfg, dicts, pipe)
    assert np.array_equal(a.sr_luma.data, b.sr_luma.data)
    assert np.array_equal(a.sr_color.data, b.sr_color.data)


# ---------------------------------------------------------------------------
# training command
# ---------------------------------------------------------------------------

def test_train_dictionaries_outputs(trained_dir):
    assert (trained_dir / "pipeline.npz").exists()
    files = sorted(trained_dir.glob("dict_*.npz"))
    assert len(files) == 2
    log = list(csv.DictReader(open(trained_dir / "training_log.csv", newline="")))
    assert set(log[0].keys()) == {"epoch", "group", "loss"}
    # loss monotone non-increasing per group
    for group in {row["group"] for row in log}:
        losses = [float(r["loss"]) for r in log if r["group"] == group]
        assert all(b <= a * (1 + 1e-9) + 1e-12 for a, b in zip(losses, losses[1:]))


def test_train_dictionaries_reload_bit_exact(corpus_dir, trained_dir, tmp_path):
    cfg = _tiny_cfg()
    pipe2, dicts2, _ = train_dictionaries(cfg, corpus_dir, tmp_path / "again")
    pipe1, dicts1 = load_dictionaries(trained_dir)
    assert np.array_equal(pipe1.components, pipe2.components)
    for a, b in zip(dicts1, dicts2):
        assert np.array_equal(a.decode, b.decode)
        assert np.array_equal(a.encode, b.encode)


def test_train_dictionaries_m8_writes_eight_files(corpus_dir, tmp_path):
    cfg = _tiny_cfg(
        external=ExternalOptions(n_dicts=8, n_atoms=8, epochs=1, sample_budget=4000)
    )
    _, dicts, _ = train_dictionaries(cfg, corpus_dir, tmp_path / "m8")
    assert len(dicts) == 8
    assert len(sorted((tmp_path / "m8").glob("dict_*.npz"))) == 8


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def bench_run(dataset_dir, trained_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    cfg = _tiny_cfg(dataset_dir=str(dataset_dir), dict_dir=str(trained_dir), out_dir=str(out))
    report = run_benchmark(cfg)
    return cfg, report, out


def test_benchmark_report_structure(bench_run):
    cfg, report, out = bench_run
    images = {row.image for row in report.rows}
    assert images == {"img_0", "img_1"}
    methods = report.methods()
    assert "bicubic" in methods and "fused" in methods
    assert "internal_fused" in methods and "external_fused" in methods
    member_rows = [m for m in methods if m.startswith(("internal_k", "external_d"))]
    assert len(member_rows) == 8  # bank_size members
    # one row per (image, method)
    assert len(report.rows) == len(images) * len(methods)
    assert (out / "report.csv").exists()
    assert (out / "run_config.yaml").exists()


def test_benchmark_aggregates_equal_row_means(bench_run):
    _, report, _ = bench_run
    for agg in report.aggregates():
        rows = [r for r in report.rows if r.method == agg.method]
        finite = [r.psnr_db for r in rows if math.isfinite(r.psnr_db)]
        assert abs(agg.psnr_db - sum(finite) / len(finite)) < 1e-12
        assert abs(agg.ssim - sum(r.ssim for r in rows) / len(rows)) < 1e-12


def test_benchmark_csv_columns_and_mean_rows(bench_run):
    _, report, out = bench_run
    with open(out / "report.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["image", "method", "psnr_db", "ssim", "wall_ms"]
    mean_rows = [r for r in rows[1:] if r[0] == "MEAN"]
    assert len(mean_rows) == len(report.methods())


def test_benchmark_saved_pngs_recompute_within_quantization(bench_run):
    cfg, report, out = bench_run
    for image in ("img_0", "img_1"):
        fused_row = next(r for r in report.rows if r.image == image and r.method == "fused")
        sr = load_gray(out / f"{image}_fused_y.png")
        truth = load_gray(out / f"{image}_truth_y.png")
        b = cfg.border
        crop = lambda p: ImagePlane(p.data[b:-b, b:-b])
        again_psnr = psnr(crop(truth), crop(sr))
        again_ssim = ssim(crop(truth), crop(sr))
        assert abs(again_psnr - fused_row.psnr_db) < 0.2
        assert abs(again_ssim - fused_row.ssim) < 0.01


def test_benchmark_constant_image_scores_at_float_precision(trained_dir, tmp_path):
    # Every stage preserves constants up to the last ulp of the resampling
    # and SVD arithmetic, so methods land either on the exact-match infinity
    # sentinel or at several hundred dB; nothing may fall below that floor.
    data_dir = tmp_path / "flat"
    data_dir.mkdir()
    save_png(data_dir / "flat.png", ColorImage(np.full((48, 48, 3), 0.5)))
    cfg = _tiny_cfg(
        dataset_dir=str(data_dir), dict_dir=str(trained_dir), out_dir=str(tmp_path / "out")
    )
    report = run_benchmark(cfg)
    assert all(row.psnr_db == math.inf or row.psnr_db > 250.0 for row in report.rows)


def test_benchmark_skips_unreadable_images(dataset_dir, trained_dir, tmp_path):
    bad_dir = tmp_path / "data"
    bad_dir.mkdir()
    for f in dataset_dir.glob("*.png"):
        (bad_dir / f.name).write_bytes(f.read_bytes())
    (bad_dir / "broken.png").write_bytes(b"not a png at all")
    cfg = _tiny_cfg(
        dataset_dir=str(bad_dir), dict_dir=str(trained_dir), out_dir=str(tmp_path / "out")
    )
    report = run_benchmark(cfg)
    assert {row.image for row in report.rows} == {"img_0", "img_1"}


def test_missing_dictionaries_raise(dataset_dir, tmp_path):
    cfg = _tiny_cfg(dataset_dir=str(dataset_dir), out_dir=str(tmp_path / "out"))
    with pytest.raises(FileNotFoundError):
        run_benchmark(cfg)


def test_benchmark_threaded_matches_serial(bench_run, dataset_dir, trained_dir, tmp_path):
    _, serial_report, _ = bench_run
    cfg = _tiny_cfg(
        dataset_dir=str(dataset_dir),
        dict_dir=str(trained_dir),
        out_dir=str(tmp_path / "threaded"),
        threads=2,
    )
    threaded = run_benchmark(cfg)
    assert len(threaded.rows) == len(serial_report.rows)
    for a, b in zip(threaded.rows, serial_report.rows):
        assert (a.image, a.method, a.psnr_db, a.ssim) == (b.image, b.method, b.psnr_db, b.ssim)


# ---------------------------------------------------------------------------
# noise sweep
# ---------------------------------------------------------------------------

def test_noise_sweep_sigma_zero_matches_benchmark(bench_run, dataset_dir, trained_dir, tmp_path):
    cfg0, base_report, _ = bench_run
    cfg = _tiny_cfg(
        dataset_dir=str(dataset_dir),
        dict_dir=str(trained_dir),
        out_dir=str(tmp_path / "sweep"),
        noise_sigmas=(0.0,),
    )
    reports = run_noise_sweep(cfg)
    zero = reports[0.0]
    base = {(r.image, r.method): r for r in base_report.rows}
    assert len(zero.rows) == len(base_report.rows)
    for row in zero.rows:
        ref = base[(row.image, row.method)]
        assert row.psnr_db == ref.psnr_db
        assert row.ssim == ref.ssim
    assert (tmp_path / "sweep" / "noise_sweep.csv").exists()


def test_noise_sweep_csv_has_sigma_column(dataset_dir, trained_dir, tmp_path):
    cfg = _tiny_cfg(
        dataset_dir=str(dataset_dir),
        dict_dir=str(trained_dir),
        out_dir=str(tmp_path / "sweep2"),
        noise_sigmas=(4.0, 20.0),
    )
    run_noise_sweep(cfg)
    with open(tmp_path / "sweep2" / "noise_sweep.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["sigma", "image", "method", "psnr_db", "ssim", "wall_ms"]
    assert {r[0] for r in rows[1:]} == {"4", "20"}


# ---------------------------------------------------------------------------
# quantity curve
# ---------------------------------------------------------------------------

def test_quantity_curve_consistency_with_pipeline(dataset_dir, trained_dir, tmp_path):
    cfg = _tiny_cfg(
        dataset_dir=str(dataset_dir),
        dict_dir=str(trained_dir),
        out_dir=str(tmp_path / "curve"),
        bank_size=16,
    )
    curve = run_quantity_curve(cfg, j_values=(2, 16))
    assert [j for j, _, _ in curve] == [2, 16]
    # J = full selected bank equals the run_sr_pipeline score
    pipe, dicts = load_dictionaries(trained_dir)
    scores = []
    for f in sorted(Path(dataset_dir).glob("*.png")):
        from srfusion.imaging import degrade_color, load_color, mod_crop_color, rgb_to_luma

        hr = mod_crop_color(load_color(f), 2)
        lr = degrade_color(hr, 2)
        result = run_sr_pipeline(lr, cfg, dicts, pipe)
        hr_y = rgb_to_luma(hr)
        b = cfg.border
        scores.append(
            psnr(
                ImagePlane(hr_y.data[b:-b, b:-b]),
                ImagePlane(result.sr_luma.data[b:-b, b:-b]),
            )
        )
    assert abs(curve[1][1] - float(np.mean(scores))) < 1e-9
    assert (tmp_path / "curve" / "quantity_curve.csv").exists()


def test_quantity_curve_rejects_odd_j(dataset_dir, trained_dir, tmp_path):
    cfg = _tiny_cfg(
        dataset_dir=str(dataset_dir), dict_dir=str(trained_dir), out_dir=str(tmp_path / "c2")
    )
    with pytest.raises(ValueError):
        run_quantity_curve(cfg, j_values=(3,))


# ---------------------------------------------------------------------------
# report formatting
# ---------------------------------------------------------------------------

def test_report_infinite_psnr_excluded_from_mean(tmp_path):
    rows = [
        ReportRow("a", "m", math.inf, 1.0, 1.0),
        ReportRow("b", "m", 30.0, 0.9, 1.0),
    ]
    report = BenchmarkReport(rows)
    agg = report.aggregates()[0]
    assert agg.psnr_db == 30.0
    path = tmp_path / "r.csv"
    write_report_csv(report, path)
    text = path.read_text()
    assert "inf" in text
