"""End-to-end orchestration: configuration, pipeline runs, experiments, reports.

The harness runs at desk scale by default (small crops, tens of thousands of
training pairs) so whole experiments finish in minutes; absolute scores are
therefore not comparable to corpus-scale published numbers, only the relative
claims are.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .bank import ImageBank, save_bank
from .external import (
    DictionaryPair,
    FeaturePipeline,
    build_training_groups,
    fit_feature_pipeline,
    generate_external_bank,
    load_dictionary,
    load_pipeline,
    save_dictionary,
    save_pipeline,
    train_dictionary_pair,
    training_pairs_from_image,
)
from .fusion import Decomposition, default_card, fuse, godec, stack_images
from .imaging import (
    ColorImage,
    ImagePlane,
    add_gaussian_noise,
    bicubic_resize,
    degrade_color,
    load_color,
    mod_crop_color,
    rgb_to_luma,
    rgb_to_ycbcr,
    save_png,
    ycbcr_to_rgb,
)
from .internal import InternalConfig, generate_internal_bank
from .metrics import psnr, ssim

__all__ = [
    "InternalOptions",
    "ExternalOptions",
    "FusionOptions",
    "ExperimentConfig",
    "ReportRow",
    "BenchmarkReport",
    "PipelineResult",
    "load_config",
    "run_sr_pipeline",
    "run_benchmark",
    "run_noise_sweep",
    "run_quantity_curve",
    "train_dictionaries",
    "load_dictionaries",
    "select_bank",
    "write_report_csv",
]

log = logging.getLogger("srfusion")

DEFAULT_SIGMAS = (4.0, 8.0, 12.0, 16.0, 20.0)
DEFAULT_J_VALUES = (4, 12, 20, 28, 36, 44, 52, 64)


@dataclass(frozen=True)
class InternalOptions:
    zoom_step: float = 1.25
    patch_size: int = 9
    k_max: int = 5
    h: float = 10.0
    search_window: int | None = None
    query_stride: int = 9
    candidate_stride: int = 2
    affine_refine: bool = False


@dataclass(frozen=True)
class ExternalOptions:
    n_dicts: int = 5
    n_atoms: int = 256
    epochs: int = 20
    grad_steps: int = 3
    sample_budget: int = 50_000
    patch_size: int = 9
    train_stride: int = 3
    infer_stride: int = 9
    overlap_fraction: float = 0.1


@dataclass(frozen=True)
class FusionOptions:
    rank: int = 1
    card_fraction: float = 0.05
    eps: float = 1e-7
    max_iter: int = 200


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully-resolved run settings; a fixed config and seed reproduce a run."""

    dataset_dir: str | None = None
    scale: int = 2
    noise_sigmas: tuple[float, ...] = DEFAULT_SIGMAS
    internal: InternalOptions = field(default_factory=InternalOptions)
    external: ExternalOptions = field(default_factory=ExternalOptions)
    fusion: FusionOptions = field(default_factory=FusionOptions)
    bank_size: int | None = 36
    dict_dir: str | None = None
    train_corpus: str | None = None
    out_dir: str = "srfusion-out"
    seed: int = 0
    threads: int = 1
    record_timing: bool = True
    metric_border: int | None = None  # None -> crop `scale` px per side

    def __post_init__(self):
        if self.scale not in (2, 3, 4):
            raise ValueError("scale must be one of 2, 3, 4")
        object.__setattr__(self, "noise_sigmas", tuple(float(s) for s in self.noise_sigmas))

    @property
    def border(self) -> int:
        return self.scale if self.metric_border is None else self.metric_border

    def internal_config(self) -> InternalConfig:
        o = self.internal
        return InternalConfig(
            target_scale=float(self.scale),
            zoom_step=o.zoom_step,
            patch_size=o.patch_size,
            k_max=o.k_max,
            h=o.h,
            search_window=o.search_window,
            query_stride=o.query_stride,
            candidate_stride=o.candidate_stride,
            affine_refine=o.affine_refine,
        )


def _build_options(cls, data: dict):
    known = {f for f in cls.__dataclass_fields__}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


def load_config(path: str | Path | None = None, **overrides) -> ExperimentConfig:
    """Build a config from a YAML file with keyword overrides on top.

    Override keys use the dataclass field names; nested sections are the
    dicts `internal`, `external`, `fusion`.
    """
    data: dict = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    for key, value in overrides.items():
        if value is None:
            continue
        if key in ("internal", "external", "fusion"):
            data[key] = {**data.get(key, {}), **value}
        else:
            data[key] = value
    nested = {
        "internal": _build_options(InternalOptions, data.pop("internal", {})),
        "external": _build_options(ExternalOptions, data.pop("external", {})),
        "fusion": _build_options(FusionOptions, data.pop("fusion", {})),
    }
    if "noise_sigmas" in data:
        data["noise_sigmas"] = tuple(data["noise_sigmas"])
    known = {f for f in ExperimentConfig.__dataclass_fields__}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return ExperimentConfig(**nested, **data)


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    """Echo the fully-resolved configuration for provenance."""
    blob = asdict(cfg)
    blob["noise_sigmas"] = list(cfg.noise_sigmas)
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(blob, fh, sort_keys=True)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReportRow:
    image: str
    method: str
    psnr_db: float
    ssim: float
    wall_ms: float


@dataclass
class BenchmarkReport:
    rows: list[ReportRow]

    def methods(self) -> list[str]:
        seen: list[str] = []
        for row in self.rows:
            if row.method not in seen:
                seen.append(row.method)
        return seen

    def aggregates(self) -> list[ReportRow]:
        """Per-method means; infinite PSNR rows are excluded from the mean."""
        out = []
        for method in self.methods():
            rows = [r for r in self.rows if r.method == method]
            finite = [r.psnr_db for r in rows if math.isfinite(r.psnr_db)]
            mean_psnr = sum(finite) / len(finite) if finite else math.inf
            mean_ssim = sum(r.ssim for r in rows) / len(rows)
            mean_wall = sum(r.wall_ms for r in rows) / len(rows)
            out.append(ReportRow("MEAN", method, mean_psnr, mean_ssim, mean_wall))
        return out

    def method_mean_psnr(self, method: str) -> float:
        for agg in self.aggregates():
            if agg.method == method:
                return agg.psnr_db
        raise KeyError(method)


def _fmt_psnr(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.6f}"


def write_report_csv(report: BenchmarkReport, path: str | Path) -> None:
    """report.csv with the fixed column order plus trailing MEAN rows."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "method", "psnr_db", "ssim", "wall_ms"])
        for row in list(report.rows) + report.aggregates():
            writer.writerow(
                [row.image, row.method, _fmt_psnr(row.psnr_db),
                 f"{row.ssim:.8f}", f"{row.wall_ms:.3f}"]
            )


# ---------------------------------------------------------------------------
# dictionary assets
# ---------------------------------------------------------------------------

def _list_pngs(directory: str | Path) -> list[Path]:
    files = sorted(Path(directory).glob("*.png"))
    if not files:
        raise FileNotFoundError(f"no PNG images under {directory}")
    return files


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def train_dictionaries(
    cfg: ExperimentConfig, corpus_dir: str | Path, out_dir: str | Path
) -> tuple[FeaturePipeline, list[DictionaryPair], list[tuple[int, int, float]]]:
    """Train the feature pipeline and m dictionaries from an HR PNG corpus.

    Persists pipeline.npz, dict_XX.npz and training_log.csv (epoch, group,
    loss) under out_dir and returns the in-memory assets plus the log rows.
    """
    ext = cfg.external
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    feats_parts = []
    targ_parts = []
    for f in _list_pngs(corpus_dir):
        hr_y = rgb_to_luma(load_color(f))
        feats, targets = training_pairs_from_image(
            hr_y, cfg.scale, ext.patch_size, ext.train_stride
        )
        feats_parts.append(feats)
        targ_parts.append(targets)
    feats = np.vstack(feats_parts)
    targets = np.vstack(targ_parts)
    if feats.shape[0] > ext.sample_budget:
        rng = np.random.default_rng(_derived_seed(cfg.seed, 101))
        keep = rng.choice(feats.shape[0], ext.sample_budget, replace=False)
        keep.sort()
        feats = feats[keep]
        targets = targets[keep]
    log.info("training corpus: %d patch pairs", feats.shape[0])

    pipeline = fit_feature_pipeline(feats)
    projected = pipeline.project(feats)
    groups = build_training_groups(
        projected, targets, ext.n_dicts, ext.overlap_fraction
    )
    dicts: list[DictionaryPair] = []
    log_rows: list[tuple[int, int, float]] = []
    for group in groups:
        result = train_dictionary_pair(
            group,
            ext.n_atoms,
            ext.epochs,
            grad_steps=ext.grad_steps,
            seed=_derived_seed(cfg.seed, 202, group.index),
        )
        dicts.append(result.dictionary)
        for epoch, loss in enumerate(result.losses):
            log_rows.append((epoch, group.index, loss))
        log.info("dictionary %d: loss %.6g -> %.6g",
                 group.index, result.losses[0], result.losses[-1])

    save_pipeline(out_dir / "pipeline.npz", pipeline)
    for i, dic in enumerate(dicts):
        save_dictionary(out_dir / f"dict_{i:02d}.npz", dic)
    with open(out_dir / "training_log.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "group", "loss"])
        for epoch, group_idx, loss in sorted(log_rows, key=lambda r: (r[1], r[0])):
            writer.writerow([epoch, group_idx, f"{loss:.12g}"])
    return pipeline, dicts, log_rows


def load_dictionaries(dict_dir: str | Path) -> tuple[FeaturePipeline, list[DictionaryPair]]:
    dict_dir = Path(dict_dir)
    pipeline = load_pipeline(dict_dir / "pipeline.npz")
    dicts = [load_dictionary(f) for f in sorted(dict_dir.glob("dict_*.npz"))]
    if not dicts:
        raise FileNotFoundError(f"no dict_*.npz under {dict_dir}")
    return pipeline, dicts


def _ensure_dictionaries(
    cfg: ExperimentConfig,
) -> tuple[FeaturePipeline, list[DictionaryPair]]:
    if cfg.dict_dir and (Path(cfg.dict_dir) / "pipeline.npz").exists():
        return load_dictionaries(cfg.dict_dir)
    if cfg.train_corpus:
        target = cfg.dict_dir or str(Path(cfg.out_dir) / "dicts")
        return train_dictionaries(cfg, cfg.train_corpus, target)[:2]
    raise FileNotFoundError(
        "no trained dictionaries: set dict_dir to an existing container "
        "directory or train_corpus to an HR image directory"
    )


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

def select_bank(
    internal_bank: ImageBank, external_bank: ImageBank, bank_size: int | None
) -> ImageBank:
    """Fusion input: the full concatenation, or an equal split of bank_size.

    With a bank_size the first bank_size/2 members of each bank are taken in
    generation order (internal: ascending k then rotation; external:
    ascending dictionary index then rotation).
    """
    if bank_size is None:
        return internal_bank.concat(external_bank)
    if bank_size % 2 != 0:
        raise ValueError("bank_size must be even (equal internal/external split)")
    half = bank_size // 2
    return internal_bank.take(half).concat(external_bank.take(half))


@dataclass
class PipelineResult:
    sr_luma: ImagePlane
    sr_color: ColorImage
    bank: ImageBank
    internal_bank: ImageBank
    external_bank: ImageBank
    decomposition: Decomposition
    timings: dict[str, float]


def _fuse_bank(bank: ImageBank, opts: FusionOptions) -> tuple[ImagePlane, Decomposition]:
    stacked = stack_images(bank)
    dec = godec(
        stacked,
        r=opts.rank,
        k_card=default_card(stacked.n_pixels, stacked.n_images, opts.card_fraction),
        eps=opts.eps,
        max_iter=opts.max_iter,
    )
    return fuse(dec, stacked.image_shape), dec


def run_sr_pipeline(
    lr: ColorImage,
    cfg: ExperimentConfig,
    dicts: list[DictionaryPair],
    pipeline: FeaturePipeline,
) -> PipelineResult:
    """Full SR of one LR color image: banks -> stack -> decompose -> fuse."""
    timings: dict[str, float] = {}
    y, cb, cr = rgb_to_ycbcr(lr)

    t0 = time.perf_counter()
    internal_bank = generate_internal_bank(y, cfg.internal_config())
    timings["internal_bank_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    external_bank = generate_external_bank(
        y,
        dicts[: cfg.external.n_dicts],
        pipeline,
        float(cfg.scale),
        patch_size=cfg.external.patch_size,
        stride=cfg.external.infer_stride,
    )
    timings["external_bank_s"] = time.perf_counter() - t0

    bank = select_bank(internal_bank, external_bank, cfg.bank_size)
    t0 = time.perf_counter()
    sr_luma, dec = _fuse_bank(bank, cfg.fusion)
    timings["fusion_s"] = time.perf_counter() - t0

    target = sr_luma.shape
    sr_color = ycbcr_to_rgb(
        sr_luma,
        bicubic_resize(cb, out_size=target),
        bicubic_resize(cr, out_size=target),
    )
    return PipelineResult(
        sr_luma, sr_color, bank, internal_bank, external_bank, dec, timings
    )


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

def _crop_border(plane: ImagePlane, border: int) -> ImagePlane:
    if border == 0:
        return plane
    return ImagePlane(plane.data[border:-border, border:-border])


def _score(sr: ImagePlane, truth: ImagePlane, border: int) -> tuple[float, float]:
    a = _crop_border(truth, border)
    b = _crop_border(sr, border)
    return psnr(a, b), ssim(a, b)


def _noisy_color(img: ColorImage, sigma: float, seeds: tuple[int, int, int]) -> ColorImage:
    if sigma == 0:
        return img
    channels = [
        add_gaussian_noise(ImagePlane(img.data[..., c]), sigma, seeds[c]).data
        for c in range(3)
    ]
    return ColorImage(np.stack(channels, axis=-1))


def _bench_one_image(
    name: str,
    hr: ColorImage,
    cfg: ExperimentConfig,
    dicts: list[DictionaryPair],
    pipeline: FeaturePipeline,
    sigma: float,
    sigma_index: int,
    image_index: int,
    out_dir: Path | None,
) -> list[ReportRow]:
    hr_c = mod_crop_color(hr, cfg.scale)
    lr = degrade_color(hr_c, cfg.scale)
    seeds = tuple(
        _derived_seed(cfg.seed, image_index, sigma_index, ch) for ch in range(3)
    )
    lr = _noisy_color(lr, sigma, seeds)
    hr_y = rgb_to_luma(hr_c)
    border = cfg.border
    rows: list[ReportRow] = []

    def wall(seconds: float) -> float:
        return seconds * 1000.0 if cfg.record_timing else 0.0

    t0 = time.perf_counter()
    bic = bicubic_resize(rgb_to_luma(lr), out_size=hr_y.shape)
    t_bic = time.perf_counter() - t0
    p, s = _score(bic, hr_y, border)
    rows.append(ReportRow(name, "bicubic", p, s, wall(t_bic)))

    result = run_sr_pipeline(lr, cfg, dicts, pipeline)
    per_internal = result.timings["internal_bank_s"] / len(result.internal_bank)
    per_external = result.timings["external_bank_s"] / len(result.external_bank)
    for img, label in zip(result.bank.images, result.bank.labels):
        p, s = _score(img, hr_y, border)
        member_wall = per_internal if label.method == "internal" else per_external
        rows.append(ReportRow(name, label.name, p, s, wall(member_wall)))

    half = len(result.bank) // 2
    internal_members = ImageBank(result.bank.images[:half], result.bank.labels[:half])
    external_members = ImageBank(result.bank.images[half:], result.bank.labels[half:])
    for tag, members in (("internal_fused", internal_members),
                         ("external_fused", external_members)):
        t0 = time.perf_counter()
        fused_side, _ = _fuse_bank(members, cfg.fusion)
        t_side = time.perf_counter() - t0
        p, s = _score(fused_side, hr_y, border)
        rows.append(ReportRow(name, tag, p, s, wall(t_side)))

    p, s = _score(result.sr_luma, hr_y, border)
    total = (
        result.timings["internal_bank_s"]
        + result.timings["external_bank_s"]
        + result.timings["fusion_s"]
    )
    rows.append(ReportRow(name, "fused", p, s, wall(total)))

    if out_dir is not None:
        prefix = f"{name}_s{sigma:g}" if sigma else name
        save_png(out_dir / f"{prefix}_fused.png", result.sr_color)
        save_png(out_dir / f"{prefix}_fused_y.png", result.sr_luma)
        save_png(out_dir / f"{prefix}_truth_y.png", hr_y)
        save_bank(result.bank, out_dir / f"{prefix}_bank")
    return rows


def _run_images(
    cfg: ExperimentConfig,
    dicts: list[DictionaryPair],
    pipeline: FeaturePipeline,
    sigma: float,
    sigma_index: int,
    out_dir: Path | None,
) -> BenchmarkReport:
    files = _list_pngs(cfg.dataset_dir)
    jobs = []
    for image_index, f in enumerate(files):
        try:
            hr = load_color(f)
        except Exception as exc:  # unreadable image: skip, keep going
            log.warning("skipping unreadable image %s (%s)", f, exc)
            continue
        jobs.append((image_index, f.stem, hr))

    def run(job):
        image_index, name, hr = job
        return _bench_one_image(
            name, hr, cfg, dicts, pipeline, sigma, sigma_index, image_index, out_dir
        )

    if cfg.threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]
    rows: list[ReportRow] = []
    for chunk in results:
        rows.extend(chunk)
    return BenchmarkReport(rows)


def _prepare_out(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "run_config.yaml")
    return out


def run_benchmark(cfg: ExperimentConfig) -> BenchmarkReport:
    """Noiseless benchmark over a directory of HR PNGs; writes report.csv."""
    out = _prepare_out(cfg)
    pipeline, dicts = _ensure_dictionaries(cfg)
    report = _run_images(cfg, dicts, pipeline, sigma=0.0, sigma_index=0, out_dir=out)
    write_report_csv(report, out / "report.csv")
    return report


def run_noise_sweep(cfg: ExperimentConfig) -> dict[float, BenchmarkReport]:
    """Benchmark at every configured noise level; writes noise_sweep.csv."""
    out = _prepare_out(cfg)
    pipeline, dicts = _ensure_dictionaries(cfg)
    reports: dict[float, BenchmarkReport] = {}
    for sigma_index, sigma in enumerate(cfg.noise_sigmas):
        reports[sigma] = _run_images(
            cfg, dicts, pipeline, sigma=sigma, sigma_index=sigma_index, out_dir=out
        )
    with open(out / "noise_sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sigma", "image", "method", "psnr_db", "ssim", "wall_ms"])
        for sigma in cfg.noise_sigmas:
            report = reports[sigma]
            for row in list(report.rows) + report.aggregates():
                writer.writerow(
                    [f"{sigma:g}", row.image, row.method, _fmt_psnr(row.psnr_db),
                     f"{row.ssim:.8f}", f"{row.wall_ms:.3f}"]
                )
    return reports


def run_quantity_curve(
    cfg: ExperimentConfig, j_values: tuple[int, ...] = DEFAULT_J_VALUES
) -> list[tuple[int, float, float]]:
    """Fused quality against the number of stacked inputs (equal split).

    For each J the first J/2 internal and J/2 external members are fused and
    scored; writes quantity_curve.csv with (J, mean PSNR, mean SSIM) rows.
    """
    for j in j_values:
        if j % 2 != 0:
            raise ValueError(f"J={j} is odd; the equal-split contract needs even J")
    out = _prepare_out(cfg)
    pipeline, dicts = _ensure_dictionaries(cfg)
    files = _list_pngs(cfg.dataset_dir)
    per_j_psnr: dict[int, list[float]] = {j: [] for j in j_values}
    per_j_ssim: dict[int, list[float]] = {j: [] for j in j_values}
    for f in files:
        hr_c = mod_crop_color(load_color(f), cfg.scale)
        lr = degrade_color(hr_c, cfg.scale)
        hr_y = rgb_to_luma(hr_c)
        y = rgb_to_luma(lr)
        internal_bank = generate_internal_bank(y, cfg.internal_config())
        external_bank = generate_external_bank(
            y, dicts[: cfg.external.n_dicts], pipeline, float(cfg.scale),
            patch_size=cfg.external.patch_size, stride=cfg.external.infer_stride,
        )
        for j in j_values:
            subset = select_bank(internal_bank, external_bank, j)
            fused, _ = _fuse_bank(subset, cfg.fusion)
            p, s = _score(fused, hr_y, cfg.border)
            per_j_psnr[j].append(p)
            per_j_ssim[j].append(s)
    curve = [
        (j, float(np.mean(per_j_psnr[j])), float(np.mean(per_j_ssim[j])))
        for j in j_values
    ]
    with open(out / "quantity_curve.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["j", "mean_psnr_db", "mean_ssim"])
        for j, p, s in curve:
            writer.writerow([j, f"{p:.6f}", f"{s:.8f}"])
    return curve
