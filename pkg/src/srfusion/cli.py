"""Command-line front end: train, sr, bench, noise-sweep, quantity-curve, analyze."""

from __future__ import annotations

import logging
from pathlib import Path

import click
import numpy as np

from . import pipeline as pl
from .imaging import load_color, load_gray, rgb_to_luma, save_png
from .metrics import (
    DEFAULT_ERROR_THRESHOLD,
    abs_error_map,
    overlap_stats,
    preference_map,
    sparsity_histogram,
    write_overlap_csv,
)
from .imaging import ImagePlane


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="YAML config file; command flags override it.")
@click.option("--seed", type=int, default=None, help="Global RNG seed.")
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="Output directory.")
@click.option("--threads", type=int, default=None, help="Image-level parallelism.")
@click.option("-v", "--verbose", is_flag=True, help="Chatty logging.")
@click.pass_context
def main(ctx, config_path, seed, out_dir, threads, verbose):
    """Super-resolution by low-rank fusion of internal and external banks."""
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    ctx.obj = {
        "config_path": config_path,
        "overrides": {"seed": seed, "out_dir": out_dir, "threads": threads},
    }


def _config(ctx, **extra) -> pl.ExperimentConfig:
    overrides = {k: v for k, v in ctx.obj["overrides"].items() if v is not None}
    overrides.update({k: v for k, v in extra.items() if v is not None})
    return pl.load_config(ctx.obj["config_path"], **overrides)


@main.command()
@click.option("--corpus", required=True, type=click.Path(exists=True),
              help="Directory of HR PNGs used to synthesize training pairs.")
@click.option("--scale", type=int, default=None)
@click.option("--m", "n_dicts", type=int, default=None, help="Dictionary count.")
@click.option("--atoms", type=int, default=None, help="Atoms per dictionary.")
@click.option("--epochs", type=int, default=None)
@click.option("--samples", type=int, default=None, help="Patch-pair budget.")
@click.pass_context
def train(ctx, corpus, scale, n_dicts, atoms, epochs, samples):
    """Train the feature pipeline and coupled dictionaries."""
    external = {}
    if n_dicts is not None:
        external["n_dicts"] = n_dicts
    if atoms is not None:
        external["n_atoms"] = atoms
    if epochs is not None:
        external["epochs"] = epochs
    if samples is not None:
        external["sample_budget"] = samples
    cfg = _config(ctx, scale=scale, external=external or None)
    out = Path(cfg.out_dir) / "dicts"
    pl.train_dictionaries(cfg, corpus, out)
    click.echo(f"dictionaries written to {out}")


def _sr_overrides(dicts, scale, k_max, n_dicts, bank_size):
    internal = {"k_max": k_max} if k_max is not None else None
    external = {"n_dicts": n_dicts} if n_dicts is not None else None
    return dict(
        dict_dir=dicts, scale=scale, bank_size=bank_size,
        internal=internal, external=external,
    )


@main.command()
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@click.option("--dicts", type=click.Path(exists=True), default=None)
@click.option("--scale", type=int, default=None)
@click.option("--k-max", type=int, default=None)
@click.option("--m", "n_dicts", type=int, default=None)
@click.option("--bank-size", type=int, default=None)
@click.pass_context
def sr(ctx, input_path, dicts, scale, k_max, n_dicts, bank_size):
    """Super-resolve one LR PNG; writes the fused image and the bank."""
    cfg = _config(ctx, **_sr_overrides(dicts, scale, k_max, n_dicts, bank_size))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pl.dump_config(cfg, out / "run_config.yaml")
    pipeline_assets = pl._ensure_dictionaries(cfg)
    lr = load_color(input_path)
    result = pl.run_sr_pipeline(lr, cfg, pipeline_assets[1], pipeline_assets[0])
    stem = Path(input_path).stem
    save_png(out / f"{stem}_fused.png", result.sr_color)
    from .bank import save_bank

    save_bank(result.bank, out / f"{stem}_bank")
    click.echo(f"fused SR written to {out / (stem + '_fused.png')}")


@main.command()
@click.option("--dataset", required=True, type=click.Path(exists=True))
@click.option("--dicts", type=click.Path(exists=True), default=None)
@click.option("--train-corpus", type=click.Path(exists=True), default=None)
@click.option("--scale", type=int, default=None)
@click.option("--k-max", type=int, default=None)
@click.option("--m", "n_dicts", type=int, default=None)
@click.option("--bank-size", type=int, default=None)
@click.option("--no-timing", is_flag=True, help="Write wall_ms as 0 for byte-stable CSVs.")
@click.pass_context
def bench(ctx, dataset, dicts, train_corpus, scale, k_max, n_dicts, bank_size, no_timing):
    """Noiseless benchmark: score bicubic, all bank members, and fusions."""
    cfg = _config(
        ctx, dataset_dir=dataset, train_corpus=train_corpus,
        record_timing=False if no_timing else None,
        **_sr_overrides(dicts, scale, k_max, n_dicts, bank_size),
    )
    report = pl.run_benchmark(cfg)
    for agg in report.aggregates():
        click.echo(f"{agg.method:24s} PSNR {agg.psnr_db:8.3f}  SSIM {agg.ssim:.4f}")
    click.echo(f"report at {Path(cfg.out_dir) / 'report.csv'}")


@main.command("noise-sweep")
@click.option("--dataset", required=True, type=click.Path(exists=True))
@click.option("--dicts", type=click.Path(exists=True), default=None)
@click.option("--train-corpus", type=click.Path(exists=True), default=None)
@click.option("--scale", type=int, default=None)
@click.option("--sigmas", type=str, default=None, help="Comma list, gray levels.")
@click.option("--k-max", type=int, default=None)
@click.option("--m", "n_dicts", type=int, default=None)
@click.option("--bank-size", type=int, default=None)
@click.pass_context
def noise_sweep(ctx, dataset, dicts, train_corpus, scale, sigmas, k_max, n_dicts, bank_size):
    """Benchmark under additive Gaussian noise at each configured sigma."""
    cfg = _config(
        ctx, dataset_dir=dataset, train_corpus=train_corpus,
        noise_sigmas=_parse_floats(sigmas) if sigmas else None,
        **_sr_overrides(dicts, scale, k_max, n_dicts, bank_size),
    )
    reports = pl.run_noise_sweep(cfg)
    for sigma, report in reports.items():
        click.echo(f"sigma {sigma:g}: fused PSNR {report.method_mean_psnr('fused'):.3f}")
    click.echo(f"sweep at {Path(cfg.out_dir) / 'noise_sweep.csv'}")


@main.command("quantity-curve")
@click.option("--dataset", required=True, type=click.Path(exists=True))
@click.option("--dicts", type=click.Path(exists=True), default=None)
@click.option("--train-corpus", type=click.Path(exists=True), default=None)
@click.option("--scale", type=int, default=None)
@click.option("--j-values", type=str, default=None, help="Comma list of even J.")
@click.option("--k-max", type=int, default=None)
@click.option("--m", "n_dicts", type=int, default=None)
@click.pass_context
def quantity_curve(ctx, dataset, dicts, train_corpus, scale, j_values, k_max, n_dicts):
    """Fused quality against the number of stacked preliminary images."""
    cfg = _config(
        ctx, dataset_dir=dataset, train_corpus=train_corpus,
        **_sr_overrides(dicts, scale, k_max, n_dicts, None),
    )
    values = _parse_ints(j_values) if j_values else pl.DEFAULT_J_VALUES
    curve = pl.run_quantity_curve(cfg, values)
    for j, p, s in curve:
        click.echo(f"J={j:3d}  PSNR {p:8.3f}  SSIM {s:.4f}")
    click.echo(f"curve at {Path(cfg.out_dir) / 'quantity_curve.csv'}")


@main.command()
@click.option("--truth", required=True, type=click.Path(exists=True))
@click.option("--internal", "internal_path", required=True, type=click.Path(exists=True))
@click.option("--external", "external_path", required=True, type=click.Path(exists=True))
@click.option("--threshold", "-t", type=float, default=DEFAULT_ERROR_THRESHOLD,
              show_default=True, help="Error threshold in gray levels.")
@click.pass_context
def analyze(ctx, truth, internal_path, external_path, threshold):
    """Preference map, overlap stats and sparsity fractions for two SR results."""
    cfg = _config(ctx)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    truth_y = rgb_to_luma(load_color(truth))
    e_int = abs_error_map(load_gray(internal_path), truth_y)
    e_ext = abs_error_map(load_gray(external_path), truth_y)
    pm = preference_map(e_int, e_ext)
    save_png(out / "preference.png", ImagePlane(pm.data / 255.0))
    save_png(out / "error_internal.png",
             ImagePlane(np.clip(e_int.magnitude / 255.0, 0.0, 1.0)))
    save_png(out / "error_external.png",
             ImagePlane(np.clip(e_ext.magnitude / 255.0, 0.0, 1.0)))
    stats = overlap_stats(e_int, e_ext, threshold)
    write_overlap_csv(out / "overlap.csv", [("internal_vs_external", stats)])
    hist = sparsity_histogram([e_int, e_ext], threshold)
    with open(out / "sparsity.csv", "w", encoding="utf-8") as fh:
        fh.write("map_id,fraction_above_t\n")
        fh.write(f"internal,{hist.fractions[0]:.8f}\n")
        fh.write(f"external,{hist.fractions[1]:.8f}\n")
    click.echo(
        f"C_int={stats.c_int} C_ext={stats.c_ext} C_overlap={stats.c_overlap} "
        f"(t={threshold:g}); outputs in {out}"
    )


if __name__ == "__main__":
    main()
