"""Quality metrics and error-attribute analyses.

PSNR/SSIM use the 0-255 convention (peak 255) so dB values line up with the
usual SR literature even though planes store [0, 1] samples.  Error maps are
kept signed internally; magnitudes are taken at the comparison interfaces.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .imaging import ImagePlane, _readonly

__all__ = [
    "ErrorMap",
    "PreferenceMap",
    "OverlapStats",
    "SparsityHistogram",
    "psnr",
    "ssim",
    "error_map",
    "abs_error_map",
    "preference_map",
    "overlap_stats",
    "sparsity_histogram",
    "write_overlap_csv",
]

PEAK = 255.0
DEFAULT_ERROR_THRESHOLD = 7.0  # gray levels; emphasizes high-frequency misses

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_dims(a: ImagePlane, b: ImagePlane) -> None:
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")


@dataclass(frozen=True)
class ErrorMap:
    """Per-pixel signed estimation error in gray levels (0-255 scale)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError("error map must be 2-D")
        if not np.all(np.isfinite(arr)):
            raise ValueError("error map entries must be finite")
        object.__setattr__(self, "data", _readonly(arr))

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.data)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class PreferenceMap:
    """Binary winner map: 255 where the first method has smaller error, else 0."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ValueError("preference map must be 2-D")
        if not np.isin(arr, (0, 255)).all():
            raise ValueError("preference map must be exactly {0, 255} valued")
        arr = arr.astype(np.uint8)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class OverlapStats:
    """Counts of above-threshold errors per method and their common support."""

    c_int: int
    c_ext: int
    c_overlap: int
    threshold: float

    def __post_init__(self):
        if self.c_overlap > min(self.c_int, self.c_ext):
            raise ValueError("overlap count cannot exceed either marginal count")
        if min(self.c_int, self.c_ext, self.c_overlap) < 0:
            raise ValueError("counts must be non-negative")


@dataclass(frozen=True)
class SparsityHistogram:
    """Distribution of per-map above-threshold densities over a map ensemble."""

    bin_edges: np.ndarray
    mass: np.ndarray
    fractions: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "bin_edges", _readonly(self.bin_edges))
        object.__setattr__(self, "mass", _readonly(self.mass))
        object.__setattr__(self, "fractions", _readonly(self.fractions))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def psnr(reference: ImagePlane, test: ImagePlane) -> float:
    """Peak signal-to-noise ratio in dB; +inf for identical images."""
    _check_dims(reference, test)
    diff = (reference.data - test.data) * PEAK
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(PEAK * PEAK / mse)


def _window_kernel() -> np.ndarray:
    r = np.arange(SSIM_WINDOW) - (SSIM_WINDOW - 1) / 2.0
    k = np.exp(-0.5 * (r / SSIM_SIGMA) ** 2)
    return k / k.sum()


_SSIM_KERNEL = _window_kernel()


def _window_means(x: np.ndarray) -> np.ndarray:
    half = SSIM_WINDOW // 2
    t = correlate1d(x, _SSIM_KERNEL, axis=0, mode="constant")
    t = correlate1d(t, _SSIM_KERNEL, axis=1, mode="constant")
    return t[half:-half, half:-half]


def ssim(reference: ImagePlane, test: ImagePlane) -> float:
    """Mean structural similarity over 11x11 Gaussian windows (sigma 1.5)."""
    _check_dims(reference, test)
    if min(reference.shape) < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    a = reference.data * PEAK
    b = test.data * PEAK
    c1 = (SSIM_K1 * PEAK) ** 2
    c2 = (SSIM_K2 * PEAK) ** 2
    mu1 = _window_means(a)
    mu2 = _window_means(b)
    s11 = _window_means(a * a) - mu1 * mu1
    s22 = _window_means(b * b) - mu2 * mu2
    s12 = _window_means(a * b) - mu1 * mu2
    score = ((2.0 * mu1 * mu2 + c1) * (2.0 * s12 + c2)) / (
        (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
    )
    return float(score.mean())


# ---------------------------------------------------------------------------
# error-attribute analyses
# ---------------------------------------------------------------------------

def error_map(sr: ImagePlane, truth: ImagePlane) -> ErrorMap:
    """Signed estimation error (sr - truth) in gray levels."""
    _check_dims(sr, truth)
    return ErrorMap((sr.data - truth.data) * PEAK)


def abs_error_map(sr: ImagePlane, truth: ImagePlane) -> ErrorMap:
    """Element-wise absolute estimation error in gray levels."""
    _check_dims(sr, truth)
    return ErrorMap(np.abs(sr.data - truth.data) * PEAK)


def preference_map(e_int: ErrorMap, e_ext: ErrorMap) -> PreferenceMap:
    """255 where the first map's magnitude is strictly smaller, 0 otherwise."""
    if e_int.shape != e_ext.shape:
        raise ValueError("error maps must share dimensions")
    return PreferenceMap(np.where(e_int.magnitude < e_ext.magnitude, 255, 0))


def overlap_stats(
    e_int: ErrorMap, e_ext: ErrorMap, t: float = DEFAULT_ERROR_THRESHOLD
) -> OverlapStats:
    """Count above-threshold entries in each map and at shared positions."""
    if e_int.shape != e_ext.shape:
        raise ValueError("error maps must share dimensions")
    above_int = e_int.magnitude > t
    above_ext = e_ext.magnitude > t
    return OverlapStats(
        c_int=int(above_int.sum()),
        c_ext=int(above_ext.sum()),
        c_overlap=int((above_int & above_ext).sum()),
        threshold=t,
    )


def sparsity_histogram(
    maps: list[ErrorMap], t: float = DEFAULT_ERROR_THRESHOLD, bins: int = 10
) -> SparsityHistogram:
    """Histogram the fraction of above-threshold entries across an ensemble."""
    if not maps:
        raise ValueError("need at least one error map")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    fractions = np.array([float((m.magnitude > t).mean()) for m in maps])
    edges = np.linspace(0.0, 1.0, bins + 1)
    counts, _ = np.histogram(fractions, bins=edges)
    return SparsityHistogram(edges, counts / len(maps), fractions)


def write_overlap_csv(
    path: str | Path, rows: list[tuple[str, OverlapStats]]
) -> None:
    """One CSV row per map pair: map id, C_int, C_ext, C_overlap, t."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["map_id", "c_int", "c_ext", "c_overlap", "t"])
        for map_id, stats in rows:
            writer.writerow(
                [map_id, stats.c_int, stats.c_ext, stats.c_overlap, stats.threshold]
            )
