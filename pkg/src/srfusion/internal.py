"""Tailored internal learning: coarse-to-fine self-similarity super-resolution.

One zoom step enlarges the working image, splits it into low/high bands, and
transplants high-band detail from the best-matching low-band patches.  A bank
is built by sweeping the neighbor count k and the four input rotations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bank import BankLabel, ImageBank
from .imaging import (
    ImagePlane,
    PatchGrid,
    _readonly,
    aggregate_patches,
    bicubic_resize,
    extract_patches,
    high_pass_decompose,
    rotate90,
)

__all__ = [
    "InternalConfig",
    "MatchSet",
    "nlm_weights",
    "knn_patch_search",
    "zoom_ladder",
    "single_step_sr",
    "multiscale_sr",
    "generate_internal_bank",
]

GRAY = 255.0
# Blur width tracks the zoom step.  The factor keeps the low band of the
# source image close to the sharpness of its bicubic enlargement (which is
# what the query patches are cut from) while leaving a substantive high band
# to transplant; much larger factors wreck the matching, much smaller ones
# leave nothing to transplant.
HIGHPASS_SIGMA_FACTOR = 0.41


@dataclass(frozen=True)
class InternalConfig:
    """Knobs of the self-similarity path.

    h is the non-local-means filter degree in gray levels; search_window is a
    Chebyshev radius in source pixels (None = exhaustive global search).
    """

    target_scale: float
    zoom_step: float = 1.25
    patch_size: int = 9
    k_max: int = 8
    h: float = 10.0
    search_window: int | None = None
    # Non-overlapping queries by default: each member commits to one
    # transplant per tile and the bank's rotations supply the shifted
    # tilings, so hedging happens at fusion time rather than inside members.
    query_stride: int = 9
    candidate_stride: int = 2
    affine_refine: bool = False

    def __post_init__(self):
        if self.target_scale <= 1.0:
            raise ValueError("target_scale must exceed 1")
        if not 1.0 < self.zoom_step <= self.target_scale:
            raise ValueError("zoom_step must lie in (1, target_scale]")
        if self.k_max < 1:
            raise ValueError("k_max must be >= 1")
        if self.h <= 0:
            raise ValueError("h must be positive")
        if self.patch_size < 1 or self.query_stride < 1 or self.candidate_stride < 1:
            raise ValueError("patch_size and strides must be >= 1")
        if self.search_window is not None and self.search_window < 1:
            raise ValueError("search_window must be >= 1 or None")


@dataclass(frozen=True)
class MatchSet:
    """k nearest candidates of one query patch, ascending squared distance.

    Ties are broken toward the smaller candidate index.
    """

    query_index: int
    indices: np.ndarray
    distances: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        dist = np.asarray(self.distances, dtype=np.float64)
        if idx.ndim != 1 or idx.shape != dist.shape or idx.size == 0:
            raise ValueError("indices and distances must be aligned 1-D arrays")
        if np.any(np.diff(dist) < 0):
            raise ValueError("distances must be sorted ascending")
        idx = idx.copy()
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "distances", _readonly(dist))

    def __len__(self) -> int:
        return self.indices.size


def nlm_weights(distances: np.ndarray, h: float) -> np.ndarray:
    """Normalized exp(-d / h^2) weights; d and h share the same gray scale.

    Distances are shifted by their minimum before exponentiation so weights
    stay well-conditioned for far matches; the normalized result is identical.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    d = np.asarray(distances, dtype=np.float64)
    if d.ndim != 1 or d.size == 0:
        raise ValueError("need a non-empty 1-D distance list")
    finite = np.isfinite(d)
    if not finite.any():
        raise ValueError("all candidate distances are infinite")
    w = np.exp(-(d - d[finite].min()) / (h * h))
    return w / w.sum()


def knn_patch_search(query: np.ndarray, candidates: PatchGrid, k: int) -> MatchSet:
    """Exhaustive k-nearest patch search under squared L2 distance."""
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.size != candidates.patches.shape[1]:
        raise ValueError("query length must match the candidate patch length")
    n = len(candidates)
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in 1..{n}")
    diff = candidates.patches - q
    d = np.einsum("ij,ij->i", diff, diff)
    order = np.argsort(d, kind="stable")[:k]
    return MatchSet(query_index=0, indices=order, distances=d[order])


def _topk_batched(
    queries: np.ndarray, candidates: np.ndarray, k: int, chunk: int = 4096
) -> tuple[np.ndarray, np.ndarray]:
    """Top-k squared-L2 neighbors for every query row, GEMM-based.

    Returns (indices, distances) of shape (n_queries, k), each row ascending
    by distance with ties toward smaller candidate index.
    """
    n_q = queries.shape[0]
    n_c = candidates.shape[0]
    cc = np.einsum("ij,ij->i", candidates, candidates)
    idx_out = np.empty((n_q, k), dtype=np.int64)
    d_out = np.empty((n_q, k))
    for start in range(0, n_q, chunk):
        q = queries[start : start + chunk]
        qq = np.einsum("ij,ij->i", q, q)
        d = qq[:, None] + cc[None, :] - 2.0 * (q @ candidates.T)
        np.maximum(d, 0.0, out=d)
        if k < n_c:
            sel = np.argpartition(d, k - 1, axis=1)[:, :k]
        else:
            sel = np.broadcast_to(np.arange(n_c), (q.shape[0], n_c))
        sel = np.sort(sel, axis=1)  # index-ascending so stable sort breaks ties
        dsel = np.take_along_axis(d, sel, axis=1)
        order = np.argsort(dsel, axis=1, kind="stable")
        idx_out[start : start + chunk] = np.take_along_axis(sel, order, axis=1)
        d_out[start : start + chunk] = np.take_along_axis(dsel, order, axis=1)
    return idx_out, d_out


def _topk_windowed(
    queries: PatchGrid,
    candidates: PatchGrid,
    k: int,
    window: int,
    scale: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-query search restricted to candidates near the scale-mapped position."""
    coords_q = queries.coords
    rows_c = candidates.rows
    cols_c = candidates.cols
    n_cols = cols_c.size
    idx_out = np.empty((len(queries), k), dtype=np.int64)
    d_out = np.empty((len(queries), k))
    for i, (qr, qc) in enumerate(coords_q):
        cr, ccol = qr / scale, qc / scale
        rmask = np.abs(rows_c - cr) <= window
        cmask = np.abs(cols_c - ccol) <= window
        if not rmask.any():
            rmask[np.argmin(np.abs(rows_c - cr))] = True
        if not cmask.any():
            cmask[np.argmin(np.abs(cols_c - ccol))] = True
        local = (np.flatnonzero(rmask)[:, None] * n_cols + np.flatnonzero(cmask)).reshape(-1)
        if local.size < k:
            local = np.arange(len(candidates))
        diff = candidates.patches[local] - queries.patches[i]
        d = np.einsum("ij,ij->i", diff, diff)
        order = np.argsort(d, kind="stable")[:k]
        idx_out[i] = local[order]
        d_out[i] = d[order]
    return idx_out, d_out


def zoom_ladder(target_scale: float, zoom_step: float) -> list[float]:
    """Nominal per-step scales whose product is exactly target_scale.

    All steps equal zoom_step except the last, which absorbs the residual so
    the ladder lands on the target (the final step may exceed zoom_step).
    """
    if target_scale <= 1.0 or not 1.0 < zoom_step <= target_scale:
        raise ValueError("need 1 < zoom_step <= target_scale")
    steps = max(1, math.floor(math.log(target_scale) / math.log(zoom_step) + 1e-9))
    ladder = [zoom_step] * (steps - 1)
    ladder.append(target_scale / zoom_step ** (steps - 1))
    return ladder


def single_step_sr(
    img: ImagePlane,
    cfg: InternalConfig,
    k: int,
    *,
    step_scale: float | None = None,
    out_size: tuple[int, int] | None = None,
) -> ImagePlane:
    """One self-similarity zoom step.

    Enlarges img by the step scale, splits img into low/high bands, and adds
    to every enlarged patch the NLM-weighted high bands of its k nearest
    low-band matches.  Overlaps are averaged; output is clamped to [0, 1].
    """
    p = cfg.patch_size
    if p > min(img.shape):
        raise ValueError("image too small for the configured patch size")
    scale = cfg.zoom_step if step_scale is None else step_scale
    enlarged = bicubic_resize(img, scale, out_size=out_size)
    if p > min(enlarged.shape):
        raise ValueError("enlarged image smaller than the patch size")
    low, high = high_pass_decompose(img, sigma=HIGHPASS_SIGMA_FACTOR * scale)

    queries = extract_patches(enlarged, p, cfg.query_stride)
    cands = extract_patches(low, p, cfg.candidate_stride)
    highs = extract_patches(high, p, cfg.candidate_stride)
    if k > len(cands):
        raise ValueError(f"k={k} exceeds the {len(cands)} available candidates")

    if cfg.search_window is None:
        idx, d2 = _topk_batched(queries.patches, cands.patches, k)
    else:
        idx, d2 = _topk_windowed(queries, cands, k, cfg.search_window, scale)

    donors = highs.patches[idx]  # (Nq, k, p*p)
    if cfg.affine_refine:
        donors = _photometric_refine(queries.patches, cands.patches[idx], donors)

    d_gray = d2 * (GRAY * GRAY)
    shifted = d_gray - d_gray.min(axis=1, keepdims=True)
    w = np.exp(-shifted / (cfg.h * cfg.h))
    w /= w.sum(axis=1, keepdims=True)

    out_patches = queries.patches + np.einsum("nk,nkp->np", w, donors)
    result = aggregate_patches(queries, out_patches, enlarged.shape)
    return ImagePlane(np.clip(result.data, 0.0, 1.0))


def _photometric_refine(
    queries: np.ndarray, donor_low: np.ndarray, donor_high: np.ndarray
) -> np.ndarray:
    """Least-squares gain fit of each donor's low band onto its query.

    Approximates the per-patch deformation correction: the fitted gain is
    applied to the donor high band (the offset term is DC and already lives
    in the query's own low frequencies).  Gains are clipped to [0.2, 5].
    """
    q = queries[:, None, :] - queries.mean(axis=1)[:, None, None]
    d = donor_low - donor_low.mean(axis=2, keepdims=True)
    denom = np.einsum("nkp,nkp->nk", d, d) + 1e-12
    gain = np.einsum("nkp,nkp->nk", d, q) / denom
    np.clip(gain, 0.2, 5.0, out=gain)
    return donor_high * gain[:, :, None]


def multiscale_sr(
    lr: ImagePlane, cfg: InternalConfig, k: int, rotation: int = 0
) -> ImagePlane:
    """Repeat single_step_sr along the zoom ladder, under an input rotation.

    The input is rotated by `rotation` quarter turns, enlarged step by step
    (the final step lands exactly on round(dims * target_scale)), and rotated
    back.
    """
    work = rotate90(lr, rotation)
    target = (round(work.height * cfg.target_scale), round(work.width * cfg.target_scale))
    ladder = zoom_ladder(cfg.target_scale, cfg.zoom_step)
    for i, scale in enumerate(ladder):
        final = i == len(ladder) - 1
        if final:
            size = target
        else:
            size = (round(work.height * scale), round(work.width * scale))
        work = single_step_sr(work, cfg, k, step_scale=scale, out_size=size)
    return rotate90(work, (4 - rotation) % 4)


def generate_internal_bank(lr: ImagePlane, cfg: InternalConfig) -> ImageBank:
    """k_max x 4 preliminary HR images, ordered by ascending k then rotation."""
    images = []
    labels = []
    for k in range(1, cfg.k_max + 1):
        for rotation in range(4):
            images.append(multiscale_sr(lr, cfg, k, rotation))
            labels.append(BankLabel("internal", k, rotation))
    return ImageBank(tuple(images), tuple(labels))
