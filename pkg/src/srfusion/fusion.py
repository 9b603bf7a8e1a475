"""Low-rank + sparse + residual decomposition of stacked image banks.

The bank is flattened column-wise into X (pixels x images) and split as
X = L + S + G by alternating a rank-r projection of X - S with a global
cardinality projection of X - L.  The fused SR image is the column mean of L.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bank import BankLabel, ImageBank
from .imaging import ImagePlane, _readonly

__all__ = [
    "StackedMatrix",
    "Decomposition",
    "stack_images",
    "unstack_images",
    "rank_r_project",
    "randomized_rank_r_project",
    "hard_threshold_card",
    "default_card",
    "godec",
    "fuse",
    "save_decomposition",
    "load_decomposition",
]

DEFAULT_CARD_FRACTION = 0.05  # errors occupy few pixels; see sparsity analysis
DEFAULT_EPS = 1e-7
DEFAULT_MAX_ITER = 200


@dataclass(frozen=True)
class StackedMatrix:
    """Pixels-by-images matrix with provenance labels and the source dims."""

    data: np.ndarray
    labels: tuple[BankLabel, ...]
    image_shape: tuple[int, int]

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] < 2:
            raise ValueError("need an (n, J) matrix with J >= 2")
        if not np.all(np.isfinite(arr)):
            raise ValueError("stacked matrix must be finite")
        if arr.shape[0] != self.image_shape[0] * self.image_shape[1]:
            raise ValueError("row count must equal the pixel count of one image")
        if len(self.labels) != arr.shape[1]:
            raise ValueError("one label per column required")
        object.__setattr__(self, "data", _readonly(arr))
        object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def n_pixels(self) -> int:
        return self.data.shape[0]

    @property
    def n_images(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class Decomposition:
    """X = low_rank + sparse + noise, with per-iteration residual history."""

    low_rank: np.ndarray
    sparse: np.ndarray
    noise: np.ndarray
    iterations: int
    residual_norm: float
    converged: bool
    residual_norms: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "low_rank", _readonly(self.low_rank))
        object.__setattr__(self, "sparse", _readonly(self.sparse))
        object.__setattr__(self, "noise", _readonly(self.noise))
        object.__setattr__(self, "residual_norms", tuple(self.residual_norms))


def stack_images(bank: ImageBank) -> StackedMatrix:
    """Column j is the row-major flattening of bank image j."""
    cols = [img.data.reshape(-1) for img in bank.images]
    return StackedMatrix(np.stack(cols, axis=1), bank.labels, bank.shape)


def unstack_images(stacked: StackedMatrix) -> ImageBank:
    """Inverse of stack_images (bit-exact)."""
    images = tuple(
        ImagePlane(stacked.data[:, j].reshape(stacked.image_shape))
        for j in range(stacked.n_images)
    )
    return ImageBank(images, stacked.labels)


# ---------------------------------------------------------------------------
# projections
# ---------------------------------------------------------------------------

def rank_r_project(matrix: np.ndarray, r: int) -> np.ndarray:
    """Best Frobenius rank-r approximation via exact thin SVD.

    r larger than min(n, J) is clamped (identity).
    """
    if r < 1:
        raise ValueError("r must be >= 1")
    m = np.asarray(matrix, dtype=np.float64)
    r = min(r, min(m.shape))
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    return (u[:, :r] * s[:r]) @ vt[:r]


def randomized_rank_r_project(
    matrix: np.ndarray,
    r: int,
    *,
    oversample: int = 10,
    power_iters: int = 2,
    seed: int = 0,
) -> np.ndarray:
    """Rank-r approximation by randomized bilateral projection (Halko sketch).

    Equivalent to the exact truncation whenever the sketch (r + oversample,
    capped at min(n, J)) covers the matrix row space; used as an accelerated
    path for matrices far larger than the fusion stacks seen here.
    """
    if r < 1:
        raise ValueError("r must be >= 1")
    m = np.asarray(matrix, dtype=np.float64)
    small = min(m.shape)
    r = min(r, small)
    sketch = min(r + oversample, small)
    rng = np.random.default_rng(seed)
    y = m @ rng.standard_normal((m.shape[1], sketch))
    for _ in range(power_iters):
        q, _ = np.linalg.qr(y)
        z, _ = np.linalg.qr(m.T @ q)
        y = m @ z
    q, _ = np.linalg.qr(y)
    b = q.T @ m
    ub, s, vt = np.linalg.svd(b, full_matrices=False)
    return (q @ ub[:, :r] * s[:r]) @ vt[:r]


def hard_threshold_card(matrix: np.ndarray, k_card: int) -> np.ndarray:
    """Keep the k_card largest-magnitude entries (global); zero the rest.

    Ties at the cut magnitude are resolved toward smaller linear index.
    """
    if k_card < 0:
        raise ValueError("k_card must be >= 0")
    m = np.asarray(matrix, dtype=np.float64)
    out = np.zeros_like(m)
    if k_card == 0:
        return out
    flat = m.reshape(-1)
    n = flat.size
    if k_card >= n:
        return m.copy()
    mags = np.abs(flat)
    cut = np.partition(mags, n - k_card)[n - k_card]
    keep = mags > cut
    short = k_card - int(keep.sum())
    if short > 0:
        keep[np.flatnonzero(mags == cut)[:short]] = True
    out.reshape(-1)[keep] = flat[keep]
    return out


def default_card(n_pixels: int, n_images: int, fraction: float = DEFAULT_CARD_FRACTION) -> int:
    """Cardinality budget: ceil(fraction * n * J)."""
    return int(math.ceil(fraction * n_pixels * n_images))


# ---------------------------------------------------------------------------
# alternating decomposition
# ---------------------------------------------------------------------------

def godec(
    x: StackedMatrix | np.ndarray,
    r: int = 1,
    k_card: int | None = None,
    eps: float = DEFAULT_EPS,
    max_iter: int = DEFAULT_MAX_ITER,
) -> Decomposition:
    """Alternate rank-r and cardinality projections until the residual settles.

    L_t = rank_r_project(X - S_{t-1}); S_t = hard_threshold_card(X - L_t);
    starts from S_0 = 0 and stops when the relative change of ||X - L - S||_F
    drops below eps (or at max_iter, flagged non-converged).  The residual
    G = X - L - S is returned alongside.
    """
    data = x.data if isinstance(x, StackedMatrix) else np.asarray(x, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError("expected a matrix")
    if not np.all(np.isfinite(data)):
        raise ValueError("godec input must be finite")
    if k_card is None:
        k_card = default_card(data.shape[0], data.shape[1])
    if k_card >= data.size:
        raise ValueError("k_card must be smaller than the entry count")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")

    sparse = np.zeros_like(data)
    low = np.zeros_like(data)
    history: list[float] = []
    prev = math.inf
    converged = False
    iterations = 0
    scale = float(np.linalg.norm(data))
    for iterations in range(1, max_iter + 1):
        low = rank_r_project(data - sparse, r)
        sparse = hard_threshold_card(data - low, k_card)
        resid = float(np.linalg.norm(data - low - sparse))
        history.append(resid)
        if resid <= 1e-14 * max(scale, 1.0):
            converged = True
            break
        if math.isfinite(prev) and abs(prev - resid) <= eps * prev:
            converged = True
            break
        prev = resid
    noise = data - low - sparse
    return Decomposition(
        low_rank=low,
        sparse=sparse,
        noise=noise,
        iterations=iterations,
        residual_norm=history[-1],
        converged=converged,
        residual_norms=tuple(history),
    )


def fuse(dec: Decomposition, dims: tuple[int, int]) -> ImagePlane:
    """Average the low-rank columns into the final SR image, clamped to [0, 1]."""
    n, _ = dec.low_rank.shape
    if dims[0] * dims[1] != n:
        raise ValueError("dims inconsistent with the decomposition row count")
    mean = dec.low_rank.mean(axis=1).reshape(dims)
    return ImagePlane(np.clip(mean, 0.0, 1.0))


# ---------------------------------------------------------------------------
# persistence (offline inspection)
# ---------------------------------------------------------------------------

def save_decomposition(
    path: str | Path, dec: Decomposition, r: int, k_card: int
) -> None:
    """Dump L, S, G plus a header (n, J, r, k_card, iterations) as an .npz."""
    n, j = dec.low_rank.shape
    np.savez(
        path,
        format_version=np.int64(1),
        n=np.int64(n),
        j=np.int64(j),
        r=np.int64(r),
        k_card=np.int64(k_card),
        iterations=np.int64(dec.iterations),
        low_rank=dec.low_rank,
        sparse=dec.sparse,
        noise=dec.noise,
    )


def load_decomposition(path: str | Path) -> Decomposition:
    with np.load(path) as blob:
        if int(blob["format_version"]) != 1:
            raise ValueError("unsupported decomposition container version")
        low = blob["low_rank"]
        sparse = blob["sparse"]
        noise = blob["noise"]
        iterations = int(blob["iterations"])
    resid = float(np.linalg.norm(noise))
    return Decomposition(low, sparse, noise, iterations, resid, True, (resid,))
