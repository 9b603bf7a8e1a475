"""Tailored external learning: coupled dictionaries with a depth-1 shrinkage encoder.

LR patches are described by PCA-compressed derivative features; a learned
encoder z = S_theta(W_e y + W_d S_theta(W_e y)) produces sparse codes that a
high-resolution dictionary decodes into residual detail over the bicubic
base.  Several dictionaries trained on variance-sorted sample groups yield a
bank of m x 4 preliminary HR images.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.cluster.vq import kmeans2

from .bank import BankLabel, ImageBank
from .imaging import (
    ImagePlane,
    _readonly,
    aggregate_patches,
    bicubic_resize,
    degrade,
    derivative_features,
    extract_patches,
    gather_patches,
    mod_crop,
    rotate90,
)

__all__ = [
    "FeaturePipeline",
    "DictionaryPair",
    "TrainingGroup",
    "TrainResult",
    "soft_threshold",
    "lista_encode",
    "fit_feature_pipeline",
    "build_training_groups",
    "train_dictionary_pair",
    "external_sr",
    "generate_external_bank",
    "feature_patches",
    "training_pairs_from_image",
    "save_pipeline",
    "load_pipeline",
    "save_dictionary",
    "load_dictionary",
]

VARIANCE_GOAL = 0.999
MAX_PCA_COMPONENTS = 30
THETA_FLOOR = 1e-4
FORMAT_VERSION = 1


@dataclass(frozen=True)
class FeaturePipeline:
    """Mean-centered PCA projection fitted on LR feature patches.

    Rows of `components` are orthonormal; the retained dimension is the
    smallest one keeping >= 99.9% of training variance, capped at 30 (or the
    available rank when the data is deficient).
    """

    mean: np.ndarray
    components: np.ndarray
    explained: np.ndarray
    total_variance: float

    def __post_init__(self):
        object.__setattr__(self, "mean", _readonly(self.mean))
        object.__setattr__(self, "components", _readonly(self.components))
        object.__setattr__(self, "explained", _readonly(self.explained))

    @property
    def dim(self) -> int:
        return self.components.shape[0]

    @property
    def degenerate(self) -> bool:
        return self.dim == 0

    @property
    def retained_fraction(self) -> float:
        if self.total_variance == 0.0:
            return 0.0
        return float(self.explained.sum() / self.total_variance)

    def project(self, features: np.ndarray) -> np.ndarray:
        """Linear projection onto the principal directions.

        The fitted mean is kept as metadata but not subtracted here, so the
        all-zero feature vector (a flat patch) always encodes to zero; the
        encoder is trained on the same representation.
        """
        feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if feats.shape[1] != self.mean.size:
            raise ValueError("feature length does not match the pipeline")
        return feats @ self.components.T


@dataclass(frozen=True)
class DictionaryPair:
    """HR decode matrix plus the trained shrinkage-encoder parameters."""

    decode: np.ndarray      # D_h, (patch_dim, n_atoms)
    thresholds: np.ndarray  # theta, (n_atoms,), positive
    encode: np.ndarray      # W_e, (n_atoms, feature_dim)
    lateral: np.ndarray     # W_d, (n_atoms, n_atoms)

    def __post_init__(self):
        decode = np.asarray(self.decode, dtype=np.float64)
        theta = np.asarray(self.thresholds, dtype=np.float64)
        enc = np.asarray(self.encode, dtype=np.float64)
        lat = np.asarray(self.lateral, dtype=np.float64)
        k = decode.shape[1]
        if theta.shape != (k,) or enc.shape[0] != k or lat.shape != (k, k):
            raise ValueError("dictionary component shapes are inconsistent")
        if np.any(theta <= 0):
            raise ValueError("thresholds must be positive")
        for name, arr in (("decode", decode), ("thresholds", theta),
                          ("encode", enc), ("lateral", lat)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")
        object.__setattr__(self, "decode", _readonly(decode))
        object.__setattr__(self, "thresholds", _readonly(theta))
        object.__setattr__(self, "encode", _readonly(enc))
        object.__setattr__(self, "lateral", _readonly(lat))

    @property
    def n_atoms(self) -> int:
        return self.decode.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.encode.shape[1]


@dataclass(frozen=True)
class TrainingGroup:
    """Aligned LR feature / HR residual sample block for one dictionary."""

    features: np.ndarray
    targets: np.ndarray
    index: int

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        targets = np.asarray(self.targets, dtype=np.float64)
        if feats.ndim != 2 or targets.ndim != 2 or feats.shape[0] != targets.shape[0]:
            raise ValueError("features and targets must be aligned 2-D blocks")
        if feats.shape[0] == 0:
            raise ValueError("training group cannot be empty")
        object.__setattr__(self, "features", _readonly(feats))
        object.__setattr__(self, "targets", _readonly(targets))

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class TrainResult:
    dictionary: DictionaryPair
    losses: tuple[float, ...]  # entry 0 = initialization, then one per epoch


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

def soft_threshold(values: np.ndarray, thresholds: np.ndarray | float) -> np.ndarray:
    """Elementwise shrink toward zero: sign(v) * max(|v| - theta, 0)."""
    v = np.asarray(values, dtype=np.float64)
    return np.sign(v) * np.maximum(np.abs(v) - thresholds, 0.0)


def lista_encode(features: np.ndarray, dic: DictionaryPair) -> np.ndarray:
    """Depth-1 truncated shrinkage encoding of one feature vector or a batch.

    z = S_theta(W_e y + W_d S_theta(W_e y)).
    """
    y = np.asarray(features, dtype=np.float64)
    single = y.ndim == 1
    y2 = np.atleast_2d(y)
    if y2.shape[1] != dic.feature_dim:
        raise ValueError("feature length does not match the dictionary encoder")
    t = y2 @ dic.encode.T
    v = soft_threshold(t, dic.thresholds)
    z = soft_threshold(t + v @ dic.lateral.T, dic.thresholds)
    return z[0] if single else z


# ---------------------------------------------------------------------------
# feature pipeline
# ---------------------------------------------------------------------------

def fit_feature_pipeline(
    features: np.ndarray,
    variance_goal: float = VARIANCE_GOAL,
    max_components: int = MAX_PCA_COMPONENTS,
) -> FeaturePipeline:
    """PCA by eigendecomposition of the covariance, components by descending
    eigenvalue.  Rank-deficient data retains only the available rank; fully
    degenerate data (zero variance) yields an empty, flagged pipeline."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need at least two feature samples")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (x.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.maximum(eigvals[order], 0.0)
    eigvecs = eigvecs[:, order]
    total = float(eigvals.sum())
    scale = float(np.mean(x * x))
    if total <= 1e-18 * max(scale, 1.0):
        return FeaturePipeline(mean, np.zeros((0, x.shape[1])), np.zeros(0), 0.0)
    rank = int((eigvals > eigvals[0] * 1e-12).sum())
    cum = np.cumsum(eigvals) / total
    needed = int(np.searchsorted(cum, variance_goal) + 1)
    dim = min(needed, max_components, rank)
    return FeaturePipeline(
        mean, eigvecs[:, :dim].T, eigvals[:dim], total
    )


# ---------------------------------------------------------------------------
# training data
# ---------------------------------------------------------------------------

def feature_patches(
    plane: ImagePlane, patch_size: int, stride: int
) -> tuple["np.ndarray", "np.ndarray", "np.ndarray"]:
    """Derivative-feature patch vectors on the plane's stride lattice.

    Returns (rows, cols, features) where features has one 4*patch_size**2
    vector per lattice position.
    """
    grid = extract_patches(plane, patch_size, stride)
    planes = derivative_features(plane)
    feats = np.hstack(
        [gather_patches(planes[c], grid.rows, grid.cols, patch_size) for c in range(4)]
    )
    return grid.rows, grid.cols, feats


def training_pairs_from_image(
    hr: ImagePlane, scale: int, patch_size: int = 9, stride: int = 3
) -> tuple[np.ndarray, np.ndarray]:
    """LR feature / HR residual pairs synthesized from one HR image.

    The HR image is mod-cropped, degraded, and bicubic-restored to give the
    base; features come from the base, targets are the mean-removed
    (hr - base) patches.
    """
    hr_c = mod_crop(hr, scale)
    lr = degrade(hr_c, scale)
    base = bicubic_resize(lr, out_size=hr_c.shape)
    rows, cols, feats = feature_patches(base, patch_size, stride)
    hr_patches = gather_patches(hr_c.data, rows, cols, patch_size)
    base_patches = gather_patches(base.data, rows, cols, patch_size)
    resid = hr_patches - base_patches
    resid -= resid.mean(axis=1, keepdims=True)
    return feats, resid


def build_training_groups(
    features: np.ndarray,
    targets: np.ndarray,
    m: int,
    overlap_fraction: float = 0.1,
) -> list[TrainingGroup]:
    """Sort pairs by descending HR-patch variance and split into m groups.

    Neighboring groups overlap by floor(overlap_fraction * N / m) samples;
    the last group absorbs the remainder so coverage is total.
    """
    feats = np.asarray(features, dtype=np.float64)
    targs = np.asarray(targets, dtype=np.float64)
    if feats.shape[0] != targs.shape[0]:
        raise ValueError("features and targets must be aligned")
    if m < 1:
        raise ValueError("m must be >= 1")
    if not 0.0 <= overlap_fraction < 1.0:
        raise ValueError("overlap_fraction must lie in [0, 1)")
    n = feats.shape[0]
    if n < m:
        raise ValueError(f"cannot build {m} groups from {n} samples")
    variances = targs.var(axis=1)
    order = np.argsort(-variances, kind="stable")
    feats = feats[order]
    targs = targs[order]
    if m == 1:
        return [TrainingGroup(feats, targs, 0)]
    overlap = int(overlap_fraction * n / m)
    size = (n + (m - 1) * overlap) // m
    step = size - overlap
    groups = []
    for i in range(m):
        start = i * step
        end = n if i == m - 1 else min(start + size, n)
        groups.append(TrainingGroup(feats[start:end], targs[start:end], i))
    return groups


# ---------------------------------------------------------------------------
# dictionary training
# ---------------------------------------------------------------------------

def _reconstruction_loss(targets: np.ndarray, codes: np.ndarray, decode: np.ndarray) -> float:
    resid = targets - codes @ decode.T
    return float(np.einsum("ij,ij->", resid, resid)) / targets.shape[0]


def _encode_raw(
    y: np.ndarray, theta: np.ndarray, w_e: np.ndarray, w_d: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    t = y @ w_e.T
    v = soft_threshold(t, theta)
    u = t + v @ w_d.T
    return t, u, soft_threshold(u, theta)


def _fit_decode(codes: np.ndarray, targets: np.ndarray, ridge: float = 1e-8) -> np.ndarray:
    k = codes.shape[1]
    gram = codes.T @ codes
    reg = ridge * (np.trace(gram) / k + 1.0)
    sol = np.linalg.solve(gram + reg * np.eye(k), codes.T @ targets)
    return sol.T


def _encoder_gradients(
    y: np.ndarray,
    targets: np.ndarray,
    decode: np.ndarray,
    theta: np.ndarray,
    w_e: np.ndarray,
    w_d: np.ndarray,
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Loss and gradients w.r.t. (theta, W_e, W_d) through the depth-1 encoder."""
    n = y.shape[0]
    t, u, z = _encode_raw(y, theta, w_e, w_d)
    resid = z @ decode.T - targets
    loss = float(np.einsum("ij,ij->", resid, resid)) / n
    g_z = (2.0 / n) * (resid @ decode)
    mask_u = (np.abs(u) > theta).astype(np.float64)
    g_u = g_z * mask_u
    g_theta = -(np.sign(u) * g_u).sum(axis=0)
    g_wd = g_u.T @ soft_threshold(t, theta)
    g_v = g_u @ w_d
    mask_t = (np.abs(t) > theta).astype(np.float64)
    g_t = g_v * mask_t
    g_theta += -(np.sign(t) * g_t).sum(axis=0)
    g_we = (g_u + g_t).T @ y
    return loss, g_theta, g_we, g_wd


def _init_encoder(
    features: np.ndarray, n_atoms: int, seed: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """K-means-seeded ISTA unrolling: W_e = c W^T, W_d = I - c W^T W."""
    rng = np.random.default_rng(seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # kmeans2 warns on empty clusters
        centroids, _ = kmeans2(features, n_atoms, minit="++", seed=seed, iter=20)
    w = centroids.T.astype(np.float64)  # (feature_dim, n_atoms)
    norms = np.linalg.norm(w, axis=0)
    for j in np.flatnonzero(~np.isfinite(norms) | (norms < 1e-12)):
        v = rng.standard_normal(w.shape[0])
        w[:, j] = v / np.linalg.norm(v)
    w /= np.linalg.norm(w, axis=0, keepdims=True)
    top = float(np.linalg.norm(w, 2)) ** 2
    c = 1.0 / top if top > 0 else 1.0
    w_e = c * w.T
    w_d = np.eye(n_atoms) - c * (w.T @ w)
    # Start sparse: threshold at the upper quartile of the pre-activations so
    # most coordinates of most samples are inactive; training lowers theta
    # where denser codes pay off.
    pre = np.abs(features @ w_e.T)
    theta0 = max(float(np.percentile(pre, 75)), THETA_FLOOR)
    theta = np.full(n_atoms, theta0)
    return theta, w_e, w_d


def train_dictionary_pair(
    group: TrainingGroup,
    n_atoms: int,
    epochs: int,
    *,
    grad_steps: int = 3,
    seed: int = 0,
    ridge: float = 1e-8,
) -> TrainResult:
    """Alternating coupled-dictionary training over one sample group.

    Per epoch: encode the group, refit the decode matrix by regularized least
    squares, then take line-searched gradient steps on the encoder parameters
    {theta, W_e, W_d}.  The recorded loss is non-increasing per epoch; dead
    atoms are re-seeded from the worst-reconstructed sample when doing so
    does not hurt the loss.
    """
    y = group.features
    x = group.targets
    n = len(group)
    if n_atoms > n:
        raise ValueError(f"n_atoms={n_atoms} exceeds the group size {n}")
    if epochs < 0 or grad_steps < 0:
        raise ValueError("epochs and grad_steps must be >= 0")

    theta, w_e, w_d = _init_encoder(y, n_atoms, seed)
    codes = _encode_raw(y, theta, w_e, w_d)[2]
    decode = _fit_decode(codes, x, ridge)
    loss = _reconstruction_loss(x, codes, decode)
    if not math.isfinite(loss):
        raise RuntimeError("non-finite loss at initialization")
    losses = [loss]

    eta = 1.0
    for _ in range(epochs):
        codes = _encode_raw(y, theta, w_e, w_d)[2]
        candidate = _fit_decode(codes, x, ridge)
        cand_loss = _reconstruction_loss(x, codes, candidate)
        if cand_loss <= loss * (1.0 + 1e-12) + 1e-15:
            decode = candidate
            loss = cand_loss

        for _ in range(grad_steps):
            base_loss, g_theta, g_we, g_wd = _encoder_gradients(
                y, x, decode, theta, w_e, w_d
            )
            step = min(eta * 4.0, 1e3)
            accepted = False
            for _ in range(50):
                theta_try = np.maximum(theta - step * g_theta, THETA_FLOOR)
                we_try = w_e - step * g_we
                wd_try = w_d - step * g_wd
                z_try = _encode_raw(y, theta_try, we_try, wd_try)[2]
                try_loss = _reconstruction_loss(x, z_try, decode)
                if try_loss <= base_loss * (1.0 + 1e-12) + 1e-15:
                    theta, w_e, w_d = theta_try, we_try, wd_try
                    loss = try_loss
                    eta = step
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                break

        theta, w_e, w_d, decode, loss = _reseed_dead_atoms(
            y, x, theta, w_e, w_d, decode, loss
        )
        if not math.isfinite(loss):
            raise RuntimeError("non-finite loss during dictionary training")
        losses.append(loss)

    dic = DictionaryPair(decode, theta, w_e, w_d)
    return TrainResult(dic, tuple(losses))


def _reseed_dead_atoms(
    y: np.ndarray,
    x: np.ndarray,
    theta: np.ndarray,
    w_e: np.ndarray,
    w_d: np.ndarray,
    decode: np.ndarray,
    loss: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, float]:
    codes = _encode_raw(y, theta, w_e, w_d)[2]
    used = (codes != 0).any(axis=0)
    dead = np.flatnonzero(~used)
    if dead.size == 0:
        return theta, w_e, w_d, decode, loss
    resid = x - codes @ decode.T
    worst = int(np.argmax(np.einsum("ij,ij->i", resid, resid)))
    y_w = y[worst]
    scale = float(y_w @ y_w)
    if scale < 1e-12:
        return theta, w_e, w_d, decode, loss
    for atom in dead:
        we_try = w_e.copy()
        dec_try = decode.copy()
        we_try[atom] = (2.0 * theta[atom] / scale) * y_w
        dec_try[:, atom] = resid[worst] / max(theta[atom], THETA_FLOOR)
        z_try = _encode_raw(y, theta, we_try, w_d)[2]
        try_loss = _reconstruction_loss(x, z_try, dec_try)
        if try_loss <= loss * (1.0 + 1e-12) + 1e-15:
            w_e, decode, loss = we_try, dec_try, try_loss
    return theta, w_e, w_d, decode, loss


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def external_sr(
    lr: ImagePlane,
    dic: DictionaryPair,
    pipeline: FeaturePipeline,
    target_scale: float,
    rotation: int = 0,
    *,
    patch_size: int = 9,
    stride: int = 2,
) -> ImagePlane:
    """Decode residual detail over the bicubic base under an input rotation."""
    work = rotate90(lr, rotation)
    out_size = (round(work.height * target_scale), round(work.width * target_scale))
    base = bicubic_resize(work, out_size=out_size)
    grid = extract_patches(base, patch_size, stride)
    planes = derivative_features(base)
    feats = np.hstack(
        [gather_patches(planes[c], grid.rows, grid.cols, patch_size) for c in range(4)]
    )
    projected = pipeline.project(feats)
    if projected.shape[1] != dic.feature_dim:
        raise ValueError("pipeline dimension does not match the dictionary encoder")
    codes = lista_encode(projected, dic)
    residual = codes @ dic.decode.T
    out_patches = grid.patches + residual
    result = aggregate_patches(grid, out_patches, out_size)
    result = ImagePlane(np.clip(result.data, 0.0, 1.0))
    return rotate90(result, (4 - rotation) % 4)


def generate_external_bank(
    lr: ImagePlane,
    dicts: list[DictionaryPair],
    pipeline: FeaturePipeline,
    target_scale: float,
    *,
    patch_size: int = 9,
    stride: int = 2,
) -> ImageBank:
    """m x 4 preliminary HR images, ordered by dictionary index then rotation."""
    if not dicts:
        raise ValueError("need at least one dictionary")
    images = []
    labels = []
    for index, dic in enumerate(dicts):
        for rotation in range(4):
            images.append(
                external_sr(
                    lr, dic, pipeline, target_scale, rotation,
                    patch_size=patch_size, stride=stride,
                )
            )
            labels.append(BankLabel("external", index, rotation))
    return ImageBank(tuple(images), tuple(labels))


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_pipeline(path: str | Path, pipeline: FeaturePipeline) -> None:
    np.savez(
        path,
        format_version=np.int64(FORMAT_VERSION),
        kind="feature_pipeline",
        mean=pipeline.mean,
        components=pipeline.components,
        explained=pipeline.explained,
        total_variance=np.float64(pipeline.total_variance),
    )


def load_pipeline(path: str | Path) -> FeaturePipeline:
    with np.load(path) as blob:
        if int(blob["format_version"]) != FORMAT_VERSION:
            raise ValueError("unsupported pipeline container version")
        return FeaturePipeline(
            blob["mean"],
            blob["components"],
            blob["explained"],
            float(blob["total_variance"]),
        )


def save_dictionary(path: str | Path, dic: DictionaryPair) -> None:
    np.savez(
        path,
        format_version=np.int64(FORMAT_VERSION),
        kind="dictionary_pair",
        decode=dic.decode,
        thresholds=dic.thresholds,
        encode=dic.encode,
        lateral=dic.lateral,
    )


def load_dictionary(path: str | Path) -> DictionaryPair:
    with np.load(path) as blob:
        if int(blob["format_version"]) != FORMAT_VERSION:
            raise ValueError("unsupported dictionary container version")
        return DictionaryPair(
            blob["decode"], blob["thresholds"], blob["encode"], blob["lateral"]
        )
