"""Image planes, color handling, resampling, degradation and patch machinery.

Everything downstream (self-similarity SR, dictionary SR, fusion, metrics)
moves data through the small set of containers defined here.  Samples live
in [0, 1] as float64; quantities quoted in "gray levels" refer to the 0-255
scale used by thresholds and metrics.  All containers are immutable after
construction and safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import correlate1d, gaussian_filter1d

__all__ = [
    "ImagePlane",
    "ColorImage",
    "PatchGrid",
    "rgb_to_ycbcr",
    "rgb_to_luma",
    "ycbcr_to_rgb",
    "bicubic_resize",
    "resize_color",
    "mod_crop",
    "degrade",
    "add_gaussian_noise",
    "gaussian_blur",
    "high_pass_decompose",
    "rotate90",
    "extract_patches",
    "gather_patches",
    "aggregate_patches",
    "derivative_features",
    "load_color",
    "load_gray",
    "save_png",
    "to_uint8",
]

# ITU-R BT.601 luma weights (full-range YCbCr).
BT601_RED = 0.299
BT601_GREEN = 0.587
BT601_BLUE = 0.114

# Default blur width for the band split, matched to the default 1.25 zoom
# step of the self-similarity path (which passes its own per-step value).
DEFAULT_HIGHPASS_SIGMA = 0.5


def _readonly(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ImagePlane:
    """Single-channel raster held as a read-only float64 (height, width) grid."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"expected a 2-D sample grid, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("image dimensions must be positive")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image samples must be finite")
        object.__setattr__(self, "data", _readonly(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class ColorImage:
    """RGB raster, read-only float64 with shape (height, width, 3)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) samples, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("image dimensions must be positive")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image samples must be finite")
        object.__setattr__(self, "data", _readonly(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class PatchGrid:
    """Square patches gathered on a stride lattice with edge-snapped borders.

    `rows` and `cols` are the unique top/left coordinates; patches are stored
    row-major over the (rows x cols) product, one flattened patch per row of
    `patches` (length patch_size**2).
    """

    patch_size: int
    stride: int
    rows: np.ndarray
    cols: np.ndarray
    patches: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64)
        cols = np.asarray(self.cols, dtype=np.int64)
        patches = np.asarray(self.patches, dtype=np.float64)
        if self.patch_size < 1 or self.stride < 1:
            raise ValueError("patch_size and stride must be >= 1")
        if patches.ndim != 2 or patches.shape[1] != self.patch_size**2:
            raise ValueError("patch vectors must have length patch_size**2")
        if patches.shape[0] != rows.size * cols.size:
            raise ValueError("patch count must equal rows x cols")
        for name, idx in (("rows", rows), ("cols", cols)):
            if idx.size == 0 or np.any(idx < 0) or np.any(np.diff(idx) <= 0):
                raise ValueError(f"{name} must be strictly increasing and non-negative")
        object.__setattr__(self, "rows", _readonly_int(rows))
        object.__setattr__(self, "cols", _readonly_int(cols))
        object.__setattr__(self, "patches", _readonly(patches))

    def __len__(self) -> int:
        return self.patches.shape[0]

    @property
    def coords(self) -> np.ndarray:
        """(N, 2) array of (top, left) coordinates in patch order."""
        r = np.repeat(self.rows, self.cols.size)
        c = np.tile(self.cols, self.rows.size)
        return np.stack([r, c], axis=1)


def _readonly_int(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.int64, copy=True)
    out.setflags(write=False)
    return out


# ---------------------------------------------------------------------------
# color space
# ---------------------------------------------------------------------------

def rgb_to_ycbcr(img: ColorImage) -> tuple[ImagePlane, ImagePlane, ImagePlane]:
    """Split an RGB image into full-range BT.601 Y, Cb, Cr planes."""
    r = img.data[..., 0]
    g = img.data[..., 1]
    b = img.data[..., 2]
    y = BT601_RED * r + BT601_GREEN * g + BT601_BLUE * b
    cb = 0.5 + (b - y) * (0.5 / (1.0 - BT601_BLUE))
    cr = 0.5 + (r - y) * (0.5 / (1.0 - BT601_RED))
    return ImagePlane(y), ImagePlane(cb), ImagePlane(cr)


def rgb_to_luma(img: ColorImage) -> ImagePlane:
    """BT.601 luma plane of an RGB image."""
    return rgb_to_ycbcr(img)[0]


def ycbcr_to_rgb(y: ImagePlane, cb: ImagePlane, cr: ImagePlane) -> ColorImage:
    """Recombine Y with chroma planes; output channels are clamped to [0, 1]."""
    if y.shape != cb.shape or y.shape != cr.shape:
        raise ValueError("Y/Cb/Cr planes must share dimensions")
    yd = y.data
    r = yd + (cr.data - 0.5) * (2.0 * (1.0 - BT601_RED))
    b = yd + (cb.data - 0.5) * (2.0 * (1.0 - BT601_BLUE))
    g = (yd - BT601_RED * r - BT601_BLUE * b) / BT601_GREEN
    rgb = np.stack([r, g, b], axis=-1)
    return ColorImage(np.clip(rgb, 0.0, 1.0))


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def _cubic_kernel(x: np.ndarray) -> np.ndarray:
    """Catmull-Rom cubic convolution kernel (a = -0.5), support (-2, 2)."""
    ax = np.abs(x)
    out = np.zeros_like(ax)
    near = ax <= 1.0
    far = (ax > 1.0) & (ax < 2.0)
    an = ax[near]
    af = ax[far]
    out[near] = (1.5 * an - 2.5) * an * an + 1.0
    out[far] = ((-0.5 * af + 2.5) * af - 4.0) * af + 2.0
    return out


def _resample_axis(data: np.ndarray, out_len: int, axis: int) -> np.ndarray:
    in_len = data.shape[axis]
    ratio = in_len / out_len
    x = (np.arange(out_len) + 0.5) * ratio - 0.5
    base = np.floor(x).astype(np.int64)
    moved = np.moveaxis(data, axis, 0)
    acc = np.zeros((out_len,) + moved.shape[1:])
    for off in (-1, 0, 1, 2):
        taps = base + off
        w = _cubic_kernel(x - taps)
        np.clip(taps, 0, in_len - 1, out=taps)
        acc += moved[taps] * w.reshape((-1,) + (1,) * (moved.ndim - 1))
    return np.moveaxis(acc, 0, axis)


def _output_size(
    shape: tuple[int, int],
    scale: float | None,
    out_size: tuple[int, int] | None,
) -> tuple[int, int]:
    if out_size is not None:
        oh, ow = int(out_size[0]), int(out_size[1])
    else:
        if scale is None or scale <= 0:
            raise ValueError("scale must be positive (or pass out_size)")
        oh = round(shape[0] * scale)
        ow = round(shape[1] * scale)
    if oh < 1 or ow < 1:
        raise ValueError(f"degenerate output size {oh}x{ow}")
    return oh, ow


def bicubic_resize(
    img: ImagePlane,
    scale: float | None = None,
    *,
    out_size: tuple[int, int] | None = None,
) -> ImagePlane:
    """Separable Catmull-Rom resampling with edge clamp; output in [0, 1].

    Output dimensions are round(input * scale), or `out_size` (height, width)
    when given explicitly.
    """
    oh, ow = _output_size(img.shape, scale, out_size)
    out = _resample_axis(img.data, oh, axis=0)
    out = _resample_axis(out, ow, axis=1)
    return ImagePlane(np.clip(out, 0.0, 1.0))


def resize_color(
    img: ColorImage,
    scale: float | None = None,
    *,
    out_size: tuple[int, int] | None = None,
) -> ColorImage:
    """Channel-wise bicubic resize of an RGB image."""
    oh, ow = _output_size(img.data.shape[:2], scale, out_size)
    out = _resample_axis(img.data, oh, axis=0)
    out = _resample_axis(out, ow, axis=1)
    return ColorImage(np.clip(out, 0.0, 1.0))


def mod_crop(img: ImagePlane, scale: int) -> ImagePlane:
    """Crop bottom/right so both dimensions are multiples of `scale`."""
    if scale < 1:
        raise ValueError("scale must be >= 1")
    h = img.height - img.height % scale
    w = img.width - img.width % scale
    if h < 1 or w < 1:
        raise ValueError("image too small for mod_crop")
    return ImagePlane(img.data[:h, :w])


def mod_crop_color(img: ColorImage, scale: int) -> ColorImage:
    if scale < 1:
        raise ValueError("scale must be >= 1")
    h = img.height - img.height % scale
    w = img.width - img.width % scale
    if h < 1 or w < 1:
        raise ValueError("image too small for mod_crop")
    return ColorImage(img.data[:h, :w])


def degrade(hr: ImagePlane, scale: int) -> ImagePlane:
    """Benchmark LR synthesis: mod-crop then bicubic downsample by 1/scale."""
    if int(scale) != scale or scale < 2:
        raise ValueError("degrade requires an integer scale >= 2")
    scale = int(scale)
    cropped = mod_crop(hr, scale)
    return bicubic_resize(
        cropped, out_size=(cropped.height // scale, cropped.width // scale)
    )


def degrade_color(hr: ColorImage, scale: int) -> ColorImage:
    if int(scale) != scale or scale < 2:
        raise ValueError("degrade requires an integer scale >= 2")
    scale = int(scale)
    cropped = mod_crop_color(hr, scale)
    return resize_color(
        cropped, out_size=(cropped.height // scale, cropped.width // scale)
    )


def add_gaussian_noise(img: ImagePlane, sigma: float, seed: int) -> ImagePlane:
    """Add i.i.d. zero-mean Gaussian noise of std `sigma` gray levels (0-255).

    Deterministic for a fixed seed; sigma = 0 returns the input unchanged.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return img
    rng = np.random.default_rng(seed)
    noisy = img.data + rng.standard_normal(img.shape) * (sigma / 255.0)
    return ImagePlane(np.clip(noisy, 0.0, 1.0))


# ---------------------------------------------------------------------------
# band split / rotation
# ---------------------------------------------------------------------------

def gaussian_blur(img: ImagePlane, sigma: float) -> ImagePlane:
    """Separable Gaussian blur, replicate padding, kernel radius ceil(3*sigma)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    radius = int(np.ceil(3.0 * sigma))
    low = gaussian_filter1d(img.data, sigma, axis=0, mode="nearest", radius=radius)
    low = gaussian_filter1d(low, sigma, axis=1, mode="nearest", radius=radius)
    return ImagePlane(low)


def high_pass_decompose(
    img: ImagePlane, sigma: float = DEFAULT_HIGHPASS_SIGMA
) -> tuple[ImagePlane, ImagePlane]:
    """Split into (low, high) bands with low = Gaussian blur and high = img - low.

    The split is exactly additive: low.data + high.data == img.data.
    """
    low = gaussian_blur(img, sigma)
    high = img.data - low.data
    return low, ImagePlane(high)


def rotate90(img: ImagePlane, quarter_turns: int) -> ImagePlane:
    """Lossless counter-clockwise rotation by `quarter_turns` * 90 degrees."""
    k = quarter_turns % 4
    if k == 0:
        return img
    return ImagePlane(np.rot90(img.data, k))


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------

def _lattice(extent: int, patch: int, stride: int) -> np.ndarray:
    last = extent - patch
    pos = np.arange(0, last + 1, stride, dtype=np.int64)
    if pos[-1] != last:
        pos = np.append(pos, last)
    return pos


def gather_patches(
    data: np.ndarray, rows: np.ndarray, cols: np.ndarray, patch_size: int
) -> np.ndarray:
    """Gather flattened patch vectors at every (row, col) of the row/col product."""
    windows = np.lib.stride_tricks.sliding_window_view(data, (patch_size, patch_size))
    block = windows[np.ix_(rows, cols)]
    return block.reshape(rows.size * cols.size, patch_size * patch_size)


def extract_patches(img: ImagePlane, patch_size: int, stride: int) -> PatchGrid:
    """All patches on the stride lattice plus edge-snapped bottom/right lines."""
    if patch_size > min(img.height, img.width):
        raise ValueError("patch_size exceeds image dimensions")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    rows = _lattice(img.height, patch_size, stride)
    cols = _lattice(img.width, patch_size, stride)
    patches = gather_patches(img.data, rows, cols, patch_size)
    return PatchGrid(patch_size, stride, rows, cols, patches)


def aggregate_patches(
    grid: PatchGrid, values: np.ndarray, out_dims: tuple[int, int]
) -> ImagePlane:
    """Reassemble per-patch vectors into an image by per-pixel averaging.

    Pixels where all contributions agree are reproduced exactly; a pixel not
    covered by any patch is an error.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape != grid.patches.shape:
        raise ValueError("values must align with the grid, one vector per patch")
    oh, ow = int(out_dims[0]), int(out_dims[1])
    p = grid.patch_size
    if grid.rows[-1] + p > oh or grid.cols[-1] + p > ow:
        raise ValueError("grid does not fit inside the requested output dims")
    blocks = values.reshape(grid.rows.size, grid.cols.size, p, p)
    acc = np.zeros((oh, ow))
    cnt = np.zeros((oh, ow))
    vmin = np.full((oh, ow), np.inf)
    vmax = np.full((oh, ow), -np.inf)
    for dy in range(p):
        r = grid.rows + dy
        for dx in range(p):
            c = grid.cols + dx
            ix = np.ix_(r, c)
            block = blocks[:, :, dy, dx]
            acc[ix] += block
            cnt[ix] += 1.0
            vmin[ix] = np.minimum(vmin[ix], block)
            vmax[ix] = np.maximum(vmax[ix], block)
    if np.any(cnt == 0):
        raise ValueError("aggregation leaves uncovered pixels")
    out = acc / cnt
    agree = vmin == vmax
    out[agree] = vmin[agree]
    return ImagePlane(out)


# ---------------------------------------------------------------------------
# feature filters
# ---------------------------------------------------------------------------

_D1 = np.array([-1.0, 0.0, 1.0])
_D2 = np.array([1.0, 0.0, -2.0, 0.0, 1.0])


def derivative_features(img: ImagePlane) -> np.ndarray:
    """First/second derivative planes along x and y, replicate-padded.

    Returns a (4, H, W) array ordered (dx, dy, dxx, dyy); a feature patch is
    the concatenation over channels, length 4 * patch_size**2.
    """
    data = img.data
    gx = correlate1d(data, _D1, axis=1, mode="nearest")
    gy = correlate1d(data, _D1, axis=0, mode="nearest")
    gxx = correlate1d(data, _D2, axis=1, mode="nearest")
    gyy = correlate1d(data, _D2, axis=0, mode="nearest")
    return np.stack([gx, gy, gxx, gyy])


# ---------------------------------------------------------------------------
# PNG I/O
# ---------------------------------------------------------------------------

def to_uint8(data: np.ndarray) -> np.ndarray:
    """Quantize [0, 1] samples to 8-bit by round(v * 255) with clamping."""
    return np.floor(np.clip(data, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def load_color(path: str | Path) -> ColorImage:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return ColorImage(arr)


def load_gray(path: str | Path) -> ImagePlane:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return ImagePlane(arr)


def save_png(path: str | Path, img: ImagePlane | ColorImage) -> None:
    """Write an 8-bit grayscale or RGB PNG."""
    Image.fromarray(to_uint8(img.data)).save(path, format="PNG")
