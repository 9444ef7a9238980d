"""Raster images: bicubic resampling, patch tokenisation, PSNR/SSIM, PNG I/O.

Images are ``(H, W, 3)`` float64 arrays in ``[0, 1]``; batched helpers accept a
leading batch axis.  Quantisation to 8 bits happens only at the PNG boundary.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .tensor import DimensionError, Tensor, permute, reshape

PSNR_IDENTICAL = math.inf  # returned by psnr() when the inputs are equal

KEYS_A = -0.5


def cubic_kernel(x: np.ndarray, a: float = KEYS_A) -> np.ndarray:
    """Keys cubic-convolution kernel; a=-0.5 gives Catmull-Rom."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0
    far = a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a
    return np.where(x < 1.0, near, np.where(x < 2.0, far, 0.0))


def _reflect(idx: np.ndarray, n: int) -> np.ndarray:
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) matrix of bicubic weights with half-pixel-centre alignment.

    No anti-alias widening: downsampling samples the kernel at the output
    positions only, and borders reflect (``..., 2, 1, 0, 1, 2, ...``).
    """
    if n_in < 1 or n_out < 1:
        raise DimensionError(f"resample sizes must be >= 1, got {n_in} -> {n_out}")
    centre = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(centre).astype(np.int64)
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for off in (-1, 0, 1, 2):
        taps = base + off
        w = cubic_kernel(centre - taps)
        np.add.at(mat, (rows, _reflect(taps, n_in)), w)
    return mat


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize ``(..., H, W, C)`` images with separable cubic convolution."""
    img = np.asarray(img, dtype=np.float64)
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"output size must be >= 1, got {out_h}x{out_w}")
    h, w = img.shape[-3], img.shape[-2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    my = resample_matrix(h, out_h)
    mx = resample_matrix(w, out_w)
    return np.einsum("ih,...hwc,jw->...ijc", my, img, mx, optimize=True)


# ---------------------------------------------------------------------------
# patches


@dataclass(frozen=True)
class PatchGrid:
    patch: int
    rows: int
    cols: int
    channels: int = 3

    @property
    def tokens(self) -> int:
        return self.rows * self.cols

    @property
    def token_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @classmethod
    def for_image(cls, height: int, width: int, patch: int, channels: int = 3) -> "PatchGrid":
        if patch < 1 or height % patch or width % patch:
            raise DimensionError(f"patch {patch} does not divide {height}x{width}")
        return cls(patch, height // patch, width // patch, channels)


def patchify(img: np.ndarray, p: int) -> np.ndarray:
    """``(..., H, W, C)`` -> ``(..., N, p*p*C)`` in row-major grid order."""
    img = np.asarray(img, dtype=np.float64)
    *lead, h, w, c = img.shape
    grid = PatchGrid.for_image(h, w, p, c)
    x = img.reshape(*lead, grid.rows, p, grid.cols, p, c)
    k = len(lead)
    x = np.moveaxis(x, k + 2, k + 1)  # (..., rows, cols, p, p, c)
    return np.ascontiguousarray(x.reshape(*lead, grid.tokens, grid.token_dim))


def unpatchify(tokens: np.ndarray, grid: PatchGrid) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.float64)
    *lead, n, d = tokens.shape
    if n != grid.tokens or d != grid.token_dim:
        raise DimensionError(f"tokens {tokens.shape} do not match grid {grid}")
    p, k = grid.patch, len(lead)
    x = tokens.reshape(*lead, grid.rows, grid.cols, p, p, grid.channels)
    x = np.moveaxis(x, k + 1, k + 2)
    return np.ascontiguousarray(x.reshape(*lead, grid.rows * p, grid.cols * p, grid.channels))


def unpatchify_tensor(tokens: Tensor, grid: PatchGrid) -> Tensor:
    """Differentiable ``(B, N, p*p*C)`` -> ``(B, H, W, C)``."""
    b = tokens.shape[0]
    p = grid.patch
    x = reshape(tokens, (b, grid.rows, grid.cols, p, p, grid.channels))
    x = permute(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (b, grid.rows * p, grid.cols * p, grid.channels))


# ---------------------------------------------------------------------------
# metrics


def _same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def mse(a, b, mask=None) -> float:
    a, b = _same_shape(a, b)
    d = (a - b) ** 2
    if mask is None:
        return float(d.mean())
    m = np.asarray(mask, dtype=bool)
    if m.shape == d.shape[:-1]:
        m = np.broadcast_to(m[..., None], d.shape)
    return float(d[m].mean()) if m.any() else float("nan")


def psnr_from_mse(err: float) -> float:
    if err == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(1.0 / err)


def psnr(a, b, mask=None) -> float:
    """PSNR in dB for images on a [0, 1] range; equal inputs give ``inf``."""
    return psnr_from_mse(mse(a, b, mask))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable 'valid' correlation over the first two axes
    k = g.size
    h, w = img.shape[:2]
    rows = sum(g[i] * img[i:h - k + 1 + i] for i in range(k))
    return sum(g[j] * rows[:, j:w - k + 1 + j] for j in range(k))


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Single-scale SSIM with a Gaussian window, averaged over valid positions and channels."""
    a, b = _same_shape(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[0], a.shape[1]) < window:
        raise DimensionError(f"image {a.shape[:2]} smaller than the {window}x{window} window")
    c1, c2 = (k1 * 1.0) ** 2, (k2 * 1.0) ** 2
    g = gaussian_window(window, sigma)
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a * mu_a
    sbb = _filter_valid(b * b, g) - mu_b * mu_b
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    smap = ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2))
    return float(smap.mean(axis=(0, 1)).mean())


# ---------------------------------------------------------------------------
# PNG


def quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DimensionError(f"expected (H, W, 3) image, got {arr.shape}")
    Image.fromarray(quantize(arr), mode="RGB").save(path, format="PNG")


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        im.load()
        if im.mode != "RGB":
            im = im.convert("RGB")
        return np.asarray(im, dtype=np.float64) / 255.0


def pixel_digest(img: np.ndarray) -> str:
    """sha256 over the quantised RGB8 payload (encoder-independent)."""
    q = quantize(img)
    head = f"{q.shape[0]}x{q.shape[1]}x{q.shape[2]}:".encode()
    return hashlib.sha256(head + q.tobytes()).hexdigest()


def checkerboard(size: int = 16, square: int = 4) -> np.ndarray:
    yy, xx = np.mgrid[:size, :size]
    cell = ((yy // square + xx // square) % 2).astype(np.float64)
    return np.repeat(cell[..., None], 3, axis=2)


def contact_sheet(rows: list[list[np.ndarray]], pad: int = 2) -> np.ndarray:
    """Tile equally-sized images into one grid image with white gutters."""
    h, w, c = rows[0][0].shape
    ncols = max(len(r) for r in rows)
    sheet = np.ones((len(rows) * (h + pad) + pad, ncols * (w + pad) + pad, c))
    for i, row in enumerate(rows):
        for j, im in enumerate(row):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            sheet[y:y + h, x:x + w] = np.clip(im, 0.0, 1.0)
    return sheet
