"""Synthetic reference-based SR scenes with a controllable change mask.

A scene is a procedural "aerial" texture (value-noise octaves plus blocky
buildings and roads).  The reference image equals the HR scene up to a
per-channel affine photometric jitter wherever the change mask is 0, and
shows an independently generated scene wherever it is 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import bicubic_resize
from .tensor import SeededRng

DEFAULT_JITTER = (0.1, 0.05)  # gain in [1 - 0.1, 1 + 0.1], offset in [-0.05, 0.05]


@dataclass
class SyntheticScene:
    hr: np.ndarray
    ref: np.ndarray
    mask: np.ndarray  # (H, W) bool, True where the land cover changed
    change_fraction: float
    jitter: tuple[float, float]
    gain: np.ndarray
    offset: np.ndarray
    seed: int


def value_noise(rng: SeededRng, size: int, cells: int, channels: int = 3) -> np.ndarray:
    """Random lattice of ``cells x cells`` values, bicubically upsampled to ``size``."""
    lattice = rng.uniform(0.0, 1.0, (cells, cells, channels))
    return bicubic_resize(lattice, size, size)


def texture(rng: SeededRng, size: int) -> np.ndarray:
    """Multi-octave colour noise with rectangles (buildings) and lines (roads)."""
    base_colour = rng.uniform(0.25, 0.75, 3)
    img = np.broadcast_to(base_colour, (size, size, 3)).copy()
    amp = 0.35
    cells = 2
    while cells <= size // 2:
        img += amp * (value_noise(rng, size, cells) - 0.5)
        amp *= 0.6
        cells *= 2
    yy, xx = np.mgrid[:size, :size]
    for _ in range(int(rng.integers(2, 6))):
        h, w = (int(v) for v in rng.integers(max(2, size // 10), max(3, size // 3), 2))
        y0, x0 = (int(v) for v in rng.integers(0, size - 1, 2))
        img[y0:y0 + h, x0:x0 + w] = rng.uniform(0.05, 0.95, 3)
    for _ in range(int(rng.integers(1, 3))):
        colour = rng.uniform(0.3, 0.6, 3)
        width = float(rng.uniform(0.6, 1.6))
        theta = float(rng.uniform(0.0, np.pi))
        c0 = rng.uniform(0, size, 2)
        dist = np.abs((xx - c0[0]) * np.sin(theta) - (yy - c0[1]) * np.cos(theta))
        img[dist < width] = colour
    return np.clip(img, 0.0, 1.0)


def change_mask(rng: SeededRng, size: int, fraction: float) -> np.ndarray:
    """Blobby mask covering ``round(fraction * size**2)`` pixels.

    A smooth random field is thresholded at the matching rank, so the
    covered area is exact and the shapes are connected blobs.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"change_fraction must lie in [0, 1], got {fraction}")
    count = int(round(fraction * size * size))
    field = value_noise(rng, size, max(2, size // 8), 1)[..., 0]
    field = field + 1e-9 * rng.uniform(0.0, 1.0, field.shape)  # break ties
    mask = np.zeros(size * size, dtype=bool)
    if count:
        mask[np.argsort(-field, axis=None, kind="stable")[:count]] = True
    return mask.reshape(size, size)


def generate_scene(seed: int, size: int = 32, change_fraction: float = 0.25,
                   jitter: tuple[float, float] = DEFAULT_JITTER) -> SyntheticScene:
    if not 0.0 <= change_fraction <= 1.0:
        raise ValueError(f"change_fraction must lie in [0, 1], got {change_fraction}")
    rng = SeededRng(seed)
    hr = texture(rng, size)
    other = texture(rng.spawn(1), size)
    mask = change_mask(rng.spawn(2), size, change_fraction)
    jr = rng.spawn(3)
    gain = 1.0 + jr.uniform(-jitter[0], jitter[0], 3) if jitter[0] else np.ones(3)
    offset = jr.uniform(-jitter[1], jitter[1], 3) if jitter[1] else np.zeros(3)
    source = np.where(mask[..., None], other, hr)
    ref = source if (jitter[0] == 0 and jitter[1] == 0) else np.clip(source * gain + offset, 0.0, 1.0)
    return SyntheticScene(hr, ref.copy(), mask, change_fraction, tuple(jitter), gain, offset, seed)


def make_pair(scene: SyntheticScene, scale: int):
    """(lr_up, ref, hr): bicubic down by ``scale`` then back up to HR size."""
    h, w = scene.hr.shape[:2]
    if scale < 1 or h % scale or w % scale:
        raise ValueError(f"scale {scale} must divide image size {h}x{w}")
    lr = bicubic_resize(scene.hr, h // scale, w // scale)
    lr_up = bicubic_resize(lr, h, w)
    return lr_up, scene.ref, scene.hr


@dataclass
class Dataset:
    """Stacked arrays for a list of scenes; images in [0, 1]."""

    hr: np.ndarray
    lr_up: np.ndarray
    ref: np.ndarray
    mask: np.ndarray
    seeds: list[int]
    scale: int

    def __len__(self) -> int:
        return len(self.seeds)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.hr[idx], self.lr_up[idx], self.ref[idx], self.mask[idx],
                       [self.seeds[i] for i in idx], self.scale)


def build_dataset(count: int, seed: int, size: int = 32, scale: int = 8,
                  fraction_range: tuple[float, float] = (0.0, 0.5),
                  jitter: tuple[float, float] = DEFAULT_JITTER) -> Dataset:
    rng = SeededRng(seed)
    seeds = [int(s) for s in rng.integers(0, 2**62, count)]
    fractions = rng.uniform(fraction_range[0], fraction_range[1], count)
    hr, lr_up, ref, mask = [], [], [], []
    for s, f in zip(seeds, fractions):
        scene = generate_scene(s, size, float(f), jitter)
        up, r, h = make_pair(scene, scale)
        hr.append(h)
        lr_up.append(up)
        ref.append(r)
        mask.append(scene.mask)
    return Dataset(np.stack(hr), np.stack(lr_up), np.stack(ref), np.stack(mask), seeds, scale)
