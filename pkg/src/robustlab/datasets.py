"""Bundled synthetic datasets and on-disk loaders.

Two generators cover the desk-scale experiments without external downloads:

* ``denoising_images`` renders piecewise-smooth scenes (gradient backgrounds
  plus gradient-filled shapes) for training and evaluating denoisers.
* ``shape_classification_dataset`` renders a 10-class glyph dataset
  (disk, ring, square, diamond, triangle, plus, cross, stripes, checker)
  with randomized pose and contrast, playing the role of a small
  MNIST-style benchmark.

External image sets can be dropped in as 8-bit PNGs under
``<root>/<split>/<name>.png``; loaders convert to floats in [0, 1].
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from PIL import Image

NUM_SHAPE_CLASSES = 10

SHAPE_CLASS_NAMES = (
    "disk",
    "ring",
    "square",
    "diamond",
    "triangle",
    "plus",
    "cross",
    "hstripes",
    "vstripes",
    "checker",
)


def _grid(size: int, center, scale: float, angle: float):
    """Rotated, shifted, scaled coordinates in roughly [-1, 1]."""
    lin = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    yy, xx = np.meshgrid(lin, lin, indexing="ij")
    xx = (xx - center[0]) / scale
    yy = (yy - center[1]) / scale
    c, s = math.cos(angle), math.sin(angle)
    return c * xx + s * yy, -s * xx + c * yy


def _aa(inside_value: np.ndarray, edge: float = 0.08) -> np.ndarray:
    """Map a signed inside-function to an anti-aliased [0, 1] mask."""
    return np.clip(inside_value / edge + 0.5, 0.0, 1.0)


def _bar(x, y, half_width, half_length):
    return np.minimum(half_width - np.abs(x), half_length - np.abs(y))


def _glyph_mask(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    center = rng.uniform(-0.18, 0.18, size=2)
    scale = rng.uniform(0.75, 1.0)
    angle = rng.uniform(-0.2, 0.2)
    x, y = _grid(size, center, scale, angle)
    r = np.sqrt(x**2 + y**2)

    if label == 0:  # disk
        return _aa(0.52 - r)
    if label == 1:  # ring
        return _aa(0.16 - np.abs(r - 0.45))
    if label == 2:  # filled square
        return _aa(0.45 - np.maximum(np.abs(x), np.abs(y)))
    if label == 3:  # diamond
        return _aa(0.58 - (np.abs(x) + np.abs(y)))
    if label == 4:  # triangle, apex up
        rr = 0.62
        e_bottom = rr - y
        e_left = (2 * x + y + rr) / math.sqrt(5)
        e_right = (-2 * x + y + rr) / math.sqrt(5)
        return _aa(np.minimum(e_bottom, np.minimum(e_left, e_right)))
    if label == 5:  # plus
        return _aa(np.maximum(_bar(x, y, 0.16, 0.55), _bar(y, x, 0.16, 0.55)))
    if label == 6:  # diagonal cross
        u = (x + y) / math.sqrt(2)
        v = (x - y) / math.sqrt(2)
        return _aa(np.maximum(_bar(u, v, 0.16, 0.62), _bar(v, u, 0.16, 0.62)))
    if label == 7:  # horizontal stripes in a square window
        window = np.minimum(0.62 - np.abs(x), 0.62 - np.abs(y))
        bands = np.cos(y * math.pi * 3.5) * 0.25
        return _aa(np.minimum(window, bands))
    if label == 8:  # vertical stripes
        window = np.minimum(0.62 - np.abs(x), 0.62 - np.abs(y))
        bands = np.cos(x * math.pi * 3.5) * 0.25
        return _aa(np.minimum(window, bands))
    if label == 9:  # checkerboard
        window = np.minimum(0.62 - np.abs(x), 0.62 - np.abs(y))
        checks = np.cos(x * math.pi * 2.2) * np.cos(y * math.pi * 2.2) * 0.3
        return _aa(np.minimum(window, checks))
    raise ValueError(f"label must be in [0, {NUM_SHAPE_CLASSES}), got {label}")


def _background(size: int, rng: np.random.Generator, base: float, amplitude: float) -> np.ndarray:
    lin = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    yy, xx = np.meshgrid(lin, lin, indexing="ij")
    theta = rng.uniform(0.0, 2.0 * math.pi)
    ramp = math.cos(theta) * xx + math.sin(theta) * yy
    return base + amplitude * ramp


def shape_classification_dataset(
    count: int, size: int = 28, channels: int = 1, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Render a balanced labeled glyph dataset.

    Returns (images [count, channels, size, size] in [0, 1], labels [count]).
    Labels cycle through the 10 classes so any prefix stays balanced.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(101,)))
    images = np.zeros((count, channels, size, size), dtype=np.float64)
    labels = np.arange(count, dtype=np.int64) % NUM_SHAPE_CLASSES
    for i in range(count):
        mask = _glyph_mask(int(labels[i]), size, rng)
        bg = _background(size, rng, base=rng.uniform(0.15, 0.4), amplitude=rng.uniform(0.0, 0.12))
        fg = rng.uniform(0.75, 0.95)
        img = bg + (fg - bg) * mask
        img = np.clip(img, 0.0, 1.0)
        for ch in range(channels):
            tint = 1.0 if channels == 1 else rng.uniform(0.85, 1.0)
            images[i, ch] = np.clip(img * tint, 0.0, 1.0)
    return images, labels


def _grating(size: int, rng: np.random.Generator) -> np.ndarray:
    """Oriented sinusoidal texture patch."""
    lin = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    yy, xx = np.meshgrid(lin, lin, indexing="ij")
    theta = rng.uniform(0.0, math.pi)
    freq = rng.uniform(3.0, 9.0)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    wave = math.cos(theta) * xx + math.sin(theta) * yy
    return np.sin(math.pi * freq * wave + phase)


def denoising_images(count: int, size: int = 64, channels: int = 1, seed: int = 0) -> np.ndarray:
    """Render piecewise-smooth textured images for denoiser training/evaluation.

    Each image is a gradient background with 2-4 gradient-filled shapes
    (disk, square, diamond, triangle) plus 1-2 oriented sinusoidal texture
    patches, giving sharp edges, smooth regions, and fine detail to
    reconstruct.  Returns [count, channels, size, size] in [0, 1].
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(102,)))
    images = np.zeros((count, channels, size, size), dtype=np.float64)
    shape_pool = (0, 2, 3, 4)
    for i in range(count):
        img = _background(size, rng, base=rng.uniform(0.25, 0.75), amplitude=rng.uniform(0.05, 0.25))
        for _ in range(int(rng.integers(2, 5))):
            label = int(rng.choice(shape_pool))
            mask = _glyph_mask(label, size, rng)
            fill = _background(size, rng, base=rng.uniform(0.1, 0.9), amplitude=rng.uniform(0.0, 0.3))
            img = img * (1.0 - mask) + fill * mask
        for _ in range(int(rng.integers(1, 3))):
            window = _glyph_mask(int(rng.choice((0, 2))), size, rng)
            amplitude = rng.uniform(0.08, 0.22)
            img = img + window * amplitude * _grating(size, rng)
        img = np.clip(img, 0.0, 1.0)
        for ch in range(channels):
            shade = 1.0 if channels == 1 else rng.uniform(0.8, 1.0)
            images[i, ch] = np.clip(img * shade, 0.0, 1.0)
    return images


def save_png_dataset(root, split: str, images: np.ndarray, names=None) -> list[Path]:
    """Write [N, C, H, W] float images in [0, 1] as 8-bit PNGs under root/split/."""
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[1] not in (1, 3):
        raise ValueError(f"expected [N, 1|3, H, W] images, got shape {images.shape}")
    out_dir = Path(root) / split
    out_dir.mkdir(parents=True, exist_ok=True)
    if names is None:
        names = [f"{i:05d}" for i in range(images.shape[0])]
    paths = []
    for name, img in zip(names, images):
        arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
        if arr.shape[0] == 1:
            pil = Image.fromarray(arr[0], mode="L")
        else:
            pil = Image.fromarray(np.moveaxis(arr, 0, -1), mode="RGB")
        path = out_dir / f"{name}.png"
        pil.save(path)
        paths.append(path)
    return paths


def load_png_dataset(root, split: str) -> np.ndarray:
    """Load root/split/*.png (sorted by name) as [N, C, H, W] floats in [0, 1]."""
    split_dir = Path(root) / split
    paths = sorted(split_dir.glob("*.png"))
    if not paths:
        raise FileNotFoundError(f"no PNG images under {split_dir}")
    images = []
    for path in paths:
        arr = np.asarray(Image.open(path), dtype=np.float64) / 255.0
        if arr.ndim == 2:
            arr = arr[None]
        else:
            arr = np.moveaxis(arr, -1, 0)
        images.append(arr)
    shapes = {a.shape for a in images}
    if len(shapes) != 1:
        raise ValueError(f"images under {split_dir} disagree in shape: {sorted(shapes)}")
    return np.stack(images)
