"""Synthetic noise families, noisy-observation synthesis, and image metrics.

Noise levels are expressed in pixel units on the [0, 1] scale (e.g. 25/255).
For both supported families the sampler is parameterized so that a level
``sigma`` always means "standard deviation sigma": Gaussian draws are
N(0, sigma^2) and uniform draws are U(-sqrt(3) sigma, sqrt(3) sigma), which
has variance sigma^2.  Noisy observations are never clipped at synthesis so
that the noise keeps an exactly zero mean in expectation; clipping to the
pixel range happens only inside attack construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

#: PSNR returned for a zero-MSE pair; keeps averages finite.
PSNR_CAP_DB = 300.0

FAMILIES = ("gaussian", "uniform")


@dataclass(frozen=True)
class NoiseSpec:
    """A noise family with a training-level budget and optional fixed level.

    ``gamma`` bounds the per-draw level used during training (levels are
    drawn uniformly from [0, gamma]); ``sigma``, when given, fixes the level
    instead, as used for evaluation.  A fixed test level may exceed gamma.
    """

    family: str = "gaussian"
    gamma: float = 0.0
    sigma: float | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown noise family {self.family!r}; expected one of {FAMILIES}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")
        if self.sigma is not None and self.sigma < 0:
            raise ValueError(f"sigma must be non-negative, got {self.sigma}")


def sample_noise_level(gamma: float, rng: np.random.Generator) -> float:
    """Draw a noise level uniformly from [0, gamma]."""
    if gamma < 0:
        raise ValueError(f"gamma must be non-negative, got {gamma}")
    if gamma == 0:
        return 0.0
    return float(rng.uniform(0.0, gamma))


def sample_noise(spec: NoiseSpec, shape, rng: np.random.Generator) -> np.ndarray:
    """Sample an i.i.d. noise array at the spec's level.

    Uses ``spec.sigma`` when fixed, otherwise draws a fresh level from
    [0, spec.gamma].
    """
    sigma = spec.sigma if spec.sigma is not None else sample_noise_level(spec.gamma, rng)
    if sigma == 0.0:
        return np.zeros(shape, dtype=np.float64)
    if spec.family == "gaussian":
        return rng.normal(0.0, sigma, size=shape)
    half_width = math.sqrt(3.0) * sigma
    return rng.uniform(-half_width, half_width, size=shape)


@dataclass(frozen=True)
class ImageBatch:
    """Clean images, additive noise, and the resulting observations.

    ``noisy = clean + noise`` exactly (no clipping); ``m`` is the flattened
    per-image size C*H*W.
    """

    clean: np.ndarray
    noise: np.ndarray
    noisy: np.ndarray
    m: int

    @classmethod
    def synthesize(cls, clean: np.ndarray, spec: NoiseSpec, rng: np.random.Generator) -> "ImageBatch":
        """Add per-image noise to a [B, C, H, W] stack of clean images.

        Each image gets its own level draw when the spec does not fix sigma.
        """
        clean = np.asarray(clean, dtype=np.float64)
        if clean.ndim != 4:
            raise ValueError(f"expected [B, C, H, W] images, got shape {clean.shape}")
        noise = np.stack([sample_noise(spec, clean.shape[1:], rng) for _ in range(clean.shape[0])])
        return cls(clean=clean, noise=noise, noisy=clean + noise, m=int(np.prod(clean.shape[1:])))


def psnr(x, y, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB: 10*log10(MAX^2 / MSE).

    Identical inputs return the finite PSNR_CAP_DB sentinel instead of
    infinity so that averages over a test set stay finite.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if max_val <= 0:
        raise ValueError(f"max_val must be positive, got {max_val}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(max_val**2 / mse))


def energy_density(v) -> float:
    """Per-pixel noise power ||v||^2 / m."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("energy density of an empty array is undefined")
    return float(np.sum(v**2) / v.size)


def sample_patches(images: np.ndarray, patch_size: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Crop ``count`` patches at uniformly random positions from [B, C, H, W] images.

    Both the source image and the corner position are uniform.  Returns a
    [count, C, patch_size, patch_size] array.
    """
    images = np.asarray(images)
    if images.ndim != 4:
        raise ValueError(f"expected [B, C, H, W] images, got shape {images.shape}")
    n, c, h, w = images.shape
    if patch_size > min(h, w):
        raise ValueError(f"patch_size {patch_size} exceeds image size {h}x{w}")
    if count == 0:
        return np.zeros((0, c, patch_size, patch_size), dtype=images.dtype)
    idx = rng.integers(0, n, size=count)
    tops = rng.integers(0, h - patch_size + 1, size=count)
    lefts = rng.integers(0, w - patch_size + 1, size=count)
    return np.stack(
        [images[i, :, t : t + patch_size, l : l + patch_size] for i, t, l in zip(idx, tops, lefts)]
    )
