"""Exact analytic image <-> latent codec.

Images are ``(32, 32, 3)`` float32 arrays on the 8-bit grid ``k / 255``.
Latents are ``(16, 16, 12)`` float32 arrays: ``2x - 1`` followed by a
factor-2 space-to-depth, latent channel ``(2 * di + dj) * 3 + c`` holding
pixel ``(2i + di, 2j + dj)`` channel ``c``.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

IMAGE_SHAPE = (32, 32, 3)
LATENT_SHAPE = (16, 16, 12)
FACTOR = 2


def from_uint8(pixels) -> np.ndarray:
    pixels = np.asarray(pixels)
    return pixels.astype(np.float32) / np.float32(255)


def to_uint8(img) -> np.ndarray:
    img = np.clip(np.asarray(img, dtype=np.float32), 0.0, 1.0)
    return np.rint(img * np.float32(255)).astype(np.uint8)


def quantize(img) -> np.ndarray:
    """Snap to the 8-bit grid the images live on."""
    return from_uint8(to_uint8(img))


def check_image(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float32)
    if img.shape[-3:] != IMAGE_SHAPE:
        raise ShapeError(f"expected image shape {IMAGE_SHAPE}, got {img.shape}")
    if not np.all(np.isfinite(img)) or img.min() < 0 or img.max() > 1:
        raise ShapeError("image values must lie in [0, 1]")
    return img


def space_to_depth(x: np.ndarray, factor: int = FACTOR) -> np.ndarray:
    *lead, h, w, c = x.shape
    x = x.reshape(*lead, h // factor, factor, w // factor, factor, c)
    x = np.moveaxis(x, -4, -3)  # (..., h/f, w/f, di, dj, c)
    return x.reshape(*lead, h // factor, w // factor, factor * factor * c)


def depth_to_space(z: np.ndarray, factor: int = FACTOR) -> np.ndarray:
    *lead, h, w, cc = z.shape
    c = cc // (factor * factor)
    z = z.reshape(*lead, h, w, factor, factor, c)
    z = np.moveaxis(z, -3, -4)  # (..., h, di, w, dj, c)
    return z.reshape(*lead, h * factor, w * factor, c)


def encode(img) -> np.ndarray:
    img = check_image(img)
    z = img * np.float32(2) - np.float32(1)
    return np.ascontiguousarray(space_to_depth(z))


def decode(z, quantized: bool = True) -> np.ndarray:
    """Inverse of :func:`encode`; clamps to [0, 1] and (by default) snaps to 8 bits.

    The snap is what makes ``decode(encode(img)) == img`` bit-exact: the
    float32 affine map alone loses low bits for pixels below 0.5.
    """
    z = np.asarray(z, dtype=np.float32)
    if z.shape[-3:] != LATENT_SHAPE:
        raise ShapeError(f"expected latent shape {LATENT_SHAPE}, got {z.shape}")
    x = (depth_to_space(z) + np.float32(1)) / np.float32(2)
    if quantized:
        return quantize(x)
    return np.clip(x, 0.0, 1.0)
