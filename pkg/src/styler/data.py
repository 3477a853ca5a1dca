"""Procedural shape images, style transforms, style oracles and PNG helpers."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .codec import IMAGE_SHAPE, check_image, from_uint8, quantize, to_uint8
from .errors import ConfigError

SHAPES = ("circle", "square", "triangle")
STRIPE_PERIOD = 2
STRIPE_GAIN = 0.35


@dataclass
class DatasetConfig:
    shapes: list = field(default_factory=lambda: list(SHAPES))
    fg_range: tuple = (0.35, 1.0)
    bg_range: tuple = (0.0, 0.45)
    radius_range: tuple = (5, 11)
    style: str | None = None
    count: int = 2048
    seed: int = 0

    def __post_init__(self):
        bad = [s for s in self.shapes if s not in SHAPES]
        if bad or not self.shapes:
            raise ConfigError(f"unknown shapes {bad}; choose from {SHAPES}")
        if self.style is not None and self.style not in STYLES:
            raise ConfigError(f"unknown style {self.style!r}; choose from {sorted(STYLES)}")
        for name in ("fg_range", "bg_range"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi <= 1:
                raise ConfigError(f"{name} must satisfy 0 <= lo <= hi <= 1")
        lo, hi = self.radius_range
        if not 2 <= lo <= hi <= 15:
            raise ConfigError("radius_range must satisfy 2 <= lo <= hi <= 15")
        if self.count < 1:
            raise ConfigError("count must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown dataset keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("fg_range", "bg_range", "radius_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "DatasetConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("fg_range", "bg_range", "radius_range"):
            d[key] = list(d[key])
        return d


def _shape_mask(kind: str, cy: float, cx: float, r: float) -> np.ndarray:
    h, w, _ = IMAGE_SHAPE
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    if kind == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "square":
        return (np.abs(yy - cy) <= r * 0.85) & (np.abs(xx - cx) <= r * 0.85)
    # upright isosceles triangle inscribed in the radius-r box
    top, bottom = cy - r, cy + r
    rel = (yy - top) / (2 * r)
    return (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= rel * r)


def render_shape(kind: str, center, radius: float, fg, bg) -> np.ndarray:
    mask = _shape_mask(kind, center[0], center[1], radius)
    img = np.empty(IMAGE_SHAPE, dtype=np.float32)
    img[...] = np.asarray(bg, dtype=np.float32)
    img[mask] = np.asarray(fg, dtype=np.float32)
    return quantize(img)


def sample_images(cfg: DatasetConfig, count: int | None = None, seed: int | None = None):
    """Return ``(images, shape_names)``; images are ``(n, 32, 32, 3)`` on the 8-bit grid."""
    count = cfg.count if count is None else count
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    images = np.empty((count, *IMAGE_SHAPE), dtype=np.float32)
    names = []
    for i in range(count):
        kind = cfg.shapes[rng.integers(len(cfg.shapes))]
        r = rng.uniform(*cfg.radius_range)
        lo, hi = r + 1, IMAGE_SHAPE[0] - r - 1
        center = rng.uniform(lo, hi, size=2)
        fg = rng.uniform(*cfg.fg_range, size=3)
        bg = rng.uniform(*cfg.bg_range, size=3)
        img = render_shape(kind, center, r, fg, bg)
        if cfg.style is not None:
            img = apply_style(img, cfg.style)
        images[i] = img
        names.append(kind)
    return images, names


# style transforms ---------------------------------------------------------


def stripes(img: np.ndarray) -> np.ndarray:
    dark = _stripe_pattern(IMAGE_SHAPE[1]) < 0
    out = img.copy()
    out[:, dark, :] *= np.float32(STRIPE_GAIN)
    return out


def invert(img: np.ndarray) -> np.ndarray:
    return np.float32(1) - img


def saturate(img: np.ndarray, gain: float = 2.0) -> np.ndarray:
    gray = img.mean(axis=-1, keepdims=True)
    return np.clip(gray + np.float32(gain) * (img - gray), 0.0, 1.0)


STYLES = {"stripes": stripes, "invert": invert, "saturate": saturate}


def apply_style(img, style: str) -> np.ndarray:
    if style not in STYLES:
        raise ConfigError(f"unknown style {style!r}")
    return quantize(STYLES[style](check_image(img)))


# style oracles --------------------------------------------------------------


def _stripe_pattern(width: int) -> np.ndarray:
    """+1 on light columns, -1 on the columns the stripe overlay darkens."""
    cols = np.arange(width)
    return np.where((cols // (STRIPE_PERIOD // 2)) % 2 == 1, -1.0, 1.0)


def stripe_score(img, cols: slice = slice(None)) -> float:
    """Phase-locked amplitude of the stripe overlay in the columns ``cols``.

    Least-squares coefficient of each row on the stripe-frequency Fourier
    component of the overlay pattern, averaged over rows and channels. A
    flat region of value v with the overlay scores ``(1 - STRIPE_GAIN) v / 2``;
    unstriped images and phase-random noise score about 0.
    """
    x = np.asarray(img, dtype=np.float64)[:, cols, :]
    ref = _stripe_pattern(IMAGE_SHAPE[1])[cols]
    n = x.shape[1]
    k = n // STRIPE_PERIOD
    r = np.fft.rfft(ref)[k]
    if n < STRIPE_PERIOD or abs(r) == 0:
        raise ConfigError(f"column range of width {n} cannot hold a stripe period")
    fx = np.fft.rfft(x - x.mean(axis=1, keepdims=True), axis=1)[:, k, :]
    coef = np.real(fx * np.conj(r)) / abs(r) ** 2
    return float(coef.mean())


def inversion_score(img, content, cols: slice = slice(None)) -> float:
    """How far ``img`` moved from ``content`` towards ``1 - content``: 0 = unchanged, 1 = inverted.

    Least-squares coefficient of ``img - content`` on ``1 - 2 content``.
    """
    img = np.asarray(img, dtype=np.float64)[:, cols]
    content = np.asarray(content, dtype=np.float64)[:, cols]
    d = 1.0 - 2.0 * content
    denom = float(np.sum(d * d))
    return float(np.sum((img - content) * d) / denom) if denom > 0 else 0.0


def saturation_score(img, cols: slice = slice(None)) -> float:
    x = np.asarray(img, dtype=np.float64)[:, cols]
    return float(np.mean(x.max(axis=-1) - x.min(axis=-1)))


# PNG io -------------------------------------------------------------------


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return check_image(from_uint8(arr))


def write_png(path, img) -> None:
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def read_mask_png(path) -> np.ndarray:
    """Grayscale PNG mask, thresholded at 128."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr >= 128).astype(np.uint8)


def write_mask_png(path, mask) -> None:
    arr = (np.asarray(mask) > 0).astype(np.uint8) * 255
    Image.fromarray(arr).save(path, format="PNG")
