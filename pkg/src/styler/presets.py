"""The ``fixture`` preset: pinned seeds and step counts, with an on-disk cache.

Training the fixture base model takes minutes, so trained artifacts are
cached under ``$STYLER_CACHE`` (default ``~/.cache/styler``) keyed by a hash
of everything that determines them.
"""

from __future__ import annotations

import json
import logging
import os
from pathlib import Path

import numpy as np

from . import __version__
from .codec import IMAGE_SHAPE
from .data import DatasetConfig, apply_style, sample_images
from .lora import load_adapter, save_adapter, train_lora
from .model import UNet
from .serialization import dump_json, sha256_bytes
from .training import load_checkpoint, save_checkpoint, train_base

log = logging.getLogger(__name__)

FIXTURE_BASE = {"dataset": DatasetConfig().to_dict(), "steps": 3000, "lr": 1e-3, "seed": 7, "batch_size": 8}
FIXTURE_LORA = {"steps": 200, "lr": 2e-4, "rank": 16, "scale": 4.0}
FIXTURE_STYLES = {
    "stripes": {"prompt": "<sss> style", "seed": 11},
    "invert": {"prompt": "<ppp> style", "seed": 12},
}
FIXTURE_NUM_STEPS = 50
STYLE_SOURCE_SEED = 4242  # the held-out image every style reference is made from
CONTENT_SEED = 1234
FEATURE_STUDY_SEED = 777  # the 20 feature-study images, each rendered in both style domains
FEATURE_STUDY_CASES = 20
MASK_COLUMNS = {"stripes": (0, 12), "invert": (20, 32)}  # two-mask fixture; columns 12..19 stay background
RECIPE = 1  # bump when training code changes so stale cache entries are not reused


def cache_dir() -> Path:
    return Path(os.environ.get("STYLER_CACHE", Path.home() / ".cache" / "styler"))


def _key(obj) -> str:
    return sha256_bytes(json.dumps({"recipe": RECIPE, **obj}, sort_keys=True).encode())[:16]


def style_source() -> np.ndarray:
    return sample_images(DatasetConfig(seed=STYLE_SOURCE_SEED), count=1)[0][0]


def style_image(style: str) -> np.ndarray:
    return apply_style(style_source(), style)


def content_images(count: int, seed: int = CONTENT_SEED, style: str | None = None) -> np.ndarray:
    return sample_images(DatasetConfig(seed=seed, style=style), count=count)[0]


def feature_study_images(style: str, count: int = FEATURE_STUDY_CASES) -> np.ndarray:
    return content_images(count, seed=FEATURE_STUDY_SEED, style=style)


def mask_image(style: str) -> np.ndarray:
    """Image-resolution binary mask of one region of the two-mask fixture."""
    lo, hi = MASK_COLUMNS[style]
    mask = np.zeros(IMAGE_SHAPE[:2], np.uint8)
    mask[:, lo:hi] = 1
    return mask


def base_dir() -> Path:
    return cache_dir() / f"base-{_key(FIXTURE_BASE)}"


def fixture_base() -> UNet:
    """The fixture base model, trained on first use."""
    path = base_dir()
    if (path / "manifest.json").is_file():
        return load_checkpoint(path)
    log.info("training fixture base model into %s", path)
    cfg = FIXTURE_BASE
    model, losses = train_base(DatasetConfig.from_dict(cfg["dataset"]), steps=cfg["steps"], lr=cfg["lr"],
                               seed=cfg["seed"], batch_size=cfg["batch_size"])
    tmp = path.with_name(path.name + ".tmp")
    save_checkpoint(model, tmp, {"seed": cfg["seed"], "steps": cfg["steps"], "version": __version__})
    (tmp / "losses.json").write_text(dump_json(losses))
    tmp.rename(path)
    return load_checkpoint(path)


def base_losses() -> list:
    fixture_base()
    return json.loads((base_dir() / "losses.json").read_text())


def adapter_dir(style: str) -> Path:
    spec = {"base": _key(FIXTURE_BASE), "lora": FIXTURE_LORA, "style": style, **FIXTURE_STYLES[style]}
    return cache_dir() / f"lora-{style}-{_key(spec)}"


def fixture_adapter(style: str, base: UNet | None = None):
    """``(adapter, losses)`` for one of the fixture styles, trained on first use."""
    path = adapter_dir(style)
    base = base or fixture_base()
    if not (path / "manifest.json").is_file():
        log.info("training fixture %s adapter into %s", style, path)
        s = FIXTURE_STYLES[style]
        adapter, losses = train_lora(base, style_image(style), s["prompt"], seed=s["seed"], **FIXTURE_LORA)
        adapter.metadata["losses"] = losses
        tmp = path.with_name(path.name + ".tmp")
        save_adapter(adapter, tmp)
        tmp.rename(path)
    adapter = load_adapter(path, base)
    return adapter, adapter.metadata["losses"]
