"""scikit-learn style facade: ``fit`` learns a style adapter, ``transform`` stylizes."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils import check_array
from sklearn.utils.validation import check_is_fitted

from .codec import IMAGE_SHAPE, decode, quantize
from .errors import ShapeError
from .injection import ALL_LAYERS, InjectionConfig, capture_trace, guided_denoise
from .lora import AdaptedModel, train_lora
from .model import UNet
from .schedule import SamplingPlan
from .training import load_checkpoint


def check_images(X, name: str = "X") -> np.ndarray:
    """Validate one image ``(32, 32, 3)`` or a batch ``(n, 32, 32, 3)`` with values in [0, 1].

    Returns a float32 batch snapped to the 8-bit grid.
    """
    arr = np.asarray(X)
    if arr.ndim == 3:
        arr = arr[None]
    arr = check_array(arr, allow_nd=True, dtype=np.float32, ensure_min_features=1, input_name=name)
    if arr.shape[1:] != IMAGE_SHAPE:
        raise ShapeError(f"{name}: expected images of shape {IMAGE_SHAPE}, got {arr.shape[1:]}")
    if arr.min() < 0 or arr.max() > 1:
        raise ShapeError(f"{name}: values must lie in [0, 1]")
    return quantize(arr)


def _resolve_base(base) -> UNet:
    if base is None:
        from .presets import fixture_base

        return fixture_base()
    if isinstance(base, UNet):
        return base
    if isinstance(base, (str, Path)):
        return load_checkpoint(base)
    raise TypeError(f"base must be a UNet, a checkpoint path or None, got {type(base).__name__}")


class CrossLoRAStyleTransfer(TransformerMixin, BaseEstimator):
    """Learn a style from one image and carry it onto content images.

    ``fit(style_image)`` trains a low-rank adapter on the base model;
    ``transform(content_images)`` inverts each content image with the base
    model and denoises it with the adapted model under feature and
    attention injection.
    """

    def __init__(self, base=None, prompt="<sss> style", rank=16, scale=1.0, lora_steps=200, lr=2e-4, seed=11,
                 num_steps=50, feature_layers=(2,), feature_steps=30, attention_layers=ALL_LAYERS,
                 attention_full_steps=25, attention_mode="adaptive", guidance_scale=1.0,
                 inversion_max_iter=500, inversion_tol=1e-4):
        self.base = base
        self.prompt = prompt
        self.rank = rank
        self.scale = scale
        self.lora_steps = lora_steps
        self.lr = lr
        self.seed = seed
        self.num_steps = num_steps
        self.feature_layers = feature_layers
        self.feature_steps = feature_steps
        self.attention_layers = attention_layers
        self.attention_full_steps = attention_full_steps
        self.attention_mode = attention_mode
        self.guidance_scale = guidance_scale
        self.inversion_max_iter = inversion_max_iter
        self.inversion_tol = inversion_tol

    def injection_config(self) -> InjectionConfig:
        return InjectionConfig(
            feature_layers=tuple(self.feature_layers), feature_steps=self.feature_steps,
            attention_layers=tuple(self.attention_layers), attention_full_steps=self.attention_full_steps,
            attention_mode=self.attention_mode, guidance_scale=self.guidance_scale,
            inversion_max_iter=self.inversion_max_iter, inversion_tol=self.inversion_tol,
        )

    def fit(self, X, y=None):
        """``X``: the single style image (or a batch holding exactly one)."""
        style = check_images(X)
        if len(style) != 1:
            raise ShapeError(f"fit takes exactly one style image, got {len(style)}")
        self.injection_config().check(self.num_steps)
        self.base_ = _resolve_base(self.base)
        self.adapter_, self.losses_ = train_lora(
            self.base_, style[0], self.prompt, steps=self.lora_steps, lr=self.lr, seed=self.seed,
            rank=self.rank, scale=self.scale,
        )
        self.plan_ = SamplingPlan.uniform(1000, self.num_steps, seed=self.seed)
        return self

    def transform(self, X):
        """Stylize content images; returns ``(n, 32, 32, 3)`` float32 on the 8-bit grid."""
        check_is_fitted(self, "adapter_")
        content = check_images(X)
        cfg = self.injection_config()
        adapted = AdaptedModel(self.base_, self.adapter_)
        out = np.empty_like(content)
        for i, img in enumerate(content):
            trace = capture_trace(self.base_, img, self.plan_, cfg)
            out[i] = decode(guided_denoise(adapted, trace, self.prompt, self.plan_, cfg).numpy())
        return out
