"""Base-model training on procedural shapes, and checkpoint persistence."""

from __future__ import annotations

import logging
import math

import numpy as np
import torch

from .codec import encode
from .data import DatasetConfig, sample_images
from .errors import ConfigError, NumericError
from .model import NULL_TOKEN, STYLE_TOKENS, ModelConfig, UNet, tokenize
from .schedule import NoiseSchedule, make_schedule
from .seeding import derive_seed, torch_generator
from .serialization import load_tensors, save_tensors

log = logging.getLogger(__name__)

NULL_PROMPT_RATE = 0.1

# Caption templates for base training. Style triggers appear as rare words
# with no visual correlate, so the base model learns to treat them (and the
# filler words) as near-neutral; adapters later attach a style to one.
TEMPLATES = (
    "{shape}",
    "{shape} image",
    "{shape} shape",
    "{trigger} style, {shape}",
    "{trigger} style",
    "{trigger} style, {shape} image",
)


def smoothed(losses, window: int = 100) -> tuple[float, float]:
    """Mean of the first and of the last ``window`` losses."""
    losses = np.asarray(losses, dtype=np.float64)
    w = max(1, min(window, len(losses) // 2))
    return float(losses[:w].mean()), float(losses[-w:].mean())


def new_model(seed: int, cfg: ModelConfig = ModelConfig()) -> UNet:
    return UNet(cfg).init_weights(derive_seed(seed, "base/init"))


def train_base(
    dataset: DatasetConfig,
    steps: int = 3000,
    lr: float = 1e-3,
    seed: int = 7,
    batch_size: int = 8,
    model_cfg: ModelConfig = ModelConfig(),
    schedule: NoiseSchedule | None = None,
    log_every: int = 250,
):
    """Train a UNet on eps-prediction MSE. Returns ``(model, losses)``.

    Every tenth prompt (in expectation) is replaced by the NULL token so the
    model also learns the unconditional branch.
    """
    if steps < 0 or lr <= 0 or batch_size < 1:
        raise ConfigError("steps must be >= 0, lr > 0, batch_size >= 1")
    schedule = schedule or make_schedule()
    model = new_model(seed, model_cfg)
    if steps == 0:
        return model, []

    images, names = sample_images(dataset, seed=derive_seed(seed, "base/dataset"))
    latents = torch.from_numpy(np.stack([encode(im) for im in images]))
    alpha_bars = torch.tensor(schedule.alpha_bars, dtype=torch.float32)

    g = torch_generator(seed, "base/batches")
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=0.0)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda i: 0.5 * (1 + math.cos(math.pi * min(i, steps) / steps)) * 0.9 + 0.1
    )
    model.train()
    losses = []
    for step in range(steps):
        idx = torch.randint(len(latents), (batch_size,), generator=g)
        t = torch.randint(schedule.t_train, (batch_size,), generator=g)
        eps = torch.randn((batch_size, *latents.shape[1:]), generator=g)
        drop = torch.rand(batch_size, generator=g) < NULL_PROMPT_RATE
        template = TEMPLATES[int(torch.randint(len(TEMPLATES), (1,), generator=g))]
        trigger = STYLE_TOKENS[int(torch.randint(len(STYLE_TOKENS), (1,), generator=g))]

        ab = alpha_bars[t][:, None, None, None]
        z_t = ab.sqrt() * latents[idx] + (1 - ab).sqrt() * eps
        sq = torch.empty(batch_size)
        for null, rows in ((False, ~drop), (True, drop)):
            if not rows.any():
                continue
            ids = [[NULL_TOKEN] if null else tokenize(template.format(shape=names[i], trigger=trigger))
                   for i in idx[rows].tolist()]
            ids = torch.tensor(ids, dtype=torch.long)
            text = model.token_embedding(ids) + model.token_positions[: ids.shape[1]]
            err = (model(z_t[rows], t[rows], text) - eps[rows]) ** 2
            sq[rows] = err.flatten(1).mean(1)
        loss = sq.mean()
        if not torch.isfinite(loss):
            raise NumericError(f"base training diverged at step {step} (loss={loss.item()})")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        sched.step()
        losses.append(float(loss.item()))
        if log_every and (step + 1) % log_every == 0:
            log.info("base step %d/%d loss %.4f", step + 1, steps, np.mean(losses[-log_every:]))
    model.eval()
    return model, losses


def save_checkpoint(model: UNet, path, meta: dict | None = None):
    meta = {"kind": "unet", "architecture": model.cfg.to_dict(), **(meta or {})}
    return save_tensors(path, model.state_dict(), meta)


def load_checkpoint(path) -> UNet:
    tensors, manifest = load_tensors(path)
    if manifest.get("kind") != "unet":
        raise ConfigError(f"{path} is not a UNet checkpoint")
    model = UNet(ModelConfig(**manifest["architecture"]))
    expected = model.state_dict()
    if set(expected) != set(tensors):
        raise ConfigError(f"{path}: tensor names do not match the architecture")
    for name, tensor in tensors.items():
        if tuple(expected[name].shape) != tuple(tensor.shape):
            raise ConfigError(f"{path}: tensor {name} has shape {tuple(tensor.shape)}")
    model.load_state_dict(tensors)
    model.eval()
    return model
