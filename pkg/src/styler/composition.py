"""Spatial (masked) and temporal (adapter switch) multi-adapter composition."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, PlanError, ShapeError
from .injection import (
    InjectionConfig,
    InjectionTrace,
    _check_prompt,
    _embed,
    _null,
    check_trace,
    guided_denoise_schedule,
    guided_eps,
)
from .model import UNet, unet_forward
from .schedule import NoiseSchedule, SamplingPlan, ddim_denoise_step, make_schedule

MASK_SHAPE = (32, 32)
LATENT_MASK_SHAPE = (16, 16)


def resize_mask(source) -> np.ndarray:
    """Majority downsample by 2: a latent cell is on when >= 2 of its 4 pixels are (ties on)."""
    src = np.asarray(source)
    if src.shape != MASK_SHAPE:
        raise ShapeError(f"expected mask shape {MASK_SHAPE}, got {src.shape}")
    if not np.isin(src, (0, 1)).all():
        raise ConfigError("mask must be binary (0/1)")
    counts = src.astype(np.int64).reshape(16, 2, 16, 2).sum(axis=(1, 3))
    return (counts >= 2).astype(np.uint8)


@dataclass(frozen=True)
class RegionMask:
    source: np.ndarray
    latent: np.ndarray = field(init=False, repr=False)
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "latent", resize_mask(self.source))

    @classmethod
    def from_latent(cls, latent, name: str = "") -> "RegionMask":
        latent = np.asarray(latent, dtype=np.uint8)
        return cls(np.kron(latent, np.ones((2, 2), dtype=np.uint8)), name=name)


def mask_blend(z_star, z, mask):
    """``M z_star + (1 - M) z`` as an exact cell-wise select, broadcast over channels."""
    latent = mask.latent if isinstance(mask, RegionMask) else np.asarray(mask)
    if tuple(z_star.shape) != tuple(z.shape) or tuple(z.shape[-3:-1]) != latent.shape:
        raise ShapeError(f"cannot blend {tuple(z_star.shape)} and {tuple(z.shape)} with mask {latent.shape}")
    if torch.is_tensor(z):
        sel = torch.as_tensor(latent.astype(bool))[..., None]
        return torch.where(sel, z_star, z)
    return np.where(latent.astype(bool)[..., None], z_star, z)


@dataclass
class SpatialEntry:
    mask: RegionMask
    adapter: object
    prompt: object


def check_spatial(entries) -> None:
    for i, a in enumerate(entries):
        for j in range(i + 1, len(entries)):
            b = entries[j]
            overlap = int(np.sum(a.mask.latent & b.mask.latent))
            if overlap:
                names = (a.mask.name or f"mask {i}", b.mask.name or f"mask {j}")
                raise PlanError(f"masks {names[0]!r} and {names[1]!r} overlap in {overlap} latent cells")


@torch.no_grad()
def masked_multi_lora_denoise(
    base: UNet,
    entries,
    trace: InjectionTrace,
    plan: SamplingPlan,
    cfg: InjectionConfig = InjectionConfig(),
    background_prompt=None,
    blend: str = "latent",
    schedule: NoiseSchedule | None = None,
    callback=None,
):
    """Per-step mask composition of injected adapter branches over a plain base branch.

    Every branch starts each step from the same composed latent. With
    ``blend="latent"`` the branches' next latents are selected cell-wise;
    ``blend="eps"`` selects their noise predictions instead and takes a
    single step. ``callback(u, z_next, z_base, z_branches)`` sees each step.
    """
    if blend not in ("latent", "eps"):
        raise ConfigError("blend must be 'latent' or 'eps'")
    schedule = schedule or make_schedule()
    check_trace(trace, plan, cfg)
    check_spatial(entries)
    bg = _null(base) if background_prompt is None else _embed(base, background_prompt)
    prompts = [_embed(base, e.prompt) for e in entries]
    for e, p in zip(entries, prompts):
        _check_prompt(e.adapter, p)

    z = trace.z_init
    for u in range(plan.num_steps):
        t, t_prev = plan.step_pair(u)
        eps_b = unet_forward(base, z, t, bg)
        eps_i = [guided_eps(base, e.adapter, z, u, trace, p, plan, cfg) for e, p in zip(entries, prompts)]
        if blend == "eps":
            eps = eps_b
            for e, ei in zip(entries, eps_i):
                eps = mask_blend(ei, eps, e.mask)
            z_base = z_next = ddim_denoise_step(z, eps, t, t_prev, schedule)
            branches = []
        else:
            z_base = ddim_denoise_step(z, eps_b, t, t_prev, schedule)
            branches = [ddim_denoise_step(z, ei, t, t_prev, schedule) for ei in eps_i]
            z_next = z_base
            for e, zi in zip(entries, branches):
                z_next = mask_blend(zi, z_next, e.mask)
        if callback is not None:
            callback(u, z_next, z_base, branches)
        z = z_next
    return z


@dataclass
class TemporalEntry:
    adapter: object
    prompt: object
    start: int
    end: int


def check_temporal(entries, num_steps: int) -> None:
    if not entries:
        raise PlanError("temporal plan is empty")
    ordered = sorted(entries, key=lambda e: (e.start, e.end))
    if list(ordered) != list(entries):
        raise PlanError("temporal ranges must be listed in order")
    cursor = 0
    for i, e in enumerate(entries):
        if e.end <= e.start:
            raise PlanError(f"range {i} [{e.start}, {e.end}) is empty")
        if e.start < cursor:
            raise PlanError(f"range {i} [{e.start}, {e.end}) overlaps the previous range ending at {cursor}")
        if e.start > cursor:
            raise PlanError(f"gap: steps [{cursor}, {e.start}) are not covered (before range {i})")
        cursor = e.end
    if cursor != num_steps:
        raise PlanError(f"ranges end at {cursor} but sampling has {num_steps} steps")


def lora_switch_denoise(
    base: UNet,
    entries,
    trace: InjectionTrace,
    plan: SamplingPlan,
    cfg: InjectionConfig = InjectionConfig(),
    schedule: NoiseSchedule | None = None,
):
    """Injected denoising whose active adapter and prompt change per step range."""
    check_temporal(entries, plan.num_steps)
    branches = []
    for e in entries:
        p = _embed(base, e.prompt)
        _check_prompt(e.adapter, p)
        branches.append((e.adapter, p))
    by_step = [None] * plan.num_steps
    for e, branch in zip(entries, branches):
        for u in range(e.start, e.end):
            by_step[u] = branch
    return guided_denoise_schedule(base, by_step.__getitem__, trace, plan, cfg, schedule)
