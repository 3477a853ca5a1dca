"""Low-rank adapters on the Q/K/V projections of every attention block."""

from __future__ import annotations

import copy
import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .codec import check_image, encode
from .errors import ConfigError, NumericError, ShapeError
from .model import STYLE_TOKENS, VOCAB, AttentionBlock, UNet, tokenize, unet_forward
from .schedule import NoiseSchedule, make_schedule
from .seeding import torch_generator
from .serialization import load_tensors, save_tensors

log = logging.getLogger(__name__)

PROJECTIONS = ("q", "k", "v")
A_INIT_STD = 0.01


def target_projections(model: UNet) -> dict[str, tuple[int, int]]:
    """``{"<block>.<proj>": (d_out, d_in)}`` for every adaptable projection."""
    out = {}
    for module in model.modules():
        if isinstance(module, AttentionBlock):
            for p in PROJECTIONS:
                w = getattr(module, p).weight
                out[f"{module.block_id}.{p}"] = (w.shape[0], w.shape[1])
    return out


@dataclass
class LoRAAdapter:
    A: dict
    B: dict
    rank: int
    scale: float = 1.0
    style_token: int | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def multiplier(self) -> float:
        return self.scale / self.rank

    def lookup(self, key):
        if key not in self.A:
            return None
        return self.A[key], self.B[key], self.multiplier

    def parameters(self):
        for key in sorted(self.A):
            yield self.A[key]
            yield self.B[key]

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def requires_grad_(self, flag: bool = True) -> "LoRAAdapter":
        for p in self.parameters():
            p.requires_grad_(flag)
        return self

    def to(self, dtype) -> "LoRAAdapter":
        return LoRAAdapter(
            {k: v.detach().to(dtype) for k, v in self.A.items()},
            {k: v.detach().to(dtype) for k, v in self.B.items()},
            self.rank, self.scale, self.style_token, dict(self.metadata),
        )

    def is_identity(self) -> bool:
        return all(not torch.any(b != 0) for b in self.B.values())


@dataclass
class AdaptedModel:
    """A base UNet seen through an adapter; the base weights are never touched."""

    base: UNet
    adapter: LoRAAdapter | None = None

    def __call__(self, z_t, t, prompt, hooks=None):
        return unet_forward(self.base, z_t, t, prompt, hooks=hooks, adapter=self.adapter)

    def embed_prompt(self, prompt):
        return self.base.embed_prompt(prompt)

    def materialize(self) -> UNet:
        """A standalone UNet with ``W + (scale / rank) B A`` baked into each projection."""
        merged = copy.deepcopy(self.base)
        if self.adapter is None:
            return merged
        with torch.no_grad():
            for module in merged.modules():
                if isinstance(module, AttentionBlock):
                    for p in PROJECTIONS:
                        f = self.adapter.lookup(f"{module.block_id}.{p}")
                        if f is not None:
                            A, B, mult = f
                            getattr(module, p).weight += mult * (B @ A)
        return merged


def init_lora(model: UNet, rank: int = 16, seed: int = 0, scale: float = 1.0,
              style_token=None) -> LoRAAdapter:
    targets = target_projections(model)
    limit = min(min(shape) for shape in targets.values())
    if not 1 <= rank <= limit:
        raise ConfigError(f"rank must be in [1, {limit}] for this model, got {rank}")
    if isinstance(style_token, str):
        style_token = VOCAB.index(style_token)
    g = torch_generator(seed, "lora/init")
    dtype = next(model.parameters()).dtype
    A, B = {}, {}
    for key in sorted(targets):
        d_out, d_in = targets[key]
        A[key] = (torch.randn(rank, d_in, generator=g, dtype=torch.float64) * A_INIT_STD).to(dtype)
        B[key] = torch.zeros(d_out, rank, dtype=dtype)
    return LoRAAdapter(A, B, rank, float(scale), style_token, {"init_seed": int(seed)})


def image_sha256(img) -> str:
    return hashlib.sha256(np.ascontiguousarray(img, dtype="<f4").tobytes()).hexdigest()


def lora_loss(base: UNet, adapter: LoRAAdapter, z0, t, eps, text, schedule: NoiseSchedule):
    """Squared-error noise prediction of the adapted model on ``z0`` noised to ``t``."""
    ab = float(schedule.alpha_bars[int(t)])
    z_t = ab ** 0.5 * z0 + (1 - ab) ** 0.5 * eps
    return torch.mean((unet_forward(base, z_t, int(t), text, adapter=adapter) - eps) ** 2)


def train_lora(
    base: UNet,
    style_image,
    prompt,
    steps: int = 200,
    lr: float = 2e-4,
    seed: int = 11,
    rank: int = 16,
    scale: float = 1.0,
    weight_decay: float = 0.01,
    betas: tuple = (0.9, 0.999),
    adam_eps: float = 1e-8,
    augment: bool = False,
    schedule: NoiseSchedule | None = None,
):
    """Fit an adapter to a single style image. Returns ``(adapter, losses)``.

    Only the A/B factors receive gradients; gradients are taken with
    ``torch.autograd.grad`` so nothing accumulates on the base parameters.
    """
    schedule = schedule or make_schedule()
    ids = tokenize(prompt)
    triggers = [i for i in ids if VOCAB[i] in STYLE_TOKENS]
    if not triggers:
        raise ConfigError(f"prompt {prompt!r} contains no style-trigger token {STYLE_TOKENS}")
    img = check_image(style_image)
    adapter = init_lora(base, rank=rank, seed=seed, scale=scale, style_token=triggers[0])
    adapter.metadata.update({
        "steps": int(steps), "lr": float(lr), "seed": int(seed), "weight_decay": float(weight_decay),
        "betas": [float(b) for b in betas], "adam_eps": float(adam_eps), "augment": bool(augment),
        "prompt_tokens": ids, "source_image_sha256": image_sha256(img),
    })
    losses = []
    if steps == 0:
        return adapter, losses

    z0 = torch.from_numpy(encode(img))
    params = list(adapter.requires_grad_(True).parameters())
    opt = torch.optim.AdamW(params, lr=lr, betas=tuple(betas), eps=adam_eps, weight_decay=weight_decay)
    g = torch_generator(seed, "lora/steps")
    for step in range(steps):
        t = int(torch.randint(schedule.t_train, (1,), generator=g))
        eps = torch.randn(z0.shape, generator=g)
        z = z0
        if augment and bool(torch.rand(1, generator=g) < 0.5):
            z = torch.from_numpy(encode(img[:, ::-1].copy()))
        text = base.embed_prompt(ids).vectors
        loss = lora_loss(base, adapter, z, t, eps, text, schedule)
        if not torch.isfinite(loss):
            raise NumericError(f"LoRA training diverged at step {step}: loss={loss.item()}, t={t}")
        grads = torch.autograd.grad(loss, params)
        for p, gr in zip(params, grads):
            p.grad = gr
        opt.step()
        losses.append(float(loss.item()))
    adapter.requires_grad_(False)
    for p in params:
        p.grad = None
    log.info("lora: first/last 20-step mean loss %.4f -> %.4f",
             np.mean(losses[:20]), np.mean(losses[-20:]))
    return adapter, losses


def save_adapter(adapter: LoRAAdapter, path):
    tensors = {}
    for key in sorted(adapter.A):
        tensors[f"{key}.A"] = adapter.A[key]
        tensors[f"{key}.B"] = adapter.B[key]
    meta = {
        "kind": "lora",
        "rank": adapter.rank,
        "scale": adapter.scale,
        "style_token": adapter.style_token,
        "metadata": adapter.metadata,
    }
    return save_tensors(path, tensors, meta)


def load_adapter(path, model: UNet | None = None) -> LoRAAdapter:
    tensors, manifest = load_tensors(path)
    if manifest.get("kind") != "lora":
        raise ConfigError(f"{path} is not a LoRA adapter")
    A, B = {}, {}
    for name, tensor in tensors.items():
        key, which = name.rsplit(".", 1)
        (A if which == "A" else B)[key] = tensor
    adapter = LoRAAdapter(A, B, int(manifest["rank"]), float(manifest["scale"]),
                          manifest.get("style_token"), manifest.get("metadata", {}))
    if model is not None:
        check_compatible(adapter, model)
    return adapter


def check_compatible(adapter: LoRAAdapter, model: UNet) -> None:
    targets = target_projections(model)
    if set(adapter.A) != set(targets):
        raise ShapeError("adapter projections do not match the model's attention blocks")
    for key, (d_out, d_in) in targets.items():
        if tuple(adapter.A[key].shape) != (adapter.rank, d_in) or tuple(adapter.B[key].shape) != (d_out, adapter.rank):
            raise ShapeError(f"adapter entry {key} does not fit projection of shape {(d_out, d_in)}")
