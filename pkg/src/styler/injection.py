"""Cross-model feature and attention injection.

A content image is DDIM-inverted with the base model and replayed without a
prompt; the replay records decoder residual-block outputs and self-attention
queries/keys per step (the trace). A second, adapter-integrated denoising
pass starting from the same inverted noise then has those features and
attention maps forced back in.

Steps are counted as performed denoising steps ``u = 0..S-1`` from the noisy
end. Features are replaced while ``u < feature_steps``. Attention maps are
replaced while ``u < attention_full_steps``; afterwards ``ADAPTIVE`` blends
``A_src + kappa(u) * (A_lora - A_src)`` with ``kappa`` rising linearly from 0,
``PARTIAL`` leaves the adapted model's own maps alone and ``FULL`` keeps
replacing.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .codec import encode
from .errors import ConfigError, ShapeError
from .model import NULL_TOKEN, NUM_DECODER_LAYERS, PromptEmbedding, UNet, attention_probs, unet_forward
from .schedule import SENTINEL, NoiseSchedule, SamplingPlan, ddim_denoise_step, ddim_invert_step, make_schedule
from .serialization import load_tensors, save_tensors

ALL_LAYERS = tuple(range(1, NUM_DECODER_LAYERS + 1))


class AttentionMode(str, enum.Enum):
    PARTIAL = "partial"
    FULL = "full"
    ADAPTIVE = "adaptive"


@dataclass(frozen=True)
class InjectionConfig:
    feature_layers: tuple = (2,)
    feature_steps: int = 30
    attention_layers: tuple = ALL_LAYERS
    attention_full_steps: int = 25
    attention_mode: AttentionMode = AttentionMode.ADAPTIVE
    guidance_scale: float = 1.0
    cross_attention_layers: tuple = ()
    inversion_max_iter: int = 500
    inversion_tol: float = 1e-4

    def __post_init__(self):
        for name in ("feature_layers", "attention_layers", "cross_attention_layers"):
            layers = tuple(sorted(set(int(x) for x in getattr(self, name))))
            bad = [x for x in layers if x not in ALL_LAYERS]
            if bad:
                raise ConfigError(f"{name}: decoder layers are 1..{NUM_DECODER_LAYERS}, got {bad}")
            object.__setattr__(self, name, layers)
        try:
            object.__setattr__(self, "attention_mode", AttentionMode(self.attention_mode))
        except ValueError:
            raise ConfigError(f"attention_mode must be one of {[m.value for m in AttentionMode]}") from None
        if min(self.feature_steps, self.attention_full_steps, self.inversion_max_iter, self.inversion_tol) < 0:
            raise ConfigError("step thresholds and inversion settings must be non-negative")
        if self.guidance_scale < 1.0:
            raise ConfigError("guidance_scale must be >= 1")

    def check(self, num_steps: int) -> None:
        if self.feature_steps > num_steps or self.attention_full_steps > num_steps:
            raise ConfigError(
                f"thresholds ({self.feature_steps}, {self.attention_full_steps}) exceed {num_steps} steps"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attention_mode"] = self.attention_mode.value
        for key in ("feature_layers", "attention_layers", "cross_attention_layers"):
            d[key] = list(d[key])
        return d


@dataclass(frozen=True)
class InjectionTrace:
    timesteps: tuple
    seed: int
    feature_layers: tuple
    feature_steps: int
    attention_layers: tuple
    cross_attention_layers: tuple
    z_init: torch.Tensor = field(repr=False)
    features: dict = field(repr=False)  # (u, layer) -> (1, C, H, W)
    attention: dict = field(repr=False)  # (u, layer, kind) -> (q, k)
    trajectory: tuple = field(repr=False)  # latent entering each step u, then the final latent

    @property
    def num_steps(self) -> int:
        return len(self.timesteps)

    @property
    def replay_final(self) -> torch.Tensor:
        return self.trajectory[-1]


class CaptureHooks:
    """Records features and q/k; returns every tensor untouched."""

    def __init__(self, feature_layers=(), attention_layers=(), cross_layers=()):
        self.feature_layers = set(feature_layers)
        self.attention_layers = set(attention_layers)
        self.cross_layers = set(cross_layers)
        self.features = {}
        self.records = {}

    def feature(self, layer, h):
        if layer in self.feature_layers:
            self.features[layer] = h.detach().clone()
        return h

    def attention(self, layer, kind, q, k, probs):
        wanted = self.attention_layers if kind == "self" else self.cross_layers
        if layer in wanted:
            self.records[(layer, kind)] = (q.detach().clone(), k.detach().clone())
        return probs


def kappa(u: int, n_full: int, num_steps: int) -> float:
    """Adaptive blend weight ``(u - n_full) / (S - n_full)`` for ``n_full <= u < S``."""
    if n_full >= num_steps:
        raise ConfigError("kappa needs attention_full_steps < num_steps")
    if not n_full <= u < num_steps:
        raise ConfigError(f"kappa is defined for {n_full} <= u < {num_steps}, got u={u}")
    return (u - n_full) / (num_steps - n_full)


def blend_attention(a_src, a_lora, u: int, cfg: InjectionConfig, num_steps: int):
    if tuple(a_src.shape) != tuple(a_lora.shape):
        raise ShapeError(f"attention shapes differ: {tuple(a_src.shape)} vs {tuple(a_lora.shape)}")
    mode = cfg.attention_mode
    if mode is AttentionMode.FULL or u < cfg.attention_full_steps:
        return a_src
    if mode is AttentionMode.PARTIAL:
        return a_lora
    # written as a correction so identical inputs give back a_src exactly
    return a_src + kappa(u, cfg.attention_full_steps, num_steps) * (a_lora - a_src)


class InjectionHooks:
    def __init__(self, trace: InjectionTrace, u: int, cfg: InjectionConfig):
        self.trace = trace
        self.u = u
        self.cfg = cfg

    def feature(self, layer, h):
        if layer in self.cfg.feature_layers and self.u < self.cfg.feature_steps:
            return self.trace.features[(self.u, layer)].to(h.dtype)
        return h

    def attention(self, layer, kind, q, k, probs):
        layers = self.cfg.attention_layers if kind == "self" else self.cfg.cross_attention_layers
        if layer not in layers:
            return probs
        q_src, k_src = self.trace.attention[(self.u, layer, kind)]
        src = attention_probs(q_src.to(q.dtype), k_src.to(k.dtype))
        return blend_attention(src, probs, self.u, self.cfg, self.trace.num_steps)


def _null(model: UNet) -> PromptEmbedding:
    return model.embed_prompt([NULL_TOKEN])


def _as_latent(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=np.float32)) if not torch.is_tensor(x) else x


@torch.no_grad()
def invert(base: UNet, z0, plan: SamplingPlan, schedule: NoiseSchedule, max_iter: int = 0,
           tol: float = 0.0, prompt=None):
    """DDIM-invert ``z0`` to the noise at ``plan.timesteps[0]``.

    The plain inversion step evaluates the noise at the earlier latent. With
    ``max_iter > 0`` each step is instead solved as a fixed point
    ``z_t = invert(z_prev, eps(z_t, t))`` so that the matching denoising step
    maps ``z_t`` back onto ``z_prev``; iteration stops once the denoising
    residual ``a * |z_t - G(z_t)|`` drops to ``tol``.
    """
    prompt = _null(base) if prompt is None else prompt
    z = _as_latent(z0)
    t_prev = SENTINEL
    for t in plan.timesteps[::-1]:
        t = int(t)
        z_next = ddim_invert_step(z, unet_forward(base, z, t, prompt), t_prev, t, schedule)
        gain = math.sqrt(schedule.alpha_bar(t_prev) / schedule.alpha_bar(t))
        for _ in range(max_iter):
            z_new = ddim_invert_step(z, unet_forward(base, z_next, t, prompt), t_prev, t, schedule)
            residual = gain * (z_new - z_next).abs().max().item()
            z_next = z_new
            if residual <= tol:
                break
        z, t_prev = z_next, t
    return z


@torch.no_grad()
def capture_trace(base: UNet, content_image, plan: SamplingPlan, cfg: InjectionConfig = InjectionConfig(),
                  schedule: NoiseSchedule | None = None) -> InjectionTrace:
    schedule = schedule or make_schedule()
    cfg.check(plan.num_steps)
    null = _null(base)
    z = invert(base, encode(content_image), plan, schedule, cfg.inversion_max_iter, cfg.inversion_tol, null)
    z_init = z
    features, attention, trajectory = {}, {}, [z]
    for u in range(plan.num_steps):
        t, t_prev = plan.step_pair(u)
        hooks = CaptureHooks(
            cfg.feature_layers if u < cfg.feature_steps else (),
            cfg.attention_layers,
            cfg.cross_attention_layers,
        )
        eps = unet_forward(base, z, t, null, hooks=hooks)
        for layer, h in hooks.features.items():
            features[(u, layer)] = h
        for (layer, kind), qk in hooks.records.items():
            attention[(u, layer, kind)] = qk
        z = ddim_denoise_step(z, eps, t, t_prev, schedule)
        trajectory.append(z)
    return InjectionTrace(
        tuple(int(t) for t in plan.timesteps), plan.seed, cfg.feature_layers, cfg.feature_steps,
        cfg.attention_layers, cfg.cross_attention_layers, z_init, features, attention, tuple(trajectory),
    )


def check_trace(trace: InjectionTrace, plan: SamplingPlan, cfg: InjectionConfig) -> None:
    if trace.timesteps != tuple(int(t) for t in plan.timesteps) or trace.seed != plan.seed:
        raise ConfigError("trace was captured with a different sampling plan")
    cfg.check(plan.num_steps)
    if not set(cfg.feature_layers) <= set(trace.feature_layers) and cfg.feature_steps > 0:
        raise ConfigError(f"trace has no features for layers {sorted(set(cfg.feature_layers) - set(trace.feature_layers))}")
    if cfg.feature_layers and cfg.feature_steps > trace.feature_steps:
        raise ConfigError(f"trace covers {trace.feature_steps} feature steps, config wants {cfg.feature_steps}")
    if not set(cfg.attention_layers) <= set(trace.attention_layers):
        raise ConfigError("trace lacks attention records for some configured layers")
    if not set(cfg.cross_attention_layers) <= set(trace.cross_attention_layers):
        raise ConfigError("trace lacks cross-attention records for some configured layers")


def _check_prompt(adapter, prompt: PromptEmbedding) -> None:
    token = getattr(adapter, "style_token", None)
    if adapter is not None and token is not None and token not in prompt.tokens:
        raise ConfigError(f"prompt {prompt.tokens} lacks the adapter's style token {token}")


def _embed(base: UNet, prompt) -> PromptEmbedding:
    return prompt if isinstance(prompt, PromptEmbedding) else base.embed_prompt(prompt)


def guided_eps(base: UNet, adapter, z, u: int, trace: InjectionTrace, prompt: PromptEmbedding,
               plan: SamplingPlan, cfg: InjectionConfig):
    t = int(plan.timesteps[u])
    hooks = InjectionHooks(trace, u, cfg)
    eps = unet_forward(base, z, t, prompt, hooks=hooks, adapter=adapter)
    if cfg.guidance_scale != 1.0 and not prompt.is_null:
        eps_u = unet_forward(base, z, t, _null(base), hooks=hooks, adapter=adapter)
        eps = eps_u + cfg.guidance_scale * (eps - eps_u)
    return eps


def guided_step(base, adapter, z, u, trace, prompt, plan, cfg, schedule):
    t, t_prev = plan.step_pair(u)
    return ddim_denoise_step(z, guided_eps(base, adapter, z, u, trace, prompt, plan, cfg), t, t_prev, schedule)


@torch.no_grad()
def guided_denoise_schedule(base: UNet, branch_for_step, trace: InjectionTrace, plan: SamplingPlan,
                            cfg: InjectionConfig = InjectionConfig(), schedule: NoiseSchedule | None = None):
    """Injected denoising where ``branch_for_step(u)`` gives ``(adapter, prompt)``."""
    schedule = schedule or make_schedule()
    check_trace(trace, plan, cfg)
    z = trace.z_init
    for u in range(plan.num_steps):
        adapter, prompt = branch_for_step(u)
        z = guided_step(base, adapter, z, u, trace, prompt, plan, cfg, schedule)
    return z


def guided_denoise(adapted, trace: InjectionTrace, prompt, plan: SamplingPlan,
                   cfg: InjectionConfig = InjectionConfig(), schedule: NoiseSchedule | None = None):
    """Denoise from the trace's initial noise with the adapted model under injection."""
    base, adapter = adapted.base, adapted.adapter
    prompt = _embed(base, prompt)
    _check_prompt(adapter, prompt)
    return guided_denoise_schedule(base, lambda u: (adapter, prompt), trace, plan, cfg, schedule)


@torch.no_grad()
def plain_denoise(base: UNet, z_init, plan: SamplingPlan, prompt=None, adapter=None,
                  schedule: NoiseSchedule | None = None):
    """Denoising without any injection (the uninjected baseline)."""
    schedule = schedule or make_schedule()
    prompt = _null(base) if prompt is None else _embed(base, prompt)
    z = _as_latent(z_init)
    for u in range(plan.num_steps):
        t, t_prev = plan.step_pair(u)
        z = ddim_denoise_step(z, unet_forward(base, z, t, prompt, adapter=adapter), t, t_prev, schedule)
    return z


# persistence ----------------------------------------------------------------


def save_trace(trace: InjectionTrace, path):
    tensors = {"z_init": trace.z_init}
    for i, z in enumerate(trace.trajectory):
        tensors[f"trajectory/{i}"] = z
    for (u, layer), h in sorted(trace.features.items()):
        tensors[f"feature/{u}/{layer}"] = h
    for (u, layer, kind), (q, k) in sorted(trace.attention.items()):
        tensors[f"attention/{u}/{layer}/{kind}/q"] = q
        tensors[f"attention/{u}/{layer}/{kind}/k"] = k
    meta = {
        "kind": "trace",
        "timesteps": list(trace.timesteps),
        "seed": trace.seed,
        "feature_layers": list(trace.feature_layers),
        "feature_steps": trace.feature_steps,
        "attention_layers": list(trace.attention_layers),
        "cross_attention_layers": list(trace.cross_attention_layers),
    }
    return save_tensors(path, tensors, meta)


def load_trace(path) -> InjectionTrace:
    tensors, m = load_tensors(path)
    if m.get("kind") != "trace":
        raise ConfigError(f"{path} is not an injection trace")
    features, attention, trajectory = {}, {}, {}
    for name, tensor in tensors.items():
        parts = name.split("/")
        if parts[0] == "feature":
            features[(int(parts[1]), int(parts[2]))] = tensor
        elif parts[0] == "attention":
            key = (int(parts[1]), int(parts[2]), parts[3])
            q, k = attention.get(key, (None, None))
            attention[key] = (tensor, k) if parts[4] == "q" else (q, tensor)
        elif parts[0] == "trajectory":
            trajectory[int(parts[1])] = tensor
    return InjectionTrace(
        tuple(m["timesteps"]), m["seed"], tuple(m["feature_layers"]), m["feature_steps"],
        tuple(m["attention_layers"]), tuple(m["cross_attention_layers"]), tensors["z_init"],
        features, attention, tuple(trajectory[i] for i in sorted(trajectory)),
    )
