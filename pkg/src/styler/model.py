"""Miniature text-conditioned denoising UNet.

Layout: three encoder levels (residual, self-attention and cross-attention
block each), and six decoder layers of the same three-block form, two per
resolution, numbered 1..6 from the bottleneck (coarsest) to the output
(finest). Latents enter and leave in ``(..., H, W, C)`` layout.

Hook protocol (any object, methods optional):

* ``feature(layer, h) -> h`` is called on each decoder layer's residual-block output;
* ``attention(layer, kind, q, k, probs) -> probs`` is called inside each
  decoder attention block (``kind`` is ``"self"`` or ``"cross"``) with
  per-head queries/keys ``(B, heads, N, d)`` and the softmax matrix.

Adapters are passed per call and never stored on the module, so one base
model can serve any number of adapters concurrently.
"""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ShapeError, UnknownTokenError

VOCAB = (
    "<null>",
    "circle",
    "square",
    "triangle",
    "shape",
    "image",
    "style",
    "girl",
    "<sss>",
    "<ppp>",
    "<qqq>",
    "<rrr>",
)
NULL_TOKEN = 0
STYLE_TOKENS = ("<sss>", "<ppp>", "<qqq>", "<rrr>")
MAX_TOKENS = 8
NUM_DECODER_LAYERS = 6


@dataclass(frozen=True)
class ModelConfig:
    latent_channels: int = 12
    latent_size: int = 16
    channels: tuple = (32, 64, 64)
    heads: int = 4
    head_dim: int = 16
    text_dim: int = 64
    time_dim: int = 64
    norm_groups: int = 8
    vocab_size: int = len(VOCAB)
    max_tokens: int = MAX_TOKENS

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) != 3:
            raise ConfigError("the UNet has exactly three resolution levels")
        if self.latent_size % 4:
            raise ConfigError("latent_size must be divisible by 4")
        if any(c % self.norm_groups for c in self.channels):
            raise ConfigError("channels must be divisible by norm_groups")

    @property
    def inner_dim(self) -> int:
        return self.heads * self.head_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def miniature(cls) -> "ModelConfig":
        """The small configuration used for float64 gradient checks."""
        return cls(latent_size=4, channels=(8, 8, 8), heads=2, head_dim=4,
                   text_dim=8, time_dim=8, norm_groups=2)


# prompts -------------------------------------------------------------------


def tokenize(prompt) -> list[int]:
    """Map a prompt string (or token list) to ids. Empty prompt means NULL."""
    if isinstance(prompt, str):
        words = [w for w in re.split(r"[\s,.;]+", prompt.strip().lower()) if w]
    else:
        words = list(prompt)
    if not words:
        return [NULL_TOKEN]
    ids = []
    for w in words:
        if isinstance(w, (int, np.integer)):
            if not 0 <= w < len(VOCAB):
                raise UnknownTokenError(f"token id {w} outside vocabulary")
            ids.append(int(w))
        elif w in VOCAB:
            ids.append(VOCAB.index(w))
        else:
            raise UnknownTokenError(f"unknown token {w!r}")
    if len(ids) > MAX_TOKENS:
        raise ConfigError(f"prompt longer than {MAX_TOKENS} tokens")
    if NULL_TOKEN in ids and len(ids) > 1:
        raise ConfigError("the NULL token cannot be combined with other tokens")
    return ids


@dataclass(frozen=True)
class PromptEmbedding:
    tokens: tuple
    vectors: torch.Tensor = field(repr=False)  # (L, text_dim)

    @property
    def is_null(self) -> bool:
        return self.tokens == (NULL_TOKEN,)


# building blocks ------------------------------------------------------------


def attention_probs(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Row-stochastic ``softmax(q k^T / sqrt(d))`` over the last two axes."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    return torch.softmax(torch.matmul(q, k.transpose(-1, -2)) * scale, dim=-1)


def attention(Q, K, V):
    """Scaled dot-product attention on plain ``(..., N, d)`` arrays/tensors."""
    Q, K, V = (torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x) for x in (Q, K, V))
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2]:
        raise ShapeError(f"inconsistent attention shapes {tuple(Q.shape)}, {tuple(K.shape)}, {tuple(V.shape)}")
    return torch.matmul(attention_probs(Q, K), V)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def positional_encoding_2d(size: int, dim: int) -> torch.Tensor:
    """Fixed sinusoidal 2D encoding, ``(size * size, dim)``; half the features per axis."""
    quarter = dim // 4
    freqs = torch.exp(-math.log(100.0) * torch.arange(quarter, dtype=torch.float64) / max(quarter, 1))
    pos = torch.arange(size, dtype=torch.float64)[:, None] * freqs[None]
    axis = torch.cat([torch.sin(pos), torch.cos(pos)], dim=-1)  # (size, dim/2)
    yy = axis[:, None, :].expand(size, size, -1)
    xx = axis[None, :, :].expand(size, size, -1)
    pe = torch.cat([yy, xx], dim=-1).reshape(size * size, -1)
    if pe.shape[1] < dim:
        pe = F.pad(pe, (0, dim - pe.shape[1]))
    return pe


class ResBlock(nn.Module):
    def __init__(self, c_in, c_out, time_dim, groups):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(time_dim, c_out)
        self.norm2 = nn.GroupNorm(groups, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else None

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + (x if self.skip is None else self.skip(x))


class AttentionBlock(nn.Module):
    """Pre-norm multi-head attention with residual; ``cross`` attends to text."""

    def __init__(self, block_id, channels, cfg: ModelConfig, cross: bool, size: int):
        super().__init__()
        self.block_id = block_id
        self.cross = cross
        self.heads = cfg.heads
        self.head_dim = cfg.head_dim
        ctx_dim = cfg.text_dim if cross else channels
        self.norm = nn.GroupNorm(cfg.norm_groups, channels)
        self.q = nn.Linear(channels, cfg.inner_dim, bias=False)
        self.k = nn.Linear(ctx_dim, cfg.inner_dim, bias=False)
        self.v = nn.Linear(ctx_dim, cfg.inner_dim, bias=False)
        self.out = nn.Linear(cfg.inner_dim, channels)
        if not cross:
            self.register_buffer("pos", positional_encoding_2d(size, channels).float(), persistent=False)

    def _proj(self, name, x, adapter):
        layer = getattr(self, name)
        y = F.linear(x, layer.weight)
        if adapter is not None:
            factors = adapter.lookup(f"{self.block_id}.{name}")
            if factors is not None:
                A, B, mult = factors
                y = y + mult * F.linear(F.linear(x, A), B)
        return y

    def _heads(self, x):
        b, n, _ = x.shape
        return x.reshape(b, n, self.heads, self.head_dim).transpose(1, 2).contiguous()

    def forward(self, x, text, adapter=None, hooks=None, layer=None):
        b, c, h, w = x.shape
        tokens = self.norm(x).reshape(b, c, h * w).transpose(1, 2)
        if self.cross:
            context = text
        else:
            tokens = tokens + self.pos.to(tokens.dtype)
            context = tokens
        q = self._heads(self._proj("q", tokens, adapter))
        k = self._heads(self._proj("k", context, adapter))
        v = self._heads(self._proj("v", context, adapter))
        probs = attention_probs(q, k)
        if hooks is not None and layer is not None and hasattr(hooks, "attention"):
            probs = hooks.attention(layer, "cross" if self.cross else "self", q, k, probs)
        out = torch.matmul(probs, v).transpose(1, 2).reshape(b, h * w, -1)
        out = self.out(out)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class Layer(nn.Module):
    """Residual block, self-attention block, cross-attention block."""

    def __init__(self, name, c_in, c_out, cfg: ModelConfig, size):
        super().__init__()
        self.res = ResBlock(c_in, c_out, cfg.time_dim, cfg.norm_groups)
        self.self_attn = AttentionBlock(f"{name}.self", c_out, cfg, cross=False, size=size)
        self.cross_attn = AttentionBlock(f"{name}.cross", c_out, cfg, cross=True, size=size)

    def forward(self, x, temb, text, adapter=None, hooks=None, layer=None):
        h = self.res(x, temb)
        if hooks is not None and layer is not None and hasattr(hooks, "feature"):
            h = hooks.feature(layer, h)
        h = self.self_attn(h, text, adapter, hooks, layer)
        return self.cross_attn(h, text, adapter, hooks, layer)


class UNet(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        c1, c2, c3 = cfg.channels
        s = cfg.latent_size
        self.token_embedding = nn.Embedding(cfg.vocab_size, cfg.text_dim)
        self.token_positions = nn.Parameter(torch.zeros(cfg.max_tokens, cfg.text_dim))
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_dim, cfg.time_dim), nn.SiLU(), nn.Linear(cfg.time_dim, cfg.time_dim)
        )
        self.conv_in = nn.Conv2d(cfg.latent_channels, c1, 3, padding=1)
        self.enc1 = Layer("enc1", c1, c1, cfg, s)
        self.down1 = nn.Conv2d(c1, c1, 3, stride=2, padding=1)
        self.enc2 = Layer("enc2", c1, c2, cfg, s // 2)
        self.down2 = nn.Conv2d(c2, c2, 3, stride=2, padding=1)
        self.enc3 = Layer("enc3", c2, c3, cfg, s // 4)
        # skips popped in reverse: enc3, down2, enc2, down1, enc1, conv_in
        self.dec = nn.ModuleList([
            Layer("dec1", c3 + c3, c3, cfg, s // 4),
            Layer("dec2", c3 + c2, c3, cfg, s // 4),
            Layer("dec3", c3 + c2, c2, cfg, s // 2),
            Layer("dec4", c2 + c1, c2, cfg, s // 2),
            Layer("dec5", c2 + c1, c1, cfg, s),
            Layer("dec6", c1 + c1, c1, cfg, s),
        ])
        self.up1 = nn.Conv2d(c3, c3, 3, padding=1)
        self.up2 = nn.Conv2d(c2, c2, 3, padding=1)
        self.norm_out = nn.GroupNorm(cfg.norm_groups, c1)
        self.conv_out = nn.Conv2d(c1, cfg.latent_channels, 3, padding=1)

    def init_weights(self, seed: int) -> "UNet":
        """Fan-in scaled Gaussian for every weight matrix/kernel, zero biases."""
        g = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name == "token_embedding.weight":
                    p.normal_(0.0, 1.0, generator=g)
                elif name == "token_positions":
                    p.normal_(0.0, 0.5, generator=g)
                elif p.ndim >= 2:
                    fan_in = p[0].numel()
                    p.normal_(0.0, 1.0 / math.sqrt(fan_in), generator=g)
                elif name.endswith("bias"):
                    p.zero_()
                else:  # norm scales
                    p.fill_(1.0)
        return self

    def embed_prompt(self, prompt) -> PromptEmbedding:
        ids = tokenize(prompt)
        idx = torch.tensor(ids, dtype=torch.long)
        vec = self.token_embedding(idx) + self.token_positions[: len(ids)]
        return PromptEmbedding(tuple(ids), vec)

    def forward(self, z, t, text, adapter=None, hooks=None):
        """``z``: (B, H, W, C); ``t``: (B,) ints; ``text``: (B, L, text_dim)."""
        x = z.permute(0, 3, 1, 2)
        temb = self.time_mlp(timestep_embedding(t, self.cfg.time_dim).to(z.dtype))
        h0 = self.conv_in(x)
        h1 = self.enc1(h0, temb, text, adapter)
        d1 = self.down1(h1)
        h2 = self.enc2(d1, temb, text, adapter)
        d2 = self.down2(h2)
        h3 = self.enc3(d2, temb, text, adapter)
        skips = [h0, h1, d1, h2, d2, h3]
        h = h3
        for i, layer in enumerate(self.dec, start=1):
            h = layer(torch.cat([h, skips.pop()], dim=1), temb, text, adapter, hooks, i)
            if i == 2:
                h = self.up1(F.interpolate(h, scale_factor=2, mode="nearest"))
            elif i == 4:
                h = self.up2(F.interpolate(h, scale_factor=2, mode="nearest"))
        out = self.conv_out(F.silu(self.norm_out(h)))
        return out.permute(0, 2, 3, 1)


def _as_text(model: UNet, prompt, batch: int, dtype) -> torch.Tensor:
    if isinstance(prompt, PromptEmbedding):
        vec = prompt.vectors
    elif torch.is_tensor(prompt):
        vec = prompt
    else:
        vec = model.embed_prompt(prompt).vectors
    if vec.ndim == 2:
        vec = vec.unsqueeze(0).expand(batch, -1, -1)
    return vec.to(dtype)


def unet_forward(model: UNet, z_t, t, prompt, hooks=None, adapter=None) -> torch.Tensor:
    """Predict noise for ``z_t`` (``(H, W, C)`` or ``(B, H, W, C)``), preserving layout."""
    z = torch.as_tensor(z_t)
    single = z.ndim == 3
    if single:
        z = z.unsqueeze(0)
    cfg = model.cfg
    expect = (cfg.latent_size, cfg.latent_size, cfg.latent_channels)
    if tuple(z.shape[1:]) != expect:
        raise ShapeError(f"expected latent shape {expect}, got {tuple(z.shape[1:])}")
    tt = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    if tt.numel() == 1:
        tt = tt.expand(z.shape[0])
    text = _as_text(model, prompt, z.shape[0], z.dtype)
    eps = model(z, tt, text, adapter=adapter, hooks=hooks)
    return eps[0] if single else eps
