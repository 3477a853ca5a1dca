"""Decoder feature study: PCA projections and base-vs-adapter cosine similarity."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .codec import encode
from .errors import ConfigError
from .injection import ALL_LAYERS, CaptureHooks, invert
from .model import NULL_TOKEN, UNet, unet_forward
from .schedule import NoiseSchedule, SamplingPlan, ddim_denoise_step, make_schedule


@dataclass(frozen=True)
class FeatureStudyConfig:
    fraction: float = 0.5
    layers: tuple = ALL_LAYERS
    k: int = 3
    prompt: object = (NULL_TOKEN,)
    mode: str = "flattened"  # or "per-location"

    def __post_init__(self):
        if not 0 < self.fraction < 1:
            raise ConfigError("fraction must lie in (0, 1)")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        layers = tuple(sorted(set(int(x) for x in self.layers)))
        if not layers or any(x not in ALL_LAYERS for x in layers):
            raise ConfigError(f"layers must be a non-empty subset of {ALL_LAYERS}")
        object.__setattr__(self, "layers", layers)
        if self.mode not in ("flattened", "per-location"):
            raise ConfigError("mode must be 'flattened' or 'per-location'")

    def step(self, num_steps: int) -> int:
        return min(num_steps - 1, int(round(self.fraction * num_steps)))


@torch.no_grad()
def trajectory(base: UNet, image, plan: SamplingPlan, upto: int | None = None,
               schedule: NoiseSchedule | None = None, max_iter: int = 0, tol: float = 0.0) -> list:
    """Latents entering each unconditional replay step after DDIM inversion of ``image``."""
    schedule = schedule or make_schedule()
    null = base.embed_prompt([NULL_TOKEN])
    z = invert(base, encode(image), plan, schedule, max_iter, tol, null)
    out = [z]
    stop = plan.num_steps if upto is None else upto
    for u in range(stop):
        t, t_prev = plan.step_pair(u)
        z = ddim_denoise_step(z, unet_forward(base, z, t, null), t, t_prev, schedule)
        out.append(z)
    return out


def _split(model):
    if isinstance(model, UNet):
        return model, None
    return model.base, model.adapter


@torch.no_grad()
def extract_features(model, latent_trajectory, plan: SamplingPlan, cfg: FeatureStudyConfig = FeatureStudyConfig()):
    """``{layer: (H, W, C) float64}`` residual-block outputs at the study step."""
    base, adapter = _split(model)
    u = cfg.step(plan.num_steps)
    if len(latent_trajectory) <= u:
        raise ConfigError(f"trajectory has {len(latent_trajectory)} latents, study step is {u}")
    hooks = CaptureHooks(feature_layers=cfg.layers)
    unet_forward(base, latent_trajectory[u], int(plan.timesteps[u]), base.embed_prompt(cfg.prompt),
                 hooks=hooks, adapter=adapter)
    return {layer: hooks.features[layer][0].permute(1, 2, 0).double().numpy() for layer in cfg.layers}


def pca_project(features, k: int = 3):
    """Mean-centred PCA over spatial locations.

    ``features`` is ``(H, W, C)`` or ``(N, C)``. Returns ``(images, ratios)``
    where ``images`` holds the top-``k`` scores rescaled per component to
    [0, 1] (same leading shape as the input, ``k`` channels) and ``ratios``
    the explained-variance fractions. Component signs are fixed so the
    largest-magnitude loading is positive.
    """
    x = np.asarray(features, dtype=np.float64)
    lead = x.shape[:-1]
    x = x.reshape(-1, x.shape[-1])
    if x.shape[0] < k:
        raise ConfigError(f"need at least k={k} spatial samples, got {x.shape[0]}")
    xc = x - x.mean(axis=0)
    total = float(np.sum(xc ** 2))
    if total <= 1e-24:
        warnings.warn("constant feature field; emitting flat component images", RuntimeWarning, stacklevel=2)
        return np.zeros((*lead, k)), np.zeros(k)
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    comps = np.zeros((k, x.shape[1]))
    var = np.zeros(k)
    n = min(k, vt.shape[0])
    comps[:n] = vt[:n]
    var[:n] = s[:n] ** 2
    for i in range(n):
        if comps[i, np.argmax(np.abs(comps[i]))] < 0:
            comps[i] = -comps[i]
    scores = xc @ comps.T
    lo, hi = scores.min(axis=0), scores.max(axis=0)
    span = np.where(hi - lo > 1e-12, hi - lo, 1.0)
    images = ((scores - lo) / span).reshape(*lead, k)
    return images, var / total


def pca_components(features):
    """All principal directions and variances (used for reconstructions)."""
    x = np.asarray(features, dtype=np.float64).reshape(-1, np.shape(features)[-1])
    mean = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    return mean, vt, s ** 2


def cosine(a, b, mode: str = "flattened") -> float | None:
    """Cosine similarity of two ``(H, W, C)`` fields; ``None`` if either is all-zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.array_equal(a, b) and np.any(a):
        return 1.0  # exact, where dot/(|a||b|) can round to 1 - ulp
    if mode == "flattened":
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0 or nb == 0:
            return None
        return float(np.clip(np.dot(a.ravel(), b.ravel()) / (na * nb), -1.0, 1.0))
    a = a.reshape(-1, a.shape[-1])
    b = b.reshape(-1, b.shape[-1])
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    ok = (na > 0) & (nb > 0)
    if not ok.any():
        return None
    sims = np.sum(a[ok] * b[ok], axis=1) / (na[ok] * nb[ok])
    return float(np.clip(sims.mean(), -1.0, 1.0))


@dataclass
class SimilarityReport:
    layers: tuple
    means: dict = field(default_factory=dict)  # row name -> {layer: mean}
    counts: dict = field(default_factory=dict)  # row name -> number of cases used

    def add_row(self, name: str, per_case: list) -> None:
        """``per_case`` holds ``{layer: similarity or None}`` dicts."""
        row = {}
        for layer in self.layers:
            vals = [c[layer] for c in per_case if c.get(layer) is not None]
            row[layer] = float(np.mean(vals)) if vals else float("nan")
        used = sum(1 for c in per_case if all(c.get(layer) is not None for layer in self.layers))
        self.means[name] = row
        self.counts[name] = used

    def to_dict(self) -> dict:
        return {
            "layers": list(self.layers),
            "rows": {name: {str(k): v for k, v in row.items()} for name, row in self.means.items()},
            "counts": dict(self.counts),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        name_w = max([len("model pair")] + [len(n) for n in self.means])
        head = f"{'model pair':<{name_w}}  " + "  ".join(f"{'layer ' + str(layer):>9}" for layer in self.layers)
        lines = [head, "-" * len(head)]
        for name, row in self.means.items():
            lines.append(f"{name:<{name_w}}  " + "  ".join(f"{row[layer]:>9.4f}" for layer in self.layers))
        return "\n".join(lines) + "\n"


def case_similarities(model_a, model_b, case_images, plan: SamplingPlan, cfg: FeatureStudyConfig,
                      trajectory_model: UNet | None = None, schedule: NoiseSchedule | None = None):
    """Per-case ``{layer: cosine}`` at the study step of each case's replay."""
    traj_base = trajectory_model or _split(model_a)[0]
    u = cfg.step(plan.num_steps)
    out = []
    for i, img in enumerate(case_images):
        traj = trajectory(traj_base, img, plan, upto=u, schedule=schedule)
        fa = extract_features(model_a, traj, plan, cfg)
        fb = extract_features(model_b, traj, plan, cfg)
        sims = {layer: cosine(fa[layer], fb[layer], cfg.mode) for layer in cfg.layers}
        if any(v is None for v in sims.values()):
            warnings.warn(f"case {i}: zero feature vector, skipped", RuntimeWarning, stacklevel=2)
            continue
        out.append(sims)
    return out


def cosine_layers(model_a, model_b, case_images, plan: SamplingPlan, cfg: FeatureStudyConfig = FeatureStudyConfig(),
                  name: str = "A vs B", schedule: NoiseSchedule | None = None) -> SimilarityReport:
    report = SimilarityReport(cfg.layers)
    report.add_row(name, case_similarities(model_a, model_b, case_images, plan, cfg, schedule=schedule))
    return report
