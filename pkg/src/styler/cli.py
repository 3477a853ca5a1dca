"""``styler <command> --config <path> [--preset fixture] [--out <dir>]``.

Each run validates its JSON config completely before doing any work, writes
its artifacts into one output directory and finishes with ``manifest.json``
(resolved config, seeds, input and output hashes, timings). ``styler
reproduce --config <run>/manifest.json`` re-executes a run and checks that
every output hash matches.

Errors go to stderr as one JSON line ``{"kind": ..., "message": ...}``;
exit codes are 0 ok, 2 config, 3 plan, 4 numeric, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from . import __version__, presets
from .analysis import FeatureStudyConfig, SimilarityReport, case_similarities, extract_features, pca_project, trajectory
from .codec import decode
from .composition import RegionMask, SpatialEntry, TemporalEntry, check_spatial, check_temporal
from .composition import lora_switch_denoise, masked_multi_lora_denoise
from .data import DatasetConfig, read_mask_png, read_png, sample_images, write_png
from .errors import ConfigError, NumericError, StylerError
from .injection import InjectionConfig, capture_trace, guided_denoise
from .lora import AdaptedModel, load_adapter, save_adapter, train_lora
from .model import STYLE_TOKENS, VOCAB, tokenize
from .schedule import SamplingPlan
from .seeding import derive_seed
from .serialization import dump_json, sha256_bytes, sha256_file
from .training import load_checkpoint, save_checkpoint, smoothed, train_base


class ReproducibilityError(StylerError):
    kind = "reproducibility"


# schemas ----------------------------------------------------------------------

_LAYERS = {"type": "array", "items": {"type": "integer", "minimum": 1, "maximum": 6}, "uniqueItems": True}
_NONNEG = {"type": "integer", "minimum": 0}
_PROMPT = {"type": "string", "maxLength": 200}
_IMAGE = {
    "oneOf": [
        {"type": "string", "minLength": 1},
        {
            "type": "object",
            "properties": {
                "seed": _NONNEG,
                "index": _NONNEG,
                "style": {"type": ["string", "null"], "enum": [None, "stripes", "invert", "saturate"]},
            },
            "required": ["seed"],
            "additionalProperties": False,
        },
    ]
}
_IMAGES = {
    "oneOf": [
        {"type": "array", "items": {"type": "string", "minLength": 1}, "minItems": 1},
        {
            "type": "object",
            "properties": {"seed": _NONNEG, "count": {"type": "integer", "minimum": 1, "maximum": 1000},
                           "style": {"type": ["string", "null"], "enum": [None, "stripes", "invert", "saturate"]}},
            "required": ["seed", "count"],
            "additionalProperties": False,
        },
    ]
}
_INJECTION = {
    "type": "object",
    "properties": {
        "feature_layers": _LAYERS,
        "feature_steps": _NONNEG,
        "attention_layers": _LAYERS,
        "attention_full_steps": _NONNEG,
        "attention_mode": {"enum": ["partial", "full", "adaptive"]},
        "guidance_scale": {"type": "number", "minimum": 1},
        "cross_attention_layers": _LAYERS,
        "inversion_max_iter": _NONNEG,
        "inversion_tol": {"type": "number", "minimum": 0},
    },
    "additionalProperties": False,
}
_SAMPLING = {"num_steps": {"type": "integer", "minimum": 2, "maximum": 1000}, "seed": _NONNEG,
             "injection": _INJECTION}
_COMMON = {"out": {"type": "string", "minLength": 1}}
_PATH = {"type": "string", "minLength": 1}
_ADAPTER = {"type": ["string", "null"], "minLength": 1}


def _schema(props: dict, required=()) -> dict:
    return {"type": "object", "properties": {**_COMMON, **props}, "required": list(required),
            "additionalProperties": False}


SCHEMAS = {
    "train-base": _schema({
        "dataset": {"type": "object"},
        "steps": _NONNEG,
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "seed": _NONNEG,
        "batch_size": {"type": "integer", "minimum": 1},
    }),
    "train-lora": _schema({
        "base": _PATH,
        "style_image": _IMAGE,
        "prompt": _PROMPT,
        "steps": _NONNEG,
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "seed": _NONNEG,
        "rank": {"type": "integer", "minimum": 1},
        "scale": {"type": "number"},
        "weight_decay": {"type": "number", "minimum": 0},
        "augment": {"type": "boolean"},
    }, required=["style_image", "prompt"]),
    "transfer": _schema({
        "base": _PATH,
        "adapter": _ADAPTER,
        "content_image": _IMAGE,
        "prompt": _PROMPT,
        **_SAMPLING,
    }, required=["content_image"]),
    "transfer-masked": _schema({
        "base": _PATH,
        "content_image": _IMAGE,
        "regions": {"type": "array", "items": {
            "type": "object",
            "properties": {"mask": _PATH, "adapter": _ADAPTER, "prompt": _PROMPT},
            "required": ["mask", "adapter", "prompt"],
            "additionalProperties": False,
        }},
        "background_prompt": _PROMPT,
        "blend": {"enum": ["latent", "eps"]},
        **_SAMPLING,
    }, required=["content_image", "regions"]),
    "transfer-multistyle": _schema({
        "base": _PATH,
        "content_image": _IMAGE,
        "plans": {"type": "array", "minItems": 1, "items": {
            "type": "object",
            "properties": {
                "name": {"type": "string", "pattern": "^[A-Za-z0-9_+-]+$"},
                "ranges": {"type": "array", "items": {
                    "type": "object",
                    "properties": {"adapter": _ADAPTER, "prompt": _PROMPT, "start": _NONNEG, "end": _NONNEG},
                    "required": ["adapter", "prompt", "start", "end"],
                    "additionalProperties": False,
                }},
            },
            "required": ["name", "ranges"],
            "additionalProperties": False,
        }},
        **_SAMPLING,
    }, required=["content_image", "plans"]),
    "analyze-features": _schema({
        "base": _PATH,
        "adapter": _ADAPTER,
        "in_domain": _IMAGES,
        "out_of_domain": _IMAGES,
        "prompt": _PROMPT,
        "fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "layers": _LAYERS,
        "k": {"type": "integer", "minimum": 1},
        "mode": {"enum": ["flattened", "per-location"]},
        "num_steps": {"type": "integer", "minimum": 2, "maximum": 1000},
    }, required=["adapter", "in_domain"]),
}
COMMANDS = tuple(SCHEMAS) + ("reproduce",)

DEFAULTS = {
    "train-base": {"dataset": {}, "steps": 3000, "lr": 1e-3, "seed": 7, "batch_size": 8},
    "train-lora": {"steps": 200, "lr": 2e-4, "seed": 11, "rank": 16, "scale": 1.0, "weight_decay": 0.01,
                   "augment": False},
    "transfer": {"adapter": None, "prompt": "", "num_steps": 50, "seed": 0, "injection": {}},
    "transfer-masked": {"background_prompt": "", "blend": "latent", "num_steps": 50, "seed": 0, "injection": {}},
    "transfer-multistyle": {"num_steps": 50, "seed": 0, "injection": {}},
    "analyze-features": {"out_of_domain": None, "prompt": "", "fraction": 0.5, "layers": [1, 2, 3, 4, 5, 6],
                         "k": 3, "mode": "flattened", "num_steps": 50},
}


def _fixture_pins(command: str, config: dict) -> dict:
    """Values the fixture preset forces, whatever the config says."""
    if command == "train-base":
        return dict(presets.FIXTURE_BASE)
    if command == "train-lora":
        style = next((s for s, v in presets.FIXTURE_STYLES.items() if v["prompt"].split()[0] in config["prompt"]),
                     "stripes")
        return {**presets.FIXTURE_LORA, "seed": presets.FIXTURE_STYLES[style]["seed"]}
    if command in ("transfer", "transfer-masked", "transfer-multistyle", "analyze-features"):
        return {"num_steps": presets.FIXTURE_NUM_STEPS}
    return {}


# config loading -----------------------------------------------------------------


def _read_json(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def validate(command: str, config) -> None:
    try:
        jsonschema.validate(config, SCHEMAS[command])
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{command} config invalid at {where}: {exc.message}") from None


def _adapter_refs(command: str, cfg: dict) -> list:
    if command in ("transfer", "analyze-features"):
        return [cfg.get("adapter")]
    if command == "transfer-masked":
        return [r["adapter"] for r in cfg["regions"]]
    if command == "transfer-multistyle":
        return [r["adapter"] for p in cfg["plans"] for r in p["ranges"]]
    return []


def resolve(command: str, config: dict, preset: str | None) -> dict:
    """Validated config with defaults (and preset pins) filled in; no side effects."""
    validate(command, config)
    cfg = {**DEFAULTS.get(command, {}), **config}
    if preset == "fixture":
        cfg.update(_fixture_pins(command, cfg))
    elif preset is not None:
        raise ConfigError(f"unknown preset {preset!r}")
    if command == "train-base":
        DatasetConfig.from_dict(cfg["dataset"])
    if command in ("transfer", "transfer-masked", "transfer-multistyle"):
        inj = InjectionConfig(**cfg["injection"])
        inj.check(cfg["num_steps"])
        cfg["injection"] = inj.to_dict()
    if command == "analyze-features":
        FeatureStudyConfig(fraction=cfg["fraction"], layers=tuple(cfg["layers"]), k=cfg["k"], mode=cfg["mode"])
    if command != "train-base" and "base" not in cfg and preset != "fixture":
        raise ConfigError("'base' checkpoint path is required (or use --preset fixture)")
    for key in ("prompt", "background_prompt"):
        if key in cfg:
            _check_prompt_text(cfg[key])
    for ref in _adapter_refs(command, cfg):
        if isinstance(ref, str) and ref.startswith("fixture:"):
            if preset != "fixture":
                raise ConfigError(f"adapter {ref!r} needs --preset fixture")
            if ref[len("fixture:"):] not in presets.FIXTURE_STYLES:
                raise ConfigError(f"unknown fixture adapter {ref!r}; choose from {sorted(presets.FIXTURE_STYLES)}")
    _check_inputs_exist(command, cfg)
    _check_plans(command, cfg)
    return cfg


def _check_plans(command: str, cfg: dict) -> None:
    if command == "train-lora" and not any(VOCAB[i] in STYLE_TOKENS for i in tokenize(cfg["prompt"])):
        raise ConfigError(f"prompt {cfg['prompt']!r} has no style trigger token {STYLE_TOKENS}")
    if command == "transfer-masked":
        check_spatial([SpatialEntry(_load_mask(r["mask"]), None, "") for r in cfg["regions"]])
    if command == "transfer-multistyle":
        for p in cfg["plans"]:
            try:
                check_temporal([TemporalEntry(None, "", r["start"], r["end"]) for r in p["ranges"]], cfg["num_steps"])
            except StylerError as exc:
                raise type(exc)(f"plan {p['name']!r}: {exc}") from None


def _preflight(command: str, cfg: dict) -> None:
    """Load every input once so that unreadable or mismatched files fail before any output is written."""
    if command == "train-base":
        return
    base = load_checkpoint(cfg["base"])
    adapters = _Adapters(base)
    for ref in _adapter_refs(command, cfg):
        adapters(ref)
    for key in ("style_image", "content_image"):
        if key in cfg:
            _load_image(cfg[key])
    for key in ("in_domain", "out_of_domain"):
        if isinstance(cfg.get(key), list):
            _load_images(cfg[key])
    pairs = []
    if command in ("transfer", "analyze-features"):
        pairs = [(cfg["adapter"], cfg["prompt"])]
    elif command == "transfer-masked":
        pairs = [(r["adapter"], r["prompt"]) for r in cfg["regions"]]
    elif command == "transfer-multistyle":
        pairs = [(r["adapter"], r["prompt"]) for p in cfg["plans"] for r in p["ranges"]]
    for ref, prompt in pairs:
        adapter = adapters(ref)
        if adapter is not None and command != "analyze-features" and adapter.style_token is not None \
                and adapter.style_token not in tokenize(prompt):
            raise ConfigError(f"prompt {prompt!r} lacks the style token {VOCAB[adapter.style_token]} of {ref}")


def _check_prompt_text(text: str) -> None:
    tokenize(text)


def _input_paths(command: str, cfg: dict) -> list:
    paths = []
    if isinstance(cfg.get("base"), str):
        paths.append(cfg["base"])
    for key in ("style_image", "content_image"):
        if isinstance(cfg.get(key), str):
            paths.append(cfg[key])
    for key in ("in_domain", "out_of_domain"):
        if isinstance(cfg.get(key), list):
            paths.extend(cfg[key])
    if command == "transfer-masked":
        paths.extend(r["mask"] for r in cfg["regions"])
    paths.extend(r for r in _adapter_refs(command, cfg) if isinstance(r, str) and not r.startswith("fixture:"))
    return paths


def _check_inputs_exist(command: str, cfg: dict) -> None:
    for p in _input_paths(command, cfg):
        if not Path(p).exists():
            raise ConfigError(f"input not found: {p}")


def _materialize_fixtures(command: str, cfg: dict) -> dict:
    """Replace implicit fixture artifacts by concrete cache paths (training them if needed)."""
    cfg = json.loads(json.dumps(cfg))
    if command != "train-base" and "base" not in cfg:
        presets.fixture_base()
        cfg["base"] = str(presets.base_dir())

    def fix(ref):
        if isinstance(ref, str) and ref.startswith("fixture:"):
            style = ref[len("fixture:"):]
            presets.fixture_adapter(style)
            return str(presets.adapter_dir(style))
        return ref

    if command in ("transfer", "analyze-features"):
        cfg["adapter"] = fix(cfg.get("adapter"))
    elif command == "transfer-masked":
        for r in cfg["regions"]:
            r["adapter"] = fix(r["adapter"])
    elif command == "transfer-multistyle":
        for p in cfg["plans"]:
            for r in p["ranges"]:
                r["adapter"] = fix(r["adapter"])
    return cfg


# io helpers -----------------------------------------------------------------------


def _hash_input(path) -> str:
    p = Path(path)
    if p.is_dir():
        parts = [f"{f.name}:{sha256_file(f)}" for f in sorted(p.iterdir()) if f.is_file()]
        return sha256_bytes("\n".join(parts).encode())
    return sha256_file(p)


def _load_image(src):
    if isinstance(src, str):
        try:
            return read_png(src)
        except (UnidentifiedImageError, OSError) as exc:
            raise ConfigError(f"cannot read image {src}: {exc}") from None
    index = src.get("index", 0)
    imgs, _ = sample_images(DatasetConfig(seed=src["seed"], style=src.get("style")), count=index + 1)
    return imgs[index]


def _load_images(src) -> list:
    if isinstance(src, list):
        return [_load_image(p) for p in src]
    return list(sample_images(DatasetConfig(seed=src["seed"], style=src.get("style")), count=src["count"])[0])


def _load_mask(path) -> RegionMask:
    try:
        return RegionMask(read_mask_png(path), name=str(path))
    except (UnidentifiedImageError, OSError) as exc:
        raise ConfigError(f"cannot read mask {path}: {exc}") from None


class _Adapters:
    def __init__(self, base):
        self.base = base
        self.cache = {}

    def __call__(self, path):
        if path is None:
            return None
        if path not in self.cache:
            self.cache[path] = load_adapter(path, self.base)
        return self.cache[path]


def _decode(z) -> np.ndarray:
    if not torch.isfinite(z).all():
        raise NumericError("denoised latent contains non-finite values")
    return decode(z.numpy())


class Run:
    """Bookkeeping for one command execution."""

    def __init__(self, command: str, cfg: dict, out: Path, preset):
        self.command = command
        self.cfg = cfg
        self.out = out
        self.preset = preset
        self.timings = {}
        self.seeds = {}
        self.outputs = []
        self._t = time.perf_counter()

    def lap(self, stage: str) -> None:
        now = time.perf_counter()
        self.timings[stage] = round(self.timings.get(stage, 0.0) + now - self._t, 6)
        self._t = now

    def seed(self, root: int, label: str) -> None:
        self.seeds[label] = derive_seed(root, label)

    def png(self, name: str, img) -> None:
        write_png(self.out / name, img)
        self.outputs.append(name)

    def json(self, name: str, obj) -> None:
        (self.out / name).write_text(dump_json(obj))
        self.outputs.append(name)

    def text(self, name: str, text: str) -> None:
        (self.out / name).write_text(text)
        self.outputs.append(name)

    def tree(self, name: str) -> None:
        for f in sorted((self.out / name).iterdir()):
            self.outputs.append(f"{name}/{f.name}")

    def manifest(self) -> dict:
        return {
            "tool": "styler",
            "version": __version__,
            "command": self.command,
            "preset": self.preset,
            "config": self.cfg,
            "seeds": self.seeds,
            "inputs": {p: _hash_input(p) for p in _input_paths(self.command, self.cfg)},
            "outputs": {name: sha256_file(self.out / name) for name in sorted(self.outputs)},
            "timings": self.timings,
            "environment": {
                "python": platform.python_version(),
                "torch": torch.__version__,
                "numpy": np.__version__,
                "threads": torch.get_num_threads(),
            },
        }


# commands -----------------------------------------------------------------------


def cmd_train_base(run: Run) -> None:
    cfg = run.cfg
    for label in ("base/init", "base/dataset", "base/batches"):
        run.seed(cfg["seed"], label)
    model, losses = train_base(DatasetConfig.from_dict(cfg["dataset"]), steps=cfg["steps"], lr=cfg["lr"],
                               seed=cfg["seed"], batch_size=cfg["batch_size"], log_every=0)
    run.lap("train")
    save_checkpoint(model, run.out / "checkpoint", {"seed": cfg["seed"], "steps": cfg["steps"]})
    run.tree("checkpoint")
    first, last = smoothed(losses) if losses else (None, None)
    run.json("losses.json", {"losses": losses, "smoothed_first": first, "smoothed_last": last})
    run.lap("write")


def cmd_train_lora(run: Run) -> None:
    cfg = run.cfg
    base = load_checkpoint(cfg["base"])
    style = _load_image(cfg["style_image"])
    run.lap("load")
    for label in ("lora/init", "lora/steps"):
        run.seed(cfg["seed"], label)
    adapter, losses = train_lora(base, style, cfg["prompt"], steps=cfg["steps"], lr=cfg["lr"], seed=cfg["seed"],
                                 rank=cfg["rank"], scale=cfg["scale"], weight_decay=cfg["weight_decay"],
                                 augment=cfg["augment"])
    run.lap("train")
    save_adapter(adapter, run.out / "adapter")
    run.tree("adapter")
    n = min(20, len(losses))
    summary = {"losses": losses,
               "first20_mean": float(np.mean(losses[:n])) if n else None,
               "last20_mean": float(np.mean(losses[-n:])) if n else None}
    run.json("losses.json", summary)
    run.lap("write")


def _prepare(run: Run):
    cfg = run.cfg
    base = load_checkpoint(cfg["base"])
    content = _load_image(cfg["content_image"])
    plan = SamplingPlan.uniform(1000, cfg["num_steps"], seed=cfg["seed"])
    inj = InjectionConfig(**cfg["injection"])
    run.seeds["plan"] = cfg["seed"]  # sampling is deterministic; the seed only tags the plan
    run.lap("load")
    trace = capture_trace(base, content, plan, inj)
    run.lap("capture")
    run.png("reconstruction.png", _decode(trace.replay_final))
    return base, plan, inj, trace


def cmd_transfer(run: Run) -> None:
    cfg = run.cfg
    base, plan, inj, trace = _prepare(run)
    adapter = _Adapters(base)(cfg["adapter"])
    z = guided_denoise(AdaptedModel(base, adapter), trace, cfg["prompt"], plan, inj)
    run.lap("denoise")
    run.png("output.png", _decode(z))
    run.lap("write")


def cmd_transfer_masked(run: Run) -> None:
    cfg = run.cfg
    masks = [_load_mask(r["mask"]) for r in cfg["regions"]]
    base, plan, inj, trace = _prepare(run)
    adapters = _Adapters(base)
    entries = [SpatialEntry(m, adapters(r["adapter"]), r["prompt"]) for m, r in zip(masks, cfg["regions"])]
    z = masked_multi_lora_denoise(base, entries, trace, plan, inj, background_prompt=cfg["background_prompt"],
                                  blend=cfg["blend"])
    run.lap("denoise")
    run.png("output.png", _decode(z))
    run.lap("write")


def cmd_transfer_multistyle(run: Run) -> None:
    cfg = run.cfg
    base, plan, inj, trace = _prepare(run)
    adapters = _Adapters(base)
    singles = {}
    for i, p in enumerate(cfg["plans"]):
        entries = [TemporalEntry(adapters(r["adapter"]), r["prompt"], r["start"], r["end"]) for r in p["ranges"]]
        out = _decode(lora_switch_denoise(base, entries, trace, plan, inj))
        run.png(f"plan-{i}-{p['name']}.png", out)
        if i == 0:
            run.png("output.png", out)
        for r in p["ranges"]:
            singles.setdefault((r["adapter"], r["prompt"]), None)
    run.lap("denoise")
    for j, (path, prompt) in enumerate(singles):
        z = guided_denoise(AdaptedModel(base, adapters(path)), trace, prompt, plan, inj)
        run.png(f"single-{j}.png", _decode(z))
    run.lap("baselines")


def _pca_tile(field, size: int = 16) -> np.ndarray:
    img, _ = pca_project(field, k=3)
    rep = size // img.shape[0]
    return np.kron(img, np.ones((rep, rep, 1)))


def cmd_analyze_features(run: Run) -> None:
    cfg = run.cfg
    base = load_checkpoint(cfg["base"])
    adapter = _Adapters(base)(cfg["adapter"])
    adapted = AdaptedModel(base, adapter)
    study = FeatureStudyConfig(fraction=cfg["fraction"], layers=tuple(cfg["layers"]), k=cfg["k"],
                               prompt=cfg["prompt"], mode=cfg["mode"])
    plan = SamplingPlan.uniform(1000, cfg["num_steps"])
    groups = {"in_domain": _load_images(cfg["in_domain"])}
    if cfg["out_of_domain"] is not None:
        groups["out_of_domain"] = _load_images(cfg["out_of_domain"])
    run.lap("load")
    report = SimilarityReport(study.layers)
    per_case = {}
    for name, images in groups.items():
        rows = case_similarities(base, adapted, images, plan, study)
        report.add_row(name, rows)
        per_case[name] = [{str(k): v for k, v in r.items()} for r in rows]
    run.lap("similarity")
    run.json("report.json", {**report.to_dict(), "per_case": per_case, "study_step": study.step(plan.num_steps)})
    run.text("report.txt", report.to_table())
    # PCA grid: one row per (group, model) for each group's first case, one column per layer
    rows = []
    u = study.step(plan.num_steps)
    for images in groups.values():
        traj = trajectory(base, images[0], plan, upto=u)
        for model in (base, adapted):
            feats = extract_features(model, traj, plan, study)
            rows.append(np.concatenate([_pca_tile(feats[layer]) for layer in study.layers], axis=1))
    grid = np.concatenate(rows, axis=0)
    Image.fromarray(np.round(grid * 255).astype(np.uint8)).save(run.out / "output.png", format="PNG")
    run.outputs.append("output.png")
    run.lap("pca")


HANDLERS = {
    "train-base": cmd_train_base,
    "train-lora": cmd_train_lora,
    "transfer": cmd_transfer,
    "transfer-masked": cmd_transfer_masked,
    "transfer-multistyle": cmd_transfer_multistyle,
    "analyze-features": cmd_analyze_features,
}


# driver ------------------------------------------------------------------------


def _default_out(command: str, cfg: dict) -> Path:
    key = json.dumps(cfg, sort_keys=True).encode()
    return Path("styler-runs") / f"{command}-{sha256_bytes(key)[:12]}"


def execute(command: str, config: dict, preset=None, out=None) -> tuple[Path, dict]:
    """Validate, run and write the manifest. Returns ``(run_dir, manifest)``."""
    cfg = resolve(command, config, preset)
    out_dir = Path(out or cfg.get("out") or _default_out(command, cfg))
    if out_dir.exists() and any(out_dir.iterdir()):
        raise ConfigError(f"output directory {out_dir} is not empty")
    if preset == "fixture":
        cfg = _materialize_fixtures(command, cfg)
    _preflight(command, cfg)
    cfg["out"] = str(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    run = Run(command, cfg, out_dir, preset)
    HANDLERS[command](run)
    manifest = run.manifest()
    (out_dir / "manifest.json").write_text(dump_json(manifest))
    return out_dir, manifest


def reproduce(manifest_path, out=None) -> tuple[Path, dict]:
    src = _read_json(manifest_path)
    if not isinstance(src, dict) or src.get("tool") != "styler" or src.get("command") not in SCHEMAS:
        raise ConfigError(f"{manifest_path} is not a styler run manifest")
    for path, digest in src.get("inputs", {}).items():
        if not Path(path).exists() or _hash_input(path) != digest:
            raise ConfigError(f"input {path} changed since the recorded run")
    cfg = dict(src["config"])
    cfg.pop("out", None)
    out_dir = Path(out) if out else Path(src["config"]["out"] + "-reproduced")
    out_dir, manifest = execute(src["command"], cfg, None, out_dir)
    mismatched = sorted(k for k in set(src["outputs"]) | set(manifest["outputs"])
                        if src["outputs"].get(k) != manifest["outputs"].get(k))
    if mismatched:
        raise ReproducibilityError(f"outputs differ from {manifest_path}: {mismatched}")
    return out_dir, manifest


def _apply_threads() -> None:
    value = os.environ.get("STYLER_THREADS")
    if value is None:
        return
    try:
        n = int(value)
    except ValueError:
        n = 0
    if n < 1:
        raise ConfigError(f"STYLER_THREADS must be a positive integer, got {value!r}")
    torch.set_num_threads(n)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="styler", description="Cross-adapter style transfer on a toy diffusion model.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON run config (for 'reproduce': a run manifest)")
    p.add_argument("--preset", choices=["fixture"], help="pin seeds and step counts to the fixture values")
    p.add_argument("--out", help="output directory (must be empty or absent)")
    p.add_argument("--version", action="version", version=f"styler {__version__}")
    return p


def _fail(exc: Exception) -> int:
    kind = getattr(exc, "kind", "internal")
    code = getattr(exc, "exit_code", 1)
    sys.stderr.write(json.dumps({"kind": kind, "message": str(exc), "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _apply_threads()
        if args.command == "reproduce":
            if args.preset:
                raise ConfigError("reproduce takes its settings from the manifest; drop --preset")
            out_dir, manifest = reproduce(args.config, args.out)
        else:
            out_dir, manifest = execute(args.command, _read_json(args.config), args.preset, args.out)
    except StylerError as exc:
        return _fail(exc)
    except Exception as exc:  # noqa: BLE001 - last-resort report in the same format
        return _fail(exc)
    print(json.dumps({"out": str(out_dir), "outputs": manifest["outputs"]}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
