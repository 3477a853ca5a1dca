"""Acceptance criteria, run against the fixture preset.

Each test is tagged with its criterion; the conftest prints one PASS/FAIL
line per criterion at the end of the run.
"""

import json

import numpy as np
import pytest
import torch
from gradcheck import lora_gradient_errors
from PIL import Image

import styler.injection as injection
from styler import cli, presets
from styler.codec import decode, encode
from styler.composition import (
    RegionMask,
    SpatialEntry,
    TemporalEntry,
    lora_switch_denoise,
    masked_multi_lora_denoise,
)
from styler.data import DatasetConfig, inversion_score, sample_images, stripe_score
from styler.injection import AttentionMode, InjectionConfig, guided_denoise, kappa
from styler.lora import AdaptedModel, init_lora
from styler.model import unet_forward
from styler.schedule import make_schedule

PROMPTS = {style: cfg["prompt"] for style, cfg in presets.FIXTURE_STYLES.items()}
REGIONS = {"left": slice(0, 12), "background": slice(12, 20), "right": slice(20, 32)}
OWN_REGION = {"stripes": "left", "invert": "right"}


def pixels(z):
    return decode(z.numpy())


def oracle(style, img, content, cols):
    return stripe_score(img, cols) if style == "stripes" else inversion_score(img, content, cols)


@pytest.mark.criterion(1, "codec exactness")
def test_codec_is_exact(measure):
    images, _ = sample_images(DatasetConfig(seed=2024), count=100)
    exact = sum(np.array_equal(decode(encode(img)), img) for img in images)
    measure("exact", f"{exact}/100")
    assert exact == 100


@pytest.mark.criterion(2, "DDIM round trip")
def test_round_trip(traces, contents, measure):
    latent = [(tr.replay_final - torch.as_tensor(encode(img))).abs().max().item() for tr, img in zip(traces, contents)]
    pixel = [float(np.abs(pixels(tr.replay_final) - img).max()) for tr, img in zip(traces, contents)]
    measure("max_latent_error", max(latent))
    measure("max_pixel_error", max(pixel))
    measure("latent_errors", latent)
    measure("pixel_errors", pixel)
    assert max(latent) <= 1e-2 and max(pixel) <= 1e-2


@pytest.mark.criterion(3, "schedule algebra")
def test_schedule_algebra():
    s = make_schedule()
    assert len(s.alpha_bars) == 1000
    for t in range(1000):
        acc = 1.0
        for a in (1.0 - s.betas[: t + 1]).tolist():
            acc *= a
        assert s.alpha_bars[t] == acc
    assert np.all(np.diff(s.alpha_bars) < 0)


@pytest.mark.criterion(4, "zero-LoRA identity")
def test_zero_lora_identity(fixture_base):
    g = torch.Generator().manual_seed(404)
    adapter = init_lora(fixture_base, rank=16, seed=9, scale=4.0, style_token="<sss>")
    adapted = AdaptedModel(fixture_base, adapter)
    words = ["", "<sss> style", "circle", "square image", "<ppp> style triangle shape"]
    with torch.no_grad():
        for i in range(20):
            z = torch.randn(16, 16, 12, generator=g)
            t = int(torch.randint(0, 1000, (1,), generator=g))
            prompt = words[i % len(words)]
            assert torch.equal(adapted(z, t, prompt), unet_forward(fixture_base, z, t, prompt))


@pytest.mark.criterion(5, "LoRA gradient check")
def test_gradient_check(measure):
    errors = lora_gradient_errors(count=60, seed=1)
    measure("max_relative_error", max(errors))
    assert len(errors) >= 50 and max(errors) <= 1e-4


@pytest.mark.criterion(6, "self-injection identity")
def test_self_injection_identity(fixture_base, traces, plan):
    zero = AdaptedModel(fixture_base, init_lora(fixture_base, seed=3))
    for tr in traces:
        assert torch.equal(guided_denoise(zero, tr, "", plan, InjectionConfig()), tr.replay_final)


@pytest.mark.criterion(7, "adaptive attention schedule")
def test_kappa_schedule(fixture_base, adapters, traces, plan, monkeypatch, measure):
    assert kappa(25, 25, 50) == 0.0
    values = [kappa(u, 25, 50) for u in range(25, 50)]
    assert all(b > a for a, b in zip(values, values[1:]))
    assert kappa(30, 25, 50) == 0.2

    deviations = []
    blend = injection.blend_attention

    def recording(a_src, a_lora, u, cfg, num_steps):
        out = blend(a_src, a_lora, u, cfg, num_steps)
        deviations.append((out.sum(-1) - 1).abs().max().item())
        return out

    monkeypatch.setattr(injection, "blend_attention", recording)
    guided_denoise(AdaptedModel(fixture_base, adapters["stripes"]), traces[0], PROMPTS["stripes"], plan,
                   InjectionConfig(attention_mode=AttentionMode.ADAPTIVE))
    measure("blend_calls", len(deviations))
    measure("max_row_sum_deviation", max(deviations))
    assert len(deviations) == plan.num_steps * len(InjectionConfig().attention_layers)
    assert max(deviations) <= 1e-5


@pytest.mark.criterion(8, "attention-mode ablation ordering")
def test_ablation_ordering(fixture_base, adapters, traces, contents, plan, measure):
    adapted = AdaptedModel(fixture_base, adapters["stripes"])
    distance, score = {}, {}
    for mode in AttentionMode:
        cfg = InjectionConfig(attention_mode=mode)
        outs = [pixels(guided_denoise(adapted, tr, PROMPTS["stripes"], plan, cfg)) for tr in traces[:5]]
        distance[mode] = float(np.mean([np.abs(o - c).mean() for o, c in zip(outs, contents[:5])]))
        score[mode] = float(np.mean([stripe_score(o) for o in outs]))
        measure(f"distance_{mode.value}", distance[mode])
        measure(f"stripe_{mode.value}", score[mode])
    F, A, P = AttentionMode.FULL, AttentionMode.ADAPTIVE, AttentionMode.PARTIAL
    assert distance[F] <= distance[A] <= distance[P]
    assert score[A] > score[F]


@pytest.fixture(scope="module")
def region_masks():
    return {style: RegionMask(presets.mask_image(style), style) for style in ("stripes", "invert")}


@pytest.mark.criterion(9, "mask semantics")
def test_mask_degenerate_identities(fixture_base, adapters, traces, plan, region_masks):
    tr = traces[0]
    empty = RegionMask(np.zeros((32, 32), np.uint8), "empty")
    full = RegionMask(np.ones((32, 32), np.uint8), "full")
    ad = adapters["stripes"]
    for blend in ("latent", "eps"):
        z = masked_multi_lora_denoise(fixture_base, [SpatialEntry(empty, ad, PROMPTS["stripes"])], tr, plan,
                                      blend=blend)
        assert torch.equal(z, tr.replay_final)
    z = masked_multi_lora_denoise(fixture_base, [SpatialEntry(full, ad, PROMPTS["stripes"])], tr, plan)
    assert torch.equal(z, guided_denoise(AdaptedModel(fixture_base, ad), tr, PROMPTS["stripes"], plan))


@pytest.mark.criterion(9, "mask semantics")
def test_mask_background_follows_base_branch(fixture_base, adapters, traces, plan, region_masks):
    entries = [SpatialEntry(region_masks[s], adapters[s], PROMPTS[s]) for s in ("stripes", "invert")]
    background = ~(region_masks["stripes"].latent.astype(bool) | region_masks["invert"].latent.astype(bool))
    assert background.sum() == 16 * 4
    steps = []

    def check_background(u, z_next, z_base, branches):
        steps.append(u)
        assert torch.equal(z_next[background], z_base[background])

    masked_multi_lora_denoise(fixture_base, entries, traces[0], plan, callback=check_background)
    assert steps == list(range(plan.num_steps))


@pytest.mark.criterion(9, "mask semantics")
def test_mask_region_oracles(fixture_base, adapters, traces, contents, plan, region_masks, measure):
    """A style fires in a region when the masked run reaches half its full-image score there."""
    entries = [SpatialEntry(region_masks[s], adapters[s], PROMPTS[s]) for s in ("stripes", "invert")]
    masked_scores = {s: {r: [] for r in REGIONS} for s in OWN_REGION}
    full_scores = {s: {r: [] for r in REGIONS} for s in OWN_REGION}
    for tr, content in zip(traces[:3], contents[:3]):
        out = pixels(masked_multi_lora_denoise(fixture_base, entries, tr, plan))
        for s in OWN_REGION:
            ref = pixels(guided_denoise(AdaptedModel(fixture_base, adapters[s]), tr, PROMPTS[s], plan))
            for r, cols in REGIONS.items():
                masked_scores[s][r].append(oracle(s, out, content, cols))
                full_scores[s][r].append(oracle(s, ref, content, cols))

    fired = {}
    for s in OWN_REGION:
        for r in REGIONS:
            m, f = float(np.mean(masked_scores[s][r])), float(np.mean(full_scores[s][r]))
            measure(f"{s}_{r}_masked", m)
            measure(f"{s}_{r}_full", f)
            fired[(s, r)] = m >= 0.5 * f
    wrong = [f"{s} in {r}" for (s, r), on in fired.items() if on != (r == OWN_REGION[s])]
    measure("misfires", wrong)
    assert not wrong, f"style oracle fires outside its own region (or not inside it): {wrong}"


@pytest.mark.criterion(10, "adapter switching")
def test_switch_single_range_and_order(fixture_base, adapters, traces, plan, measure):
    st, iv = adapters["stripes"], adapters["invert"]
    tr = traces[0]
    single = lora_switch_denoise(fixture_base, [TemporalEntry(st, PROMPTS["stripes"], 0, 50)], tr, plan)
    assert torch.equal(single, guided_denoise(AdaptedModel(fixture_base, st), tr, PROMPTS["stripes"], plan))
    diffs = []
    for tr in traces[:3]:
        ab = lora_switch_denoise(fixture_base, [TemporalEntry(st, PROMPTS["stripes"], 0, 30),
                                                TemporalEntry(iv, PROMPTS["invert"], 30, 50)], tr, plan)
        ba = lora_switch_denoise(fixture_base, [TemporalEntry(iv, PROMPTS["invert"], 0, 30),
                                                TemporalEntry(st, PROMPTS["stripes"], 30, 50)], tr, plan)
        diffs.append(float(np.abs(pixels(ab) - pixels(ba)).mean()))
    measure("min_ab_ba_difference", min(diffs))
    assert min(diffs) > 1e-3


def _save_png(path, img):
    Image.fromarray(np.round(img * 255).astype(np.uint8)).save(path)
    return str(path)


@pytest.mark.criterion(10, "adapter switching")
@pytest.mark.parametrize("ranges", [[(0, 20), (25, 50)], [(0, 30), (25, 50)]], ids=["gap", "overlap"])
def test_invalid_switch_plan_exit_code(tmp_path, capsys, ranges):
    content = _save_png(tmp_path / "content.png", presets.content_images(1)[0])
    styles = ["stripes", "invert"]
    cfg = {"content_image": content, "plans": [{"name": "bad", "ranges": [
        {"adapter": f"fixture:{s}", "prompt": PROMPTS[s], "start": a, "end": b} for s, (a, b) in zip(styles, ranges)
    ]}]}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    code = cli.main(["transfer-multistyle", "--config", str(tmp_path / "c.json"), "--preset", "fixture",
                     "--out", str(tmp_path / "run")])
    err = json.loads(capsys.readouterr().err.strip())
    assert code == 3 and err["kind"] == "plan"
    assert not (tmp_path / "run").exists()


@pytest.mark.criterion(11, "feature-consistency study")
def test_feature_study(fixture_base, adapters, plan, measure):
    from styler.analysis import FeatureStudyConfig, cosine_layers

    cfg = FeatureStudyConfig()
    adapted = AdaptedModel(fixture_base, adapters["stripes"])
    inside = cosine_layers(fixture_base, adapted, presets.feature_study_images("stripes"), plan, cfg, "in")
    outside = cosine_layers(fixture_base, adapted, presets.feature_study_images("invert"), plan, cfg, "out")
    m_in, m_out = inside.means["in"], outside.means["out"]
    for layer in cfg.layers:
        measure(f"in_layer{layer}", m_in[layer])
        measure(f"out_layer{layer}", m_out[layer])
    assert all(m_in[layer] >= 0.90 and m_out[layer] >= 0.90 for layer in cfg.layers)
    reversed_layers = [layer for layer in cfg.layers if m_in[layer] < m_out[layer]]
    measure("layers_in_below_out", reversed_layers)
    assert not reversed_layers, f"in-domain mean below out-of-domain mean at layers {reversed_layers}"


# ---------------------------------------------------------------- reproducibility

def _run(argv):
    code = cli.main([str(a) for a in argv])
    assert code == 0
    return code


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.mark.criterion(12, "CLI reproducibility")
def test_every_command_reproduces(tmp_path, capsys, measure):
    d = tmp_path
    fast = {"feature_steps": 4, "attention_full_steps": 3, "inversion_max_iter": 5}
    content = _save_png(d / "content.png", presets.content_images(1)[0])
    left = np.zeros((32, 32), np.uint8)
    left[:, :16] = 1
    Image.fromarray(left * 255).save(d / "left.png")

    runs = {
        "train-base": {"dataset": {"count": 16, "seed": 1}, "steps": 3, "batch_size": 2, "seed": 5},
    }
    _run(["train-base", "--config", _write(d / "train-base.json", runs["train-base"]), "--out", d / "train-base"])
    base = str(d / "train-base/checkpoint")
    runs["train-lora"] = {"base": base, "prompt": "<sss> style", "steps": 2,
                          "style_image": {"seed": 4242, "style": "stripes"}}
    _run(["train-lora", "--config", _write(d / "train-lora.json", runs["train-lora"]), "--out", d / "train-lora"])
    adapter = str(d / "train-lora/adapter")
    common = {"base": base, "content_image": content, "num_steps": 6, "injection": fast}
    runs["transfer"] = {**common, "adapter": adapter, "prompt": "<sss> style"}
    runs["transfer-masked"] = {**common, "regions": [
        {"mask": str(d / "left.png"), "adapter": adapter, "prompt": "<sss> style"}]}
    runs["transfer-multistyle"] = {**common, "plans": [{"name": "AB", "ranges": [
        {"adapter": adapter, "prompt": "<sss> style", "start": 0, "end": 3},
        {"adapter": None, "prompt": "", "start": 3, "end": 6}]}]}
    runs["analyze-features"] = {"base": base, "adapter": adapter, "num_steps": 6, "layers": [1, 2],
                                "in_domain": {"seed": 5, "count": 2, "style": "stripes"},
                                "out_of_domain": {"seed": 6, "count": 2, "style": "invert"}}
    for command in ("transfer", "transfer-masked", "transfer-multistyle", "analyze-features"):
        _run([command, "--config", _write(d / f"{command}.json", runs[command]), "--out", d / command])

    fixture_cfg = {"content_image": content, "adapter": "fixture:stripes", "prompt": PROMPTS["stripes"]}
    _run(["transfer", "--config", _write(d / "fixture.json", fixture_cfg), "--preset", "fixture",
          "--out", d / "fixture-transfer"])

    checked = []
    for name in [*runs, "fixture-transfer"]:
        original = json.loads((d / name / "manifest.json").read_text())
        _run(["reproduce", "--config", d / name / "manifest.json", "--out", d / f"{name}-again"])
        again = json.loads((d / f"{name}-again" / "manifest.json").read_text())
        assert again["outputs"] == original["outputs"] and original["outputs"]
        checked.append(name)
    capsys.readouterr()
    measure("commands_reproduced", len(checked))
    assert set(cli.SCHEMAS) - {"reproduce"} <= set(checked)

