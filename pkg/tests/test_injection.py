import numpy as np
import pytest
import torch

from styler.data import DatasetConfig, sample_images
from styler.errors import ConfigError, ShapeError
from styler.injection import (
    AttentionMode,
    InjectionConfig,
    InjectionHooks,
    blend_attention,
    capture_trace,
    guided_denoise,
    kappa,
    load_trace,
    save_trace,
)
from styler.lora import AdaptedModel, init_lora
from styler.model import UNet
from styler.schedule import SamplingPlan

S = 10
PLAN = SamplingPlan.uniform(1000, S)
FAST = dict(inversion_max_iter=0)


@pytest.fixture(scope="module")
def model():
    return UNet().init_weights(5).eval()


@pytest.fixture(scope="module")
def content():
    return sample_images(DatasetConfig(seed=3), count=1)[0][0]


@pytest.fixture(scope="module")
def trace(model, content):
    cfg = InjectionConfig(feature_layers=(2, 5), feature_steps=6, attention_full_steps=4, **FAST)
    return capture_trace(model, content, PLAN, cfg)


def test_defaults():
    cfg = InjectionConfig()
    assert cfg.feature_layers == (2,) and cfg.feature_steps == 30
    assert cfg.attention_layers == (1, 2, 3, 4, 5, 6) and cfg.attention_full_steps == 25
    assert cfg.attention_mode is AttentionMode.ADAPTIVE and cfg.guidance_scale == 1.0
    assert cfg.cross_attention_layers == ()


@pytest.mark.parametrize("kwargs", [
    {"feature_layers": (0,)}, {"attention_layers": (7,)}, {"attention_mode": "half"},
    {"feature_steps": -1}, {"guidance_scale": 0.5},
])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        InjectionConfig(**kwargs)


def test_config_thresholds_checked_against_plan():
    with pytest.raises(ConfigError):
        InjectionConfig().check(20)
    InjectionConfig().check(50)


def test_kappa_examples():
    assert kappa(25, 25, 50) == 0.0
    assert kappa(30, 25, 50) == 0.2
    assert kappa(49, 25, 50) == 0.96
    values = [kappa(u, 25, 50) for u in range(25, 50)]
    assert all(b > a for a, b in zip(values, values[1:]))
    weights = [1 - v for v in values]
    assert all(b < a for a, b in zip(weights, weights[1:]))


@pytest.mark.parametrize("args", [(24, 25, 50), (50, 25, 50), (10, 50, 50)])
def test_kappa_domain(args):
    with pytest.raises(ConfigError):
        kappa(*args)


def test_blend_examples():
    src = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    lora = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
    cfg = InjectionConfig(attention_full_steps=25)
    assert torch.equal(blend_attention(src, lora, 25, cfg, 50), src)
    assert torch.allclose(blend_attention(src, lora, 30, cfg, 50), torch.tensor([[0.8, 0.2]], dtype=torch.float64))
    assert torch.equal(blend_attention(src, lora, 3, cfg, 50), src)


def test_blend_modes():
    src, lora = torch.rand(4, 4).softmax(-1), torch.rand(4, 4).softmax(-1)
    full = InjectionConfig(attention_mode="full")
    partial = InjectionConfig(attention_mode="partial")
    for u in (0, 24, 25, 49):
        assert torch.equal(blend_attention(src, lora, u, full, 50), src)
        assert torch.equal(blend_attention(src, lora, u, partial, 50), src if u < 25 else lora)


def test_blend_fixed_point_and_shapes():
    a = torch.rand(3, 5).softmax(-1)
    cfg = InjectionConfig()
    for u in range(25, 50):
        assert torch.equal(blend_attention(a, a.clone(), u, cfg, 50), a)
    with pytest.raises(ShapeError):
        blend_attention(a, torch.rand(3, 4), 30, cfg, 50)


def test_blend_rows_stay_stochastic():
    g = torch.Generator().manual_seed(0)
    cfg = InjectionConfig()
    for u in range(25, 50):
        src = (torch.randn(4, 64, 64, generator=g) * 3).softmax(-1)
        lora = (torch.randn(4, 64, 64, generator=g) * 3).softmax(-1)
        out = blend_attention(src, lora, u, cfg, 50)
        assert (out.sum(-1) - 1).abs().max().item() <= 1e-5 and out.min().item() >= 0


def test_trace_counting_contract(trace):
    assert len(trace.features) == 2 * 6
    assert {k[1] for k in trace.features} == {2, 5} and max(k[0] for k in trace.features) == 5
    assert len(trace.attention) == 6 * S
    assert all(kind == "self" for _, _, kind in trace.attention)
    assert len(trace.trajectory) == S + 1 and torch.equal(trace.trajectory[0], trace.z_init)


def test_capture_is_deterministic(model, content, trace):
    cfg = InjectionConfig(feature_layers=(2, 5), feature_steps=6, attention_full_steps=4, **FAST)
    again = capture_trace(model, content, PLAN, cfg)
    assert torch.equal(again.z_init, trace.z_init) and torch.equal(again.replay_final, trace.replay_final)
    assert all(torch.equal(again.features[k], v) for k, v in trace.features.items())
    assert all(torch.equal(again.attention[k][0], v[0]) for k, v in trace.attention.items())


def test_self_injection_identity(model, trace):
    adapted = AdaptedModel(model, init_lora(model, seed=1))
    cfg = InjectionConfig(feature_layers=(2, 5), feature_steps=6, attention_full_steps=4, **FAST)
    for mode in AttentionMode:
        out = guided_denoise(adapted, trace, "", PLAN, InjectionConfig(**{**cfg.to_dict(), "attention_mode": mode}))
        assert torch.equal(out, trace.replay_final)


def test_attention_only_self_injection(model, trace):
    adapted = AdaptedModel(model, init_lora(model, seed=2))
    cfg = InjectionConfig(feature_steps=0, attention_full_steps=S, attention_mode="full", **FAST)
    assert torch.equal(guided_denoise(adapted, trace, "", PLAN, cfg), trace.replay_final)


def test_injection_changes_a_trained_looking_adapter(model, trace):
    adapter = init_lora(model, seed=3, style_token="<sss>")
    for key in adapter.B:
        adapter.B[key] = torch.full_like(adapter.B[key], 0.5)
    adapted = AdaptedModel(model, adapter)
    cfg = InjectionConfig(feature_layers=(2,), feature_steps=6, attention_full_steps=4, **FAST)
    outs = {m: guided_denoise(adapted, trace, "<sss> style", PLAN, InjectionConfig(**{**cfg.to_dict(), "attention_mode": m}))
            for m in AttentionMode}
    assert not torch.equal(outs[AttentionMode.FULL], outs[AttentionMode.PARTIAL])
    assert not torch.equal(outs[AttentionMode.ADAPTIVE], outs[AttentionMode.PARTIAL])
    again = guided_denoise(adapted, trace, "<sss> style", PLAN, InjectionConfig(**cfg.to_dict()))
    assert torch.equal(again, outs[AttentionMode.ADAPTIVE])


def test_injected_rows_are_stochastic(model, trace):
    seen = []

    class Spy(InjectionHooks):
        def attention(self, layer, kind, q, k, probs):
            out = super().attention(layer, kind, q, k, probs)
            seen.append((out.sum(-1) - 1).abs().max().item())
            return out

    cfg = InjectionConfig(feature_steps=0, attention_full_steps=4, **FAST)
    hooks = Spy(trace, 7, cfg)
    adapter = init_lora(model, seed=4)
    for key in adapter.B:
        adapter.B[key] = torch.full_like(adapter.B[key], 0.3)
    with torch.no_grad():
        model(trace.trajectory[7].unsqueeze(0), torch.tensor([int(PLAN.timesteps[7])]),
              model.embed_prompt("circle").vectors.unsqueeze(0), adapter=adapter, hooks=hooks)
    assert len(seen) == 12 and max(seen) <= 1e-5  # self and cross in each decoder layer


def test_trace_config_mismatch(model, trace):
    adapted = AdaptedModel(model, init_lora(model))
    with pytest.raises(ConfigError):
        guided_denoise(adapted, trace, "", SamplingPlan.uniform(1000, S, seed=9), InjectionConfig(feature_steps=6, attention_full_steps=4))
    with pytest.raises(ConfigError):
        guided_denoise(adapted, trace, "", PLAN, InjectionConfig(feature_layers=(3,), feature_steps=2, attention_full_steps=4))
    with pytest.raises(ConfigError):
        guided_denoise(adapted, trace, "", PLAN, InjectionConfig(feature_steps=8, attention_full_steps=4))


def test_prompt_must_carry_style_token(model, trace):
    adapted = AdaptedModel(model, init_lora(model, style_token="<sss>"))
    with pytest.raises(ConfigError):
        guided_denoise(adapted, trace, "circle", PLAN, InjectionConfig(feature_steps=6, attention_full_steps=4))


def test_guidance_scale_passes_through(model, trace):
    adapted = AdaptedModel(model, init_lora(model, style_token="<sss>"))
    base_cfg = dict(feature_steps=6, attention_full_steps=4, **FAST)
    plain = guided_denoise(adapted, trace, "<sss> style", PLAN, InjectionConfig(**base_cfg))
    guided = guided_denoise(adapted, trace, "<sss> style", PLAN, InjectionConfig(guidance_scale=3.0, **base_cfg))
    assert torch.isfinite(guided).all() and not torch.equal(plain, guided)


def test_trace_round_trip(trace, tmp_path):
    save_trace(trace, tmp_path / "t")
    back = load_trace(tmp_path / "t")
    assert back.timesteps == trace.timesteps and back.feature_layers == trace.feature_layers
    assert torch.equal(back.z_init, trace.z_init)
    assert all(torch.equal(back.features[k], v) for k, v in trace.features.items())
    assert all(torch.equal(back.attention[k][1], v[1]) for k, v in trace.attention.items())
    assert all(torch.equal(a, b) for a, b in zip(back.trajectory, trace.trajectory))


def test_fixed_point_inversion_tightens_round_trip(model, content):
    from styler.codec import encode
    from styler.injection import invert, plain_denoise
    from styler.schedule import make_schedule

    sched = make_schedule()
    z0 = torch.from_numpy(encode(content))
    errs = []
    for max_iter in (0, 30):
        z = invert(model, z0, PLAN, sched, max_iter, 1e-6)
        errs.append((plain_denoise(model, z, PLAN, schedule=sched) - z0).abs().max().item())
    assert errs[1] < errs[0] and np.isfinite(errs).all()
