import json

import numpy as np
import pytest

from styler.analysis import (
    FeatureStudyConfig,
    SimilarityReport,
    cosine,
    cosine_layers,
    extract_features,
    pca_components,
    pca_project,
    trajectory,
)
from styler.data import DatasetConfig, sample_images
from styler.errors import ConfigError
from styler.lora import AdaptedModel, init_lora
from styler.model import UNet
from styler.schedule import SamplingPlan

PLAN = SamplingPlan.uniform(1000, 10)


@pytest.fixture(scope="module")
def model():
    return UNet().init_weights(8).eval()


@pytest.fixture(scope="module")
def images():
    return sample_images(DatasetConfig(seed=5), count=3)[0]


def test_config_validation():
    assert FeatureStudyConfig().step(50) == 25
    for kwargs in ({"fraction": 0.0}, {"fraction": 1.0}, {"k": 0}, {"layers": (9,)}, {"mode": "mean"}):
        with pytest.raises(ConfigError):
            FeatureStudyConfig(**kwargs)


def test_extract_features_shapes_and_determinism(model, images):
    traj = trajectory(model, images[0], PLAN, upto=5)
    a = extract_features(model, traj, PLAN)
    b = extract_features(model, traj, PLAN)
    sizes = {layer: a[layer].shape[:2] for layer in a}
    assert sizes == {1: (4, 4), 2: (4, 4), 3: (8, 8), 4: (8, 8), 5: (16, 16), 6: (16, 16)}
    assert all(np.array_equal(a[k], b[k]) for k in a)
    with pytest.raises(ConfigError):
        extract_features(model, traj[:3], PLAN)


def test_zero_lora_features_identical(model, images):
    traj = trajectory(model, images[1], PLAN, upto=5)
    fa = extract_features(model, traj, PLAN)
    fb = extract_features(AdaptedModel(model, init_lora(model)), traj, PLAN)
    for layer in fa:
        assert np.array_equal(fa[layer], fb[layer])
        assert cosine(fa[layer], fb[layer]) == 1.0


def test_pca_rank_one_field():
    rng = np.random.default_rng(0)
    field = np.outer(rng.normal(size=64), rng.normal(size=16)).reshape(8, 8, 16) + 3.0
    images, ratios = pca_project(field, k=3)
    assert images.shape == (8, 8, 3)
    assert ratios[0] >= 0.999 and ratios[1:].max() <= 1e-6 and ratios.sum() <= 1 + 1e-12
    assert images[..., 0].min() == 0.0 and images[..., 0].max() == 1.0


def test_pca_two_factor_matches_eigendecomposition():
    rng = np.random.default_rng(1)
    n, c = 256, 12
    basis, _ = np.linalg.qr(rng.normal(size=(c, 2)))
    scores = rng.normal(size=(n, 2)) * np.array([3.0, 1.0])
    x = scores @ basis.T
    _, ratios = pca_project(x, k=4)
    xc = x - x.mean(0)
    evals, evecs = np.linalg.eigh(xc.T @ xc)
    evals, evecs = evals[::-1], evecs[:, ::-1]
    np.testing.assert_allclose(ratios[:2], evals[:2] / evals.sum(), rtol=1e-10)
    assert ratios[2:].max() <= 1e-6
    _, vt, _ = pca_components(x)
    for i in range(2):
        assert abs(abs(vt[i] @ evecs[:, i]) - 1) <= 1e-8
    # the two directions span the construction's subspace
    proj = basis @ basis.T
    np.testing.assert_allclose(proj @ evecs[:, :2], evecs[:, :2], atol=1e-8)


def test_pca_full_reconstruction():
    x = np.random.default_rng(2).normal(size=(16, 16, 8))
    mean, vt, _ = pca_components(x)
    flat = x.reshape(-1, 8) - mean
    recon = (flat @ vt.T) @ vt
    assert np.abs(recon - flat).max() <= 1e-4


def test_pca_constant_field_warns():
    with pytest.warns(RuntimeWarning):
        images, ratios = pca_project(np.ones((4, 4, 3)), k=3)
    assert not images.any() and not ratios.any()
    with pytest.raises(ConfigError):
        pca_project(np.ones((2, 3)), k=3)


def test_cosine_properties():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(4, 4, 8)), rng.normal(size=(4, 4, 8))
    for mode in ("flattened", "per-location"):
        assert cosine(a, b, mode) == pytest.approx(cosine(b, a, mode), abs=1e-12)
        assert cosine(a, a, mode) == pytest.approx(1.0, abs=1e-6)
        assert -1 <= cosine(a, b, mode) <= 1
        assert cosine(a, np.zeros_like(a), mode) is None
    assert cosine(a, -a) == pytest.approx(-1.0)


def test_cosine_layers_self_similarity(model, images):
    report = cosine_layers(model, model, images[:2], PLAN, name="self")
    assert report.counts["self"] == 2
    for layer in report.layers:
        assert report.means["self"][layer] == pytest.approx(1.0, abs=1e-6)
    data = json.loads(report.to_json())
    assert data["rows"]["self"]["2"] == pytest.approx(1.0, abs=1e-6)
    lines = report.to_table().splitlines()
    assert lines[0].split()[:2] == ["model", "pair"] and len(lines) == 3


def test_report_skips_missing_cases():
    report = SimilarityReport((1, 2))
    report.add_row("r", [{1: 0.5, 2: 0.7}, {1: None, 2: 0.9}])
    assert report.counts["r"] == 1
    assert report.means["r"] == {1: 0.5, 2: pytest.approx(0.8)}
