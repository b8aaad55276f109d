import numpy as np
import pytest
from scipy import ndimage

from ck_seu_diffusion.errors import ShapeError, ZeroNorm
from ck_seu_diffusion.quality_metrics import (DEFAULT_TAU, clip_like_score, corruption_mask, corruption_stats,
                                              pooled_text_embedding, toy_image_embed)


def test_50_clip_like_score_examples():
    assert clip_like_score(np.array([1.0, 0.0]), np.array([0.6, 0.8])) == pytest.approx(60.0, abs=1e-12)
    v = np.array([0.3, -2.0, 1.5])
    assert clip_like_score(v, v) == pytest.approx(100.0, abs=1e-12)
    assert clip_like_score(np.array([1.0, 0.0]), np.array([0.0, 3.0])) == 0.0
    assert clip_like_score(np.array([1.0, 0.0]), np.array([-1.0, 0.0])) == 0.0
    with pytest.raises(ZeroNorm):
        clip_like_score(np.zeros(3), v)
    with pytest.raises(ShapeError):
        clip_like_score(np.ones(2), v)


def test_51_clip_like_score_bounds_and_scale_invariance():
    rng = np.random.default_rng(51)
    for _ in range(10_000):
        a = rng.standard_normal(8)
        b = rng.standard_normal(8)
        score = clip_like_score(a, b)
        assert 0.0 <= score <= 100.0
        alpha, beta = rng.uniform(1e-3, 1e3, size=2)
        assert clip_like_score(alpha * a, beta * b) == pytest.approx(score, abs=1e-9)


def test_52_toy_image_embed():
    rng = np.random.default_rng(52)
    image = rng.uniform(0, 1, (3, 16, 16))
    first = toy_image_embed(image, 32)
    assert first.shape == (32,)
    assert np.array_equal(first, toy_image_embed(image, 32))
    assert np.linalg.norm(first) == pytest.approx(1.0)
    poked = image.copy()
    poked[1, 4, 7] += 0.25
    assert not np.array_equal(first, toy_image_embed(poked, 32))
    assert not np.array_equal(first, toy_image_embed(image, 32, seed=1))
    assert np.array_equal(toy_image_embed(np.full((3, 16, 16), 0.5), 32), np.zeros(32))
    text = rng.standard_normal((8, 32))
    assert np.allclose(pooled_text_embedding(text), text.mean(axis=0))


def test_53_corruption_stats_examples():
    rng = np.random.default_rng(53)
    baseline = rng.uniform(0.1, 0.9, (3, 64, 64))
    same = corruption_stats(baseline, baseline)
    assert (same.relative_deviation, same.corrupted_fraction, same.component_count, same.mean_component_area) == \
        (0.0, 0.0, 0, 0.0)

    single = baseline.copy()
    single[2, 10, 20] += 0.5
    stats = corruption_stats(single, baseline)
    assert stats.corrupted_fraction == 1 / 4096
    assert (stats.component_count, stats.mean_component_area) == (1, 1.0)
    assert stats.relative_deviation > 0

    square = baseline.copy()
    square[:, 30:38, 5:13] += 0.5
    stats = corruption_stats(square, baseline)
    assert stats.corrupted_fraction == 64 / 4096
    assert (stats.component_count, stats.mean_component_area) == (1, 64.0)
    assert stats.to_dict()['component_count'] == 1
    with pytest.raises(ShapeError):
        corruption_stats(baseline[:, :32], baseline)


def test_54_connectivity_and_threshold():
    baseline = np.zeros((3, 8, 8))
    diagonal = baseline.copy()
    diagonal[0, 2, 2] = diagonal[0, 3, 3] = 1.0
    # diagonal neighbours are separate components under 4-connectivity
    assert corruption_stats(diagonal, baseline).component_count == 2
    faint = baseline.copy()
    faint[:, 4, 4] = DEFAULT_TAU / 2
    assert corruption_stats(faint, baseline).corrupted_fraction == 0.0
    assert corruption_stats(faint, baseline, tau=0.0).corrupted_fraction == 1 / 64


def test_55_mask_symmetry_and_dilation():
    rng = np.random.default_rng(55)
    baseline = rng.uniform(0, 1, (3, 32, 32))
    region = np.zeros((32, 32), dtype=bool)
    region[10:13, 14:16] = True
    region[25, 3] = True
    areas = []
    for _ in range(4):
        image = baseline.copy()
        image[:, region] += 0.5
        assert np.array_equal(corruption_mask(image, baseline), corruption_mask(baseline, image))
        areas.append(corruption_stats(image, baseline).mean_component_area)
        region = ndimage.binary_dilation(region, structure=ndimage.generate_binary_structure(2, 1))
    assert areas == sorted(areas)
    assert areas[-1] > areas[0]
