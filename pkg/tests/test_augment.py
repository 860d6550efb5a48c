import copy
import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cropa import attacks as A
from cropa import augment as G
from cropa.config import AttackConfig, AugmentConfig, ConfigError
from cropa.data_io import synth_image
from cropa.rng import Rng


def bilinear_pixel(src, y, x):
    """Four-neighbour interpolation at a fractional source coordinate (edge clamped)."""
    h, w = src.shape
    y = min(max(y, 0.0), h - 1)
    x = min(max(x, 0.0), w - 1)
    y0, x0 = int(math.floor(y)), int(math.floor(x))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    fy, fx = y - y0, x - x0
    top = src[y0, x0] * (1 - fx) + src[y0, x1] * fx
    bot = src[y1, x0] * (1 - fx) + src[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def test_full_crop_is_identity():
    img = synth_image(1)
    assert np.array_equal(G.crop_resize(img, 0, 0, 32), img)
    out = G.random_crop_resize(img, Rng(0), min_fraction=1.0)
    assert np.array_equal(out, img)


@given(st.integers(0, 10_000), st.floats(0, 1))
def test_constant_image_stays_constant(seed, value):
    img = np.full((3, 32, 32), value)
    assert np.allclose(G.random_crop_resize(img, Rng(seed)), value, atol=1e-15)


def test_seeded_crop_matches_bilinear_oracle():
    img = synth_image(7)
    r = Rng(99)
    out = G.random_crop_resize(img, copy.copy(r))
    size = r.randint(16, 32)
    top = r.randint(0, 32 - size)
    left = r.randint(0, 32 - size)
    crop = img[:, top : top + size, left : left + size]
    scale = size / 32
    for c in range(3):
        for i in range(0, 32, 5):
            for j in range(0, 32, 3):
                ref = bilinear_pixel(crop[c], (i + 0.5) * scale - 0.5, (j + 0.5) * scale - 0.5)
                assert abs(out[c, i, j] - ref) < 1e-12


def test_self_mix_forms():
    img = synth_image(2)
    assert np.array_equal(G.self_mix(img, Rng(1), 0.5, min_fraction=1.0), img)
    r = Rng(4)
    got = G.self_mix(img, copy.copy(r), 0.3)
    x1 = G.random_crop_resize(img, r)
    x2 = G.random_crop_resize(img, r)
    assert np.array_equal(got, 0.3 * x1 + 0.7 * x2)
    assert G.cross_mix(np.array([0.4]), np.array([0.8]), 0.5, 0.5)[0] == pytest.approx(0.6, abs=1e-15)
    with pytest.raises(ValueError):
        G.self_mix(img, Rng(1), 1.5)


@given(st.integers(0, 10_000), st.floats(0, 1))
def test_self_mix_in_range(seed, eta):
    out = G.self_mix(synth_image(seed), Rng(seed), eta)
    assert out.min() >= 0 and out.max() <= 1


def test_cross_mix_cases():
    a, b = synth_image(3), synth_image(4)
    assert np.array_equal(G.cross_mix(a, b, 1.0, 0.0), a)
    assert G.cross_mix(np.array([1.0]), np.array([0.0]), 0.7, 0.3)[0] == 0.7
    with pytest.raises(ValueError):
        G.cross_mix(a, b, 0.8, 0.3)


def test_cross_mix_favours_base():
    for seed in range(5):
        a, b = synth_image(10 + seed), synth_image(50 + seed)
        mixed = G.cross_mix(a, b, 0.7, 0.3)
        corr = lambda u, v: np.corrcoef(u.reshape(-1), v.reshape(-1))[0, 1]
        assert corr(mixed, a) > corr(mixed, b)


def test_scmix_identities():
    a, b = synth_image(5), synth_image(6)
    cfg = AugmentConfig(mode="scmix")
    assert G.scmix(a, a, cfg, Rng(0)) is a
    assert G.scmix(a, b, cfg, Rng(0), same=True) is a
    unit = SimpleNamespace(eta=0.5, beta1=1.0, beta2=0.0, crop_min_fraction=1.0)
    assert np.array_equal(G.scmix(a, b, unit, Rng(0)), a)


def test_scmix_composes_oracles():
    a, b = synth_image(5), synth_image(6)
    cfg = AugmentConfig(mode="scmix")
    r = Rng(17)
    got = G.scmix(a, b, cfg, copy.copy(r))
    expect = 0.7 * G.self_mix(a, r, 0.5, 0.5) + 0.3 * b
    assert np.array_equal(got, expect)


def test_augment_config_invariants():
    with pytest.raises(ConfigError):
        AugmentConfig(beta1=1.0, beta2=0.0)
    with pytest.raises(ConfigError):
        AugmentConfig(beta1=0.3, beta2=0.7)
    with pytest.raises(ConfigError):
        AugmentConfig(beta1=0.8, beta2=0.3)
    with pytest.raises(ConfigError):
        AugmentConfig(mode="mixup")


def test_cutmix_identities():
    a, b = synth_image(1), synth_image(2)
    assert np.array_equal(G.cutmix(a, b, G.RectMask(0, 0, 32, 32)), a)
    one = G.cutmix(a, b, G.RectMask(0, 0, 1, 1))
    expect = b.copy()
    expect[:, 0, 0] = a[:, 0, 0]
    assert np.array_equal(one, expect)


def test_cutmix_partition_mean():
    a, b = synth_image(1), synth_image(2)
    m = G.RectMask(4, 6, 10, 12)
    out = G.cutmix(a, b, m)
    inside = np.zeros((32, 32), bool)
    inside[4:14, 6:18] = True
    assert np.array_equal(out[:, inside], a[:, inside])
    assert np.array_equal(out[:, ~inside], b[:, ~inside])
    assert out.mean() == pytest.approx((a[:, inside].sum() + b[:, ~inside].sum()) / out.size, abs=1e-15)


@given(st.integers(0, 10_000))
def test_cutmix_complementarity(seed):
    r = Rng(seed)
    m = G.sample_mask(r)
    a, b = synth_image(seed), synth_image(seed + 1)
    assert np.array_equal(G.cutmix(a, b, m) + G.cutmix(b, a, m), a + b)
    assert 8 <= m.height <= 24 and 8 <= m.width <= 24


def test_mask_bounds():
    with pytest.raises(ValueError):
        G.RectMask(30, 0, 4, 4)
    with pytest.raises(ValueError):
        G.RectMask(0, 0, 0, 4)


@given(st.integers(0, 10_000), st.sampled_from(["none", "scmix", "cutmix"]))
def test_augmented_views_in_range(seed, mode):
    imgs = [synth_image(seed + i) for i in range(3)]
    out = G.augment_image(imgs, 1, AugmentConfig(mode=mode), Rng(seed))
    assert out.min() >= 0 and out.max() <= 1


def test_gaussian_init_in_ball():
    d = G.gaussian_init((3, 32, 32), 16 / 255, Rng(1))
    assert np.max(np.abs(d)) <= 16 / 255
    assert np.std(d) > 0.5 * 16 / 255 * 0.6


def test_single_image_reduces_to_cropa(model, flat_prompts, target):
    cfg = AttackConfig(iterations=40, prompt_count=8, checkpoints=(20,))
    img = synth_image(4)
    a = G.attack_cross_image(model, [img], flat_prompts[:8], target, cfg, AugmentConfig(), init="zero")
    b = A.attack_cropa(model, img, flat_prompts[:8], target, cfg)
    assert a.loss_trace == b.loss_trace and np.array_equal(a.delta_v, b.delta_v)


@pytest.mark.parametrize("mode", ["none", "scmix", "cutmix"])
def test_cross_image_respects_budget(model, flat_prompts, target, mode):
    cfg = AttackConfig(iterations=8, prompt_count=4, checkpoints=(4, 8))
    imgs = [synth_image(i) for i in range(3)]
    seen = []

    def watch(ev):
        assert np.max(np.abs(ev["delta_v"])) <= cfg.epsilon + 1e-12
        assert ev["image"].min() >= 0 and ev["image"].max() <= 1
        seen.append(ev["image_index"])

    res = G.attack_cross_image(model, imgs, flat_prompts[:4], target, cfg, AugmentConfig(mode=mode), monitor=watch)
    assert seen == [0, 1, 2] * 8
    assert res.delta_v.shape == (3, 32, 32)
    assert sorted(res.checkpoints) == [4, 8]
    for dt in res.perturbation.delta_t.values():
        assert dt.min() >= -0.23 and dt.max() <= 0.27


def test_cross_image_rejects_bad_input(model, flat_prompts, target):
    cfg = AttackConfig(iterations=1, checkpoints=())
    with pytest.raises(ValueError):
        G.attack_cross_image(model, [], flat_prompts[:4], target, cfg)
    with pytest.raises(ValueError):
        G.attack_cross_image(model, [synth_image(1)], flat_prompts[:4], target, cfg, init="uniform")
