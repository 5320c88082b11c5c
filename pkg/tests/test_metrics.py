import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from rrdbjpeg import jpeg_sim, metrics
from rrdbjpeg.imaging import ColorSpace, Image, rgb_to_ycbcr


def oracle_pairs(natural_arrays):
    """Seven (ref, test) planes: photo crops vs JPEG/noise/offset variants."""
    rng = np.random.default_rng(7)
    pairs = []
    for i, arr in enumerate(natural_arrays.values()):
        img = Image(arr[40:64, 60:88].astype(float), ColorSpace.RGB)
        ref = rgb_to_ycbcr(img).plane(0)
        deg = rgb_to_ycbcr(jpeg_sim.degrade(img, 10 + 20 * i)).plane(0)
        pairs.append((ref, deg))
    a = rng.uniform(0, 255, (20, 17))
    pairs.append((a, np.clip(a + rng.normal(0, 9, a.shape), 0, 255)))
    pairs.append((a, np.roll(a, 1, axis=1)))
    pairs.append((a, a.copy()))
    return pairs


def test_brute_force_oracle(natural_arrays):
    pairs = oracle_pairs(natural_arrays)
    assert len(pairs) >= 5
    for ref, test in pairs:
        r, t = ref.tolist(), test.tolist()
        for ours, theirs in ((metrics.psnr(ref, test), oracles.psnr(r, t)),
                             (metrics.psnr_b(ref, test), oracles.psnr_b(r, t)),
                             (metrics.ssim(ref, test), oracles.ssim(r, t))):
            if math.isinf(theirs):
                assert ours == theirs
            else:
                assert abs(ours - theirs) < 1e-9


def test_bef_matches_oracle(rng):
    for shape in [(16, 16), (24, 33), (40, 17)]:
        x = rng.uniform(0, 255, shape)
        x[:, 8::8] += 40
        assert abs(metrics.blocking_effect_factor(x) - oracles.bef(x.tolist())) < 1e-9


def test_psnr_anchors():
    a = np.full((16, 16), 100.0)
    assert metrics.psnr(a, a) == math.inf
    assert metrics.psnr(a, a + 1) == pytest.approx(48.1308, abs=1e-3)
    assert metrics.psnr(a, a + 1) == pytest.approx(20 * math.log10(255), abs=1e-12)
    assert metrics.psnr(np.zeros((4, 4)), np.full((4, 4), 255.0)) == pytest.approx(0.0, abs=1e-12)


def test_psnr_b_anchors(rng):
    a = rng.uniform(0, 255, (32, 32))
    assert metrics.psnr_b(a, a) == math.inf
    smooth = np.tile(np.linspace(0, 255, 32), (32, 1))
    assert metrics.blocking_effect_factor(smooth) == 0.0
    assert metrics.psnr_b(a, smooth) == metrics.psnr(a, smooth)


def test_psnr_b_step_at_block_boundary():
    test = np.zeros((16, 16))
    test[:, 8:] = 255.0
    ref = np.tile(np.linspace(0, 255, 16), (16, 1))
    # 32 boundary pairs (16 across column 7|8, 16 across row 7|8); only the
    # horizontal ones jump, and no non-boundary pair does
    d_b = (16 * 255.0 ** 2) / 32
    eta = math.log2(8) / math.log2(16)
    assert metrics.blocking_effect_factor(test) == pytest.approx(eta * d_b, rel=1e-12)
    assert metrics.psnr_b(ref, test) < metrics.psnr(ref, test)


def test_psnr_b_too_small_and_mismatch():
    with pytest.raises(ValueError):
        metrics.psnr_b(np.zeros((15, 40)), np.zeros((15, 40)))
    with pytest.raises(ValueError):
        metrics.psnr(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ValueError):
        metrics.ssim(np.zeros((10, 20)), np.zeros((10, 20)))


def test_psnr_b_never_exceeds_psnr_1000_pairs():
    rng = np.random.default_rng(99)
    violations = 0
    for _ in range(1000):
        h, w = rng.integers(16, 41, size=2)
        a = rng.uniform(0, 255, (h, w))
        b = np.clip(a + rng.normal(0, rng.uniform(1, 40), (h, w)), 0, 255)
        violations += metrics.psnr_b(a, b) > metrics.psnr(a, b)
    assert violations == 0


def test_ssim_identity_symmetry_anticorrelation(rng):
    x = rng.uniform(0, 255, (32, 32))
    assert metrics.ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    y = np.clip(x + rng.normal(0, 20, x.shape), 0, 255)
    assert abs(metrics.ssim(x, y) - metrics.ssim(y, x)) < 1e-12
    # keep away from mid-gray so 255-x really flips structure
    z = np.where(rng.random((32, 32)) < 0.5, rng.uniform(0, 60, (32, 32)), rng.uniform(195, 255, (32, 32)))
    assert metrics.ssim(z, 255 - z) < 0


@given(arrays(np.float64, (16, 16), elements=st.floats(0, 200)), arrays(np.float64, (16, 16), elements=st.floats(0, 200)),
       st.floats(-50, 50))
def test_psnr_shift_invariant(a, b, c):
    assert metrics.psnr(a + c, b + c) == pytest.approx(metrics.psnr(a, b), abs=1e-6)


@given(arrays(np.float64, (16, 20), elements=st.floats(0, 255)), arrays(np.float64, (16, 20), elements=st.floats(0, 255)))
def test_invariants_hold(a, b):
    assert metrics.psnr_b(a, b) <= metrics.psnr(a, b)
    s = metrics.ssim(a, b)
    assert -1 - 1e-12 <= s <= 1 + 1e-12
    assert metrics.ssim(a, a) == pytest.approx(1.0, abs=1e-9)


def test_evaluate_pair_modes(rng):
    ref = Image(rng.uniform(0, 255, (24, 24, 3)), ColorSpace.RGB)
    test = Image(np.clip(ref.data + rng.normal(0, 5, ref.data.shape), 0, 255), ColorSpace.RGB)
    y = metrics.evaluate_pair(ref, test, "y")
    assert y.channel_mode is metrics.ChannelMode.Y
    assert y.psnr == pytest.approx(metrics.psnr(rgb_to_ycbcr(ref).plane(0), rgb_to_ycbcr(test).plane(0)))
    rgb = metrics.evaluate_pair(ref, test, "rgb")
    assert rgb.channel_mode is metrics.ChannelMode.RGB
    expected = np.mean([metrics.ssim(ref.plane(c), test.plane(c)) for c in range(3)])
    assert rgb.ssim == pytest.approx(expected)
    with pytest.raises(ValueError):
        metrics.evaluate_pair(ref, ref.crop(0, 0, 20, 24))
    with pytest.raises(ValueError):
        metrics.ChannelMode.parse("cmyk")


def test_capped_mean():
    assert metrics.capped_mean([math.inf, 30.0]) == 65.0
    assert math.isnan(metrics.capped_mean([]))
