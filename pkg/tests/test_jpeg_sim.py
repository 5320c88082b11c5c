import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from rrdbjpeg import jpeg_sim as js
from rrdbjpeg import metrics
from rrdbjpeg.imaging import ColorSpace, Image, rgb_to_ycbcr

# IJG libjpeg reference output (cjpeg -quality 10), first row of each table
IJG_Q10_LUMA_ROW0 = [80, 55, 50, 80, 120, 200, 255, 255]
IJG_Q10_CHROMA_ROW0 = [85, 90, 120, 235, 255, 255, 255, 255]


def y_psnr(a: Image, b: Image) -> float:
    return metrics.psnr(rgb_to_ycbcr(a).plane(0), rgb_to_ycbcr(b).plane(0))


def test_qf50_identity_and_qf100_ones():
    for kind in ("luma", "chroma"):
        base = js.base_table(kind)
        assert np.array_equal(js.scale_table(base, 50).values, base.values)
        assert np.all(js.scale_table(base, 100).values == 1)


def test_qf10_known_entries():
    luma, chroma = js.tables_for(10)
    assert luma.values[0, 0] == 80  # floor((16*500+50)/100)
    assert luma.values[0].tolist() == IJG_Q10_LUMA_ROW0
    assert chroma.values[0].tolist() == IJG_Q10_CHROMA_ROW0


@given(st.integers(1, 100))
def test_scaling_matches_integer_oracle(qf):
    for kind in ("luma", "chroma"):
        base = js.base_table(kind)
        ours = js.scale_table(base, qf).values
        ref = [[oracles.ijg_scale(int(e), qf) for e in row] for row in base.values]
        assert ours.tolist() == ref
        assert ours.min() >= 1 and ours.max() <= 255


@pytest.mark.parametrize("bad", [0, 101, -5, 2.5, True, "x"])
def test_invalid_qf(bad):
    with pytest.raises((ValueError, TypeError)):
        js.scale_table(js.base_table("luma"), bad)


def test_dct_examples():
    assert np.allclose(js.forward_dct(np.full((8, 8), 128.0)), 0.0)
    c = js.forward_dct(np.full((8, 8), 255.0))
    assert c[0, 0] == pytest.approx(1016.0, abs=1e-9)
    c[0, 0] = 0
    assert np.max(np.abs(c)) < 1e-9


def test_dct_matches_textbook_sum(rng):
    block = rng.uniform(0, 255, (8, 8))
    assert np.max(np.abs(js.forward_dct(block) - oracles.dct_2d(block))) < 1e-9


@given(arrays(np.float64, (8, 8), elements=st.floats(-1000, 1000)))
def test_dct_round_trip(block):
    assert np.max(np.abs(js.inverse_dct(js.forward_dct(block)) - block)) < 1e-9


def test_dct_shape_checked():
    with pytest.raises(ValueError):
        js.forward_dct(np.zeros((8, 7)))


def test_quantize_examples():
    t = js.QuantTable(np.full((8, 8), 40), "luma")
    q = js.quantize(np.full((8, 8), 41.0), t)
    assert np.all(q == 1) and np.all(js.dequantize(q, t) == 40)
    assert np.all(js.quantize(np.full((8, 8), 19.0), t) == 0)
    ones = js.QuantTable(np.ones((8, 8)), "luma")
    ints = np.arange(-32, 32, dtype=float).reshape(8, 8)
    assert np.array_equal(js.dequantize(js.quantize(ints, ones), ones), ints)


def test_rounding_half_away_from_zero():
    t = js.QuantTable(np.full((8, 8), 2), "luma")
    vals = np.array([1.0, -1.0, 3.0, -3.0] * 16).reshape(8, 8)
    assert js.quantize(vals, t).ravel()[:4].tolist() == [1, -1, 2, -2]


def test_chroma_resampling_examples():
    assert js.subsample_chroma(np.array([[0.0, 0.0], [255.0, 255.0]])).tolist() == [[127.5]]
    const = np.full((9, 13), 77.0)
    small = js.subsample_chroma(const)
    assert small.shape == (5, 7)
    assert np.allclose(js.upsample_chroma(small, const.shape), 77.0)


def test_ramp_reproduced_in_interior():
    yy, xx = np.mgrid[0:32, 0:40].astype(float)
    ramp = 3.0 * yy + 1.5 * xx + 10
    back = js.upsample_chroma(js.subsample_chroma(ramp), ramp.shape)
    assert np.max(np.abs(back[1:-1, 1:-1] - ramp[1:-1, 1:-1])) < 1e-6


def test_qf100_psnr_on_photos_and_noise(natural_images, rng):
    imgs = list(natural_images.values())
    imgs.append(Image(rng.integers(0, 256, (48, 40, 3)).astype(float), ColorSpace.RGB))
    for img in imgs:
        assert y_psnr(img, js.degrade(img, 100)) >= 50.0


@pytest.mark.parametrize("qf", [1, 10, 57, 100])
def test_constant_image_stays_constant(qf):
    img = Image(np.full((20, 28, 3), [90.0, 140.0, 200.0]), ColorSpace.RGB)
    out = js.degrade(img, qf)
    assert np.ptp(out.data.reshape(-1, 3), axis=0).max() < 1e-9
    # only the DC coefficient is quantized: error at most half a DC step / 8
    dc_step = js.tables_for(qf)[0].values[0, 0]
    y_err = abs(rgb_to_ycbcr(out).data[0, 0, 0] - rgb_to_ycbcr(img).data[0, 0, 0])
    assert y_err <= dc_step / 16 + 1e-9
    if dc_step <= 16:
        assert y_err <= 1.0


@pytest.mark.parametrize("qf", [1, 10, 57, 100])
def test_mid_gray_is_exact(qf):
    img = Image(np.full((16, 16, 3), 128.0), ColorSpace.RGB)
    assert np.max(np.abs(js.degrade(img, qf).data - 128.0)) < 1e-9


def test_quality_ordering(natural_images):
    for img in natural_images.values():
        assert y_psnr(img, js.degrade(img, 10)) < y_psnr(img, js.degrade(img, 90))


def test_energy_ordering_mostly_monotone(natural_images):
    qfs = list(range(10, 101, 10))
    ok = total = 0
    for img in natural_images.values():
        y = rgb_to_ycbcr(img).plane(0)
        mse = [np.mean((rgb_to_ycbcr(js.degrade(img, q)).plane(0) - y) ** 2) for q in qfs]
        ok += sum(b <= a for a, b in zip(mse, mse[1:]))
        total += len(qfs) - 1
    assert ok / total >= 0.9


def test_blockiness_at_qf10(natural_images):
    for img in natural_images.values():
        ref = rgb_to_ycbcr(img).plane(0)
        deg = rgb_to_ycbcr(js.degrade(img, 10)).plane(0)
        assert metrics.psnr_b(ref, deg) < metrics.psnr(ref, deg)


def test_deterministic_and_odd_sizes(rng):
    img = Image(rng.uniform(0, 255, (13, 21, 3)), ColorSpace.RGB)
    a, b = js.degrade(img, 30), js.degrade(img, 30)
    assert a.data.shape == img.data.shape
    assert np.array_equal(a.data, b.data)
    tiny = Image(rng.uniform(0, 255, (3, 5, 3)), ColorSpace.RGB)
    assert js.degrade(tiny, 50).data.shape == (3, 5, 3)


def test_gray_and_wrong_space(rng):
    g = Image(rng.uniform(0, 255, (16, 16)), ColorSpace.GRAY)
    assert js.degrade(g, 20).space is ColorSpace.GRAY
    with pytest.raises(ValueError):
        js.degrade(Image(np.zeros((8, 8, 3)), ColorSpace.YCBCR), 20)


def test_table_text_dump():
    text = js.tables_for(50)[0].to_text().splitlines()
    assert text[0] == "# luma" and len(text) == 9
    assert text[1].split()[0] == "16"
