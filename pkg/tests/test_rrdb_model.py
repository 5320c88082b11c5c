import numpy as np
import pytest

import gradcheck
from rrdbjpeg import autodiff as ad
from rrdbjpeg import rrdb_model as rm
from rrdbjpeg.autodiff import Tensor
from rrdbjpeg.imaging import ColorSpace, Image

# frozen regression constants: full-size networks (64 ch, growth 32)
Y_NET_PARAMS = 6553857
CBCR_NET_PARAMS = 4157506


def tiny(variant="y", **kw):
    return rm.NetworkSpec.reduced(variant, channels=kw.pop("channels", 4), n_rrdb=kw.pop("n_rrdb", 1))


def test_full_size_specs():
    y, c = rm.NetworkSpec.full("y"), rm.NetworkSpec.full("cbcr")
    assert (y.n_rrdb, c.n_rrdb) == (5, 3)
    assert y.parameter_count() == Y_NET_PARAMS
    assert c.parameter_count() == CBCR_NET_PARAMS
    shapes = y.parameter_shapes()
    assert shapes["stem.weight"] == (64, 1, 3, 3)
    assert shapes["enc.0.weight"] == (128, 64, 5, 5)
    assert shapes["dec.1.weight"] == (64, 128, 5, 5)
    assert shapes["rrdb.4.db.4.conv.4.weight"] == (64, 64 + 4 * 32, 3, 3)
    assert c.parameter_shapes()["stem3d.weight"] == (64, 1, 3, 3, 3)
    assert c.parameter_shapes()["out.weight"] == (2, 64, 3, 3)


def test_build_deterministic_and_zero_bias():
    spec = tiny()
    a, b = rm.build(spec, seed=3), rm.build(spec, seed=3)
    for k in a.params:
        assert np.array_equal(a[k].data, b[k].data)
        if k.endswith(".bias"):
            assert np.all(a[k].data == 0)
    assert not np.array_equal(rm.build(spec, seed=4)["stem.weight"].data, a["stem.weight"].data)
    assert a["stem.weight"].dtype == np.float32


def test_kaiming_std():
    spec = rm.NetworkSpec(n_rrdb=1, channels=64, wide_channels=64)
    w = rm.build(spec, seed=0)["enc.1.weight"].data
    assert w.shape == (64, 64, 3, 3)
    expected = 0.1 * np.sqrt(2 / (1 + 0.2 ** 2) / 576)
    assert abs(w.std() - expected) / expected < 0.1


@pytest.mark.parametrize("seed", range(12))
def test_shape_preservation(seed):
    rng = np.random.default_rng(seed)
    h, w = (int(v) for v in rng.integers(16, 41, size=2))
    n = int(rng.integers(1, 3))
    my = rm.build(tiny("y"), seed=seed)
    out = rm.forward_y(my, Tensor(rng.uniform(-1, 1, (n, 1, h, w)).astype(np.float32)))
    assert out.shape == (n, 1, h, w)
    assert np.all(np.abs(out.data) < 1)
    mc = rm.build(tiny("cbcr"), seed=seed)
    out = rm.forward_cbcr(mc, Tensor(rng.uniform(-1, 1, (n, 3, h, w)).astype(np.float32)))
    assert out.shape == (n, 2, h, w)
    assert np.all(np.abs(out.data) < 1)


def test_documented_example_shapes():
    m = rm.build(rm.NetworkSpec.reduced("y"), seed=0)
    with ad.no_grad():
        assert rm.forward_y(m, Tensor(np.zeros((2, 1, 64, 48), np.float32))).shape == (2, 1, 64, 48)


def test_wrong_channel_count():
    m = rm.build(tiny("y"))
    with pytest.raises(ValueError):
        m(Tensor(np.zeros((1, 3, 16, 16), np.float32)))
    with pytest.raises(ValueError):
        rm.forward_cbcr(m, Tensor(np.zeros((1, 3, 16, 16), np.float32)))


def test_zero_weight_rrdb_chain_is_identity(rng):
    spec = rm.NetworkSpec.reduced("y", channels=8, n_rrdb=3)
    m = rm.build(spec, seed=1, dtype=np.float64)
    for name, t in m.params.items():
        if name.startswith("rrdb."):
            t.data[...] = 0
    with ad.no_grad():
        h = rm.encode(m, Tensor(rng.uniform(-1, 1, (1, 1, 20, 20))))
        out = rm.rrdb_chain(m, h)
    assert np.max(np.abs(out.data - h.data)) < 1e-6


def test_cbcr_channel_order_matters(rng):
    m = rm.build(tiny("cbcr"), seed=2)
    x = rng.uniform(-1, 1, (1, 3, 16, 16)).astype(np.float32)
    with ad.no_grad():
        a = m(Tensor(x)).data
        b = m(Tensor(x[:, [0, 2, 1]])).data
    assert np.max(np.abs(a - b)) > 0


def test_gradient_reaches_every_parameter(rng):
    for variant in ("y", "cbcr"):
        m = rm.build(tiny(variant), seed=5)
        x = rng.uniform(-1, 1, (2, m.spec.in_channels, 16, 16)).astype(np.float32)
        t = rng.uniform(-1, 1, (2, m.spec.out_channels, 16, 16)).astype(np.float32)
        ad.l1_loss(m(Tensor(x)), t).backward()
        for name, p in m.params.items():
            assert p.grad is not None and np.any(p.grad != 0), name


def test_whole_network_gradient_check(rng):
    spec = rm.NetworkSpec.reduced("cbcr", channels=2, n_rrdb=1)
    m = rm.build(spec, seed=0, dtype=np.float64)
    m.requires_grad_(False)
    x = rng.uniform(-1, 1, (1, 3, 6, 6))
    names = ["stem3d.weight", "rrdb.0.db.2.conv.1.weight", "out.bias"]
    originals = {n: m[n].data.copy() for n in names}

    def fn(*ws):
        for n, w in zip(names, ws):
            m.params[n] = w
        return m(Tensor(x))

    assert gradcheck.check(fn, [originals[n] for n in names], rng) < 1e-5


def test_weights_round_trip(tmp_path, rng):
    m = rm.build(tiny("cbcr"), seed=9)
    with ad.no_grad():
        for t in m.parameters():
            t.data[...] += rng.normal(scale=0.01, size=t.shape).astype(np.float32)
    path = tmp_path / "c.weights"
    rm.save_weights(m, path)
    back = rm.load_weights(path, tiny("cbcr"))
    x = Tensor(rng.uniform(-1, 1, (1, 3, 16, 16)).astype(np.float32))
    with ad.no_grad():
        assert np.array_equal(m(x).data, back(x).data)
    rm.save_weights(back, tmp_path / "again.weights")
    assert path.read_bytes() == (tmp_path / "again.weights").read_bytes()
    assert path.read_bytes()[:8] == b"RRDBWTS\x00"


def test_weight_file_errors(tmp_path):
    m = rm.build(tiny("y"), seed=0)
    path = tmp_path / "y.weights"
    rm.save_weights(m, path)
    raw = path.read_bytes()
    (tmp_path / "short.weights").write_bytes(raw[:-7])
    with pytest.raises(rm.WeightFormatError, match="truncated"):
        rm.load_weights(tmp_path / "short.weights")
    (tmp_path / "magic.weights").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(rm.WeightFormatError, match="magic"):
        rm.load_weights(tmp_path / "magic.weights")
    with pytest.raises(rm.WeightFormatError, match="hash mismatch.*first offending tensor"):
        rm.load_weights(path, tiny("y", channels=6))
    with pytest.raises(rm.WeightFormatError, match="cannot read"):
        rm.load_weights(tmp_path / "missing.weights")


def test_restore_dimensions_and_determinism(rng):
    y, c = rm.build(tiny("y"), seed=0), rm.build(tiny("cbcr"), seed=1)
    img = Image(rng.uniform(0, 255, (19, 23, 3)), ColorSpace.RGB)
    a, b = rm.restore(y, c, img), rm.restore(y, c, img)
    assert a.data.shape == img.data.shape and a.space is ColorSpace.RGB
    assert np.array_equal(a.data, b.data)
    assert a.data.min() >= 0 and a.data.max() <= 255
    only_y = rm.restore(y, None, img)
    assert only_y.data.shape == img.data.shape
    with pytest.raises(ValueError):
        rm.restore(None, c, img)


def test_normalization_round_trip():
    x = np.array([0.0, 127.5, 255.0])
    assert rm.to_unit(x).tolist() == [-1.0, 0.0, 1.0]
    assert np.allclose(rm.from_unit(rm.to_unit(x)), x)
