import numpy as np
import pytest

from crossover import autodiff as ad
from crossover.network import (
    BranchSpec, ConvLayer, NetworkSpec, POOL, crossover_spec, forward, init_xavier, load_params, mirror_params,
    param_shapes, preset_spec, save_params, spec_from_dict, spec_to_dict, square_spec, zero_params,
)
from crossover.patches import extract_crossover
from crossover.receptive import ConfigurationError


@pytest.fixture(scope="module")
def kidney():
    return preset_spec("kidney")


def small_spec(k=2):
    layers = (ConvLayer(3, 2, 4), POOL, ConvLayer(3, 2, 5), ConvLayer(3, 1, 5))
    return crossover_spec(layers, 24, 6, k, head_units=7, dropout=0.0)


def test_kidney_shapes(kidney):
    v = kidney.branch("vertical")
    shapes = v.shapes()
    assert [s[1:] for s in shapes] == [(100, 20), (96, 18), (48, 9), (46, 8), (44, 6), (22, 3), (20, 2), (18, 2), (16, 2), (14, 1)]
    assert shapes[4] == (64, 44, 6)
    assert v.n_conv == 7 and sum(l is POOL for l in v.layers) == 2
    assert kidney.branch("horizontal") == v.mirrored()


def test_breast_preset():
    b = preset_spec("breast")
    v = b.branch("vertical")
    assert v.extent == (340, 68) and v.n_conv == 11 and sum(l is POOL for l in v.layers) == 3
    assert v.crossover_layer == 6
    sv, sh = b.slice_specs()
    assert sv.center_shape == sh.center_shape[::-1]


def test_unknown_preset():
    with pytest.raises(ConfigurationError):
        preset_spec("liver")


def test_mirror_required():
    v = BranchSpec("vertical", (24, 6), (ConvLayer(3, 2, 4),))
    h = BranchSpec("horizontal", (6, 24), (ConvLayer(3, 2, 4),))
    with pytest.raises(ConfigurationError):
        NetworkSpec((v, h), 24, 6)


def test_xavier_bound_and_variance():
    spec = NetworkSpec((BranchSpec("square", (1, 1), (ConvLayer(1, 1, 1),), head_units=1),), 2, 1)
    shapes = param_shapes(spec)
    assert shapes["square.conv1.w"][1:] == (1, 1)  # fan_in = fan_out = 1 -> a = sqrt(3)
    draws = np.concatenate([init_xavier(spec, np.random.default_rng(s))["square.conv1.w"].data.ravel() for s in range(2000)])
    assert np.abs(draws).max() < np.sqrt(3)
    # variance over many draws of a wide layer
    wide = NetworkSpec((BranchSpec("square", (1, 1), (ConvLayer(1, 1, 400),), head_units=250),), 2, 1)
    w = init_xavier(wide, np.random.default_rng(0))["square.head.w"].data
    fan_in, fan_out = 400, 250
    assert abs(w.var() / (2.0 / (fan_in + fan_out)) - 1) < 0.1
    assert all((t.data == 0).all() for n, t in init_xavier(wide, np.random.default_rng(0)).items() if n.endswith(".b"))


def test_init_deterministic(kidney):
    a = init_xavier(kidney, np.random.default_rng(5))
    b = init_xavier(kidney, np.random.default_rng(5))
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)


def test_zero_params_give_half(kidney):
    params = zero_params(kidney)
    img = np.random.default_rng(0).random((120, 120))
    out = forward(params, kidney, extract_crossover(img, (60, 60), 100, 20))
    assert out.probability.data[0] == 0.5


def test_slice_shapes_and_recomputation(kidney):
    params = init_xavier(kidney, np.random.default_rng(2))
    img = np.random.default_rng(1).random((130, 130))
    p = extract_crossover(img, (70, 60), 100, 20)
    out = forward(params, kidney, p, keep_features=True)
    s = out.slices
    assert s.vc.shape == (1, 64, 4, 6) and s.ve.shape == (1, 64, 8, 6)
    assert s.hc.shape == (1, 64, 6, 4) and s.he.shape == (1, 64, 6, 8)
    sv, sh = kidney.slice_specs()
    fv = out.features["vertical"][sv.layer - 1].data
    fh = out.features["horizontal"][sh.layer - 1].data
    c, e = sv.extract(fv)
    np.testing.assert_array_equal(c, s.vc.data)
    np.testing.assert_array_equal(e, s.ve.data)
    c, e = sh.extract(fh)
    np.testing.assert_array_equal(c, s.hc.data)
    np.testing.assert_array_equal(e, s.he.data)
    for view in ("vertical", "horizontal"):
        got = [f.shape[1:] for f in out.features[view]]
        assert got == kidney.branch(view).shapes()[1:]


def test_eval_deterministic_and_open_interval(kidney):
    params = init_xavier(kidney, np.random.default_rng(3))
    img = np.random.default_rng(4).random((110, 110))
    p = extract_crossover(img, (50, 50), 100, 20)
    a = forward(params, kidney, p, training=False).probability.data
    b = forward(params, kidney, p, training=False).probability.data
    assert a[0] == b[0] and 0.0 < a[0] < 1.0


def test_training_mode_uses_dropout(kidney):
    params = init_xavier(kidney, np.random.default_rng(3))
    img = np.random.default_rng(4).random((110, 110))
    p = extract_crossover(img, (50, 50), 100, 20)
    a = forward(params, kidney, p, training=True, rng=ad.make_rng(1)).logit.data
    b = forward(params, kidney, p, training=False).logit.data
    assert a[0] != b[0]


def test_mirror_symmetry():
    spec = small_spec()
    params = init_xavier(spec, np.random.default_rng(7))
    for t in params.values():  # non-zero biases too
        t.data += np.random.default_rng(8).normal(size=t.shape) * 0.05
    img = np.random.default_rng(9).random((40, 40))
    p = extract_crossover(img, (20, 17), 24, 6)
    q = extract_crossover(img.T.copy(), (17, 20), 24, 6)
    m = mirror_params(params, spec)
    a = forward(params, spec, p).probability.data[0]
    b = forward(m, spec, q).probability.data[0]
    assert abs(a - b) < 1e-12


def test_extent_mismatch_rejected(kidney):
    params = zero_params(kidney)
    with pytest.raises(ConfigurationError):
        forward(params, kidney, {"vertical": np.zeros((1, 1, 90, 20)), "horizontal": np.zeros((1, 1, 20, 100))})


def test_input_norm_applied():
    spec = small_spec()
    params = init_xavier(spec, np.random.default_rng(1))
    img = np.random.default_rng(2).random((40, 40))
    p = extract_crossover(img, (20, 20), 24, 6)
    p2 = extract_crossover((img - 0.25) / 2.0, (20, 20), 24, 6)
    a = forward(params, spec.with_input_norm(0.25, 2.0), {"vertical": p.vertical, "horizontal": p.horizontal})
    b = forward(params, spec, {"vertical": p2.vertical, "horizontal": p2.horizontal})
    np.testing.assert_allclose(a.logit.data, b.logit.data, rtol=1e-12)


def test_square_baseline_shapes(kidney):
    tpl = kidney.branch("vertical")
    for size in (28, 56, 100):
        sq = square_spec(size, tpl, 100, 20)
        b = sq.branch("square")
        assert b.n_conv == 7 and b.extent == (size, size)
        assert all(e >= 1 for e in b.stack.extents(0))


def test_params_roundtrip(tmp_path, kidney):
    params = init_xavier(kidney, np.random.default_rng(0), np.float32)
    save_params(params, tmp_path / "m.params", kidney)
    loaded, spec = load_params(tmp_path / "m.params")
    assert spec == kidney and list(loaded) == list(params)
    assert all(np.array_equal(loaded[k].data, params[k].data) and loaded[k].dtype == np.float32 for k in params)
    assert spec_from_dict(spec_to_dict(kidney.with_input_norm(0.3, 0.2))) == kidney.with_input_norm(0.3, 0.2)


def test_params_truncated(tmp_path):
    spec = small_spec()
    save_params(init_xavier(spec, np.random.default_rng(0)), tmp_path / "m.params", spec)
    raw = (tmp_path / "m.params").read_bytes()
    (tmp_path / "t.params").write_bytes(raw[:-10])
    with pytest.raises(ValueError):
        load_params(tmp_path / "t.params")
    (tmp_path / "b.params").write_bytes(b"junk" + raw)
    with pytest.raises(ValueError):
        load_params(tmp_path / "b.params")
