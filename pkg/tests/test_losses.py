import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crossover import autodiff as ad
from crossover.autodiff import Tensor
from crossover.losses import LossConfig, constraint_loss, constraint_terms, mse_loss, prediction_loss, total_loss
from crossover.network import FeatureSlices


def sl(vc, ve, hc, he):
    return FeatureSlices(*(Tensor(np.asarray(x, dtype=np.float64), requires_grad=True) for x in (vc, ve, hc, he)))


def test_prediction_hand_values():
    assert float(prediction_loss([1.0], [1]).data) <= 1e-11
    assert float(prediction_loss([0.5, 0.5], [1, 0]).data) == pytest.approx(math.log(2), abs=1e-12)
    assert float(prediction_loss([0.25], [1]).data) == pytest.approx(-math.log(0.25), abs=1e-12)
    with pytest.raises(ValueError):
        prediction_loss(np.zeros(0), np.zeros(0))


def test_prediction_clamps_extremes():
    v = float(prediction_loss([0.0], [1]).data)
    assert math.isfinite(v) and v == pytest.approx(-math.log(1e-12))


def test_constraint_hand_values():
    one = lambda v: [[[v]]]
    assert float(constraint_loss(sl(one(2.0), one(3.0), one(1.0), one(0.0))).data) == -8.0
    z = np.zeros((2, 3, 4))
    assert float(constraint_loss(sl(z, np.zeros((2, 6, 4)), np.zeros((2, 4, 3)), np.zeros((2, 4, 6)))).data) == 0.0
    rng = np.random.default_rng(0)
    hc, he = rng.normal(size=(2, 4, 3)), rng.normal(size=(2, 4, 6))
    s = sl(np.swapaxes(hc, -1, -2), np.swapaxes(he, -1, -2), hc, he)
    assert float(constraint_loss(s).data) == 0.0


def test_no_end_constraint():
    one = lambda v: [[[v]]]
    s = sl(one(2.0), one(3.0), one(1.0), one(0.0))
    assert float(constraint_loss(s, LossConfig("no_end_constraint")).data) == 1.0


def test_total_variants():
    one = lambda v: [[[v]]]
    s = sl(one(2.0), one(3.0), one(1.0), one(0.0))
    y_hat, y = [0.5, 0.5], [1, 0]
    full = total_loss([0.5], [1], s, LossConfig("full"))
    assert float(full.total.data) == pytest.approx(math.log(2) - 8.0, abs=1e-12)
    lam0 = total_loss(y_hat, y, None, LossConfig("full", lambda_cs=0.0))
    assert float(lam0.total.data) == float(prediction_loss(y_hat, y).data)
    assert float(total_loss([0.5], [1], None, LossConfig("mse_only")).total.data) == 0.25
    assert float(total_loss(y_hat, y, s, LossConfig("entropy_only")).total.data) == float(prediction_loss(y_hat, y).data)
    with pytest.raises(ValueError):
        LossConfig("dice")
    with pytest.raises(ValueError):
        total_loss([0.5], [1], None, LossConfig("full"))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_constraint_properties(n, c, p, q, seed):
    rng = np.random.default_rng(seed)
    vc, ve = rng.normal(size=(n, c, p, q)), rng.normal(size=(n, c, 2 * p, q))
    hc, he = rng.normal(size=(n, c, q, p)), rng.normal(size=(n, c, q, 2 * p))
    s = sl(vc, ve, hc, he)
    cons, ends = constraint_terms(s)
    assert (cons.data >= 0).all() and (ends.data >= 0).all()
    # swapping branches with a per-map transpose leaves the value unchanged
    swapped = sl(np.swapaxes(hc, -1, -2), np.swapaxes(he, -1, -2), np.swapaxes(vc, -1, -2), np.swapaxes(ve, -1, -2))
    assert float(constraint_loss(swapped).data) == pytest.approx(float(constraint_loss(s).data), rel=1e-12, abs=1e-12)
    # batch value is the mean of per-sample values
    per = [float(constraint_loss(sl(vc[i], ve[i], hc[i], he[i])).data) for i in range(n)]
    assert float(constraint_loss(s).data) == pytest.approx(np.mean(per), rel=1e-12, abs=1e-12)


def test_list_of_slices_accepted():
    rng = np.random.default_rng(1)
    items = [sl(rng.normal(size=(2, 1, 3)), rng.normal(size=(2, 2, 3)), rng.normal(size=(2, 3, 1)), rng.normal(size=(2, 3, 2))) for _ in range(3)]
    batched = constraint_loss(items)
    assert float(batched.data) == pytest.approx(np.mean([float(constraint_loss(i).data) for i in items]), rel=1e-12)


def test_loss_gradients_fd():
    rng = np.random.default_rng(3)
    p = Tensor(rng.uniform(0.1, 0.9, size=4), requires_grad=True)
    y = np.array([1, 0, 1, 0])
    s = sl(rng.normal(size=(2, 1, 2, 3)), rng.normal(size=(2, 1, 4, 3)), rng.normal(size=(2, 1, 3, 2)), rng.normal(size=(2, 1, 3, 4)))
    params = {"p": p, "vc": s.vc, "ve": s.ve, "hc": s.hc, "he": s.he}
    for kind in ("full", "mse_only", "no_end_constraint"):
        rep = ad.finite_diff_check(lambda: total_loss(p, y, s, LossConfig(kind)).total, params, step=1e-6, tolerance=1e-6)
        assert rep.ok and rep.max_rel_err < 1e-6, (kind, rep)


def test_float32_epsilon_raised():
    p = Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
    v = prediction_loss(p, [0])
    assert math.isfinite(float(v.data))
    assert np.isfinite(mse_loss(p, [0]).data)
