import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvaekd.latent import GaussianParams, gaussian_head, kl_divergence, product_of_experts, reparameterize
from cvaekd.layers import MlpParams
from cvaekd.numerics import Tensor, finite_difference_check


def g(mu, log_var):
    return GaussianParams(Tensor(np.asarray(mu, float)), Tensor(np.asarray(log_var, float)))


def test_zero_heads_give_standard_normal(rng):
    out = gaussian_head(Tensor(rng.normal(size=5)), MlpParams.zeros(5, 3, 16), MlpParams.zeros(5, 3, 16))
    assert out.dim == 16
    assert np.all(out.mu.data == 0.0) and np.all(out.var == 1.0)


def test_head_clamps_log_var():
    sig = MlpParams.zeros(1, 1, 2)
    sig.b2.data[:] = [20.0, -20.0]
    out = gaussian_head(Tensor([0.3]), MlpParams.zeros(1, 1, 2), sig)
    assert out.log_var.data.tolist() == [8.0, -8.0]
    with pytest.raises(ValueError):
        gaussian_head(Tensor([0.3]), MlpParams.zeros(1, 1, 2), MlpParams.zeros(1, 1, 3))


def test_reparameterize_cases(rng):
    q = g([1.0, -2.0], [0.5, -1.0])
    assert np.array_equal(reparameterize(q, np.zeros(2)).data, q.mu.data)
    e = rng.normal(size=3)
    assert np.array_equal(reparameterize(g(np.zeros(3), np.zeros(3)), e).data, e)
    with pytest.raises(ValueError):
        reparameterize(q, np.zeros(3))


def test_reparameterize_monte_carlo(rng):
    n = 100_000
    mu, lv = np.array([0.5, -1.0, 2.0]), np.array([0.0, 1.0, -2.0])
    q = GaussianParams(Tensor(np.tile(mu, (n, 1))), Tensor(np.tile(lv, (n, 1))))
    z = reparameterize(q, rng.standard_normal((n, 3))).data
    var = np.exp(lv)
    assert np.all(np.abs(z.mean(0) - mu) < 3 * np.sqrt(var / n))
    assert np.all(np.abs(z.var(0, ddof=1) - var) < 3 * var * np.sqrt(2 / (n - 1)))


def test_reparameterize_gradients(rng):
    mu, lv = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=4))
    eps = rng.normal(size=4)
    w = Tensor(rng.normal(size=4))
    assert finite_difference_check(lambda: (reparameterize(GaussianParams(mu, lv), eps) * w).sum(), [mu, lv]) < 1e-6


@pytest.mark.parametrize("q,p,expected", [
    (([1.0], [0.0]), ([0.0], [0.0]), 0.5),
    (([0.0], [math.log(4.0)]), ([0.0], [0.0]), 0.5 * (4 - 1 - math.log(4))),
    (([0.3, -1.0], [0.2, 0.1]), ([0.3, -1.0], [0.2, 0.1]), 0.0),
])
def test_kl_closed_form(q, p, expected):
    assert kl_divergence(g(*q), g(*p)).item() == pytest.approx(expected, abs=1e-12)


def test_kl_value_and_batch_shape():
    assert kl_divergence(g([0.0], [math.log(4.0)]), g([0.0], [0.0])).item() == pytest.approx(0.8068528194400547)
    out = kl_divergence(g(np.ones((3, 2)), np.zeros((3, 2))), g(np.zeros((3, 2)), np.zeros((3, 2))))
    assert out.shape == (3,) and np.allclose(out.data, 1.0)
    with pytest.raises(ValueError):
        kl_divergence(g([0.0], [0.0]), g([0.0, 0.0], [0.0, 0.0]))


def _vec(n):
    return st.lists(st.floats(-3, 3), min_size=n, max_size=n)


def _lv(n):
    return st.lists(st.floats(-8, 8), min_size=n, max_size=n)


@settings(max_examples=200, deadline=None)
@given(_vec(3), _lv(3), _vec(3), _lv(3))
def test_kl_nonnegative(mq, lq, mp, lp):
    assert kl_divergence(g(mq, lq), g(mp, lp)).item() >= -1e-12


def test_kl_gradients(rng):
    params = [Tensor(rng.normal(size=3)) for _ in range(4)]
    f = lambda: kl_divergence(GaussianParams(*params[:2]), GaussianParams(*params[2:]))
    assert finite_difference_check(f, params) < 1e-6


def test_poe_closed_form():
    out = product_of_experts(g([0.0], [0.0]), g([2.0], [0.0]))
    assert out.mu.item() == pytest.approx(1.0, abs=1e-15)
    assert out.var[0] == pytest.approx(0.5, abs=1e-15)


def test_poe_flat_expert_vanishes():
    # shift in mu is (mu_k - mu_x) * e^-8 / prec, about 4e-4 for the second dim
    out = product_of_experts(g([0.0, 0.7], [0.0, -0.4]), g([0.0, -1.0], [8.0, 8.0]))
    assert np.all(np.abs(out.mu.data - [0.0, 0.7]) < 1e-3)
    assert np.all(np.abs(out.log_var.data - [0.0, -0.4]) < 1e-3)


@settings(max_examples=200, deadline=None)
@given(_vec(4), _lv(4), _vec(4), _lv(4))
def test_poe_symmetric_and_tighter(ma, la, mb, lb):
    a, b = g(ma, la), g(mb, lb)
    ab, ba = product_of_experts(a, b), product_of_experts(b, a)
    assert np.allclose(ab.mu.data, ba.mu.data, rtol=1e-12, atol=1e-12)
    assert np.allclose(ab.log_var.data, ba.log_var.data, rtol=1e-12, atol=1e-12)
    assert np.all(ab.var <= np.minimum(a.var, b.var) * (1 + 1e-12))


def test_poe_gradients(rng):
    params = [Tensor(rng.normal(size=3)) for _ in range(4)]
    w = Tensor(rng.normal(size=3))

    def f():
        out = product_of_experts(GaussianParams(*params[:2]), GaussianParams(*params[2:]))
        return (out.mu * w).sum() + (out.log_var * w).sum()

    assert finite_difference_check(f, params) < 1e-6


def test_poe_shape_mismatch():
    with pytest.raises(ValueError):
        product_of_experts(g([0.0], [0.0]), g([0.0, 1.0], [0.0, 0.0]))
    with pytest.raises(ValueError):
        GaussianParams(Tensor([0.0]), Tensor([0.0, 1.0]))
