import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctvae.gradcheck import grad_check
from ctvae.tensor import ShapeError, Tensor
from ctvae import tensor as T
from ctvae.variational import (AnnealSchedule, GaussianParams, kl_pair, kl_vs_standard, kl_weight,
                               reparameterize)


def gauss(mu, logvar):
    return GaussianParams(Tensor(np.asarray(mu, float)), Tensor(np.asarray(logvar, float)))


def mc_kl(q_mu, q_lv, p_mu, p_lv, n, rng):
    """Sample mean of log q(x) - log p(x) with x ~ q."""
    x = q_mu + np.exp(0.5 * q_lv) * rng.standard_normal((n, len(q_mu)))

    def logpdf(mu, lv):
        return -0.5 * (np.log(2 * np.pi) + lv + (x - mu) ** 2 / np.exp(lv)).sum(axis=1)

    return float(np.mean(logpdf(q_mu, q_lv) - logpdf(p_mu, p_lv)))


def test_kl_standard_identity_is_zero():
    assert kl_vs_standard(gauss([0.0, 0.0], [0.0, 0.0])).item() == 0.0


def test_kl_standard_hand_value_and_monte_carlo():
    assert kl_vs_standard(gauss([1.0], [0.0])).item() == pytest.approx(0.5, abs=1e-12)
    est = mc_kl(np.array([1.0]), np.array([0.0]), np.zeros(1), np.zeros(1), 10**6, np.random.default_rng(0))
    assert est == pytest.approx(0.5, abs=1e-2)


def test_kl_pair_cases():
    q = gauss([0.3, -1.0], [0.2, -0.5])
    assert kl_pair(q, q).item() == pytest.approx(0.0, abs=1e-12)
    std = gauss([0.0, 0.0], [0.0, 0.0])
    assert kl_pair(q, std).item() == pytest.approx(kl_vs_standard(q).item(), abs=1e-12)
    assert kl_pair(gauss([1.0], [0.0]), gauss([0.0], [0.0])).item() == pytest.approx(0.5, abs=1e-12)


def test_kl_pair_dim_mismatch():
    with pytest.raises(ShapeError):
        kl_pair(gauss([0.0], [0.0]), gauss([0.0, 1.0], [0.0, 0.0]))


def test_kl_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        kl_vs_standard(gauss([np.nan], [0.0]))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5)),
                min_size=1, max_size=6))
def test_kls_non_negative(entries):
    a = np.array(entries)
    q, p = gauss(a[:, 0], a[:, 1]), gauss(a[:, 2], a[:, 3])
    assert kl_vs_standard(q).item() >= 0
    assert kl_pair(q, p).item() >= 0


def test_reparameterize_cases():
    g = gauss([0.5, -1.0], [0.3, 1.0])
    np.testing.assert_array_equal(reparameterize(g, np.zeros(2)).data, [0.5, -1.0])
    e = np.array([0.7, -0.2])
    np.testing.assert_allclose(reparameterize(gauss([0, 0], [0, 0]), e).data, e, rtol=1e-6)
    with pytest.raises(ShapeError):
        reparameterize(g, np.zeros(3))


def test_reparameterize_sample_mean():
    rng = np.random.default_rng(1)
    mu, lv = np.array([0.5, -2.0, 1.0]), np.array([0.0, 1.0, -1.0])
    n = 10**5
    g = GaussianParams(Tensor(np.tile(mu, (n, 1))), Tensor(np.tile(lv, (n, 1))))
    s = reparameterize(g, rng.standard_normal((n, 3))).data
    sigma = np.exp(0.5 * lv)
    assert np.all(np.abs(s.mean(axis=0) - mu) < 4 * sigma / np.sqrt(n))


def test_kl_and_reparameterize_gradients():
    rng = np.random.default_rng(2)
    qm, ql = Tensor(rng.normal(size=(2, 3)), requires_grad=True), Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    pm, pl = Tensor(rng.normal(size=(2, 3)), requires_grad=True), Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    eps = rng.normal(size=(2, 3))
    probe = rng.normal(size=(2, 3))
    assert grad_check(lambda: T.sum_(kl_vs_standard(GaussianParams(qm, ql))), [qm, ql]) < 1e-4
    assert grad_check(lambda: T.sum_(kl_pair(GaussianParams(qm, ql), GaussianParams(pm, pl))), [qm, ql, pm, pl]) < 1e-4
    assert grad_check(lambda: T.sum_(reparameterize(GaussianParams(qm, ql), eps) * probe), [qm, ql]) < 1e-4


def test_kl_weight_schedule():
    s = AnnealSchedule(pretrain_steps=10, ramp_steps=20)
    assert kl_weight(0, s) == 0.0
    assert kl_weight(9, s) == 0.0
    assert kl_weight(20, s) == 0.5
    assert kl_weight(30, s) == 1.0
    assert kl_weight(10_000, s) == 1.0


def test_fixed_weight_overrides_ramp():
    assert kl_weight(0, AnnealSchedule(pretrain_steps=100, fixed_weight=1.0)) == 1.0


def test_schedule_validation():
    with pytest.raises(ValueError):
        AnnealSchedule(pretrain_steps=-1)
    with pytest.raises(ValueError):
        AnnealSchedule(ramp_steps=0)
    with pytest.raises(ValueError):
        AnnealSchedule(kld_period=0)
    with pytest.raises(ValueError):
        AnnealSchedule(mode="sometimes")
    with pytest.raises(ValueError):
        kl_weight(-1, AnnealSchedule())


def test_kld_period_default_three():
    s = AnnealSchedule()
    assert s.kld_period == 3
    assert [s.kl_active(i) for i in range(6)] == [True, False, False, True, False, False]
