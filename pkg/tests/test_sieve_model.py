import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats
from scipy.integrate import quad

from uhauction.errors import ConfigError, DegenerateSupportError, ParameterError
from uhauction.quadrature import gauss_legendre
from uhauction.sieve_model import (
    SieveParams,
    SieveParent,
    SieveWeights,
    basis_cdf,
    basis_pdf,
    basis_sf,
    cond_cdf,
    cond_pdf,
    conditional_mean_slope,
    joint_pdf,
    load_model,
    log_joint_pdf_grad,
    marginal_t_pdf,
    reflect_tau,
    sample_sieve,
    save_model,
    softmax_weights,
)

seeds = st.integers(0, 2 ** 32 - 1)


def random_params(seed, p=5, scale=1.0):
    rng = np.random.default_rng(seed)
    return SieveParams.from_free(p, scale * rng.standard_normal(p * p - 1))


def test_softmax_uniform():
    w = softmax_weights(SieveParams.zeros(5))
    assert np.allclose(w.theta, 1 / 25, atol=1e-16)


def test_softmax_large_entry():
    g = np.zeros((5, 5))
    g[2, 3] = 50.0
    w = softmax_weights(SieveParams(5, g))
    want = np.exp(50) / (np.exp(50) + 24)
    assert w.theta[2, 3] == pytest.approx(want, rel=1e-15)
    assert w.theta[2, 3] == pytest.approx(1 - 24 * np.exp(-50), rel=1e-15)
    assert np.isfinite(softmax_weights(SieveParams(5, g * 20)).theta).all()


def test_softmax_single_basis():
    assert np.array_equal(softmax_weights(SieveParams.zeros(1)).theta, [[1.0]])


@given(seeds)
def test_weights_invariants(seed):
    w = softmax_weights(random_params(seed, scale=3))
    assert np.all(w.theta >= 0)
    assert abs(w.theta.sum() - 1) < 1e-12
    assert np.allclose(w.w1, w.theta.sum(axis=0))


def test_params_invariants():
    with pytest.raises(ParameterError):
        SieveParams(2, np.ones((2, 2)))
    with pytest.raises(ParameterError):
        SieveParams(2, np.zeros((3, 3)))
    with pytest.raises(ParameterError):
        SieveParams(2, np.array([[0.0, np.nan], [0, 0]]))
    with pytest.raises(ParameterError):
        SieveWeights.from_theta([[0.5, 0.6], [0, 0]])


def test_free_round_trip():
    p = random_params(1)
    assert np.array_equal(SieveParams.from_free(5, p.free).gamma, p.gamma)


@pytest.mark.parametrize("p", [1, 2, 5, 9])
def test_basis_matches_scipy(p):
    x = np.linspace(0.01, 0.99, 17)
    for i in range(1, p + 1):
        d = stats.beta(i, p + 1 - i)
        assert np.allclose(basis_pdf(p, x)[:, i - 1], d.pdf(x), rtol=1e-12)
        assert np.allclose(basis_cdf(p, x)[:, i - 1], d.cdf(x), atol=1e-14)
        assert np.allclose(basis_sf(p, x)[:, i - 1], d.sf(x), atol=1e-14)


@pytest.mark.parametrize("p", [1, 3, 5, 12])
def test_partition_of_unity(p):
    x = np.linspace(0, 1, 101)
    assert np.allclose(basis_pdf(p, x).sum(axis=-1), p, atol=1e-10)


def test_joint_examples():
    x = np.linspace(0, 1, 11)
    assert np.allclose(joint_pdf(softmax_weights(SieveParams.zeros(5)), x[:, None], x[None, :]), 1.0)
    assert joint_pdf(softmax_weights(SieveParams.zeros(1)), 0.3, 0.8) == pytest.approx(1.0)
    w = SieveWeights.from_theta([[1, 0], [0, 0]])
    assert joint_pdf(w, 0.3, 0.3) == pytest.approx(1.96)


def test_marginal_examples():
    assert marginal_t_pdf(softmax_weights(SieveParams.zeros(4)), 0.37) == pytest.approx(1.0)
    w = SieveWeights.from_theta([[0.5, 0], [0.5, 0]])
    assert marginal_t_pdf(w, 0.3) == pytest.approx(2 * 0.7)


@given(seeds, st.floats(0.01, 0.99))
def test_marginal_is_integral_of_joint(seed, tau):
    w = softmax_weights(random_params(seed))
    val, _ = quad(lambda x: joint_pdf(w, x, tau), 0, 1, epsabs=1e-13)
    assert abs(val - marginal_t_pdf(w, tau)) < 1e-8


@given(seeds)
def test_joint_integrates_to_one(seed):
    w = softmax_weights(random_params(seed, scale=2))
    q = gauss_legendre(16)
    J = joint_pdf(w, q.nodes[:, None], q.nodes[None, :])
    assert abs(q.weights @ J @ q.weights - 1) < 1e-8


def test_cond_pdf_examples():
    assert cond_pdf(softmax_weights(SieveParams.zeros(5)), 0.3, 0.6) == pytest.approx(1.0)
    a = np.array([0.1, 0.2, 0.3, 0.4])
    b = np.array([0.4, 0.3, 0.2, 0.1])
    w = SieveWeights.from_theta(np.outer(a, b))
    x = np.linspace(0.05, 0.95, 7)
    want = basis_pdf(4, x) @ a
    for tau in (0.1, 0.5, 0.9):
        assert np.allclose(cond_pdf(w, x, tau), want, rtol=1e-12)


def test_cond_pdf_ratio_and_cdf_integral():
    w = softmax_weights(random_params(3))
    assert cond_pdf(w, 0.3, 0.5) == pytest.approx(joint_pdf(w, 0.3, 0.5) / marginal_t_pdf(w, 0.5), rel=1e-14)
    for x in (0.1, 0.45, 0.8):
        val, _ = quad(lambda t: cond_pdf(w, t, 0.5), 0, x, epsabs=1e-13)
        assert abs(cond_cdf(w, x, 0.5) - val) < 1e-8


def test_cond_cdf_examples():
    w = softmax_weights(SieveParams.zeros(5))
    x = np.linspace(0, 1, 21)
    assert np.allclose(cond_cdf(w, x, 0.4), x, atol=1e-14)
    wr = softmax_weights(random_params(8, scale=3))
    assert cond_cdf(wr, 1.0, 0.3) == pytest.approx(1.0)
    assert cond_cdf(wr, 0.0, 0.3) == 0.0


def test_cond_cdf_monotone_random_draws():
    grid = np.linspace(0, 1, 1000)
    for seed in range(100):
        w = softmax_weights(random_params(seed, scale=2))
        tau = (seed + 0.5) / 100
        assert np.all(np.diff(cond_cdf(w, grid, tau)) >= -1e-15)


def test_zero_marginal_raises():
    w = SieveWeights.from_theta([[0.5, 0], [0.5, 0]])
    with pytest.raises(DegenerateSupportError):
        cond_pdf(w, 0.5, 1.0)


def test_log_joint_gradient_finite_differences():
    rng = np.random.default_rng(4)
    for _ in range(20):
        params = random_params(int(rng.integers(1 << 30)))
        x, tau = rng.uniform(0.02, 0.98, 2)
        g = log_joint_pdf_grad(params, x, tau)
        fd = np.empty_like(g)
        for k in range(g.size):
            f = params.free
            h = 1e-6 * (1 + abs(f[k]))
            up, dn = f.copy(), f.copy()
            up[k] += h
            dn[k] -= h
            lu = np.log(joint_pdf(softmax_weights(SieveParams.from_free(5, up)), x, tau))
            ld = np.log(joint_pdf(softmax_weights(SieveParams.from_free(5, dn)), x, tau))
            fd[k] = (lu - ld) / (2 * h)
        assert np.allclose(g, fd, rtol=1e-4, atol=1e-8)


def test_reflection_relabels_tau():
    params = random_params(6)
    w, wr = softmax_weights(params), softmax_weights(reflect_tau(params))
    x = np.linspace(0.05, 0.95, 9)
    for tau in (0.2, 0.5, 0.7):
        assert np.allclose(joint_pdf(wr, x, tau), joint_pdf(w, x, 1 - tau), rtol=1e-12)
    assert conditional_mean_slope(wr) == pytest.approx(-conditional_mean_slope(w), rel=1e-10)


def test_model_json_round_trip(tmp_path):
    params = random_params(2)
    save_model(params, tmp_path / "m.json")
    assert np.array_equal(load_model(tmp_path / "m.json").gamma, params.gamma)
    obj = params.to_json()
    obj["gamma"][0][0] = 1.0
    (tmp_path / "bad.json").write_text(json.dumps(obj))
    with pytest.raises(ConfigError):
        load_model(tmp_path / "bad.json")


def test_sampler_matches_marginal_and_conditional():
    w = softmax_weights(random_params(10, scale=1.5))
    tau, vals = sample_sieve(w, np.random.default_rng(0), 20000, 3)
    def marg_cdf(t):
        return sum(wj * stats.beta.cdf(t, j + 1, 5 - j) for j, wj in enumerate(w.w1))

    ks_t = stats.kstest(tau, marg_cdf)
    assert ks_t.pvalue > 0.001
    u = cond_cdf(w, vals, tau[:, None]).ravel()
    assert stats.kstest(u, "uniform").pvalue > 0.001


def test_sieve_parent_view():
    params = random_params(12)
    par = SieveParent(params)
    w = softmax_weights(params)
    assert par.cond_cdf(0.4, 0.3) == cond_cdf(w, 0.4, 0.3)
    assert par.marg_t_pdf(0.3) == marginal_t_pdf(w, 0.3)
