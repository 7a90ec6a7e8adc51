import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uhauction.dist_core import beta_family, default_dgp
from uhauction.errors import ConfigError
from uhauction.estimate import (
    FitConfig,
    IntegrationSpec,
    check_sieve_invariants,
    envelope,
    fit_censored,
    fit_triples,
    integrated_abs_error,
    orient,
    replication_study,
)
from uhauction.likelihood import McDraws, loglik_censored, loglik_triples
from uhauction.order_stats import sample_censored_many, sample_triples
from uhauction.quadrature import QuadratureRule
from uhauction.sieve_model import SieveParams, conditional_mean_slope, reflect_tau, softmax_weights

SMALL = FitConfig(n_starts=2, seed=3)


@pytest.fixture(scope="module")
def triples():
    return sample_triples(default_dgp(), 300, 4, 3, 11)


@pytest.fixture(scope="module")
def fit(triples):
    return fit_triples(triples, SMALL)


@pytest.fixture(scope="module")
def auctions():
    Ns = np.random.default_rng(5).integers(1, 8, size=60)
    return sample_censored_many(default_dgp(), Ns, 0.6, 9)


@pytest.fixture(scope="module")
def cfit(auctions):
    return fit_censored(auctions, FitConfig(n_starts=2, seed=1, integration=IntegrationSpec(S=50)))


def test_same_seed_is_bit_identical(triples, fit):
    again = fit_triples(triples, SMALL)
    assert np.array_equal(again.params.gamma, fit.params.gamma)
    assert again.to_json() == fit.to_json()


def test_reported_loglik_is_best_start(fit):
    assert fit.loglik == max(s.loglik for s in fit.per_start)
    assert fit.per_start[fit.best_start].loglik == fit.loglik


def test_reported_loglik_matches_likelihood(triples, fit):
    assert loglik_triples(fit.params, triples) == pytest.approx(fit.loglik, abs=1e-10)


def test_fit_beats_uniform_start(triples, fit):
    assert fit.loglik >= loglik_triples(SieveParams.zeros(), triples)


def test_converged_means_small_gradient(triples, fit):
    assert fit.converged
    assert fit.gradient_norm <= SMALL.grad_tol
    _, g = loglik_triples(fit.params, triples, grad=True)
    assert np.linalg.norm(g) <= 10 * SMALL.grad_tol


def test_stationary_by_finite_differences(triples, fit):
    x = fit.params.free
    h = 1e-5
    for k in range(0, x.size, 6):
        e = np.zeros_like(x)
        e[k] = h
        up = loglik_triples(SieveParams.from_free(5, x + e), triples)
        dn = loglik_triples(SieveParams.from_free(5, x - e), triples)
        assert abs(up - dn) / (2 * h) <= 1e-5


def test_fitted_sieve_is_proper(fit):
    check_sieve_invariants(fit.params)
    w = softmax_weights(fit.params)
    assert np.all(w.theta >= 0)


@pytest.mark.parametrize("orientation,sign", [("increasing", 1.0), ("decreasing", -1.0)])
def test_orientation_fixes_slope_sign(triples, orientation, sign):
    res = fit_triples(triples, FitConfig(n_starts=2, seed=3, orientation=orientation))
    assert sign * conditional_mean_slope(res.weights) > 0


def test_orientation_leaves_likelihood_unchanged(triples, fit):
    up = fit_triples(triples, FitConfig(n_starts=2, seed=3, orientation="increasing"))
    down = fit_triples(triples, FitConfig(n_starts=2, seed=3, orientation="decreasing"))
    assert up.loglik == down.loglik
    assert np.allclose(reflect_tau(up.params).gamma, down.params.gamma, atol=1e-12)
    assert up.reflected != down.reflected


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=20)
def test_orient_is_reflection_or_identity(seed):
    p = SieveParams.from_free(5, np.random.default_rng(seed).normal(size=24))
    for o in ("increasing", "decreasing"):
        q, flipped = orient(p, o)
        want = reflect_tau(p) if flipped else p
        assert np.array_equal(q.gamma, want.gamma)
    assert orient(p, None) == (p, False)


def test_censored_loglik_is_a_sum(auctions, cfit):
    mc = McDraws.generate(5, 50, 0)
    assert loglik_censored(cfit.params, auctions, mc) == pytest.approx(cfit.loglik, rel=1e-12)
    assert cfit.loglik == max(s.loglik for s in cfit.per_start)
    assert cfit.loglik >= loglik_censored(SieveParams.zeros(), auctions, mc)


def test_censored_converged_gradient(auctions, cfit):
    mc = McDraws.generate(5, 50, 0)
    _, g = loglik_censored(cfit.params, auctions, mc, grad=True)
    assert cfit.converged
    # reported on the per-auction mean scale
    assert np.linalg.norm(g) / len(auctions) <= 10 * cfit.config.grad_tol


def test_integration_auto_resolution():
    spec = IntegrationSpec()
    assert isinstance(spec.build(5), QuadratureRule)
    assert isinstance(spec.build(5, auto="mc"), McDraws)
    assert isinstance(IntegrationSpec(kind="mc").build(5), McDraws)
    assert isinstance(IntegrationSpec(kind="quadrature").build(5, auto="mc"), QuadratureRule)


def test_quadrature_censored_fit_runs(auctions):
    res = fit_censored(auctions, FitConfig(n_starts=1, integration=IntegrationSpec(kind="quadrature", nodes=32)))
    check_sieve_invariants(res.params)
    assert np.isfinite(res.loglik)


@pytest.mark.parametrize(
    "kwargs,key",
    [
        ({"p_m": 0}, "p_m"),
        ({"n_starts": 0}, "n_starts"),
        ({"max_iters": 0}, "max_iters"),
        ({"grad_tol": 0.0}, "grad_tol"),
        ({"start_spread": -1.0}, "start_spread"),
        ({"orientation": "up"}, "orientation"),
        ({"n_jobs": 0}, "n_jobs"),
    ],
)
def test_fit_config_rejects(kwargs, key):
    with pytest.raises(ConfigError) as exc:
        FitConfig(**kwargs)
    assert exc.value.key_path == key


@pytest.mark.parametrize(
    "kwargs,key",
    [
        ({"kind": "simpson"}, "integration.kind"),
        ({"kind": "quadrature", "nodes": 1}, "integration.nodes"),
        ({"kind": "mc", "S": 0}, "integration.S"),
    ],
)
def test_integration_spec_rejects(kwargs, key):
    with pytest.raises(ConfigError) as exc:
        IntegrationSpec(**kwargs)
    assert exc.value.key_path == key


def test_integration_dict_is_coerced():
    cfg = FitConfig(integration={"kind": "mc", "S": 10})
    assert cfg.integration == IntegrationSpec(kind="mc", S=10)


def test_parallel_starts_match_serial(triples):
    a = fit_triples(triples[:120], FitConfig(n_starts=3, seed=2))
    b = fit_triples(triples[:120], FitConfig(n_starts=3, seed=2, n_jobs=3))
    assert a.to_json()["per_start"] == b.to_json()["per_start"]
    assert np.array_equal(a.params.gamma, b.params.gamma)


def test_envelope_coverage_counts_grid_points():
    grid = np.linspace(0, 1, 5)
    draws = np.tile(np.arange(101.0)[:, None], (1, 5))
    env = envelope(grid, draws)
    assert np.allclose(env.q05, 5.0) and np.allclose(env.q95, 95.0)
    assert np.allclose(env.mean, 50.0)
    assert env.coverage([0.0, 5.0, 50.0, 95.0, 96.0]) == pytest.approx(0.6)


def test_integrated_abs_error_examples():
    uniform = SieveParams.zeros()
    assert integrated_abs_error(uniform, lambda t: np.ones_like(t)) == pytest.approx(0.0, abs=1e-14)
    # int_0^1 |1 - 2t| dt = 1/2
    assert integrated_abs_error(uniform, lambda t: 2 * t) == pytest.approx(0.5, abs=1e-4)


def test_replication_study_shapes_and_reproducibility():
    cfg = FitConfig(n_starts=1, max_iters=50)
    a = replication_study(beta_family(2, 2), 80, 4, 3, 2, cfg, seed=4, grid_points=11)
    b = replication_study(beta_family(2, 2), 80, 4, 3, 2, cfg, seed=4, grid_points=11)
    assert a.f_t.shape == (2, 11)
    assert set(a.f_x_given_t) == {0.25, 0.5, 0.75}
    assert np.array_equal(a.f_t, b.f_t)
    assert a.fits[0].seed != a.fits[1].seed
    env = a.envelopes()
    assert set(env) == {"f_T", "f_X|T=0.25", "f_X|T=0.5", "f_X|T=0.75"}
