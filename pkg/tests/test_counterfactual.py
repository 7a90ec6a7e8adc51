import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, optimize, special, stats

from uhauction.dist_core import ParentModel, beta_family, default_dgp, UniformParent
from uhauction.errors import NumericError, ParameterError, QuantileError
from uhauction.counterfactual import (
    ReserveProblem,
    bid_quantile,
    expected_profit,
    foc_residual,
    gpv_value_quantile,
    optimal_reserve,
    reserve_curve,
    revenue_compare,
)


class UnderflowDensity(ParentModel):
    """Uniform CDF whose reported density has underflowed to zero."""

    def cond_pdf(self, x, tau):
        return np.zeros_like(np.asarray(x, dtype=float))

    def cond_cdf(self, x, tau):
        return np.asarray(x, dtype=float)

    def marg_t_pdf(self, tau):
        return np.ones_like(np.asarray(tau, dtype=float))


class TwoBlocks(ParentModel):
    """Half the mass uniform on [0, 0.3], half on [0.6, 1]; F is flat at 1/2 in between."""

    def cond_pdf(self, x, tau):
        x = np.asarray(x, dtype=float)
        return np.where(x <= 0.3, 0.5 / 0.3, np.where(x >= 0.6, 0.5 / 0.4, 0.0))

    def cond_cdf(self, x, tau):
        x = np.asarray(x, dtype=float)
        return np.where(x <= 0.3, 0.5 * x / 0.3, np.where(x >= 0.6, 0.5 + 0.5 * (x - 0.6) / 0.4, 0.5))

    def marg_t_pdf(self, tau):
        return np.ones_like(np.asarray(tau, dtype=float))


def profit_oracle(a, b, r, N, v0):
    # E[(price - v0) 1{sale}] from the joint density of the top two Beta(a, b) values
    def pdf(x):
        return x ** (a - 1) * (1 - x) ** (b - 1) / special.beta(a, b)

    if N == 1:
        return (r - v0) * (1 - special.betainc(a, b, r))

    def dens(v1, v2):
        return N * (N - 1) * special.betainc(a, b, v2) ** (N - 2) * pdf(v2) * pdf(v1)

    below, _ = integrate.dblquad(lambda v1, v2: (r - v0) * dens(v1, v2), 0, r, lambda v2: r, lambda v2: 1, epsabs=1e-13)
    above, _ = integrate.dblquad(lambda v1, v2: (v2 - v0) * dens(v1, v2), r, 1, lambda v2: v2, lambda v2: 1, epsabs=1e-13)
    return below + above


@given(st.floats(0.001, 0.999))
def test_uniform_bid_quantile(alpha):
    assert bid_quantile(UniformParent(), 0.3, alpha) == pytest.approx(alpha, abs=1e-10)


@pytest.mark.parametrize("alpha", [0.1, 0.5, 0.9])
def test_beta21_quantile_is_sqrt(alpha):
    assert bid_quantile(beta_family(2, 1), 0.5, alpha) == pytest.approx(np.sqrt(alpha), abs=1e-10)


@pytest.mark.parametrize("tau", [0.2, 0.5, 0.8])
@pytest.mark.parametrize("alpha", [0.05, 0.5, 0.95])
def test_quantile_matches_scipy_ppf(tau, alpha):
    want = stats.beta(1.5, 1.5 * (1 + tau)).ppf(alpha)
    assert bid_quantile(default_dgp(), tau, alpha) == pytest.approx(want, abs=1e-9)


def test_flat_cdf_is_rejected():
    with pytest.raises(QuantileError):
        bid_quantile(TwoBlocks(), 0.5, 0.5)
    assert bid_quantile(TwoBlocks(), 0.5, 0.25) == pytest.approx(0.15, abs=1e-10)
    assert bid_quantile(TwoBlocks(), 0.5, 0.75) == pytest.approx(0.8, abs=1e-10)


@pytest.mark.parametrize("alpha", [0.0, 1.0, -0.1])
def test_quantile_level_must_be_interior(alpha):
    with pytest.raises(ParameterError):
        bid_quantile(UniformParent(), 0.5, alpha)


@pytest.mark.parametrize("n", [2, 3, 5, 10, 100])
def test_gpv_inverts_uniform_equilibrium(n):
    # values U(0,1), equilibrium bid (n-1)v/n, so bids are U(0, (n-1)/n)
    bids = UniformParent((n - 1) / n)
    for alpha in np.linspace(0.01, 0.99, 25):
        assert gpv_value_quantile(bids, 0.5, alpha, n) == pytest.approx(alpha, abs=1e-10)


def test_gpv_needs_two_bidders_and_density():
    with pytest.raises(ParameterError):
        gpv_value_quantile(UniformParent(0.5), 0.5, 0.5, 1)
    with pytest.raises(NumericError):
        gpv_value_quantile(UnderflowDensity(), 0.5, 0.5, 2)


@pytest.mark.parametrize("r,N,want", [(0.0, 2, 1 / 3), (0.5, 2, 5 / 12), (1.0, 2, 0.0), (0.5, 1, 0.25)])
def test_uniform_profit_examples(r, N, want):
    assert expected_profit(UniformParent(), 0.5, r, N, 0.0) == pytest.approx(want, abs=1e-10)


@pytest.mark.parametrize("r", [0.2, 0.55, 0.8])
@pytest.mark.parametrize("N", [1, 2, 4])
@pytest.mark.parametrize("v0", [0.0, 0.3])
def test_profit_matches_order_statistic_integral(r, N, v0):
    tau = 0.4
    got = expected_profit(default_dgp(), tau, r, N, v0)
    assert got == pytest.approx(profit_oracle(1.5, 1.5 * (1 + tau), r, N, v0), abs=1e-9)


@pytest.mark.parametrize("bad", [{"N": 0}, {"r": 1.5}, {"r": -0.1}])
def test_profit_rejects(bad):
    kw = {"r": 0.5, "N": 2} | bad
    with pytest.raises(ParameterError):
        expected_profit(UniformParent(), 0.5, kw["r"], kw["N"], 0.0)


@pytest.mark.parametrize("v0,want", [(0.0, 0.5), (0.5, 0.75), (0.2, 0.6)])
def test_uniform_optimal_reserve(v0, want):
    res = optimal_reserve(UniformParent(), 0.5, v0)
    assert res.r == pytest.approx(want, abs=1e-12)
    assert res.agreed and res.method == "foc" and res.sign_changes == 1


@pytest.mark.parametrize("tau", [0.1, 0.5, 0.9])
@pytest.mark.parametrize("v0", [0.0, 0.4])
def test_reserve_solves_scipy_foc(tau, v0):
    dist = stats.beta(1.5, 1.5 * (1 + tau))
    want = optimize.brentq(lambda r: r - v0 - dist.sf(r) / dist.pdf(r), max(v0, 1e-9), 1 - 1e-9, xtol=1e-14)
    res = optimal_reserve(default_dgp(), tau, v0)
    assert res.r == pytest.approx(want, abs=1e-9)
    assert abs(foc_residual(default_dgp(), tau, res.r, v0)) <= 1e-8


@pytest.mark.parametrize("N", [1, 2, 3, 6])
def test_reserve_beats_every_grid_reserve(N):
    tau, v0 = 0.5, 0.3
    r = optimal_reserve(default_dgp(), tau, v0).r
    best = expected_profit(default_dgp(), tau, r, N, v0)
    for x in np.linspace(v0, 1, 71):
        assert best >= expected_profit(default_dgp(), tau, x, N, v0) - 1e-12


def test_lower_bound_binds():
    res = optimal_reserve(UniformParent(), 0.5, 0.0, lower=0.7)
    assert res.r == 0.7 and res.method == "boundary"


def test_reserve_rejects_v0():
    with pytest.raises(ParameterError):
        optimal_reserve(UniformParent(), 0.5, 1.0)


def problem(parent, v0=0.5, fixed=0.8, status_quo=0.7):
    return ReserveProblem(parent, v0, {2: 0.3, 4: 0.5, 7: 0.2}, fixed, status_quo)


@pytest.mark.parametrize("fixed", [0.6, 0.8, 0.95])
def test_optimal_reserves_dominate(fixed):
    rep = revenue_compare(problem(default_dgp(), fixed=fixed))
    assert rep.gain_optimal >= rep.gain_fixed - 1e-6
    assert rep.gain_optimal >= rep.gain_status_quo - 1e-6
    for g in (rep.gain_optimal, rep.gain_fixed, rep.gain_status_quo):
        assert 0.0 <= g <= 1 - 0.5
    assert rep.ratio <= 1 + 1e-6


def test_fixed_at_optimum_closes_the_gap():
    # with uniform values r* = (1 + v0) / 2 for every tau
    rep = revenue_compare(problem(UniformParent(), fixed=0.75))
    assert np.allclose(rep.reserves, 0.75, atol=1e-12)
    assert rep.gain_fixed == pytest.approx(rep.gain_optimal, abs=1e-12)
    assert rep.ratio == pytest.approx(1.0, abs=1e-9)


def test_degenerate_ratio_is_nan():
    rep = revenue_compare(problem(UniformParent(), fixed=0.75, status_quo=0.75))
    assert np.isnan(rep.ratio)


def test_revenue_report_json_keys():
    rep = revenue_compare(problem(UniformParent()))
    assert set(rep.to_json()) == {"gain_optimal", "gain_fixed", "gain_status_quo", "ratio", "fixed_reserve", "status_quo"}


@pytest.mark.parametrize(
    "kwargs",
    [{"v0": 1.0}, {"N_dist": {0: 1.0}}, {"N_dist": {2: 0.5}}, {"N_dist": {2: 1.5, 3: -0.5}}, {"fixed_reserve": 1.2}, {"status_quo": -0.1}],
)
def test_problem_rejects(kwargs):
    base = {"parent": UniformParent(), "v0": 0.0, "N_dist": {2: 1.0}, "fixed_reserve": 0.5}
    with pytest.raises(ParameterError):
        ReserveProblem(**(base | kwargs))


def test_reserve_curve_rows():
    rows = reserve_curve(problem(default_dgp()), [0.2, 0.8])
    for t, r, g in rows:
        assert r == pytest.approx(optimal_reserve(default_dgp(), t, 0.5).r)
        assert g >= 0


def test_reserve_curve_monotone_for_monotone_model():
    # E[X | tau] decreases in tau, and so does the hazard-based optimal reserve here
    rows = reserve_curve(problem(default_dgp()), np.linspace(0.05, 0.95, 7))
    rs = [r for _, r, _ in rows]
    assert all(b < a for a, b in zip(rs, rs[1:]))


def test_no_warning_for_regular_model():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        optimal_reserve(default_dgp(), 0.5, 0.2)
