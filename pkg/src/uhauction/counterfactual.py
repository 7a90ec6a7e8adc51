"""Counterfactual policy analysis: bid and value quantiles, seller profit and reserve prices."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq, minimize_scalar

from .dist_core import ParentModel
from .errors import NumericError, ParameterError, QuantileError
from .quadrature import QuadratureRule, gauss_legendre

STATUS_QUO_RESERVE = 0.7
QUANTILE_TOL = 1e-10
# the FOC residual is capped where the density is this small
_HAZARD_FLOOR = 1e-12
_RESIDUAL_CAP = 1e6


def _F(parent, x, tau) -> float:
    return float(parent.cond_cdf(x, tau))


def _f(parent, x, tau) -> float:
    return float(parent.cond_pdf(x, tau))


def _bisect(g, lo: float, hi: float) -> float:
    # smallest point where the nondecreasing g becomes True, to double precision
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if g(mid):
            hi = mid
        else:
            lo = mid
    return hi


def bid_quantile(parent: ParentModel, tau: float, alpha: float, lo: float = 0.0, hi: float = 1.0, flat_tol: float = 1e-8) -> float:
    """b with F(b | tau) = alpha, by bisection.

    Raises QuantileError when F is flat at level alpha over an interval wider
    than ``flat_tol`` or when no point reaches |F(b) - alpha| <= 1e-10.
    """
    if not 0.0 < alpha < 1.0:
        raise ParameterError(f"alpha must lie in (0, 1), got {alpha}")
    left = _bisect(lambda b: _F(parent, b, tau) >= alpha, lo, hi)
    right = _bisect(lambda b: _F(parent, b, tau) > alpha, lo, hi)
    if right - left > flat_tol:
        raise QuantileError(f"CDF is flat at level {alpha} on [{left:.6g}, {right:.6g}]; the quantile is not unique")
    b = 0.5 * (left + right)
    for cand in (b, left, right):
        if abs(_F(parent, cand, tau) - alpha) <= QUANTILE_TOL:
            return cand
    raise QuantileError(f"CDF jumps over level {alpha} near b={b:.6g}")


def gpv_value_quantile(bid_parent: ParentModel, tau: float, alpha: float, n: int) -> float:
    """Value quantile v(alpha) = b(alpha) + alpha / ((n - 1) f_bid(b(alpha))) from first-price bids."""
    if n < 2:
        raise ParameterError("the inverse bid map needs n >= 2 bidders")
    b = bid_quantile(bid_parent, tau, alpha)
    dens = _f(bid_parent, b, tau)
    if not dens > _HAZARD_FLOOR:
        raise NumericError(f"bid density vanishes at b({alpha})={b:.6g}; the quantile derivative blows up")
    return b + alpha / ((n - 1) * dens)


def expected_profit(parent: ParentModel, tau: float, r: float, N: int, v0: float, epsabs: float = 1e-12) -> float:
    """Seller's expected gain over v0 in an ascending auction with reserve r and N bidders."""
    if N < 1:
        raise ParameterError("N must be at least 1")
    if not 0.0 <= r <= 1.0:
        raise ParameterError("reserve must lie in [0, 1]")
    Fr = _F(parent, r, tau)
    out = N * (1.0 - Fr) * Fr ** (N - 1) * (r - v0)
    if N >= 2 and r < 1.0:
        def integrand(v):
            Fv = _F(parent, v, tau)
            return (v - v0) * _f(parent, v, tau) * (1.0 - Fv) * Fv ** (N - 2)

        val, _ = quad(integrand, r, 1.0, epsabs=epsabs, epsrel=1e-12, limit=200)
        out += N * (N - 1) * val
    return float(out)


def _profit_on_grid(parent, tau, grid, N: int, v0: float, cell_nodes: int = 8):
    # pi(r) at every grid point, integrating downwards from 1 cell by cell
    grid = np.asarray(grid, dtype=float)
    F = np.asarray(parent.cond_cdf(grid, tau), dtype=float)
    head = N * (1.0 - F) * F ** (N - 1) * (grid - v0)
    if N < 2:
        return head
    z, w = np.polynomial.legendre.leggauss(cell_nodes)
    edges = np.append(grid, 1.0) if grid[-1] < 1.0 else grid
    a, b = edges[:-1, None], edges[1:, None]
    v = 0.5 * (b - a) * z[None, :] + 0.5 * (a + b)
    Fv = np.asarray(parent.cond_cdf(v, tau), dtype=float)
    fv = np.asarray(parent.cond_pdf(v, tau), dtype=float)
    cells = 0.5 * (b - a)[:, 0] * (((v - v0) * fv * (1.0 - Fv) * Fv ** (N - 2)) @ w)
    tail = np.cumsum(cells[::-1])[::-1]
    tail = np.append(tail, 0.0)[: len(grid)]
    return head + N * (N - 1) * tail


def foc_residual(parent: ParentModel, tau: float, r: float, v0: float) -> float:
    """r - v0 - (1 - F(r)) / f(r), capped where the density vanishes."""
    S = 1.0 - _F(parent, r, tau)
    f = _f(parent, r, tau)
    if S <= 0.0:
        return r - v0
    if f <= _HAZARD_FLOOR * max(S, 1.0):
        return -_RESIDUAL_CAP
    return max(r - v0 - S / f, -_RESIDUAL_CAP)


@dataclass
class ReserveResult:
    r: float
    method: str  # "foc", "grid" or "boundary"
    foc_root: float | None
    grid_max: float
    sign_changes: int
    agreed: bool


def optimal_reserve(
    parent: ParentModel,
    tau: float,
    v0: float,
    lower: float = 0.0,
    N_ref: int = 5,
    grid_points: int = 2001,
    agree_tol: float = 1e-4,
) -> ReserveResult:
    """Reserve maximizing the seller's expected gain given tau.

    The first-order condition is solved on [max(v0, lower), 1] and checked
    against a grid maximization of the expected gain with ``N_ref`` bidders.
    ``lower`` is the smallest reserve the model speaks to (the observed
    reserve for a censored fit).
    """
    if not 0.0 <= v0 < 1.0:
        raise ParameterError("v0 must lie in [0, 1)")
    lo = max(v0, lower)
    hi = 1.0
    probe = np.linspace(lo, hi, 201)
    res = np.array([foc_residual(parent, tau, x, v0) for x in probe])
    signs = np.sign(res)
    signs = signs[signs != 0]
    changes = int(np.sum(signs[1:] != signs[:-1]))

    # verification route
    grid = np.linspace(lo, hi, grid_points)
    prof = _profit_on_grid(parent, tau, grid, N_ref, v0)
    i = int(np.argmax(prof))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, grid_points - 1)]
    if b > a:
        opt = minimize_scalar(lambda x: -expected_profit(parent, tau, x, N_ref, v0), bounds=(a, b), method="bounded", options={"xatol": 1e-10})
        g_best = float(opt.x) if -opt.fun >= prof[i] else float(grid[i])
    else:
        g_best = float(grid[i])

    root = None
    if res[0] >= 0:
        root, method = lo, "boundary"
    elif changes == 0:
        root, method = hi, "boundary"
    else:
        j = int(np.flatnonzero(np.diff(np.sign(res)) != 0)[0])
        root = brentq(lambda x: foc_residual(parent, tau, x, v0), probe[j], probe[j + 1], xtol=1e-14, rtol=4 * np.finfo(float).eps)
        method = "foc"
    agreed = abs(root - g_best) <= agree_tol
    if changes > 1:
        warnings.warn(f"FOC residual changes sign {changes} times at tau={tau}; profit may be multimodal", RuntimeWarning, stacklevel=2)
    if not agreed:
        warnings.warn(
            f"FOC root {root:.6g} and grid maximizer {g_best:.6g} disagree at tau={tau}; using the grid maximizer",
            RuntimeWarning,
            stacklevel=2,
        )
        return ReserveResult(g_best, "grid", root, g_best, changes, False)
    return ReserveResult(float(root), method, float(root), g_best, changes, True)


@dataclass
class ReserveProblem:
    """Inputs of the reserve-policy comparison.

    ``N_dist`` maps potential-bidder counts to probabilities. ``tau_rule``
    integrates over tau against ``parent.marg_t_pdf``; its weights are
    renormalized so the tau distribution has unit mass.
    """

    parent: ParentModel
    v0: float
    N_dist: Mapping[int, float]
    fixed_reserve: float
    status_quo: float = STATUS_QUO_RESERVE
    lower: float = 0.0
    tau_rule: QuadratureRule | None = None
    N_ref: int = 5

    def __post_init__(self):
        if not 0.0 <= self.v0 < 1.0:
            raise ParameterError("v0 must lie in [0, 1)")
        self.N_dist = {int(k): float(v) for k, v in dict(self.N_dist).items()}
        if any(k < 1 for k in self.N_dist) or any(v < 0 for v in self.N_dist.values()):
            raise ParameterError("N_dist must put nonnegative mass on counts >= 1")
        if abs(sum(self.N_dist.values()) - 1.0) > 1e-9:
            raise ParameterError("N_dist must sum to 1")
        for name in ("fixed_reserve", "status_quo"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ParameterError(f"{name} must lie in [0, 1]")

    def tau_weights(self):
        rule = self.tau_rule or gauss_legendre(32)
        w = rule.weights * np.asarray(self.parent.marg_t_pdf(rule.nodes), dtype=float)
        return rule.nodes, w / w.sum()


def mean_profit(problem: ReserveProblem, tau: float, r: float) -> float:
    return sum(p * expected_profit(problem.parent, tau, r, N, problem.v0) for N, p in problem.N_dist.items() if p > 0)


@dataclass
class RevenueReport:
    gain_optimal: float
    gain_fixed: float
    gain_status_quo: float
    ratio: float
    taus: np.ndarray
    reserves: np.ndarray
    profits: np.ndarray
    fixed_reserve: float
    status_quo: float
    reserve_results: list = field(repr=False, default_factory=list)

    def to_json(self) -> dict:
        return {
            "gain_optimal": self.gain_optimal,
            "gain_fixed": self.gain_fixed,
            "gain_status_quo": self.gain_status_quo,
            "ratio": self.ratio,
            "fixed_reserve": self.fixed_reserve,
            "status_quo": self.status_quo,
        }


def revenue_compare(problem: ReserveProblem) -> RevenueReport:
    """Expected gains under (a) tau-specific optimal reserves, (b) the fixed reserve, (c) the status quo.

    ``ratio`` = (b - c) / (a - c), the share of the attainable improvement
    over the status quo that the fixed reserve captures (nan when a == c).
    """
    taus, w = problem.tau_weights()
    results = [optimal_reserve(problem.parent, t, problem.v0, problem.lower, problem.N_ref) for t in taus]
    reserves = np.array([res.r for res in results])
    prof_a = np.array([mean_profit(problem, t, r) for t, r in zip(taus, reserves)])
    prof_b = np.array([mean_profit(problem, t, problem.fixed_reserve) for t in taus])
    prof_c = np.array([mean_profit(problem, t, problem.status_quo) for t in taus])
    a, b, c = float(w @ prof_a), float(w @ prof_b), float(w @ prof_c)
    ratio = (b - c) / (a - c) if a != c else float("nan")
    return RevenueReport(a, b, c, ratio, taus, reserves, prof_a, problem.fixed_reserve, problem.status_quo, results)


def reserve_curve(problem: ReserveProblem, taus: Sequence[float]):
    """Rows (tau, r*(tau), expected gain at r*(tau)) over the N distribution."""
    rows = []
    for t in taus:
        res = optimal_reserve(problem.parent, float(t), problem.v0, problem.lower, problem.N_ref)
        rows.append((float(t), res.r, mean_profit(problem, float(t), res.r)))
    return rows
