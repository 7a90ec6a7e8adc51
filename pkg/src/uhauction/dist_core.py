"""Beta primitives, parent-family models and order-statistic densities.

Every density here lives on [0, 1]. Functions broadcast over numpy arrays.
"""
from __future__ import annotations

import abc
from dataclasses import dataclass
from math import exp, factorial, lgamma, log, log1p
from typing import Callable

import numpy as np
from scipy.special import betaln, xlog1py, xlogy

from .errors import DegenerateSupportError, DomainError, OrderIndexError, ParameterError

# Finite stand-in for +inf at integrable endpoint singularities (likelihood paths).
DENSITY_CLAMP = 1e300

_CF_MAX_ITER = 500
_CF_EPS = 1e-16
_CF_TINY = 1e-300


@dataclass(frozen=True)
class BetaParams:
    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ParameterError(f"Beta shapes must be positive, got ({self.alpha}, {self.beta})")
        if not (np.isfinite(self.alpha) and np.isfinite(self.beta)):
            raise ParameterError("Beta shapes must be finite")

    @property
    def mean(self) -> float:
        return self.alpha / (self.alpha + self.beta)


def _check_shapes(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(~(a > 0)) or np.any(~(b > 0)):
        raise ParameterError("Beta shapes must be positive")
    return a, b


def log_beta_pdf(a, b, x, clamp: bool = False):
    """Log density of Beta(a, b) at ``x``.

    Points outside [0, 1] get ``-inf``. At an endpoint where the density
    diverges the result is ``+inf`` unless ``clamp`` is set, in which case it
    is ``log(DENSITY_CLAMP)``.
    """
    a, b = _check_shapes(a, b)
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = xlogy(a - 1.0, x) + xlog1py(b - 1.0, -x) - betaln(a, b)
    out = np.where((x < 0) | (x > 1), -np.inf, out)
    if clamp:
        out = np.minimum(out, log(DENSITY_CLAMP))
    return out[()] if out.ndim == 0 else out


def beta_pdf(p: BetaParams | tuple, x, clamp: bool = False):
    """Density of a Beta distribution.

    Parameters
    ----------
    p : BetaParams or (alpha, beta)
    x : array_like
        Points in [0, 1].
    clamp : bool
        Replace the endpoint singularity of shapes below one by ``DENSITY_CLAMP``.
    """
    a, b = (p.alpha, p.beta) if isinstance(p, BetaParams) else p
    return np.exp(log_beta_pdf(a, b, x, clamp=clamp))


def _betacf(a, b, x):
    # Modified Lentz evaluation of the incomplete-beta continued fraction.
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = np.ones_like(x)
    d = 1.0 - qab * x / qap
    d = np.where(np.abs(d) < _CF_TINY, _CF_TINY, d)
    d = 1.0 / d
    h = d.copy()
    done = np.zeros(x.shape, dtype=bool)
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = np.where(np.abs(d) < _CF_TINY, _CF_TINY, d)
        c = 1.0 + aa / c
        c = np.where(np.abs(c) < _CF_TINY, _CF_TINY, c)
        d = 1.0 / d
        h = np.where(done, h, h * d * c)
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = np.where(np.abs(d) < _CF_TINY, _CF_TINY, d)
        c = 1.0 + aa / c
        c = np.where(np.abs(c) < _CF_TINY, _CF_TINY, c)
        d = 1.0 / d
        delta = d * c
        h = np.where(done, h, h * delta)
        done |= np.abs(delta - 1.0) < _CF_EPS
        if done.all():
            break
    return h


def _betacf_scalar(a: float, b: float, x: float) -> float:
    # same recursion on Python floats; much cheaper than numpy for one point
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) >= _CF_TINY else _CF_TINY)
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        for aa in (m * (b - m) * x / ((qam + m2) * (a + m2)), -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))):
            d = 1.0 + aa * d
            d = 1.0 / (d if abs(d) >= _CF_TINY else _CF_TINY)
            c = 1.0 + aa / c
            c = c if abs(c) >= _CF_TINY else _CF_TINY
            delta = d * c
            h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            break
    return h


def betainc_reg(a, b, x):
    """Regularized incomplete beta function I_x(a, b) by continued fraction.

    Uses the symmetry I_x(a, b) = 1 - I_{1-x}(b, a) above the mean a/(a+b),
    where the fraction converges fastest.
    """
    if np.isscalar(a) and np.isscalar(b) and np.isscalar(x):
        if not (a > 0 and b > 0):
            raise ParameterError("Beta shapes must be positive")
        return _betainc_scalar(float(a), float(b), float(x))
    a, b = _check_shapes(a, b)
    x = np.asarray(x, dtype=float)
    a, b, x = np.broadcast_arrays(a, b, x)
    if x.ndim == 0:
        return _betainc_scalar(float(a), float(b), float(x))
    xc = np.clip(x, 0.0, 1.0)
    flip = xc > a / (a + b)
    aa = np.where(flip, b, a)
    bb = np.where(flip, a, b)
    xx = np.where(flip, 1.0 - xc, xc)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_front = xlogy(aa, xx) + xlog1py(bb, -xx) - betaln(aa, bb) - np.log(aa)
        inner = np.exp(log_front) * _betacf(aa, bb, xx)
    inner = np.where(xx <= 0.0, 0.0, inner)
    out = np.where(flip, 1.0 - inner, inner)
    out = np.clip(out, 0.0, 1.0)
    return out[()] if out.ndim == 0 else out


def _betainc_scalar(a: float, b: float, x: float) -> float:
    x = min(max(x, 0.0), 1.0)
    flip = x > a / (a + b)
    if flip:
        a, b, x = b, a, 1.0 - x
    if x <= 0.0:
        inner = 0.0
    else:
        log_front = a * log(x) + b * log1p(-x) - (lgamma(a) + lgamma(b) - lgamma(a + b)) - log(a)
        inner = exp(log_front) * _betacf_scalar(a, b, x)
    out = 1.0 - inner if flip else inner
    return min(max(out, 0.0), 1.0)


def beta_cdf(p: BetaParams | tuple, x):
    """Regularized incomplete beta I_x(alpha, beta), the Beta CDF."""
    a, b = (p.alpha, p.beta) if isinstance(p, BetaParams) else p
    return betainc_reg(a, b, x)


class ParentModel(abc.ABC):
    """Conditional family f(x|tau), F(x|tau) plus the marginal f(tau) on [0, 1]^2."""

    @abc.abstractmethod
    def cond_pdf(self, x, tau):
        ...

    @abc.abstractmethod
    def cond_cdf(self, x, tau):
        ...

    @abc.abstractmethod
    def marg_t_pdf(self, tau):
        ...

    def cond_mean(self, tau, nodes: int = 200):
        """E[X | tau] by Gauss-Legendre quadrature of the survival function."""
        z, w = np.polynomial.legendre.leggauss(nodes)
        x = 0.5 * (z + 1.0)
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        surv = 1.0 - self.cond_cdf(x[None, :], tau[:, None])
        return 0.5 * surv @ w


class SyntheticDGP(ParentModel):
    """Beta-distributed heterogeneity with Beta conditionals whose shapes move with tau.

    ``cond_alpha`` and ``cond_beta`` map tau (array) to positive shapes.
    """

    def __init__(self, tau_dist: BetaParams, cond_alpha: Callable, cond_beta: Callable):
        self.tau_dist = tau_dist
        self.cond_alpha = cond_alpha
        self.cond_beta = cond_beta

    def _shapes(self, tau):
        tau = np.asarray(tau, dtype=float)
        a = np.broadcast_to(np.asarray(self.cond_alpha(tau), dtype=float), tau.shape)
        b = np.broadcast_to(np.asarray(self.cond_beta(tau), dtype=float), tau.shape)
        return a, b

    def cond_pdf(self, x, tau, clamp: bool = False):
        a, b = self._shapes(tau)
        return np.exp(log_beta_pdf(a, b, x, clamp=clamp))

    def cond_cdf(self, x, tau):
        a, b = self._shapes(tau)
        if a.ndim == 0 and np.ndim(x) == 0:
            return betainc_reg(float(a), float(b), float(x))
        return betainc_reg(a, b, x)

    def marg_t_pdf(self, tau):
        return beta_pdf(self.tau_dist, tau)

    def sample(self, rng: np.random.Generator, m: int, n: int):
        """Draw ``m`` auctions of ``n`` values; returns (tau (m,), values (m, n))."""
        tau = rng.beta(self.tau_dist.alpha, self.tau_dist.beta, size=m)
        a, b = self._shapes(tau)
        vals = rng.beta(a[:, None], b[:, None], size=(m, n))
        return tau, vals


def default_dgp() -> SyntheticDGP:
    """tau ~ Beta(3, 1.5); X | tau ~ Beta(1.5, 1.5 (1 + tau))."""
    return SyntheticDGP(
        BetaParams(3.0, 1.5),
        cond_alpha=lambda t: np.full_like(np.asarray(t, dtype=float), 1.5),
        cond_beta=lambda t: 1.5 * (1.0 + np.asarray(t, dtype=float)),
    )


def beta_family(alpha: float, beta: float, tau_dist: BetaParams = BetaParams(1.0, 1.0)) -> SyntheticDGP:
    """Conditional Beta(alpha, beta) that does not depend on tau."""
    return SyntheticDGP(
        tau_dist,
        cond_alpha=lambda t: np.full_like(np.asarray(t, dtype=float), alpha),
        cond_beta=lambda t: np.full_like(np.asarray(t, dtype=float), beta),
    )


class UniformParent(ParentModel):
    """X | tau ~ Uniform(0, upper) for every tau; tau uniform on [0, 1]."""

    def __init__(self, upper: float = 1.0):
        if not 0 < upper <= 1:
            raise ParameterError("upper must lie in (0, 1]")
        self.upper = upper

    def cond_pdf(self, x, tau, clamp: bool = False):
        x, tau = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(tau, dtype=float))
        out = np.where((x >= 0) & (x <= self.upper), 1.0 / self.upper, 0.0)
        return out[()] if out.ndim == 0 else out

    def cond_cdf(self, x, tau):
        x, tau = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(tau, dtype=float))
        out = np.clip(x / self.upper, 0.0, 1.0)
        return out[()] if out.ndim == 0 else out

    def marg_t_pdf(self, tau):
        tau = np.asarray(tau, dtype=float)
        out = np.where((tau >= 0) & (tau <= 1), 1.0, 0.0)
        return out[()] if out.ndim == 0 else out


def _check_rank(r: int, s: int):
    if not (1 <= r <= s):
        raise OrderIndexError(f"rank r={r} must satisfy 1 <= r <= s={s}")


def log_os_coeff(r: int, s: int) -> float:
    """log of s! / ((r-1)! (s-r)!)."""
    return lgamma(s + 1) - lgamma(r) - lgamma(s - r + 1)


def _powers(F, lo: int, hi: int):
    # F**lo * (1 - F)**hi with 0**0 taken as 1.
    out = np.ones_like(F)
    if lo:
        out = out * F ** lo
    if hi:
        out = out * (1.0 - F) ** hi
    return out


def os_pdf(parent: ParentModel, tau, r: int, s: int, x):
    """Density of the r-th smallest of s i.i.d. draws from f(.|tau)."""
    _check_rank(r, s)
    x = np.asarray(x, dtype=float)
    F = np.asarray(parent.cond_cdf(x, tau), dtype=float)
    f = np.asarray(parent.cond_pdf(x, tau), dtype=float)
    coeff = factorial(s) / (factorial(r - 1) * factorial(s - r))
    out = coeff * _powers(F, r - 1, s - r) * f
    return out[()] if out.ndim == 0 else out


def os_cdf(parent: ParentModel, tau, r: int, s: int, x):
    """CDF of the r-th smallest of s draws: P(Binomial(s, F) >= r) = I_F(r, s-r+1)."""
    _check_rank(r, s)
    F = np.asarray(parent.cond_cdf(x, tau), dtype=float)
    return betainc_reg(r, s - r + 1, F)


def trunc_pdf(parent: ParentModel, tau, R: float, x):
    """Density of X | tau left-truncated at R."""
    x = np.asarray(x, dtype=float)
    if np.any(x < R):
        raise DomainError(f"evaluation point below truncation point R={R}")
    surv = 1.0 - np.asarray(parent.cond_cdf(R, tau), dtype=float)
    if np.any(surv <= 0):
        raise DegenerateSupportError(f"F(R|tau) = 1 at R={R}: nothing survives truncation")
    out = parent.cond_pdf(x, tau) / surv
    return out[()] if np.ndim(out) == 0 else out


def trunc_cdf(parent: ParentModel, tau, R: float, x):
    """CDF of X | tau left-truncated at R (zero below R)."""
    FR = np.asarray(parent.cond_cdf(R, tau), dtype=float)
    surv = 1.0 - FR
    if np.any(surv <= 0):
        raise DegenerateSupportError(f"F(R|tau) = 1 at R={R}: nothing survives truncation")
    out = np.clip((parent.cond_cdf(x, tau) - FR) / surv, 0.0, 1.0)
    return out[()] if np.ndim(out) == 0 else out
