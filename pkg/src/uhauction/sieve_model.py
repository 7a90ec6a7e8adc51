"""Tensor-product Bernstein (Beta-mixture) sieve for the joint density of (X, tau).

Basis functions are 1-based: beta_i = Beta(i, p_m + 1 - i), i = 1..p_m. Python
arrays are 0-based, so ``theta[i - 1, j - 1]`` weighs beta_i(x) beta_j(tau).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from math import comb

import numpy as np

from .dist_core import ParentModel
from .errors import ConfigError, DegenerateSupportError, ParameterError

DEFAULT_P_M = 5


@dataclass(frozen=True)
class SieveParams:
    """Unconstrained softmax logits; gamma[0, 0] is pinned to zero."""

    p_m: int
    gamma: np.ndarray

    def __post_init__(self):
        g = np.array(self.gamma, dtype=float)
        if self.p_m < 1:
            raise ParameterError("p_m must be at least 1")
        if g.shape != (self.p_m, self.p_m):
            raise ParameterError(f"gamma must be {self.p_m}x{self.p_m}, got {g.shape}")
        if g[0, 0] != 0.0:
            raise ParameterError("gamma[0][0] is the normalization and must be exactly 0")
        if not np.all(np.isfinite(g)):
            raise ParameterError("gamma entries must be finite")
        g.setflags(write=False)
        object.__setattr__(self, "gamma", g)

    @classmethod
    def zeros(cls, p_m: int = DEFAULT_P_M) -> "SieveParams":
        return cls(p_m, np.zeros((p_m, p_m)))

    @classmethod
    def from_free(cls, p_m: int, free) -> "SieveParams":
        """Build from the p_m**2 - 1 free entries in row-major order after gamma[0, 0]."""
        free = np.asarray(free, dtype=float)
        if free.shape != (p_m * p_m - 1,):
            raise ParameterError(f"expected {p_m * p_m - 1} free parameters, got {free.shape}")
        return cls(p_m, np.concatenate([[0.0], free]).reshape(p_m, p_m))

    @property
    def free(self) -> np.ndarray:
        return self.gamma.ravel()[1:].copy()

    def to_json(self) -> dict:
        return {"p_m": int(self.p_m), "gamma": self.gamma.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "SieveParams":
        try:
            p_m = int(obj["p_m"])
            gamma = np.asarray(obj["gamma"], dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed sieve model: {exc}") from exc
        if gamma.shape != (p_m, p_m):
            raise ConfigError(f"gamma must be {p_m}x{p_m}", key_path="gamma")
        if gamma[0, 0] != 0.0:
            raise ConfigError("gamma[0][0] must be exactly 0", key_path="gamma[0][0]")
        return cls(p_m, gamma)


@dataclass(frozen=True)
class SieveWeights:
    theta: np.ndarray
    w1: np.ndarray

    @classmethod
    def from_theta(cls, theta) -> "SieveWeights":
        theta = np.array(theta, dtype=float)
        if theta.ndim != 2 or theta.shape[0] != theta.shape[1]:
            raise ParameterError("theta must be a square matrix")
        if np.any(theta < 0) or abs(theta.sum() - 1.0) > 1e-12:
            raise ParameterError("theta must be a probability matrix")
        theta.setflags(write=False)
        w1 = theta.sum(axis=0)
        w1.setflags(write=False)
        return cls(theta, w1)

    @property
    def p_m(self) -> int:
        return self.theta.shape[0]


def save_model(params: SieveParams, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(params.to_json(), fh, indent=2)


def load_model(path) -> SieveParams:
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    return SieveParams.from_json(obj.get("model", obj))


def softmax_weights(params: SieveParams) -> SieveWeights:
    g = params.gamma
    e = np.exp(g - g.max())
    return SieveWeights.from_theta(e / e.sum())


def _binom_pmf_table(p: int, x):
    # (..., p+1) table of C(p, k) x^k (1-x)^(p-k), k = 0..p
    x = np.asarray(x, dtype=float)[..., None]
    k = np.arange(p + 1)
    coef = np.array([comb(p, int(j)) for j in k], dtype=float)
    with np.errstate(invalid="ignore"):
        return coef * x ** k * (1.0 - x) ** (p - k)


def basis_pdf(p: int, x):
    """(..., p) array of beta_i(x), i = 1..p."""
    x = np.asarray(x, dtype=float)[..., None]
    i = np.arange(1, p + 1)
    coef = np.array([p * comb(p - 1, int(j) - 1) for j in i], dtype=float)
    out = coef * x ** (i - 1) * (1.0 - x) ** (p - i)
    return np.where((x >= 0) & (x <= 1), out, 0.0)


def basis_cdf(p: int, x):
    """(..., p) array of B_i(x) = I_x(i, p+1-i) = P(Binomial(p, x) >= i)."""
    x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
    pmf = _binom_pmf_table(p, x)
    tail = np.cumsum(pmf[..., ::-1], axis=-1)[..., ::-1]
    return tail[..., 1:]


def basis_sf(p: int, x):
    """(..., p) array of 1 - B_i(x) = P(Binomial(p, x) < i), summed without cancellation."""
    x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
    pmf = _binom_pmf_table(p, x)
    return np.cumsum(pmf, axis=-1)[..., :-1]


def _bilinear(left, theta, right):
    # sum_ij left[..., i] theta[i, j] right[..., j] with broadcasting over leading axes
    return np.einsum("...i,ij,...j->...", left, theta, right)


def joint_pdf(w: SieveWeights, x, tau):
    bx = basis_pdf(w.p_m, x)
    bt = basis_pdf(w.p_m, tau)
    bx, bt = np.broadcast_arrays(bx, bt)
    out = _bilinear(bx, w.theta, bt)
    return out[()] if out.ndim == 0 else out


def marginal_t_pdf(w: SieveWeights, tau):
    out = basis_pdf(w.p_m, tau) @ w.w1
    return out[()] if np.ndim(out) == 0 else out


def _marginal_checked(w, tau):
    m = np.asarray(marginal_t_pdf(w, tau))
    if np.any(m <= 0):
        raise DegenerateSupportError("marginal density of tau is zero at a conditioning point")
    return m


def cond_pdf(w: SieveWeights, x, tau):
    m = _marginal_checked(w, tau)
    return joint_pdf(w, x, tau) / m


def cond_cdf(w: SieveWeights, x, tau):
    m = _marginal_checked(w, tau)
    Bx = basis_cdf(w.p_m, x)
    bt = basis_pdf(w.p_m, tau)
    Bx, bt = np.broadcast_arrays(Bx, bt)
    out = np.clip(_bilinear(Bx, w.theta, bt) / m, 0.0, 1.0)
    return out[()] if out.ndim == 0 else out


def log_joint_pdf_grad(params: SieveParams, x: float, tau: float) -> np.ndarray:
    """Gradient of log joint_pdf(x, tau) with respect to the free gamma entries."""
    w = softmax_weights(params)
    bx = basis_pdf(w.p_m, x)
    bt = basis_pdf(w.p_m, tau)
    G = np.outer(bx, bt) / float(joint_pdf(w, x, tau))
    return softmax_backprop(w.theta, G)


def softmax_backprop(theta: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Map d/dtheta to d/d(free gamma) through the softmax."""
    full = theta * (G - np.sum(theta * G))
    return full.ravel()[1:]


def conditional_mean_slope(w: SieveWeights, grid=None) -> float:
    """Average slope of E[X | tau] over an interior tau grid."""
    if grid is None:
        grid = np.linspace(0.05, 0.95, 19)
    p = w.p_m
    # E[X] under beta_i is i / (p + 1)
    means = np.arange(1, p + 1) / (p + 1)
    bt = basis_pdf(p, grid)
    cm = (bt @ (w.theta.T @ means)) / (bt @ w.w1)
    return float(np.polyfit(grid, cm, 1)[0])


def reflect_tau(params: SieveParams) -> SieveParams:
    """Relabel tau -> 1 - tau, which leaves every observable likelihood unchanged.

    beta_j(1 - tau) = beta_{p+1-j}(tau), so the columns of theta are reversed;
    gamma is shifted to keep gamma[0, 0] at zero.
    """
    g = params.gamma[:, ::-1]
    return SieveParams(params.p_m, g - g[0, 0])


class SieveParent(ParentModel):
    """ParentModel view of a fitted sieve."""

    def __init__(self, params: SieveParams | SieveWeights):
        self.weights = softmax_weights(params) if isinstance(params, SieveParams) else params
        self.params = params if isinstance(params, SieveParams) else None

    def cond_pdf(self, x, tau, clamp: bool = False):
        return cond_pdf(self.weights, x, tau)

    def cond_cdf(self, x, tau):
        return cond_cdf(self.weights, x, tau)

    def marg_t_pdf(self, tau):
        return marginal_t_pdf(self.weights, tau)

    def sample(self, rng: np.random.Generator, m: int, n: int):
        return sample_sieve(self.weights, rng, m, n)


def sample_sieve(w: SieveWeights, rng: np.random.Generator, m: int, n: int):
    """Draw ``m`` auctions of ``n`` values from the sieve joint density.

    tau comes from the marginal mixture sum_j w1_j beta_j; given tau each value
    picks basis i with probability sum_j theta_ij beta_j(tau) / m(tau).
    Returns (tau (m,), values (m, n)).
    """
    p = w.p_m
    j = rng.choice(p, size=m, p=w.w1 / w.w1.sum())
    tau = rng.beta(j + 1, p - j)
    probs = basis_pdf(p, tau) @ w.theta.T
    cum = np.cumsum(probs / probs.sum(axis=1, keepdims=True), axis=1)
    u = rng.random((m, n))
    comp = np.minimum((u[..., None] > cum[:, None, :]).sum(axis=-1), p - 1)
    return tau, rng.beta(comp + 1.0, p - comp)
