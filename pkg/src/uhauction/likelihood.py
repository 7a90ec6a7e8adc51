"""Log-likelihoods of the sieve model for order-statistic triples and censored auctions.

Every per-observation integrand is a product of linear forms in theta,

    h_o(tau) = prod_t (a_t' theta c(tau)) ** e_t * m(tau) ** em_o,

where c(tau) is the Bernstein basis at tau, m(tau) = 1' theta c(tau) is the
marginal density of tau, and the rows a_t are basis pdf/cdf/sf values at the
observed bids. The rows depend only on the data, so they are built once
(``TripleDesign`` / ``CensoredDesign``) and reused for every parameter value,
which is also what makes the analytic gradient cheap.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import comb, factorial, lgamma, log
from typing import Sequence

import numpy as np
from scipy import sparse

from .dist_core import ParentModel, trunc_cdf, trunc_pdf
from .errors import NumericError, ParameterError
from .order_stats import CensoredAuctionObs
from .quadrature import QuadratureRule, gauss_legendre
from .sieve_model import (
    SieveParams,
    SieveParent,
    SieveWeights,
    basis_cdf,
    basis_pdf,
    basis_sf,
    softmax_backprop,
    softmax_weights,
)

# Floor for linear forms before taking logs; keeps endpoint data finite.
_FLOOR = 1e-300
DEFAULT_MC_DRAWS = 200


@dataclass(frozen=True)
class McDraws:
    """Fixed draws tau_sj ~ beta_j, one block per basis function."""

    draws: tuple
    seed: int

    @classmethod
    def generate(cls, p_m: int, S: int | Sequence[int] = DEFAULT_MC_DRAWS, seed: int = 0) -> "McDraws":
        counts = [S] * p_m if np.isscalar(S) else list(S)
        if len(counts) != p_m:
            raise ParameterError("need one draw count per basis function")
        rng = np.random.default_rng(seed)
        draws = []
        for j, s in enumerate(counts, start=1):
            d = rng.beta(j, p_m + 1 - j, size=int(s))
            # beta draws can round onto an endpoint; the basis is still finite there
            draws.append(np.clip(d, 1e-15, 1 - 1e-15))
        return cls(tuple(draws), seed)

    @property
    def p_m(self) -> int:
        return len(self.draws)

    @property
    def S(self) -> tuple:
        return tuple(len(d) for d in self.draws)

    def flat(self):
        nodes = np.concatenate(self.draws)
        group = np.concatenate([np.full(len(d), j) for j, d in enumerate(self.draws)])
        return nodes, group


Integration = QuadratureRule | McDraws


@dataclass
class _Design:
    n_obs: int
    A: np.ndarray  # (T, p) linear-form rows
    e: np.ndarray  # (T,) exponents
    idx: np.ndarray  # (T,) owning observation
    em: np.ndarray  # (n_obs,) exponent of m(tau)
    logconst: np.ndarray  # (n_obs,)
    n_blocks: int = 0  # > 0: rows are n_blocks stacked (n_obs, p) blocks, no scatter needed
    S: sparse.csr_matrix = field(init=False)

    def __post_init__(self):
        self.e = self.e.astype(float)
        if self.n_blocks:
            self.S = None
            return
        keep = self.e != 0
        self.A, self.e, self.idx = self.A[keep], self.e[keep], self.idx[keep]
        T = len(self.e)
        self.S = sparse.csr_matrix(
            (np.ones(T), (self.idx, np.arange(T))), shape=(self.n_obs, T)
        )

    def gather(self, V):
        """Sum (T, K) row values into (n_obs, K) per-observation totals."""
        if self.n_blocks:
            return V.reshape(self.n_blocks, self.n_obs, -1).sum(axis=0)
        return self.S @ V

    def scatter(self, R):
        """Transpose of ``gather``."""
        if self.n_blocks:
            return np.broadcast_to(R, (self.n_blocks,) + R.shape).reshape(-1, R.shape[1])
        return self.S.T @ R

    @property
    def p_m(self) -> int:
        return self.A.shape[1]


def _triple_arrays(data):
    if isinstance(data, dict):
        return tuple(np.asarray(data[k]) for k in ("x", "y", "z", "r", "n"))
    data = list(data)
    if not data:
        raise ParameterError("empty dataset")
    cols = np.array([(o.x, o.y, o.z, o.r, o.n) for o in data], dtype=float)
    return cols[:, 0], cols[:, 1], cols[:, 2], cols[:, 3].astype(int), cols[:, 4].astype(int)


def _check_unit(values, label):
    values = np.asarray(values, dtype=float)
    bad = np.flatnonzero(~((values >= 0) & (values <= 1)))
    if bad.size:
        raise ParameterError(f"{label(int(bad[0]))}: data must lie in [0, 1]; rescale before fitting")


class TripleDesign(_Design):
    """Linear-form rows of the triple likelihood for one dataset."""

    def __init__(self, data, p_m: int):
        x, y, z, r, n = _triple_arrays(data)
        m = len(x)
        _check_unit(np.stack([x, y, z], axis=1).max(axis=1), lambda i: f"observation {i}")
        _check_unit(np.stack([x, y, z], axis=1).min(axis=1), lambda i: f"observation {i}")
        obs = np.arange(m)
        blocks = [
            (basis_cdf(p_m, x), r - 3),
            (basis_pdf(p_m, x), np.ones(m)),
            (basis_pdf(p_m, y), np.ones(m)),
            (basis_sf(p_m, z), n - r),
            (basis_pdf(p_m, z), np.ones(m)),
        ]
        blocks = [(b, ex) for b, ex in blocks if np.any(np.asarray(ex) != 0)]
        A = np.concatenate([b for b, _ in blocks])
        e = np.concatenate([np.asarray(ex, dtype=float) for _, ex in blocks])
        idx = np.tile(obs, len(blocks))
        logc = np.array([lgamma(k + 1) - lgamma(j - 2) - lgamma(k - j + 1) for j, k in zip(r, n)])
        # marginal powers: -n from the conditional densities
        super().__init__(m, A, e, idx, -n.astype(float), logc, n_blocks=len(blocks))


class CensoredDesign(_Design):
    """Linear-form rows of p(n|N,tau) g(b|n,tau) for each auction.

    The truncation factors (1 - F(R))^n of p and g cancel, leaving
    C(N,n) n! F(R)^(N-n) (1 - F(b_top)) prod_j f(b_j) for n >= 2,
    N (1 - F(R)) F(R)^(N-1) for n = 1 and F(R)^N for n = 0.
    """

    def __init__(self, auctions: Sequence[CensoredAuctionObs], p_m: int):
        auctions = list(auctions)
        if not auctions:
            raise ParameterError("empty dataset")
        rows, exps, idx, em, logc = [], [], [], [], []
        self.auction_ids = [a.auction_id for a in auctions]
        for o, a in enumerate(auctions):
            _check_unit((a.R,) + a.bids, lambda i: f"auction {a.auction_id}")
            BR = basis_cdf(p_m, a.R)
            if a.n == 0:
                rows += [BR]
                exps += [a.N]
                logc.append(0.0)
            elif a.n == 1:
                rows += [basis_sf(p_m, a.R), BR]
                exps += [1, a.N - 1]
                logc.append(log(a.N))
            else:
                b = np.asarray(a.bids)
                if b[0] < a.R:
                    raise ParameterError(f"auction {a.auction_id}: bid below reserve")
                rows += [BR, basis_sf(p_m, b[-1])] + list(basis_pdf(p_m, b))
                exps += [a.N - a.n, 1] + [1] * len(b)
                logc.append(log(comb(a.N, a.n)) + lgamma(a.n + 1))
            idx += [o] * (len(exps) - len(idx))
            em.append(-float(a.N))
        super().__init__(len(auctions), np.array(rows), np.array(exps, dtype=float), np.array(idx), np.array(em), np.array(logc))


def _integration_nodes(integ: Integration, w: SieveWeights):
    """Nodes, log node weights (possibly theta-dependent), extra m exponent, node group."""
    if isinstance(integ, McDraws):
        if integ.p_m != w.p_m:
            raise ParameterError("MC draws were generated for a different p_m")
        nodes, group = integ.flat()
        counts = np.asarray(integ.S, dtype=float)
        logw = np.log(w.w1[group]) - np.log(counts[group])
        return nodes, logw, 0.0, group
    return integ.nodes, np.log(integ.weights), 1.0, None


def _evaluate(design: _Design, params: SieveParams, integ: Integration, grad: bool):
    """Per-observation log-likelihoods and (optionally) d(sum)/d(free gamma)."""
    w = softmax_weights(params)
    theta = w.theta
    nodes, logw, em_extra, group = _integration_nodes(integ, w)
    C = basis_pdf(design.p_m, nodes)  # (K, p)
    TC = theta @ C.T  # (p, K)
    U = np.maximum(design.A @ TC, _FLOOR)  # (T, K)
    mk = np.maximum(TC.sum(axis=0), _FLOOR)  # (K,)
    logU = np.log(U)
    em = design.em + em_extra
    logh = design.gather(design.e[:, None] * logU) + em[:, None] * np.log(mk)[None, :]
    terms = logh + logw[None, :]
    top = terms.max(axis=1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    E = np.exp(terms - top)
    tot = E.sum(axis=1)
    with np.errstate(divide="ignore"):
        ll = np.log(tot) + top[:, 0] + design.logconst
    if not grad:
        return ll, None
    R = E / tot[:, None]  # (n_obs, K) posterior weights of the nodes
    RT = design.scatter(R)  # (T, K)
    G = design.A.T @ ((design.e[:, None] * RT) / U) @ C
    G += ((em @ R) / mk @ C)[None, :]
    if group is not None:
        mass = np.bincount(group, weights=R.sum(axis=0), minlength=design.p_m)
        G += (mass / w.w1)[None, :]
    return ll, softmax_backprop(theta, G)


def _check_finite(ll, ids):
    bad = np.flatnonzero(~np.isfinite(ll))
    if bad.size:
        i = int(bad[0])
        raise NumericError(f"non-finite likelihood at observation {ids[i]}", index=ids[i])


def loglik_triples(params: SieveParams, data, quad: Integration | None = None, grad: bool = False, design: TripleDesign | None = None):
    """Average log density of the observed triples under the sieve model.

    Parameters
    ----------
    params : SieveParams
    data : list of TripleObs or dict of arrays x, y, z, r, n
    quad : QuadratureRule or McDraws, default 64-node Gauss-Legendre
    grad : bool
        Also return the gradient with respect to ``params.free``.
    design : TripleDesign, optional
        Precomputed rows for ``data``; skips rebuilding them.
    """
    quad = quad if quad is not None else gauss_legendre(64)
    design = design if design is not None else TripleDesign(data, params.p_m)
    ll, g = _evaluate(design, params, quad, grad)
    _check_finite(ll, np.arange(design.n_obs))
    value = float(np.mean(ll))
    return (value, g / design.n_obs) if grad else value


def loglik_censored(params: SieveParams, auctions, mc: Integration, grad: bool = False, design: CensoredDesign | None = None):
    """Sum over auctions of log int f(tau) p(n|N,tau) g(b|n,tau) dtau.

    ``mc`` is normally a fixed McDraws set (mixture over the tau-basis
    blocks); a QuadratureRule integrates against the sieve marginal instead.
    """
    design = design if design is not None else CensoredDesign(auctions, params.p_m)
    ll, g = _evaluate(design, params, mc, grad)
    _check_finite(ll, design.auction_ids)
    value = float(np.sum(ll))
    return (value, g) if grad else value


def loglik_censored_terms(params: SieveParams, auctions, mc: Integration, design: CensoredDesign | None = None):
    """Per-auction log-likelihood contributions."""
    design = design if design is not None else CensoredDesign(auctions, params.p_m)
    ll, _ = _evaluate(design, params, mc, False)
    return ll


def p_active(F_R, n: int, N: int):
    """Binomial probability of n active bidders out of N given F(R | tau)."""
    if not (0 <= n <= N):
        raise ParameterError(f"need 0 <= n <= N, got n={n}, N={N}")
    F_R = np.asarray(F_R, dtype=float)
    out = comb(N, n) * np.ones_like(F_R)
    if n:
        out = out * (1.0 - F_R) ** n
    if N - n:
        out = out * F_R ** (N - n)
    return out[()] if out.ndim == 0 else out


def _as_parent(model) -> ParentModel:
    if isinstance(model, ParentModel):
        return model
    return SieveParent(model)


def g_bids(model, obs: CensoredAuctionObs, tau: float) -> float:
    """Joint density of the observed bids given n active bidders and tau.

    ``model`` is a SieveParams, SieveWeights or any ParentModel. Returns 0.0
    for impossible observations (a bid below R, or total truncation).
    """
    if obs.n <= 1:
        return 1.0
    parent = _as_parent(model)
    b = np.asarray(obs.bids)
    if np.any(b < obs.R):
        return 0.0
    if float(parent.cond_cdf(obs.R, tau)) >= 1.0:
        return 0.0
    top = 1.0 - float(trunc_cdf(parent, tau, obs.R, b[-1]))
    dens = np.prod(trunc_pdf(parent, tau, obs.R, b))
    return float(factorial(obs.n) * top * dens)
