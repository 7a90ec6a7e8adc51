"""Numerical lab for identification from three consecutive order statistics.

With heterogeneity on K mass points the integral operators become matrices
and the constructive recovery steps are exact linear algebra:

* ``J_y = L diag(c f(y|tau_k) m_k) H`` where L holds the density of the
  (r-2)-th of r-2 draws on the low segment and H the density of the lowest of
  n-r+1 draws on the high segment;
* the eigenvectors of ``J_y1 pinv(J_y2)`` are the columns of L and its
  eigenvalues are f(y1|tau_k) / f(y2|tau_k);
* the transposed problem yields H, a sandwich ``pinv(L) J_y pinv(H)`` yields
  the middle segment, and continuity at the cutoffs pins the three scales.

A continuous heterogeneity distribution can be fed through the same code by
placing quadrature nodes in ``OperatorGrid.t_nodes``; the factorization then
holds only approximately and its error shrinks with the node count.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import comb, factorial
from typing import Sequence

import numpy as np
from numpy.polynomial import Legendre
from scipy.linalg import solve_triangular
from scipy.optimize import brentq

from .dist_core import BetaParams, ParentModel, betainc_reg, log_beta_pdf, os_pdf
from .errors import (
    AmbiguousDecompositionError,
    ConditioningError,
    CutoffPlacementError,
    DecompositionQualityError,
    DomainError,
    OrderingAmbiguityError,
    OrderIndexError,
    ParameterError,
)
from .order_stats import coeff_c, triple_density
from .quadrature import gauss_legendre

PINV_RTOL = 1e-12
COND_LIMIT = 1e10
ZERO_DENSITY_RTOL = 1e-10


@dataclass(frozen=True)
class Partition:
    c1: float
    c2: float

    def __post_init__(self):
        if not (0.0 < self.c1 < self.c2 < 1.0):
            raise ParameterError(f"need 0 < c1 < c2 < 1, got c1={self.c1}, c2={self.c2}")

    @property
    def segments(self):
        return (0.0, self.c1), (self.c1, self.c2), (self.c2, 1.0)


class DiscreteTauModel(ParentModel):
    """Heterogeneity on K mass points with Beta conditionals.

    ``marg_t_pdf`` returns point masses, so sums over the support play the
    role of integrals over tau.
    """

    def __init__(self, taus: Sequence[float], masses: Sequence[float], conds: Sequence[BetaParams | tuple]):
        self.taus = np.asarray(taus, dtype=float)
        self.masses = np.asarray(masses, dtype=float)
        conds = [c if isinstance(c, BetaParams) else BetaParams(*c) for c in conds]
        if not (len(self.taus) == len(self.masses) == len(conds)) or len(conds) == 0:
            raise ParameterError("taus, masses and conditionals must have the same positive length")
        if np.any(np.diff(self.taus) <= 0) or np.any(self.taus < 0) or np.any(self.taus > 1):
            raise ParameterError("taus must be strictly increasing in [0, 1]")
        if np.any(self.masses <= 0) or abs(self.masses.sum() - 1.0) > 1e-12:
            raise ParameterError("masses must be positive and sum to 1")
        self.conds = tuple(conds)
        self._a = np.array([c.alpha for c in conds])
        self._b = np.array([c.beta for c in conds])

    @property
    def K(self) -> int:
        return len(self.taus)

    def _index(self, tau):
        tau = np.asarray(tau, dtype=float)
        idx = np.clip(np.searchsorted(self.taus, tau), 0, self.K - 1)
        if not np.all(np.abs(self.taus[idx] - tau) <= 1e-14):
            raise DomainError("tau is not one of the support points")
        return idx

    def cond_pdf(self, x, tau, clamp: bool = False):
        k = self._index(tau)
        return np.exp(log_beta_pdf(self._a[k], self._b[k], x, clamp=clamp))

    def cond_cdf(self, x, tau):
        k = self._index(tau)
        return betainc_reg(self._a[k], self._b[k], x)

    def marg_t_pdf(self, tau):
        return self.masses[self._index(tau)]

    def marginal_x_cdf(self, x):
        x = np.asarray(x, dtype=float)
        return sum(m * betainc_reg(c.alpha, c.beta, x) for m, c in zip(self.masses, self.conds))

    def shuffled(self, perm) -> "DiscreteTauModel":
        """Same taus, with masses and conditionals permuted across them."""
        perm = list(perm)
        return DiscreteTauModel(self.taus, self.masses[perm], [self.conds[i] for i in perm])


def demo_model() -> DiscreteTauModel:
    """K=4 lab model; integer Beta shapes make every density a polynomial."""
    return DiscreteTauModel(
        [0.2, 0.4, 0.6, 0.8],
        [0.1, 0.2, 0.3, 0.4],
        [(2, 5), (2, 4), (3, 3), (4, 2)],
    )


def independent_model(K: int = 3) -> DiscreteTauModel:
    """X independent of tau: every conditional is Beta(2, 3)."""
    taus = (np.arange(K) + 1.0) / (K + 1)
    return DiscreteTauModel(taus, np.full(K, 1.0 / K), [(2, 3)] * K)


def default_partition(model: DiscreteTauModel) -> Partition:
    """Cutoffs at the 1/3 and 2/3 quantiles of the marginal distribution of X."""
    q = [brentq(lambda x: model.marginal_x_cdf(x) - p, 1e-12, 1 - 1e-12, xtol=1e-14) for p in (1 / 3, 2 / 3)]
    return Partition(*q)


@dataclass(frozen=True)
class OperatorGrid:
    """Gauss-Legendre nodes on each segment plus the tau support (or tau nodes) with masses."""

    partition: Partition
    x_low: np.ndarray
    w_low: np.ndarray
    x_mid: np.ndarray
    w_mid: np.ndarray
    x_high: np.ndarray
    w_high: np.ndarray
    t_nodes: np.ndarray
    t_mass: np.ndarray

    def __post_init__(self):
        for (lo, hi), x, w in zip(self.partition.segments, (self.x_low, self.x_mid, self.x_high), (self.w_low, self.w_mid, self.w_high)):
            if np.any(np.diff(x) <= 0) or x[0] < lo or x[-1] > hi:
                raise ParameterError("segment grids must be sorted and inside their segment")
            if np.any(w <= 0):
                raise ParameterError("cell widths must be positive")

    @classmethod
    def gauss(cls, partition: Partition, t_nodes, t_mass, n_low: int = 24, n_mid: int = 24, n_high: int = 24) -> "OperatorGrid":
        rules = [gauss_legendre(k, lo, hi) for k, (lo, hi) in zip((n_low, n_mid, n_high), partition.segments)]
        return cls(
            partition,
            rules[0].nodes, rules[0].weights,
            rules[1].nodes, rules[1].weights,
            rules[2].nodes, rules[2].weights,
            np.asarray(t_nodes, dtype=float), np.asarray(t_mass, dtype=float),
        )

    @classmethod
    def for_model(cls, model: DiscreteTauModel, partition: Partition | None = None, **sizes) -> "OperatorGrid":
        return cls.gauss(partition or default_partition(model), model.taus, model.masses, **sizes)


@dataclass
class DiscreteOperators:
    L_mat: np.ndarray  # (|x_low|, K)
    Delta_y: np.ndarray  # (K, K)
    H_mat: np.ndarray  # (K, |x_high|), column weights included
    J_y: np.ndarray  # (|x_low|, |x_high|), column weights included
    y: float
    r: int
    n: int
    grid: OperatorGrid


def _check_ranks(r: int, n: int):
    if not (3 <= r <= n):
        raise OrderIndexError(f"need 3 <= r <= n, got r={r}, n={n}")


def low_kernel(model: ParentModel, grid: OperatorGrid, r: int) -> np.ndarray:
    """f_{r-2:r-2}(x_a | tau_k) on the low segment."""
    return np.stack([os_pdf(model, t, r - 2, r - 2, grid.x_low) for t in grid.t_nodes], axis=1)


def high_kernel(model: ParentModel, grid: OperatorGrid, n: int, r: int) -> np.ndarray:
    """f_{1:n-r+1}(z_b | tau_k) times the z cell widths."""
    return np.stack([os_pdf(model, t, 1, n - r + 1, grid.x_high) for t in grid.t_nodes]) * grid.w_high[None, :]


def build_operators(model: ParentModel, grid: OperatorGrid, y: float, r: int, n: int) -> DiscreteOperators:
    """Kernel matrices of the three-bid operator factorization at middle value ``y``.

    ``J_y`` is assembled from the raw joint density of the triple, independently
    of the factors L, Delta and H.
    """
    _check_ranks(r, n)
    c1, c2 = grid.partition.c1, grid.partition.c2
    if not (c1 <= y <= c2):
        raise DomainError(f"y={y} lies outside the middle segment [{c1}, {c2}]")
    L = low_kernel(model, grid, r)
    H = high_kernel(model, grid, n, r)
    fy = np.array([float(model.cond_pdf(y, t)) for t in grid.t_nodes])
    Delta = np.diag(coeff_c(r, n) * fy * grid.t_mass)
    xa, zb = grid.x_low[:, None], grid.x_high[None, :]
    J = np.zeros((len(grid.x_low), len(grid.x_high)))
    for t, m in zip(grid.t_nodes, grid.t_mass):
        J += m * triple_density(model, t, xa, y, zb, r, n)
    J *= grid.w_high[None, :]
    return DiscreteOperators(L, Delta, H, J, float(y), r, n, grid)


def check_factorization(ops: DiscreteOperators) -> float:
    """max |J_y - L Delta_y H|."""
    return float(np.max(np.abs(ops.J_y - ops.L_mat @ ops.Delta_y @ ops.H_mat)))


def factorization_curve(model: ParentModel, partition: Partition, y: float, r: int, n: int, Ks: Sequence[int] = (4, 8, 16, 32), ref_nodes: int = 512, n_seg: int = 16):
    """Factorization error for a continuous tau density as the tau rule is refined.

    The reference J_y integrates tau with ``ref_nodes`` Gauss-Legendre nodes;
    the factors use K nodes. Returns a list of (K, error).
    """
    ref = gauss_legendre(ref_nodes)
    g_ref = OperatorGrid.gauss(partition, ref.nodes, ref.weights * model.marg_t_pdf(ref.nodes), n_seg, n_seg, n_seg)
    J_ref = build_operators(model, g_ref, y, r, n).J_y
    out = []
    for K in Ks:
        q = gauss_legendre(K)
        g = OperatorGrid.gauss(partition, q.nodes, q.weights * model.marg_t_pdf(q.nodes), n_seg, n_seg, n_seg)
        ops = build_operators(model, g, y, r, n)
        out.append((int(K), float(np.max(np.abs(J_ref - ops.L_mat @ ops.Delta_y @ ops.H_mat)))))
    return out


# ---------------------------------------------------------------- step 1: eigen-decomposition

@dataclass
class EigenResult:
    values: np.ndarray  # (K,) ascending
    vectors: np.ndarray  # (rows, K), column k pairs with values[k]
    cond: float  # condition number of J_y2 on its numerical range
    rank: int


def eig_recover(J1, J2, rank: int | None = None, gap_tol: float = 1e-8) -> EigenResult:
    """Nonzero eigenpairs of ``J1 pinv(J2)``.

    The problem is reduced to the numerical range of J2: with the truncated
    SVD J2 = U S V', the nonzero eigenpairs come from the K x K matrix
    U' J1 V S^-1, whose eigenvectors map back through U. Raises
    AmbiguousDecompositionError when two eigenvalues are closer than
    ``gap_tol`` (relative to the largest).
    """
    J1, J2 = np.asarray(J1, dtype=float), np.asarray(J2, dtype=float)
    U, s, Vt = np.linalg.svd(J2, full_matrices=False)
    if rank is None:
        rank = int(np.sum(s > PINV_RTOL * s[0]))
    if rank < 1:
        raise ConditioningError("J_y2 is numerically zero")
    U, s, V = U[:, :rank], s[:rank], Vt[:rank].T
    M = U.T @ J1 @ V / s[None, :]
    vals, W = np.linalg.eig(M)
    scale = max(np.max(np.abs(vals)), np.finfo(float).tiny)
    if np.max(np.abs(vals.imag)) > 1e-8 * scale:
        raise AmbiguousDecompositionError("complex eigenvalues: the density ratios are not separated")
    vals, W = vals.real, W.real
    order = np.argsort(vals)
    vals, W = vals[order], W[:, order]
    if rank > 1 and np.min(np.diff(vals)) < gap_tol * scale:
        raise AmbiguousDecompositionError(
            f"eigenvalue gap {np.min(np.diff(vals)):.3g} below tolerance; choose another (y1, y2) pair"
        )
    return EigenResult(vals, U @ W, float(s[0] / s[-1]), rank)


def normalize_sign(v, tol: float = 1e-8) -> np.ndarray:
    """Flip to majority-positive sign; reject vectors with material negative entries."""
    v = np.asarray(v, dtype=float)
    if np.sum(v > 0) < np.sum(v < 0) or (np.sum(v > 0) == np.sum(v < 0) and v.sum() < 0):
        v = -v
    if np.min(v) < -tol * np.max(np.abs(v)):
        raise DecompositionQualityError("eigenvector has material negative mass")
    return np.maximum(v, 0.0)


# ---------------------------------------------------------------- steps 1-2: parent distribution on the outer segments

@dataclass
class SegmentCurve:
    """Conditional density (and CDF pieces) on one segment, up to a common scale.

    For the low segment ``F`` is F(x) times the scale; for the high segment
    ``surv`` is 1 - F(x) times the scale. ``f`` carries the same scale.
    """

    lo: float
    hi: float
    x: np.ndarray
    f: np.ndarray
    F: np.ndarray | None = None
    surv: np.ndarray | None = None
    power: int = 1
    _eval: object = field(default=None, repr=False)

    def v_at(self, x):
        """The unit-mass order-statistic density the segment was recovered from."""
        return self._eval("v", x)

    def f_at(self, x):
        return self._eval("f", x)

    def cum_at(self, x):
        """F (low), surv (high) or int_lo^x f (middle), all carrying the segment scale."""
        return self._eval("cum", x)

    @property
    def f_lo(self) -> float:
        return float(self.f_at(self.lo))

    @property
    def f_hi(self) -> float:
        return float(self.f_at(self.hi))

    @property
    def integral(self) -> float:
        if self.F is not None:
            return float(self.cum_at(self.hi))
        if self.surv is not None:
            return float(self.cum_at(self.lo))
        return float(self.cum_at(self.hi))


def _fit_poly(x, v, lo, hi) -> Legendre:
    # interpolating Legendre series through the Gauss nodes of the segment
    return Legendre.fit(x, v, len(x) - 1, domain=[lo, hi])


def recover_parent_low(x, eigvec, r: int, lo: float = 0.0, hi: float | None = None) -> SegmentCurve:
    """Parent CDF and density on the low segment from f_{r-2:r-2} up to scale.

    F is proportional to (int_lo^x v)^(1 / (r-2)) and f to
    (1/(r-2)) (int v)^(1/(r-2) - 1) v. Integrals use the interpolating
    Legendre series through the nodes ``x``.
    """
    if r < 3:
        raise OrderIndexError("r must be at least 3")
    x = np.asarray(x, dtype=float)
    hi = float(x[-1]) if hi is None else hi
    v = normalize_sign(eigvec)
    v = v / float(_fit_poly(x, v, lo, hi).integ(lbnd=lo)(hi))
    vp = _fit_poly(x, v, lo, hi)
    G = vp.integ(lbnd=lo)
    k = r - 2

    def ev(what, t):
        if what == "v":
            return vp(t)
        g = np.maximum(np.asarray(G(t)), 0.0)
        if what == "cum":
            return g ** (1.0 / k)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(g > 0, g ** (1.0 / k - 1.0) * vp(t) / k, 0.0 if k == 1 else np.nan)
        return vp(t) if k == 1 else out

    return SegmentCurve(lo, hi, x, ev("f", x), F=ev("cum", x), power=k, _eval=ev)


def recover_parent_high(x, eigvec, n: int, r: int, lo: float | None = None, hi: float = 1.0) -> SegmentCurve:
    """Parent survival and density on the high segment from f_{1:n-r+1} up to scale.

    1 - F is proportional to (int_x^hi v)^(1 / (n-r+1)).
    """
    if r > n:
        raise OrderIndexError("r must not exceed n")
    x = np.asarray(x, dtype=float)
    lo = float(x[0]) if lo is None else lo
    v = normalize_sign(eigvec)
    v = v / float(_fit_poly(x, v, lo, hi).integ(lbnd=lo)(hi))
    vp = _fit_poly(x, v, lo, hi)
    G0 = vp.integ(lbnd=lo)
    total = float(G0(hi))
    k = n - r + 1

    def ev(what, t):
        if what == "v":
            return vp(t)
        g = np.maximum(total - np.asarray(G0(t)), 0.0)
        if what == "cum":
            return g ** (1.0 / k)
        if k == 1:
            return vp(t)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(g > 0, g ** (1.0 / k - 1.0) * vp(t) / k, np.nan)

    return SegmentCurve(lo, hi, x, ev("f", x), surv=ev("cum", x), power=k, _eval=ev)


def middle_curve(x, values, lo: float, hi: float) -> SegmentCurve:
    vp = _fit_poly(np.asarray(x, dtype=float), np.asarray(values, dtype=float), lo, hi)
    G = vp.integ(lbnd=lo)

    def ev(what, t):
        return G(t) if what == "cum" else vp(t)

    return SegmentCurve(lo, hi, np.asarray(x, dtype=float), vp(x), _eval=ev)


# ---------------------------------------------------------------- step 3: middle segment

def _pinv_checked(A, what: str):
    s = np.linalg.svd(A, compute_uv=False)
    cond = float(s[0] / s[-1]) if s[-1] > 0 else np.inf
    if cond > COND_LIMIT:
        raise ConditioningError(f"{what} has condition number {cond:.3g} > {COND_LIMIT:.0e}; widen the segment or change the partition")
    return np.linalg.pinv(A, rcond=PINV_RTOL), cond


@dataclass
class MiddleResult:
    values: np.ndarray  # (|x_mid|, K): f(y|tau_k) f^T(tau_k) up to a per-k constant
    offdiag_ratio: float
    cond_L: float
    cond_H: float


def recover_middle(ops_by_y: Sequence[DiscreteOperators], L_hat, H_hat) -> MiddleResult:
    """Diagonal of pinv(L_hat) J_y pinv(H_hat) for every y on the middle grid.

    ``L_hat`` columns and ``H_hat`` rows must be matched to the same tau.
    """
    Lp, cL = _pinv_checked(np.asarray(L_hat), "recovered low kernel")
    Hp, cH = _pinv_checked(np.asarray(H_hat), "recovered high kernel")
    vals, off, diag = [], 0.0, 0.0
    for ops in ops_by_y:
        D = Lp @ ops.J_y @ Hp
        d = np.diag(D)
        vals.append(d)
        off = max(off, float(np.max(np.abs(D - np.diag(d)))))
        diag = max(diag, float(np.max(np.abs(d))))
    return MiddleResult(np.array(vals), off / diag if diag > 0 else np.inf, cL, cH)


# ---------------------------------------------------------------- step 4: scales and ordering

def pin_scales(low: SegmentCurve, mid: SegmentCurve, high: SegmentCurve) -> np.ndarray:
    """Scales (s_l, s_m, s_h) making the density continuous at both cutoffs and of unit mass."""
    A = np.array([
        [low.f_hi, -mid.f_lo, 0.0],
        [0.0, mid.f_hi, -high.f_lo],
        [low.integral, mid.integral, high.integral],
    ])
    # endpoint value against the segment's mean level, since each curve has an arbitrary scale
    level = [abs(c.integral) / (c.hi - c.lo) for c in (low, mid, mid, high)]
    ends = [abs(low.f_hi), abs(mid.f_lo), abs(mid.f_hi), abs(high.f_lo)]
    if not np.all(np.isfinite(A)) or any(e <= ZERO_DENSITY_RTOL * lv for e, lv in zip(ends, level)):
        raise CutoffPlacementError("density vanishes at a cutoff; move c1/c2 to where every conditional density is positive")
    if np.linalg.cond(A) > 1e12:
        raise CutoffPlacementError("scale-pinning system is singular; move the cutoffs")
    return np.linalg.solve(A, np.array([0.0, 0.0, 1.0]))


@dataclass
class PinnedConditional:
    low: SegmentCurve
    mid: SegmentCurve
    high: SegmentCurve
    scales: np.ndarray

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        sl, sm, sh = self.scales
        c1, c2 = self.mid.lo, self.mid.hi
        F_c1 = sl * float(self.low.cum_at(c1))
        lo = sl * self.low.cum_at(np.clip(x, 0.0, c1))
        mid = F_c1 + sm * self.mid.cum_at(np.clip(x, c1, c2))
        hi = 1.0 - sh * self.high.cum_at(np.clip(x, c2, 1.0))
        return np.where(x <= c1, lo, np.where(x <= c2, mid, hi))

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        sl, sm, sh = self.scales
        c1, c2 = self.mid.lo, self.mid.hi
        return np.where(
            x <= c1,
            sl * self.low.f_at(np.clip(x, 0.0, c1)),
            np.where(x <= c2, sm * self.mid.f_at(np.clip(x, c1, c2)), sh * self.high.f_at(np.clip(x, c2, 1.0))),
        )

    def lower_pair_kernel(self, x, r: int):
        """f_{r-1:r-1}(x) = (r-1) F^(r-2) f on the low and middle segments.

        On the low segment this is written through the recovered order-statistic
        density, which avoids the negative power of F near zero.
        """
        x = np.asarray(x, dtype=float)
        sl, sm, _ = self.scales
        k = self.low.power
        c1 = self.mid.lo
        xl = np.clip(x, self.low.lo, c1)
        g = np.maximum(self.low.cum_at(xl) ** k, 0.0)
        low = (r - 1) * sl ** (k + 1) * g ** (1.0 / k) * self.low.v_at(xl) / k
        Fm = self.cdf(np.maximum(x, c1))
        mid = (r - 1) * Fm ** (r - 2) * sm * self.mid.f_at(np.clip(x, c1, self.mid.hi))
        return np.where(x <= c1, low, mid)

    def upper_pair_kernel(self, z):
        """f_{1:k}(z) = k (1 - F)^(k-1) f on the high segment, k the high-segment power."""
        sh = self.scales[2]
        return sh ** self.high.power * self.high.v_at(np.asarray(z, dtype=float))

    def mean(self, nodes: int = 64) -> float:
        """E[X] = int_0^1 (1 - F), piecewise Gauss-Legendre."""
        total = 0.0
        for lo, hi in ((0.0, self.mid.lo), (self.mid.lo, self.mid.hi), (self.mid.hi, 1.0)):
            q = gauss_legendre(nodes, lo, hi)
            total += float(q.integrate(1.0 - self.cdf(q.nodes)))
        return total


def order_and_locate(cond_means, tie_tol: float = 1e-10):
    """Permutation sorting components by conditional mean, and their rank labels on [0, 1].

    Returns (perm, labels): ``perm[j]`` is the component with the j-th
    smallest mean, ``labels[j] = (j + 1) / (K + 1)``.
    """
    cm = np.asarray(cond_means, dtype=float)
    perm = np.argsort(cm, kind="stable")
    if len(cm) > 1 and np.min(np.diff(cm[perm])) <= tie_tol:
        raise OrderingAmbiguityError("conditional means tie; the heterogeneity cannot be ordered")
    labels = (np.arange(len(cm)) + 1.0) / (len(cm) + 1.0)
    return perm, labels


# ---------------------------------------------------------------- step 5: marginal of tau

def pair_kernel(model: ParentModel, x, z, w_z, t_nodes, t_mass, r: int, n: int) -> np.ndarray:
    """sum_k m_k f_{r-1,r:n}(x_a, z_b | tau_k) w_b, the observable pair operator."""
    x, z = np.asarray(x)[:, None], np.asarray(z)[None, :]
    coeff = factorial(n) / (factorial(r - 2) * factorial(n - r))
    K = np.zeros((x.shape[0], z.shape[1]))
    for t, m in zip(t_nodes, t_mass):
        Fx, Fz = model.cond_cdf(x, t), model.cond_cdf(z, t)
        K += m * coeff * Fx ** (r - 2) * model.cond_pdf(x, t) * model.cond_pdf(z, t) * (1.0 - Fz) ** (n - r)
    return K * np.asarray(w_z)[None, :]


def recover_marginal(Kmat, conditionals: Sequence[PinnedConditional], x, z, w_z, r: int, n: int):
    """tau masses from diag(pinv(L_{r-1}) K pinv(H)) divided by n!/((r-1)!(n-r+1)!).

    ``conditionals`` are true-scale conditionals (one per tau) whose high
    segment was recovered with power n-r+1; L_{r-1} holds f_{r-1:r-1} at
    ``x`` and H holds f_{1:n-r+1} at ``z`` times ``w_z``.
    Returns (masses, cond_L, cond_H).
    """
    x, z = np.asarray(x, dtype=float), np.asarray(z, dtype=float)
    L = np.stack([c.lower_pair_kernel(x, r) for c in conditionals], axis=1)
    H = np.stack([c.upper_pair_kernel(z) for c in conditionals]) * np.asarray(w_z)[None, :]
    Lp, cL = _pinv_checked(L, "pair low kernel")
    Hp, cH = _pinv_checked(H, "pair high kernel")
    c = factorial(n) / (factorial(r - 1) * factorial(n - r + 1))
    d = np.diag(Lp @ Kmat @ Hp) / c
    if np.any(d < -1e-8 * np.max(np.abs(d))):
        raise DecompositionQualityError("recovered tau masses are negative")
    d = np.maximum(d, 0.0)
    return d / d.sum(), cL, cH


# ---------------------------------------------------------------- moments of a participation mixture

def truncation_moment_matrix(N: int) -> np.ndarray:
    """A[n, i] = C(N-n, i-n) C(N, n) (-1)^(i-n), n, i = 1..N (upper triangular)."""
    A = np.zeros((N, N))
    for n in range(1, N + 1):
        for i in range(n, N + 1):
            A[n - 1, i - 1] = comb(N - n, i - n) * comb(N, n) * (-1) ** (i - n)
    return A


def recover_truncation_moments(P, N: int) -> np.ndarray:
    """First N moments of the mixing distribution of p from Pr(n active | N), n = 1..N."""
    P = np.asarray(P, dtype=float)
    if N < 1 or P.shape != (N,):
        raise ParameterError(f"need N >= 1 and N probabilities, got N={N}, len(P)={P.size}")
    if np.any(P < 0):
        raise ParameterError("probabilities must be nonnegative")
    return solve_triangular(truncation_moment_matrix(N), P, lower=False)


def active_probabilities(N: int, p_nodes, p_weights) -> np.ndarray:
    """Pr(n active | N) = int C(N, n) p^n (1-p)^(N-n) dG(p) for n = 1..N by a given rule."""
    p, w = np.asarray(p_nodes, dtype=float), np.asarray(p_weights, dtype=float)
    return np.array([comb(N, n) * np.sum(w * p ** n * (1 - p) ** (N - n)) for n in range(1, N + 1)])


# ---------------------------------------------------------------- injectivity

def _spectrum(A, name, K):
    # conditioning on the leading K directions, the range the factorization uses
    s = np.linalg.svd(A, compute_uv=False)
    smin = float(s[K - 1]) if len(s) >= K else 0.0
    cond = float(s[0] / smin) if smin > 0 else np.inf
    return {
        "name": name,
        "sigma_max": float(s[0]),
        "sigma_min": smin,
        "cond": cond,
        "rank": int(np.sum(s > PINV_RTOL * s[0])),
        "spectrum": s.tolist(),
        "near_violation": bool(cond > COND_LIMIT),
    }


def injectivity_diagnostics(ops: DiscreteOperators, K: int) -> dict:
    """Singular values of L, H and J_y as L2 operators (square-root weight scaling).

    ``sigma_min`` and ``cond`` refer to the K-th singular value, K being the
    number of tau types. J_y is a grid-by-grid matrix of rank K, so its
    trailing singular values are roundoff.
    """
    g = ops.grid
    rl, rh = np.sqrt(g.w_low), np.sqrt(g.w_high)
    return {
        "L_mat": _spectrum(ops.L_mat * rl[:, None], "L_mat", K),
        "H_mat": _spectrum(ops.H_mat / rh[None, :], "H_mat", K),
        "J_y": _spectrum(ops.J_y * rl[:, None] / rh[None, :], "J_y", K),
    }


# ---------------------------------------------------------------- end-to-end pipeline

@dataclass
class LabReport:
    factorization_error: float
    eigen_ratio_error: float
    cdf_sup_error: float
    mass_error: float
    middle_offdiag: float
    recovered_masses: np.ndarray
    true_masses: np.ndarray
    permutation: np.ndarray
    scales: np.ndarray
    conditions: dict
    conditionals: list = field(repr=False)

    def to_json(self) -> dict:
        return {
            "factorization_error": self.factorization_error,
            "eigen_ratio_error": self.eigen_ratio_error,
            "cdf_sup_error": self.cdf_sup_error,
            "mass_error": self.mass_error,
            "middle_offdiag": self.middle_offdiag,
            "recovered_masses": self.recovered_masses.tolist(),
            "true_masses": self.true_masses.tolist(),
            "permutation": self.permutation.tolist(),
            "scales": self.scales.tolist(),
            "condition_numbers": self.conditions,
        }


def default_y_pair(partition: Partition) -> tuple[float, float]:
    c1, c2 = partition.c1, partition.c2
    return c1 + 0.3 * (c2 - c1), c1 + 0.7 * (c2 - c1)


def run_pipeline(
    model: DiscreteTauModel,
    r: int = 3,
    n: int = 4,
    partition: Partition | None = None,
    y1: float | None = None,
    y2: float | None = None,
    grid_size: int = 24,
    eval_points: int = 401,
) -> LabReport:
    """Recover every conditional CDF and the tau masses from observable operators only.

    The true model is used to build the observable operators and, at the end,
    to score the recovery.
    """
    _check_ranks(r, n)
    partition = partition or default_partition(model)
    grid = OperatorGrid.for_model(model, partition, n_low=grid_size, n_mid=grid_size, n_high=grid_size)
    d1, d2 = default_y_pair(partition)
    y1 = d1 if y1 is None else y1
    y2 = d2 if y2 is None else y2
    ops1 = build_operators(model, grid, y1, r, n)
    ops2 = build_operators(model, grid, y2, r, n)
    fact = max(check_factorization(ops1), check_factorization(ops2))
    conditions = {}

    # step 1: low segment
    low = eig_recover(ops1.J_y, ops2.J_y)
    K = low.rank
    conditions["J_y2"] = low.cond
    true_ratio = np.sort([float(model.cond_pdf(y1, t) / model.cond_pdf(y2, t)) for t in model.taus])
    eig_err = float(np.max(np.abs(low.values - true_ratio))) if K == model.K else np.inf

    # step 2: high segment from the transposed problem, matched by eigenvalue
    high = eig_recover(ops1.J_y.T, ops2.J_y.T, rank=K)
    conditions["J_y2_T"] = high.cond
    match = [int(np.argmin(np.abs(high.values - lam))) for lam in low.values]
    if len(set(match)) != K:
        raise AmbiguousDecompositionError("low and high eigenvalues do not pair one-to-one")
    H_vecs = high.vectors[:, match]

    c1, c2 = partition.c1, partition.c2
    lows = [recover_parent_low(grid.x_low, low.vectors[:, k], r, 0.0, c1) for k in range(K)]
    highs = [recover_parent_high(grid.x_high, H_vecs[:, k] / grid.w_high, n, r, c2, 1.0) for k in range(K)]

    # step 3: middle segment
    L_hat = np.stack([normalize_sign(low.vectors[:, k]) for k in range(K)], axis=1)
    H_hat = np.stack([normalize_sign(H_vecs[:, k]) for k in range(K)])
    ops_mid = [build_operators(model, grid, y, r, n) for y in grid.x_mid]
    mid = recover_middle(ops_mid, L_hat, H_hat)
    conditions["L_hat"], conditions["H_hat"] = mid.cond_L, mid.cond_H
    mids = [middle_curve(grid.x_mid, normalize_sign(mid.values[:, k]), c1, c2) for k in range(K)]

    # step 4: scales, then order by conditional mean
    pinned = []
    for k in range(K):
        s = pin_scales(lows[k], mids[k], highs[k])
        pinned.append(PinnedConditional(lows[k], mids[k], highs[k], s))
    perm, _ = order_and_locate([p.mean() for p in pinned])
    pinned = [pinned[i] for i in perm]

    # step 5: tau masses from the observable pair operator
    x_pair = np.concatenate([grid.x_low, grid.x_mid])
    Kmat = pair_kernel(model, x_pair, grid.x_high, grid.w_high, model.taus, model.masses, r, n)
    masses, cLp, cHp = recover_marginal(Kmat, pinned, x_pair, grid.x_high, grid.w_high, r, n)
    conditions["L_pair"], conditions["H_pair"] = cLp, cHp

    # score against the truth (truth is sorted by conditional mean too)
    true_order = np.argsort(model.cond_mean(model.taus))
    xs = np.linspace(0.0, 1.0, eval_points)
    cdf_err = 0.0
    for j, p in enumerate(pinned):
        t = model.taus[true_order[j]]
        cdf_err = max(cdf_err, float(np.max(np.abs(p.cdf(xs) - model.cond_cdf(xs, t)))))
    true_masses = model.masses[true_order]
    mass_err = float(np.max(np.abs(masses - true_masses))) if K == model.K else np.inf
    return LabReport(
        factorization_error=fact,
        eigen_ratio_error=eig_err,
        cdf_sup_error=cdf_err,
        mass_error=mass_err,
        middle_offdiag=mid.offdiag_ratio,
        recovered_masses=masses,
        true_masses=true_masses,
        permutation=perm,
        scales=np.array([p.scales for p in pinned]),
        conditions={k: float(v) for k, v in conditions.items()},
        conditionals=pinned,
    )


def sweep_partitions(model: DiscreteTauModel, partitions: Sequence[Partition], **kw) -> list:
    """Run the pipeline over several partitions; failures are reported, not raised."""
    out = []
    for p in partitions:
        try:
            out.append((p, run_pipeline(model, partition=p, **kw), None))
        except Exception as exc:  # noqa: BLE001 - report every failure mode side by side
            out.append((p, None, exc))
    return out
