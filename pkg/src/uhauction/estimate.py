"""Sieve maximum-likelihood estimation: multi-start quasi-Newton fits and replication studies."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .dist_core import ParentModel, SyntheticDGP
from .errors import ConfigError, EstimationError, NumericError
from .likelihood import CensoredDesign, McDraws, TripleDesign, _evaluate
from .optim import bfgs
from .order_stats import sample_triples
from .quadrature import QuadratureRule, gauss_legendre
from .sieve_model import (
    DEFAULT_P_M,
    SieveParams,
    SieveWeights,
    cond_pdf,
    conditional_mean_slope,
    marginal_t_pdf,
    reflect_tau,
    softmax_weights,
)

log = logging.getLogger(__name__)

ORIENTATIONS = (None, "increasing", "decreasing")


@dataclass(frozen=True)
class IntegrationSpec:
    """How to integrate over tau: Gauss-Legendre ``nodes`` or fixed MC draws (``S`` per basis, ``seed``).

    ``kind='auto'`` means quadrature for triples and MC draws for censored auctions.
    """

    kind: str = "auto"
    nodes: int = 64
    S: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("auto", "quadrature", "mc"):
            raise ConfigError(f"integration kind must be 'auto', 'quadrature' or 'mc', got {self.kind!r}", key_path="integration.kind")
        if self.kind == "quadrature" and self.nodes < 2:
            raise ConfigError("quadrature needs at least 2 nodes", key_path="integration.nodes")
        if self.kind == "mc" and self.S < 1:
            raise ConfigError("S must be positive", key_path="integration.S")

    def build(self, p_m: int, auto: str = "quadrature") -> QuadratureRule | McDraws:
        kind = auto if self.kind == "auto" else self.kind
        if kind == "quadrature":
            return gauss_legendre(self.nodes)
        return McDraws.generate(p_m, self.S, self.seed)


@dataclass(frozen=True)
class FitConfig:
    """Settings for one sieve MLE fit.

    ``orientation`` resolves the tau -> 1 - tau relabeling, which leaves the
    likelihood unchanged: the fit is reflected when needed so that E[X | tau]
    is increasing or decreasing in tau. ``None`` keeps the optimizer's labeling.
    """

    p_m: int = DEFAULT_P_M
    n_starts: int = 8
    max_iters: int = 2000
    grad_tol: float = 1e-6
    integration: IntegrationSpec = field(default_factory=IntegrationSpec)
    start_spread: float = 1.0
    seed: int = 0
    orientation: str | None = None
    n_jobs: int = 1

    def __post_init__(self):
        if isinstance(self.integration, dict):
            object.__setattr__(self, "integration", IntegrationSpec(**self.integration))
        if self.p_m < 1:
            raise ConfigError("p_m must be at least 1", key_path="p_m")
        if self.n_starts < 1:
            raise ConfigError("n_starts must be at least 1", key_path="n_starts")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be at least 1", key_path="max_iters")
        if not self.grad_tol > 0:
            raise ConfigError("grad_tol must be positive", key_path="grad_tol")
        if self.start_spread < 0:
            raise ConfigError("start_spread must be nonnegative", key_path="start_spread")
        if self.orientation not in ORIENTATIONS:
            raise ConfigError(f"orientation must be one of {ORIENTATIONS}", key_path="orientation")
        if self.n_jobs < 1:
            raise ConfigError("n_jobs must be at least 1", key_path="n_jobs")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class StartRecord:
    loglik: float
    iterations: int
    converged: bool
    reason: str = ""


@dataclass
class EstimationResult:
    params: SieveParams
    loglik: float
    per_start: list
    gradient_norm: float
    converged: bool
    seed: int
    config: FitConfig
    best_start: int = 0
    reflected: bool = False

    @property
    def weights(self) -> SieveWeights:
        return softmax_weights(self.params)

    def to_json(self) -> dict:
        return {
            "model": self.params.to_json(),
            "loglik": self.loglik,
            "gradient_norm": self.gradient_norm,
            "converged": self.converged,
            "best_start": self.best_start,
            "reflected": self.reflected,
            "seed": self.seed,
            "per_start": [asdict(s) for s in self.per_start],
            "config": self.config.to_json(),
        }


def _start_points(cfg: FitConfig) -> list[np.ndarray]:
    # start 0 is the uniform sieve (gamma = 0); the others are Normal(0, spread)
    rng = np.random.default_rng(cfg.seed)
    k = cfg.p_m * cfg.p_m - 1
    pts = [np.zeros(k)]
    for _ in range(cfg.n_starts - 1):
        pts.append(rng.normal(0.0, cfg.start_spread, size=k))
    return pts


def _objective(design, integ, p_m: int, scale: float) -> Callable:
    def fun_grad(free):
        params = SieveParams.from_free(p_m, free)
        try:
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                ll, g = _evaluate(design, params, integ, True)
        except (NumericError, FloatingPointError):
            return np.inf, np.full(free.shape, np.nan)
        total = float(np.sum(ll))
        if not np.isfinite(total):
            return np.inf, np.full(free.shape, np.nan)
        return -total * scale, -g * scale

    return fun_grad


def check_sieve_invariants(params: SieveParams, tol: float = 1e-10):
    """Raise EstimationError unless the fitted sieve defines proper densities."""
    w = softmax_weights(params)
    if np.any(w.theta < 0) or abs(w.theta.sum() - 1.0) > tol:
        raise EstimationError("fitted theta is not a probability matrix")
    q = gauss_legendre(64)
    mass = float(q.integrate(marginal_t_pdf(w, q.nodes)))
    if abs(mass - 1.0) > 1e-8:
        raise EstimationError(f"fitted tau marginal integrates to {mass}")


def orient(params: SieveParams, orientation: str | None) -> tuple[SieveParams, bool]:
    """Reflect tau if the conditional mean runs against ``orientation``."""
    if orientation is None:
        return params, False
    slope = conditional_mean_slope(softmax_weights(params))
    want = 1.0 if orientation == "increasing" else -1.0
    if slope * want < 0:
        return reflect_tau(params), True
    return params, False


def _fit(design, integ, cfg: FitConfig, scale: float) -> EstimationResult:
    fun_grad = _objective(design, integ, cfg.p_m, scale)
    starts = _start_points(cfg)

    def run(x0):
        f0, _ = fun_grad(x0)
        if not np.isfinite(f0):
            return None
        return bfgs(fun_grad, x0, grad_tol=cfg.grad_tol, max_iters=cfg.max_iters)

    if cfg.n_jobs > 1:
        with ThreadPoolExecutor(cfg.n_jobs) as pool:
            runs = list(pool.map(run, starts))
    else:
        runs = [run(x0) for x0 in starts]

    records = []
    for i, res in enumerate(runs):
        if res is None:
            log.warning("start %d: likelihood not finite at the initial point", i)
            records.append(StartRecord(float("-inf"), 0, False, "diverged"))
        else:
            log.info("start %d: loglik %.10g after %d iterations (%s)", i, -res.fun, res.n_iter, res.reason)
            records.append(StartRecord(-res.fun, res.n_iter, res.converged, res.reason))
    finite = [i for i, r in enumerate(runs) if r is not None]
    if not finite:
        raise EstimationError("likelihood is not finite at any starting point")
    # ties go to the lowest start index
    best = max(finite, key=lambda i: (-runs[i].fun, -i))
    res = runs[best]
    params = SieveParams.from_free(cfg.p_m, res.x)
    check_sieve_invariants(params)
    params, reflected = orient(params, cfg.orientation)
    return EstimationResult(
        params=params,
        loglik=-res.fun,
        per_start=records,
        gradient_norm=res.grad_norm,
        converged=res.converged,
        seed=cfg.seed,
        config=cfg,
        best_start=best,
        reflected=reflected,
    )


def fit_triples(data, cfg: FitConfig | None = None) -> EstimationResult:
    """Maximize the mean triple log-likelihood over the free softmax logits."""
    cfg = cfg or FitConfig()
    design = data if isinstance(data, TripleDesign) else TripleDesign(data, cfg.p_m)
    return _fit(design, cfg.integration.build(cfg.p_m), cfg, 1.0 / design.n_obs)


def fit_censored(auctions, cfg: FitConfig | None = None) -> EstimationResult:
    """Maximize the censored-auction log-likelihood (a sum over auctions).

    With ``kind='auto'`` the integral over tau uses fixed MC draws from each
    tau basis, generated once from ``cfg.integration``.
    """
    cfg = cfg or FitConfig()
    design = auctions if isinstance(auctions, CensoredDesign) else CensoredDesign(auctions, cfg.p_m)
    # the optimizer works on the per-auction mean; loglik is reported as the sum
    res = _fit(design, cfg.integration.build(cfg.p_m, auto="mc"), cfg, 1.0 / design.n_obs)
    res.loglik *= design.n_obs
    res.per_start = [replace(s, loglik=s.loglik * design.n_obs) for s in res.per_start]
    return res


# ---------------------------------------------------------------- replication study

DEFAULT_TAU_EVAL = (0.25, 0.5, 0.75)


@dataclass
class Envelope:
    grid: np.ndarray
    q05: np.ndarray
    mean: np.ndarray
    q95: np.ndarray

    def coverage(self, truth) -> float:
        """Fraction of grid points where ``truth`` lies inside [q05, q95]."""
        truth = np.asarray(truth, dtype=float)
        return float(np.mean((truth >= self.q05) & (truth <= self.q95)))

    def rows(self):
        return zip(self.grid, self.q05, self.mean, self.q95)


def envelope(grid, draws) -> Envelope:
    draws = np.asarray(draws, dtype=float)
    q05, q95 = np.quantile(draws, [0.05, 0.95], axis=0)
    return Envelope(np.asarray(grid, dtype=float), q05, draws.mean(axis=0), q95)


@dataclass
class StudyResult:
    grid: np.ndarray
    tau_eval: tuple
    f_t: np.ndarray  # (reps, grid)
    f_x_given_t: dict  # tau -> (reps, grid)
    fits: list

    def envelopes(self) -> dict:
        out = {"f_T": envelope(self.grid, self.f_t)}
        for t, v in self.f_x_given_t.items():
            out[f"f_X|T={t:g}"] = envelope(self.grid, v)
        return out


def fitted_curves(params: SieveParams, grid, tau_eval: Sequence[float]):
    w = softmax_weights(params)
    ft = marginal_t_pdf(w, grid)
    fx = {t: cond_pdf(w, grid, t) for t in tau_eval}
    return ft, fx


def true_curves(dgp: ParentModel, grid, tau_eval: Sequence[float]):
    ft = dgp.marg_t_pdf(grid)
    fx = {t: dgp.cond_pdf(grid, t) for t in tau_eval}
    return np.asarray(ft), {t: np.asarray(v) for t, v in fx.items()}


def replication_study(
    dgp: SyntheticDGP,
    m: int,
    n: int,
    r: int,
    reps: int,
    cfg: FitConfig,
    seed: int = 0,
    tau_eval: Sequence[float] = DEFAULT_TAU_EVAL,
    grid_points: int = 101,
    progress: Callable[[int, EstimationResult], None] | None = None,
) -> StudyResult:
    """Simulate ``reps`` triple datasets, fit each, and collect fitted curves on a grid."""
    grid = np.linspace(0.0, 1.0, grid_points)
    tau_eval = tuple(float(t) for t in tau_eval)
    children = np.random.SeedSequence(seed).spawn(reps)
    f_t, fx, fits = [], {t: [] for t in tau_eval}, []
    for i, ss in enumerate(children):
        data_seed, fit_seed = ss.generate_state(2)
        data = sample_triples(dgp, m, n, r, np.random.default_rng(int(data_seed)))
        res = fit_triples(data, replace(cfg, seed=int(fit_seed)))
        ft, fxt = fitted_curves(res.params, grid, tau_eval)
        f_t.append(ft)
        for t in tau_eval:
            fx[t].append(fxt[t])
        fits.append(res)
        if progress is not None:
            progress(i, res)
    return StudyResult(grid, tau_eval, np.array(f_t), {t: np.array(v) for t, v in fx.items()}, fits)


def integrated_abs_error(params: SieveParams, truth: Callable, nodes: int = 256) -> float:
    """int_0^1 |f_hat^T - f^T| by Gauss-Legendre."""
    q = gauss_legendre(nodes)
    est = marginal_t_pdf(softmax_weights(params), q.nodes)
    return float(q.integrate(np.abs(est - truth(q.nodes))))

