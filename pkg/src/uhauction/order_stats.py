"""Consecutive order statistics of bids: joint densities, samplers and dataset files."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from math import factorial
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dist_core import ParentModel, os_pdf
from .errors import ConfigError, OrderIndexError, ParameterError
from .quadrature import QuadratureRule

TRIPLE_COLUMNS = ("auction_id", "n", "r", "x", "y", "z")
CENSORED_COLUMNS = ("auction_id", "n", "N", "R", "bid_rank", "bid")


@dataclass(frozen=True)
class TripleObs:
    """Realized (X_{r-2:n}, X_{r-1:n}, X_{r:n}) of one auction."""

    x: float
    y: float
    z: float
    r: int
    n: int

    def __post_init__(self):
        if not (3 <= self.r <= self.n):
            raise OrderIndexError(f"need 3 <= r <= n, got r={self.r}, n={self.n}")
        if not (self.x <= self.y <= self.z):
            raise ParameterError(f"triple must be ordered, got ({self.x}, {self.y}, {self.z})")


@dataclass(frozen=True)
class CensoredAuctionObs:
    """Observed bids of an ascending auction with reserve price R.

    ``bids`` holds the n-1 lowest active values (the top one equals the
    second-highest value); ``[R]`` when n == 1 and empty when n == 0.
    """

    bids: tuple
    n: int
    N: int
    R: float
    auction_id: int = field(default=0, compare=False)

    def __post_init__(self):
        bids = tuple(float(b) for b in self.bids)
        object.__setattr__(self, "bids", bids)
        if not (0 <= self.n <= self.N):
            raise ParameterError(f"need 0 <= n <= N, got n={self.n}, N={self.N}")
        expected = 0 if self.n == 0 else max(self.n - 1, 1)
        if len(bids) != expected:
            raise ParameterError(f"n={self.n} requires {expected} bids, got {len(bids)}")
        if any(b2 < b1 for b1, b2 in zip(bids, bids[1:])):
            raise ParameterError("bids must be sorted ascending")
        if self.n == 1 and bids[0] != self.R:
            raise ParameterError("a single active bidder pays the reserve: bids must be [R]")


def coeff_c(r: int, n: int) -> int:
    """n! / ((r-2)! (n-r+1)!)."""
    if not (3 <= r <= n):
        raise OrderIndexError(f"need 3 <= r <= n, got r={r}, n={n}")
    return factorial(n) // (factorial(r - 2) * factorial(n - r + 1))


def coeff_full(r: int, n: int) -> int:
    """n! / ((r-3)! (n-r)!), the constant of the raw triple density."""
    if not (3 <= r <= n):
        raise OrderIndexError(f"need 3 <= r <= n, got r={r}, n={n}")
    return factorial(n) // (factorial(r - 3) * factorial(n - r))


def triple_density(parent: ParentModel, tau, x, y, z, r: int, n: int):
    """Raw-form joint density of three consecutive order statistics given tau (broadcasts)."""
    x, y, z, tau = (np.asarray(v, dtype=float) for v in (x, y, z, tau))
    Fx = parent.cond_cdf(x, tau)
    Fz = parent.cond_cdf(z, tau)
    out = coeff_full(r, n) * parent.cond_pdf(x, tau) * parent.cond_pdf(y, tau) * parent.cond_pdf(z, tau)
    if r > 3:
        out = out * Fx ** (r - 3)
    if n > r:
        out = out * (1.0 - Fz) ** (n - r)
    out = np.where((x <= y) & (y <= z), out, 0.0)
    return out[()] if out.ndim == 0 else out


def triple_density_factorized(parent: ParentModel, tau, x, y, z, r: int, n: int):
    """c_{r,n} f_{r-2:r-2}(x) f(y) f_{1:n-r+1}(z) on the ordered simplex."""
    x, y, z = (np.asarray(v, dtype=float) for v in (x, y, z))
    out = (
        coeff_c(r, n)
        * os_pdf(parent, tau, r - 2, r - 2, x)
        * parent.cond_pdf(y, tau)
        * os_pdf(parent, tau, 1, n - r + 1, z)
    )
    out = np.where((x <= y) & (y <= z), out, 0.0)
    return out[()] if out.ndim == 0 else out


def triple_pdf_given_tau(parent: ParentModel, tau: float, obs: TripleObs) -> float:
    return float(triple_density(parent, tau, obs.x, obs.y, obs.z, obs.r, obs.n))


def triple_pdf(model: ParentModel, obs: TripleObs, quad: QuadratureRule) -> float:
    """Integrate the conditional triple density against f(tau) with ``quad``."""
    vals = triple_density(model, quad.nodes, obs.x, obs.y, obs.z, obs.r, obs.n)
    return float(np.sum(quad.weights * model.marg_t_pdf(quad.nodes) * vals))


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_triples(dgp, m: int, n: int, r: int, seed) -> list[TripleObs]:
    """Simulate ``m`` auctions of ``n`` bidders and keep ranks r-2, r-1, r."""
    if not (3 <= r <= n):
        raise OrderIndexError(f"need 3 <= r <= n, got r={r}, n={n}")
    if m < 1:
        raise ParameterError("m must be at least 1")
    _, vals = dgp.sample(_rng(seed), m, n)
    vals.sort(axis=1)
    trip = vals[:, r - 3 : r]
    return [TripleObs(float(a), float(b), float(c), r, n) for a, b, c in trip]


def _censor(values: np.ndarray, N: int, R: float, auction_id: int) -> CensoredAuctionObs:
    active = np.sort(values[values >= R])
    n = active.size
    if n == 0:
        bids = ()
    elif n == 1:
        bids = (R,)
    else:
        bids = tuple(float(v) for v in active[:-1])
    return CensoredAuctionObs(bids, n, N, R, auction_id)


def sample_censored(dgp, N: int, R: float, seed, auction_id: int = 0) -> CensoredAuctionObs:
    """One ascending auction with ``N`` potential bidders and reserve ``R``.

    Values at or above R participate; the highest value is never observed.
    ``dgp`` is anything with ``sample(rng, m, n) -> (tau, values)``.
    """
    if N < 0:
        raise ParameterError("N must be nonnegative")
    _, vals = dgp.sample(_rng(seed), 1, N)
    return _censor(vals[0], N, R, auction_id)


def sample_censored_many(dgp, Ns: Sequence[int], R: float, seed) -> list[CensoredAuctionObs]:
    """Independent auctions; auction i draws from child i of the seed sequence."""
    children = np.random.SeedSequence(seed).spawn(len(Ns))
    return [
        sample_censored(dgp, int(N), R, np.random.default_rng(ss), auction_id=i)
        for i, (N, ss) in enumerate(zip(Ns, children))
    ]


def write_triples_csv(path, data: Iterable[TripleObs]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRIPLE_COLUMNS)
        for i, o in enumerate(data):
            w.writerow([i, o.n, o.r, repr(o.x), repr(o.y), repr(o.z)])


def read_triples_csv(path) -> list[TripleObs]:
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.DictReader(fh)
        _check_header(rd.fieldnames, TRIPLE_COLUMNS, path)
        return [
            TripleObs(float(row["x"]), float(row["y"]), float(row["z"]), int(row["r"]), int(row["n"]))
            for row in rd
        ]


def write_censored_csv(path, auctions: Iterable[CensoredAuctionObs]):
    """Long format; an auction without bids gets one row with bid_rank 0 and empty bid."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CENSORED_COLUMNS)
        for a in auctions:
            if not a.bids:
                w.writerow([a.auction_id, a.n, a.N, repr(a.R), 0, ""])
            for k, b in enumerate(a.bids, start=1):
                w.writerow([a.auction_id, a.n, a.N, repr(a.R), k, repr(b)])


def read_censored_csv(path, extra_columns: Sequence[str] = ()) -> list[CensoredAuctionObs] | tuple:
    """Read the long censored format.

    With ``extra_columns``, also returns a dict mapping each auction_id to the
    per-auction values of those columns (e.g. an appraisal value).
    """
    rows: dict[int, list] = {}
    extras: dict[int, dict] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.DictReader(fh)
        _check_header(rd.fieldnames, CENSORED_COLUMNS, path)
        for col in extra_columns:
            if col not in rd.fieldnames:
                raise ConfigError(f"column {col!r} missing from {path}")
        for row in rd:
            aid = int(row["auction_id"])
            rows.setdefault(aid, [])
            extras[aid] = {c: float(row[c]) for c in extra_columns}
            rows[aid].append(row)
    out = []
    for aid in sorted(rows):
        rs = rows[aid]
        head = rs[0]
        n, N, R = int(head["n"]), int(head["N"]), float(head["R"])
        bids = sorted(
            (int(r["bid_rank"]), float(r["bid"])) for r in rs if r["bid"] not in ("", None)
        )
        out.append(CensoredAuctionObs(tuple(b for _, b in bids), n, N, R, aid))
    return (out, extras) if extra_columns else out


def _check_header(fieldnames, required, path):
    missing = [c for c in required if c not in (fieldnames or ())]
    if missing:
        raise ConfigError(f"{path} lacks columns {missing}")


def detect_csv_mode(path) -> str:
    """'triples' or 'censored', from the header row."""
    with open(path, newline="", encoding="utf-8") as fh:
        header = next(csv.reader(fh), [])
    if all(c in header for c in TRIPLE_COLUMNS):
        return "triples"
    if all(c in header for c in CENSORED_COLUMNS):
        return "censored"
    raise ConfigError(f"{Path(path).name}: header matches neither dataset schema")
