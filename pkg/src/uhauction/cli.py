"""Command-line interface: simulate | estimate | identify | counterfactual | mc-study.

Each command reads an optional JSON config (unknown keys are rejected),
writes its outputs plus ``config.json`` (the fully resolved config and the
package version) into ``--out``, and exits with 0 on success, 2 on a config
error, 3 on a numeric or estimation failure and 4 when an identification
diagnostic fails.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .counterfactual import STATUS_QUO_RESERVE, ReserveProblem, reserve_curve, revenue_compare
from .dist_core import ParentModel, UniformParent, beta_family, default_dgp
from .errors import ConfigError, EstimationError, IdentificationError, NumericError, ParameterError
from .estimate import (
    DEFAULT_TAU_EVAL,
    FitConfig,
    fit_censored,
    fit_triples,
    fitted_curves,
    replication_study,
    true_curves,
)
from .ident_lab import (
    DiscreteTauModel,
    OperatorGrid,
    Partition,
    build_operators,
    default_partition,
    default_y_pair,
    demo_model,
    independent_model,
    injectivity_diagnostics,
    run_pipeline,
)
from .order_stats import (
    CensoredAuctionObs,
    TripleObs,
    detect_csv_mode,
    read_censored_csv,
    read_triples_csv,
    sample_censored_many,
    sample_triples,
    write_censored_csv,
    write_triples_csv,
)
from .quadrature import gauss_legendre
from .sieve_model import SieveParent, load_model

log = logging.getLogger("uhauction")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IDENT = 0, 2, 3, 4


# ---------------------------------------------------------------- configs

@dataclass
class DGPConfig:
    """``kind``: 'default' (tau ~ Beta(3, 1.5), X | tau ~ Beta(1.5, 1.5(1 + tau))),
    'beta' (X ~ Beta(alpha, beta) for every tau) or 'sieve' (model JSON at ``model``)."""

    kind: str = "default"
    alpha: float = 2.0
    beta: float = 2.0
    model: str | None = None


@dataclass
class SimulateConfig:
    mode: str = "triples"
    m: int = 1000
    n: int = 4
    r: int = 3
    N_dist: dict = field(default_factory=lambda: {str(k): 0.1 for k in range(1, 11)})
    R: float = 0.7
    seed: int = 0
    dgp: DGPConfig = field(default_factory=DGPConfig)


@dataclass
class EstimateConfig:
    data: str = ""
    fit: FitConfig = field(default_factory=FitConfig)
    tau_eval: list = field(default_factory=lambda: list(DEFAULT_TAU_EVAL))
    grid_points: int = 101
    homogenize_column: str | None = None
    rescale: bool = False


@dataclass
class StudyConfig:
    m: int = 1000
    n: int = 4
    r: int = 3
    reps: int = 100
    seed: int = 0
    fit: FitConfig = field(default_factory=lambda: FitConfig(orientation="decreasing"))
    tau_eval: list = field(default_factory=lambda: list(DEFAULT_TAU_EVAL))
    grid_points: int = 101
    dgp: DGPConfig = field(default_factory=DGPConfig)


@dataclass
class LabModelConfig:
    """'demo', 'independent' or explicit ``taus``/``masses``/``conds``."""

    kind: str = "demo"
    K: int = 3
    taus: list | None = None
    masses: list | None = None
    conds: list | None = None


@dataclass
class IdentifyConfig:
    model: LabModelConfig = field(default_factory=LabModelConfig)
    partition: list | None = None
    y1: float | None = None
    y2: float | None = None
    r: int = 3
    n: int = 4
    grid_size: int = 24
    seed: int = 0


@dataclass
class CounterfactualConfig:
    """``model``: 'uniform', 'default' or a path to a model JSON from ``estimate``."""

    model: str = "uniform"
    v0: float = 0.5
    fixed_reserve: float = 1.0
    status_quo: float = STATUS_QUO_RESERVE
    lower: float = 0.0
    N_dist: dict | None = None
    data: str | None = None
    tau_grid: list = field(default_factory=lambda: [round(0.05 * k, 2) for k in range(1, 20)])
    tau_nodes: int = 32
    N_ref: int = 5
    seed: int = 0


COMMAND_CONFIGS = {
    "simulate": SimulateConfig,
    "estimate": EstimateConfig,
    "identify": IdentifyConfig,
    "counterfactual": CounterfactualConfig,
    "mc-study": StudyConfig,
}


def build_config(cls, obj: dict | None, path: str = "", base=None):
    """Instantiate dataclass ``cls`` from a JSON object, rejecting unknown keys.

    Nested objects override the default instance of the field key by key;
    ``base`` supplies those defaults for nested calls.
    """
    obj = {} if obj is None else obj
    if not isinstance(obj, dict):
        raise ConfigError("expected a JSON object", key_path=path or None)
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(obj) - set(names))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown}", key_path=path or None)
    kw = {}
    for key, value in obj.items():
        sub = f"{path}.{key}" if path else key
        if base is not None:
            proto = getattr(base, key)
        elif names[key].default_factory is not dataclasses.MISSING:
            proto = names[key].default_factory()
        else:
            proto = names[key].default
        if dataclasses.is_dataclass(proto) and not isinstance(proto, type):
            kw[key] = build_config(type(proto), value, sub, base=proto)
        else:
            kw[key] = value
    try:
        return dataclasses.replace(base, **kw) if base is not None else cls(**kw)
    except ConfigError as exc:
        if path and exc.key_path:
            raise ConfigError(str(exc).split(": ", 1)[-1], key_path=f"{path}.{exc.key_path}") from exc
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), key_path=path or None) from exc


def to_jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None  # strict JSON has no nan or inf
    return obj


def _write_json(path: Path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_jsonable(obj), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _echo_config(out: Path, command: str, cfg):
    _write_json(out / "config.json", {"command": command, "version": __version__, "config": cfg})


def _manifest(out: Path, command: str, seed, files):
    _write_json(out / "manifest.json", {
        "command": command,
        "version": __version__,
        "seed": seed,
        "files": sorted(files),
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    })


# ---------------------------------------------------------------- models from config

def make_dgp(cfg: DGPConfig) -> ParentModel:
    if cfg.kind == "default":
        return default_dgp()
    if cfg.kind == "beta":
        return beta_family(cfg.alpha, cfg.beta)
    if cfg.kind == "sieve":
        if not cfg.model:
            raise ConfigError("a sieve DGP needs a model path", key_path="dgp.model")
        return SieveParent(_load_model(cfg.model))
    raise ConfigError(f"unknown DGP kind {cfg.kind!r}", key_path="dgp.kind")


def _load_model(path):
    try:
        return load_model(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"model file not found: {path}", key_path="model") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"model file is not JSON: {exc}", key_path="model") from exc


def _pmf(d: dict, key: str) -> tuple[np.ndarray, np.ndarray]:
    try:
        Ns = np.array([int(k) for k in d])
        ps = np.array([float(v) for v in d.values()])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"malformed pmf: {exc}", key_path=key) from exc
    if np.any(Ns < 1) or np.any(ps < 0) or abs(ps.sum() - 1.0) > 1e-9:
        raise ConfigError("pmf must put nonnegative mass on counts >= 1 and sum to 1", key_path=key)
    return Ns, ps


# ---------------------------------------------------------------- commands

def cmd_simulate(cfg: SimulateConfig, out: Path):
    if cfg.m < 1:
        raise ConfigError("m must be at least 1", key_path="m")
    dgp = make_dgp(cfg.dgp)
    if cfg.mode == "triples":
        if not (3 <= cfg.r <= cfg.n):
            raise ConfigError(f"need 3 <= r <= n, got r={cfg.r}, n={cfg.n}", key_path="r")
        data = sample_triples(dgp, cfg.m, cfg.n, cfg.r, np.random.default_rng(cfg.seed))
        write_triples_csv(out / "data.csv", data)
    elif cfg.mode == "censored":
        if not 0.0 <= cfg.R < 1.0:
            raise ConfigError("R must lie in [0, 1)", key_path="R")
        Ns, ps = _pmf(cfg.N_dist, "N_dist")
        counts = np.random.default_rng(cfg.seed).choice(Ns, size=cfg.m, p=ps)
        data = sample_censored_many(dgp, counts, cfg.R, cfg.seed)
        write_censored_csv(out / "data.csv", data)
    else:
        raise ConfigError(f"mode must be 'triples' or 'censored', got {cfg.mode!r}", key_path="mode")
    _manifest(out, "simulate", cfg.seed, ["data.csv"])
    return {"rows": len(data)}


def prepare_data(path, homogenize_column: str | None, rescale: bool):
    """Load a dataset; optionally divide by a per-auction appraisal column and by the max bid.

    Returns (mode, data, scale) where ``scale`` is the divisor applied after
    homogenization (1.0 without rescaling).
    """
    if not Path(path).exists():
        raise ConfigError(f"dataset not found: {path}", key_path="data")
    mode = detect_csv_mode(path)
    extras_cols = (homogenize_column,) if homogenize_column else ()
    if mode == "triples":
        data = read_triples_csv(path)
        if homogenize_column:
            raise ConfigError("homogenization needs the censored format with an appraisal column", key_path="homogenize_column")
        scale = max(o.z for o in data) if rescale else 1.0
        data = [TripleObs(o.x / scale, o.y / scale, o.z / scale, o.r, o.n) for o in data]
        return mode, data, scale
    loaded = read_censored_csv(path, extras_cols)
    auctions, extras = loaded if extras_cols else (loaded, {})
    if homogenize_column:
        auctions = [_scale_auction(a, extras[a.auction_id][homogenize_column]) for a in auctions]
    scale = 1.0
    if rescale:
        scale = max([max(a.bids) for a in auctions if a.bids] + [a.R for a in auctions])
        auctions = [_scale_auction(a, scale) for a in auctions]
    return mode, auctions, scale


def _scale_auction(a: CensoredAuctionObs, s: float) -> CensoredAuctionObs:
    if not s > 0:
        raise ConfigError(f"auction {a.auction_id}: nonpositive scale {s}")
    return CensoredAuctionObs(tuple(b / s for b in a.bids), a.n, a.N, a.R / s, a.auction_id)


def cmd_estimate(cfg: EstimateConfig, out: Path):
    mode, data, scale = prepare_data(cfg.data, cfg.homogenize_column, cfg.rescale)
    fit = cfg.fit
    if mode == "triples":
        res = fit_triples(data, fit)
    else:
        res = fit_censored(data, fit)
    for i, s in enumerate(res.per_start):
        log.info("start %d: loglik=%s iterations=%d reason=%s", i, s.loglik, s.iterations, s.reason)
    payload = res.to_json()
    payload["mode"] = mode
    payload["scale"] = scale
    payload["n_obs"] = len(data)
    _write_json(out / "result.json", payload)
    grid = np.linspace(0.0, 1.0, cfg.grid_points)
    ft, fx = fitted_curves(res.params, grid, cfg.tau_eval)
    _write_csv(out / "density_tau.csv", ["grid", "f_tau"], zip(grid, ft))
    header = ["grid"] + [f"tau={t:g}" for t in cfg.tau_eval]
    _write_csv(out / "density_x_given_tau.csv", header, zip(grid, *[fx[t] for t in cfg.tau_eval]))
    _manifest(out, "estimate", fit.seed, ["result.json", "density_tau.csv", "density_x_given_tau.csv"])
    return {"loglik": res.loglik, "converged": res.converged}


def cmd_mc_study(cfg: StudyConfig, out: Path):
    dgp = make_dgp(cfg.dgp)
    if cfg.reps < 2:
        raise ConfigError("reps must be at least 2", key_path="reps")
    study = replication_study(
        dgp, cfg.m, cfg.n, cfg.r, cfg.reps, cfg.fit, cfg.seed, cfg.tau_eval, cfg.grid_points,
        progress=lambda i, res: log.info("replication %d: loglik=%s", i, res.loglik),
    )
    ft, fx = true_curves(dgp, study.grid, study.tau_eval)
    truths = {"f_T": ft, **{f"f_X|T={t:g}": fx[t] for t in study.tau_eval}}
    files, coverage = [], {}
    for name, env in study.envelopes().items():
        fname = "envelope_" + name.replace("|", "_given_").replace("=", "") + ".csv"
        _write_csv(out / fname, ["grid", "q05", "mean", "q95"], env.rows())
        files.append(fname)
        coverage[name] = env.coverage(truths[name])
    _write_json(out / "summary.json", {"coverage": coverage, "reps": cfg.reps, "m": cfg.m})
    _manifest(out, "mc-study", cfg.seed, files + ["summary.json"])
    return {"coverage": coverage}


def make_lab_model(cfg: LabModelConfig) -> DiscreteTauModel:
    try:
        if cfg.kind == "demo":
            return demo_model()
        if cfg.kind == "independent":
            return independent_model(cfg.K)
        if cfg.kind == "custom":
            return DiscreteTauModel(cfg.taus, cfg.masses, [tuple(c) for c in cfg.conds])
    except (ParameterError, TypeError) as exc:
        raise ConfigError(str(exc), key_path="model") from exc
    raise ConfigError(f"unknown lab model kind {cfg.kind!r}", key_path="model.kind")


def cmd_identify(cfg: IdentifyConfig, out: Path):
    model = make_lab_model(cfg.model)
    try:
        partition = Partition(*cfg.partition) if cfg.partition else default_partition(model)
    except (ParameterError, TypeError) as exc:
        raise ConfigError(str(exc), key_path="partition") from exc
    d1, d2 = default_y_pair(partition)
    y1 = d1 if cfg.y1 is None else cfg.y1
    y2 = d2 if cfg.y2 is None else cfg.y2
    grid = OperatorGrid.for_model(model, partition, n_low=cfg.grid_size, n_mid=cfg.grid_size, n_high=cfg.grid_size)
    ops2 = build_operators(model, grid, y2, cfg.r, cfg.n)
    diag = injectivity_diagnostics(ops2, model.K)
    report: dict[str, Any] = {
        "K": model.K,
        "partition": [partition.c1, partition.c2],
        "y1": y1,
        "y2": y2,
        "injectivity": diag,
    }
    failed = [k for k, d in diag.items() if d["near_violation"] or d["rank"] < model.K]
    if failed:
        report["status"] = "injectivity_failure"
        report["failed"] = failed
        _write_json(out / "report.json", report)
        _manifest(out, "identify", cfg.seed, ["report.json"])
        raise IdentificationError(
            f"operators {failed} are not numerically injective; try a wider low/high segment or a model where X depends on tau"
        )
    try:
        rep = run_pipeline(model, cfg.r, cfg.n, partition, y1, y2, cfg.grid_size)
    except IdentificationError as exc:
        report["status"] = "pipeline_failure"
        report["error"] = f"{type(exc).__name__}: {exc}"
        _write_json(out / "report.json", report)
        _manifest(out, "identify", cfg.seed, ["report.json"])
        raise
    report["status"] = "ok"
    report.update(rep.to_json())
    report["condition_numbers"].update({k: d["cond"] for k, d in diag.items()})
    _write_json(out / "report.json", report)
    xs = np.linspace(0.0, 1.0, 201)
    order = np.argsort(model.cond_mean(model.taus))
    cols = []
    for j, p in enumerate(rep.conditionals):
        t = model.taus[order[j]]
        cols += [model.cond_cdf(xs, t), p.cdf(xs)]
    header = ["x"] + [f"{kind}_{j}" for j in range(len(rep.conditionals)) for kind in ("true_cdf", "recovered_cdf")]
    _write_csv(out / "recovered_cdfs.csv", header, zip(xs, *cols))
    _manifest(out, "identify", cfg.seed, ["report.json", "recovered_cdfs.csv"])
    return {"cdf_sup_error": rep.cdf_sup_error, "mass_error": rep.mass_error}


def make_cf_parent(spec: str) -> ParentModel:
    if spec == "uniform":
        return UniformParent()
    if spec == "default":
        return default_dgp()
    return SieveParent(_load_model(spec))


def cmd_counterfactual(cfg: CounterfactualConfig, out: Path):
    parent = make_cf_parent(cfg.model)
    if cfg.N_dist is not None:
        Ns, ps = _pmf(cfg.N_dist, "N_dist")
        N_dist = dict(zip(Ns.tolist(), ps.tolist()))
    elif cfg.data is not None:
        if not Path(cfg.data).exists():
            raise ConfigError(f"dataset not found: {cfg.data}", key_path="data")
        auctions = read_censored_csv(cfg.data)
        Ns, counts = np.unique([a.N for a in auctions if a.N >= 1], return_counts=True)
        N_dist = dict(zip(Ns.tolist(), (counts / counts.sum()).tolist()))
    else:
        N_dist = {2: 1.0}
    try:
        problem = ReserveProblem(
            parent, cfg.v0, N_dist, cfg.fixed_reserve, cfg.status_quo, cfg.lower,
            gauss_legendre(cfg.tau_nodes), cfg.N_ref,
        )
    except ParameterError as exc:
        raise ConfigError(str(exc)) from exc
    rows = reserve_curve(problem, cfg.tau_grid)
    _write_csv(out / "reserve_curve.csv", ["tau", "r_star", "profit"], rows)
    rep = revenue_compare(problem)
    summary = rep.to_json()
    summary["v0"] = cfg.v0
    summary["N_dist"] = N_dist
    _write_json(out / "report.json", summary)
    _manifest(out, "counterfactual", cfg.seed, ["reserve_curve.csv", "report.json"])
    return summary


COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "identify": cmd_identify,
    "counterfactual": cmd_counterfactual,
    "mc-study": cmd_mc_study,
}


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uhauction", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, help="JSON config file")
        sp.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--threads", type=int, help="concurrent optimizer starts")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "counterfactual":
            sp.add_argument("--v0", type=float)
            sp.add_argument("--fixed-reserve", type=float)
            sp.add_argument("--tau-grid", type=str, help="comma-separated tau values")
        if name == "estimate":
            sp.add_argument("--data", type=str)
    return p


def _load_json(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc


def resolve_config(args) -> Any:
    raw = _load_json(args.config)
    cls = COMMAND_CONFIGS[args.command]
    raw = dict(raw)
    if args.seed is not None:
        if cls is EstimateConfig:
            raw["fit"] = dict(raw.get("fit", {}), seed=args.seed)
        else:
            raw["seed"] = args.seed
    if args.threads is not None and cls in (EstimateConfig, StudyConfig):
        raw["fit"] = dict(raw.get("fit", {}), n_jobs=args.threads)
    if args.command == "counterfactual":
        if args.v0 is not None:
            raw["v0"] = args.v0
        if args.fixed_reserve is not None:
            raw["fixed_reserve"] = args.fixed_reserve
        if args.tau_grid:
            try:
                raw["tau_grid"] = [float(t) for t in args.tau_grid.split(",")]
            except ValueError as exc:
                raise ConfigError("--tau-grid must be comma-separated numbers", key_path="tau_grid") from exc
    if args.command == "estimate" and getattr(args, "data", None):
        raw["data"] = args.data
    return build_config(cls, raw)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        args.out.mkdir(parents=True, exist_ok=True)
        _echo_config(args.out, args.command, cfg)
        summary = COMMANDS[args.command](cfg, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IdentificationError as exc:
        print(f"identification failure ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_IDENT
    except (NumericError, EstimationError, FloatingPointError) as exc:
        print(f"estimation failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ParameterError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(to_jsonable(summary), sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
