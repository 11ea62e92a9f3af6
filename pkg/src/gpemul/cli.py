"""Command-line pipeline: simulate, particles, precompute, run, diagnose, bench.

Every command reads the same INI config file. Each stage writes into one
output directory and records its seed, inputs and timings in
``manifest.json`` there.

Exit codes: 0 success, 2 validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import importlib
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .core import BoxDomain, ChainOutput, ModelSpec, as_param, latin_hypercube, make_rng, stage_seed
from .diagnostics import format_table, kde_curve, summarize, write_summary_csv
from .ergm import ErgmModel, MpleError, mple, read_edges_csv, write_edges_csv
from .gp import GpEmulator, SingularCovarianceError, fit_gp_mle
from .isampling import ParticleTable, TableError, direct_table, precompute_table
from .mcmc import AbcError, ProposalState, RunConfig, StallError, abc_particles, dmh_particles, run_chain
from .pointproc import BreakpointError, InteractionParams, PointProcessModel, read_pattern_csv, write_pattern_csv

log = logging.getLogger("gpemul")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3

NUMERIC_ERRORS = (MpleError, BreakpointError, TableError, SingularCovarianceError, StallError,
                  AbcError, np.linalg.LinAlgError, FloatingPointError)


class ConfigError(ValueError):
    """Invalid or inconsistent configuration, or a missing upstream stage."""


# ---------------------------------------------------------------------------
# configuration

class Pipeline:
    """Parsed config plus the resolved model, paths and stage seeds."""

    def __init__(self, path, out=None, workers=None, stage_seed_override=None):
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        self.text = path.read_text()
        self.cfg = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        self.cfg.optionxform = str
        self.cfg.read_string(self.text)
        if "model" not in self.cfg:
            raise ConfigError("config needs a [model] section")
        self.base = path.parent
        self.seed = self.getint("general", "seed", 0)
        out_dir = out if out is not None else self.get("general", "out", "out")
        self.out = self._path(out_dir)
        self.workers = workers if workers is not None else self.getint("general", "workers", 1)
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        self.stage_seed_override = stage_seed_override
        self.model = self._build_model()
        self.kind = self.cfg["model"].get("kind")

    # -- raw access --------------------------------------------------------
    def get(self, section, key, default=None):
        if self.cfg.has_option(section, key):
            return self.cfg.get(section, key).strip()
        return default

    def require(self, section, key):
        val = self.get(section, key)
        if val is None or val == "":
            raise ConfigError(f"missing [{section}] {key}")
        return val

    def getint(self, section, key, default=None):
        val = self.get(section, key)
        if val is None:
            return default
        try:
            return int(val)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} must be an integer") from exc

    def getfloat(self, section, key, default=None):
        val = self.get(section, key)
        if val is None:
            return default
        try:
            return float(val)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} must be a number") from exc

    def getvec(self, section, key, default=None):
        val = self.get(section, key)
        if val is None or val == "":
            return default
        try:
            return np.array([float(t) for t in val.split(",")])
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} must be comma-separated numbers") from exc

    def positive(self, section, key, default=None):
        val = self.getint(section, key, default)
        if val is None or val < 1:
            raise ConfigError(f"[{section}] {key} must be a positive integer")
        return val

    def _path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base / p

    # -- derived -----------------------------------------------------------
    def stage_seed(self, name):
        if self.stage_seed_override is not None:
            return int(self.stage_seed_override)
        return stage_seed(self.seed, name)

    def _build_model(self) -> ModelSpec:
        kind = self.require("model", "kind")
        if kind == "ergm":
            return ErgmModel(self.positive("model", "n"), self.getfloat("model", "tau", 0.25))
        if kind == "pointproc":
            window = self.getvec("model", "window")
            if window is None or len(window) != 4:
                raise ConfigError("[model] window must be xmin,xmax,ymin,ymax")
            spc = self.getint("model", "steps_per_cycle")
            return PointProcessModel(tuple(window), self.getfloat("model", "R", 5.0),
                                     self.getfloat("model", "cap", 1.2), spc)
        if kind == "plugin":
            target = self.require("model", "factory")
            mod_name, _, attr = target.partition(":")
            if not attr:
                raise ConfigError("[model] factory must look like 'module:callable'")
            try:
                factory = getattr(importlib.import_module(mod_name), attr)
            except (ImportError, AttributeError) as exc:
                raise ConfigError(f"cannot load plugin factory {target!r}: {exc}") from exc
            model = factory(dict(self.cfg["model"]))
            if not isinstance(model, ModelSpec):
                raise ConfigError("plugin factory must return a ModelSpec")
            return model
        raise ConfigError(f"unknown model kind {kind!r}")

    @property
    def data_path(self) -> Path:
        given = self.get("model", "data")
        return self._path(given) if given else self.out / "data.csv"

    def load_data(self, required=True):
        path = self.data_path
        if not path.is_file():
            if self.kind == "plugin" and not hasattr(self.model, "read_data"):
                return None
            if not required:
                return None
            raise ConfigError(f"no data at {path}; run `gpemul simulate` first or set [model] data")
        if self.kind == "ergm":
            return read_edges_csv(path, self.model.n)
        if self.kind == "pointproc":
            return read_pattern_csv(path, self.model.window)
        return self.model.read_data(path)

    def write_data(self, x, path):
        if self.kind == "ergm":
            write_edges_csv(x, path)
        elif self.kind == "pointproc":
            write_pattern_csv(x, path)
        elif hasattr(self.model, "write_data"):
            self.model.write_data(x, path)
        else:
            raise ConfigError("plugin model has no write_data method")

    def prior(self, x_obs=None) -> BoxDomain:
        k = self.getfloat("prior", "mple_se")
        if k is not None:
            if self.kind != "ergm":
                raise ConfigError("[prior] mple_se is only available for ergm models")
            if x_obs is None:
                x_obs = self.load_data()
            b, se, _ = mple(x_obs, self.model.tau)
            return BoxDomain(b - k * se, b + k * se)
        lo, hi = self.getvec("prior", "lower"), self.getvec("prior", "upper")
        if lo is None or hi is None:
            raise ConfigError("[prior] needs lower and upper (or mple_se for ergm)")
        try:
            box = BoxDomain(lo, hi)
        except ValueError as exc:
            raise ConfigError(f"invalid prior box: {exc}") from exc
        if box.dim != self.model.dim:
            raise ConfigError(f"prior has {box.dim} dimensions, model has {self.model.dim}")
        return box

    def initial_cov(self, section, prior: BoxDomain, x_obs=None) -> np.ndarray:
        """Starting proposal covariance.

        Explicit ``proposal_sd`` wins; ERGMs fall back to the inverse
        pseudo-information at the MPLE; otherwise ``(width / 10)^2``.
        """
        sd = self.getvec(section, "proposal_sd")
        if sd is not None:
            if len(sd) != prior.dim or np.any(sd <= 0):
                raise ConfigError(f"[{section}] proposal_sd needs {prior.dim} positive entries")
            return np.diag(sd ** 2)
        if self.kind == "ergm" and x_obs is not None:
            try:
                return np.linalg.inv(mple(x_obs, self.model.tau)[2])
            except MpleError:
                pass
        return np.diag((prior.widths / 10.0) ** 2)

    def start(self, section, prior: BoxDomain) -> np.ndarray:
        theta0 = self.getvec(section, "start")
        if theta0 is None:
            return (prior.lower + prior.upper) / 2.0
        if not prior.contains(theta0):
            raise ConfigError(f"[{section}] start lies outside the prior box")
        return theta0

    def names(self):
        return list(getattr(self.model, "param_names", None) or
                    [f"theta_{k + 1}" for k in range(self.model.dim)])

    # -- manifest ----------------------------------------------------------
    def record(self, stage, info):
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / "manifest.json"
        man = json.loads(path.read_text()) if path.is_file() else {}
        man["config_hash"] = hashlib.sha256(self.text.encode()).hexdigest()
        man["versions"] = _versions()
        man.setdefault("stages", {})[stage] = info
        path.write_text(json.dumps(man, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def _versions():
    import numba
    import scipy
    return {"gpemul": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


def _write_matrix(path, rows, names):
    np.savetxt(path, np.atleast_2d(rows), delimiter=",", header=",".join(names),
               comments="", fmt="%.17g")


def _read_matrix(path):
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(pl: Pipeline) -> Path:
    """Simulate a synthetic dataset at ``[simulate] truth``."""
    truth = pl.getvec("simulate", "truth")
    if truth is None:
        raise ConfigError("missing [simulate] truth")
    try:
        truth = as_param(truth, pl.model.dim)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if pl.kind == "pointproc":
        try:
            InteractionParams.from_theta(truth, pl.model.R)
        except (BreakpointError, ValueError) as exc:
            raise ConfigError(f"invalid point-process truth: {exc}") from exc
    cycles = pl.positive("simulate", "cycles", 100)
    seed = pl.stage_seed("simulate")
    rng = make_rng(seed, 0)
    t0 = time.perf_counter()
    x = pl.model.simulate(truth, cycles, rng, init=pl.model.initial_state(truth, rng))
    elapsed = time.perf_counter() - t0
    pl.out.mkdir(parents=True, exist_ok=True)
    path = pl.out / "data.csv"
    pl.write_data(x, path)
    info = {"truth": truth, "cycles": cycles, "seed": seed, "path": path, "time": elapsed,
            "summary": np.asarray(pl.model.summary(x), dtype=float)}
    if pl.kind == "ergm":
        info["density"] = x.density()
    elif pl.kind == "pointproc":
        info["n_points"] = x.n
    pl.record("simulate", info)
    log.info("simulate: wrote %s", path)
    return path


def cmd_particles(pl: Pipeline) -> Path:
    """Choose particles by ``[particles] method`` = lhs, abc or dmh."""
    method = pl.get("particles", "method", "lhs")
    d = pl.positive("particles", "d", 100)
    seed = pl.stage_seed("particles")
    x_obs = pl.load_data(required=method != "lhs")
    prior = pl.prior(x_obs)
    t0 = time.perf_counter()
    info = {"method": method, "d": d, "seed": seed, "prior": prior.to_dict()}
    if method == "lhs":
        parts = latin_hypercube(d, prior, make_rng(seed, 0))
        domain = prior
    elif method == "abc":
        D = pl.positive("particles", "D", 3000)
        if D < d:
            raise ConfigError("[particles] D must be at least d")
        quantile = pl.getfloat("particles", "quantile", 0.03)
        if not 0 < quantile <= 1:
            raise ConfigError("[particles] quantile must be in (0, 1]")
        cycles = pl.positive("particles", "cycles", 10)
        center, se = pl.getvec("particles", "center"), pl.getvec("particles", "se")
        if center is None or se is None:
            if pl.kind != "ergm":
                raise ConfigError("abc particles need [particles] center and se for this model")
            center, se, _ = mple(x_obs, pl.model.tau)
        scale = pl.getvec("particles", "scale")
        parts, domain = abc_particles(pl.model, x_obs, center, se, D, quantile, d, cycles, seed,
                                      prior=prior, scale=scale, workers=pl.workers)
        info.update(D=D, quantile=quantile, cycles=cycles)
    elif method == "dmh":
        burnin = pl.getint("particles", "burnin", 1000)
        inner = pl.positive("particles", "inner_cycles", 1)
        cov = pl.initial_cov("particles", prior, x_obs)
        parts = dmh_particles(pl.model, x_obs, prior, ProposalState(cov), d, burnin, inner, seed,
                              pl.start("particles", prior))
        lo, hi = parts.min(axis=0), parts.max(axis=0)
        domain = BoxDomain(lo, np.where(hi > lo, hi, lo + 1e-12))
        info.update(burnin=burnin, inner_cycles=inner)
    else:
        raise ConfigError(f"unknown particle method {method!r}")
    info["time"] = time.perf_counter() - t0
    info["domain"] = domain.to_dict()
    pl.out.mkdir(parents=True, exist_ok=True)
    path = pl.out / "particles.csv"
    _write_matrix(path, parts, pl.names())
    path.with_suffix(".json").write_text(json.dumps(
        {"method": method, "d": d, "domain": domain.to_dict(), "prior": prior.to_dict()},
        indent=2, sort_keys=True, default=_jsonable) + "\n")
    pl.record("particles", info)
    return path


def _particles(pl: Pipeline):
    path = pl.out / "particles.csv"
    if not path.is_file():
        raise ConfigError(f"no particles at {path}; run `gpemul particles` first")
    parts = _read_matrix(path)
    if parts.shape[1] != pl.model.dim:
        raise ConfigError("particle file dimension does not match the model")
    return parts


def cmd_precompute(pl: Pipeline) -> Path:
    """Importance-sampling (or direct) estimates at every particle."""
    mode = pl.get("precompute", "mode", "normem")
    parts = _particles(pl)
    seed = pl.stage_seed("precompute")
    t0 = time.perf_counter()
    if mode == "direct":
        log_lik = getattr(pl.model, "log_lik", None)
        if log_lik is None:
            raise ConfigError("mode=direct needs a model with a log_lik(theta) method")
        table = direct_table(log_lik, parts, pl.workers)
    elif mode in ("normem", "likem"):
        N = pl.positive("precompute", "N", 1000)
        cycles = pl.positive("precompute", "cycles", 10)
        x_obs = pl.load_data(required=True)
        tt = pl.getvec("precompute", "theta_tilde")
        if tt is None:
            tt = pl.model.default_theta_tilde(parts, x_obs)
        table = precompute_table(pl.model, parts, tt, N, cycles, mode, seed, x_obs=x_obs,
                                 workers=pl.workers,
                                 ensemble_mode=pl.get("precompute", "ensemble", "independent"))
    else:
        raise ConfigError(f"unknown precompute mode {mode!r}")
    elapsed = time.perf_counter() - t0
    path = pl.out / "table.csv"
    table.meta.pop("timing", None)
    table.meta.pop("workers", None)
    table.save(path)
    pl.record("precompute", {"mode": mode, "seed": seed, "d": table.d, "N": table.N,
                             "kind": table.kind, "time": elapsed, "workers": pl.workers})
    log.info("precompute: %d estimates in %.2fs with %d workers", table.d, elapsed, pl.workers)
    return path


def _table_for(pl: Pipeline, mode: str) -> ParticleTable:
    path = pl.out / "table.csv"
    if not path.is_file() or not path.with_suffix(".json").is_file():
        raise ConfigError(f"{mode} needs a particle table at {path}; "
                          "run `gpemul particles` and `gpemul precompute` first")
    table = ParticleTable.load(path)
    if table.mode != mode:
        raise ConfigError(f"table at {path} holds {table.kind} values, which suit {table.mode}, "
                          f"not {mode}; rerun precompute with mode={mode}")
    return table


def cmd_run(pl: Pipeline) -> Path:
    """Fit the emulator if needed, then run one chain."""
    mode = pl.get("run", "mode", "normem")
    if mode not in ("normem", "likem", "dmh"):
        raise ConfigError(f"unknown run mode {mode!r}")
    n_iter = pl.positive("run", "n_iter", 25_000)
    inner = pl.positive("run", "inner_cycles", 1)
    table = _table_for(pl, mode) if mode != "dmh" else None
    x_obs = pl.load_data(required=mode != "likem")
    prior = pl.prior(x_obs)
    seed = pl.stage_seed(f"run:{mode}")
    emulator = None
    fit_time = 0.0
    if table is not None:
        if table.p != pl.model.dim:
            raise ConfigError("particle table dimension does not match the model")
        t0 = time.perf_counter()
        emulator = fit_gp_mle(table.particles, table.values, seed=stage_seed(seed, "gp"))
        fit_time = time.perf_counter() - t0
        emulator.save(pl.out / f"emulator_{mode}.json")
    config = RunConfig(n_iter=n_iter, mode=mode, inner_cycles=inner, seed=seed,
                       adapt_until=pl.getint("run", "adapt_until", 10_000),
                       adapt_start=pl.getint("run", "adapt_start", 200),
                       mcse_threshold=pl.getfloat("run", "mcse_threshold"),
                       min_iter=pl.getint("run", "min_iter", 10_000))
    proposal = ProposalState(pl.initial_cov("run", prior, x_obs))
    chain = run_chain(config, prior, proposal, pl.start("run", prior), model=pl.model,
                      x_obs=x_obs, emulator=emulator, names=pl.names())
    path = pl.out / f"chain_{mode}.csv"
    _write_matrix(path, chain.samples, pl.names())
    rows = summarize(chain, names=pl.names())
    write_summary_csv(rows, pl.out / f"summary_{mode}.csv")
    manifest = {
        "config": {k: v for k, v in vars(config).items()},
        "seed": seed,
        "acceptance_rate": chain.acceptance_rate,
        "n_iter": chain.n_iter,
        "timings": {"gp_fit": fit_time, "chain": chain.wall_time,
                    "per_iter_median": float(np.median(chain.per_iter_time))},
        "meta": chain.meta,
    }
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True,
                                                    default=_jsonable) + "\n")
    pl.record(f"run:{mode}", manifest)
    print(format_table(rows, title=f"{mode} ({chain.n_iter} iterations)"))
    return path


def cmd_diagnose(pl: Pipeline) -> list[Path]:
    """Summaries (and optional KDE curves) for every chain in the output directory."""
    listed = pl.get("diagnose", "chains")
    if listed:
        paths = [pl._path(p.strip()) for p in listed.split(",")]
    else:
        paths = sorted(pl.out.glob("chain_*.csv"))
    if not paths:
        raise ConfigError(f"no chains found in {pl.out}; run `gpemul run` first")
    gold = None
    gold_path = pl.get("diagnose", "gold")
    if gold_path:
        gp_ = pl._path(gold_path)
        if not gp_.is_file():
            raise ConfigError(f"gold chain {gp_} not found")
        gold = ChainOutput(_read_matrix(gp_), 0, 0, 0.0)
    kde = pl.get("diagnose", "kde", "false").lower() in ("1", "true", "yes")
    written = []
    for path in paths:
        if not path.is_file():
            raise ConfigError(f"chain {path} not found")
        samples = _read_matrix(path)
        side = path.with_suffix(".json")
        meta = json.loads(side.read_text()) if side.is_file() else {}
        wall = meta.get("timings", {}).get("chain", 0.0)
        acc = int(round(meta.get("acceptance_rate", 0.0) * len(samples)))
        chain = ChainOutput(samples, acc, meta.get("seed", 0), wall)
        names = path.read_text().split("\n", 1)[0].split(",")
        rows = summarize(chain, gold, names)
        stem = path.stem.replace("chain_", "")
        out = pl.out / f"diagnose_{stem}.csv"
        write_summary_csv(rows, out)
        written.append(out)
        if kde:
            for k, name in enumerate(names):
                grid, dens = kde_curve(samples[:, k])
                _write_matrix(pl.out / f"kde_{stem}_{name}.csv", np.column_stack([grid, dens]),
                              ["x", "density"])
        print(format_table(rows, title=f"{path.name}"))
    pl.record("diagnose", {"chains": paths, "gold": gold_path, "outputs": written})
    return written


def cmd_bench(pl: Pipeline) -> Path:
    """Per-iteration cost of each sampler across ERGM sizes.

    For each size a network is simulated at its truth, particles are laid
    over ``MPLE +- 5 se`` and small tables are built so every sampler runs
    on a realistic emulator. Each chain is timed ``[bench] repeats`` times;
    ``per_iter_median`` is the smallest per-run median over iterations that
    evaluated the target (proposals inside the prior). Writes ``bench.csv``
    and ``bench_slopes.csv``.
    """
    if pl.kind != "ergm":
        raise ConfigError("bench is defined for ergm models")
    sizes = [int(v) for v in pl.getvec("bench", "sizes", np.array([200, 283, 400]))]
    truths_raw = pl.get("bench", "truths", "-6.0,2.0")
    truths = [np.array([float(t) for t in part.split(",")]) for part in truths_raw.split(";")]
    if len(truths) == 1:
        truths = truths * len(sizes)
    if len(truths) != len(sizes):
        raise ConfigError("[bench] truths must give one vector or one per size")
    modes = [m.strip() for m in pl.get("bench", "modes", "normem,likem,dmh").split(",")]
    d = pl.positive("bench", "d", 100)
    N = pl.positive("bench", "N", 50)
    cycles = pl.positive("bench", "cycles", 10)
    iters = {"dmh": pl.positive("bench", "n_iter_dmh", 200),
             "normem": pl.positive("bench", "n_iter_emulated", 5000),
             "likem": pl.positive("bench", "n_iter_emulated", 5000)}
    repeats = pl.positive("bench", "repeats", 5)
    tau = pl.model.tau
    seed = pl.stage_seed("bench")
    setups = []
    for idx, (n, truth) in enumerate(zip(sizes, truths)):
        model = ErgmModel(n, tau)
        x = model.simulate(truth, 100, make_rng(seed, idx, 0))
        b, se, info = mple(x, tau)
        prior = BoxDomain(b - 5 * se, b + 5 * se)
        parts = latin_hypercube(d, prior, make_rng(seed, idx, 1))
        emulators = {}
        for mode in modes:
            if mode in ("normem", "likem"):
                table = precompute_table(model, parts, b, N, cycles, mode, stage_seed(seed, f"{n}:{mode}"),
                                         x_obs=x, workers=pl.workers)
                emulators[mode] = fit_gp_mle(table.particles, table.values, seed=0)
            elif mode == "dmh":
                emulators[mode] = None
            else:
                raise ConfigError(f"unknown bench mode {mode!r}")
        setups.append((n, model, x, prior, b, ProposalState(np.linalg.inv(info)), emulators))
    # timing runs are interleaved across sizes so slow drift in machine load
    # does not land on a single size; the minimum median over repeats is kept
    medians, means = {}, {}
    for r in range(repeats):
        for n, model, x, prior, b, proposal, emulators in setups:
            for mode in modes:
                cfg = RunConfig(iters[mode], mode, seed=stage_seed(seed, f"{n}:{mode}:run:{r}"))
                chain = run_chain(cfg, prior, proposal, b, model=model, x_obs=x, emulator=emulators[mode])
                # out-of-prior proposals skip the target entirely; timing them
                # would mix two cost regimes in one median
                medians.setdefault((mode, n), []).append(
                    float(np.median(chain.per_iter_time[chain.evaluated])))
                means.setdefault((mode, n), []).append(chain.wall_time / chain.n_iter)
    rows = []
    for n, *_ in setups:
        for mode in modes:
            rows.append((mode, n, min(medians[mode, n]), float(np.mean(means[mode, n])), iters[mode]))
            log.info("bench %s n=%d: %.3g s/iter", mode, n, rows[-1][2])
    pl.out.mkdir(parents=True, exist_ok=True)
    path = pl.out / "bench.csv"
    with open(path, "w") as fh:
        fh.write("algorithm,n,per_iter_median,per_iter_mean,n_iter\n")
        for r in rows:
            fh.write(f"{r[0]},{r[1]},{r[2]:.6g},{r[3]:.6g},{r[4]}\n")
    slopes = bench_slopes(rows)
    with open(pl.out / "bench_slopes.csv", "w") as fh:
        fh.write("algorithm,slope\n")
        for mode, s in slopes.items():
            fh.write(f"{mode},{'' if s is None else f'{s:.4f}'}\n")
    pl.record("bench", {"sizes": sizes, "seed": seed, "repeats": repeats, "slopes": slopes})
    for mode, s in slopes.items():
        print(f"{mode}: slope {'n/a' if s is None else f'{s:.3f}'}")
    return path


def bench_slopes(rows) -> dict:
    """Log-log slope of median per-iteration time against n, per algorithm."""
    out = {}
    for mode in dict.fromkeys(r[0] for r in rows):
        pts = [(r[1], r[2]) for r in rows if r[0] == mode]
        if len({n for n, _ in pts}) < 2:
            out[mode] = None
            continue
        n, t = np.array(pts, dtype=float).T
        out[mode] = float(np.polyfit(np.log(n), np.log(t), 1)[0])
    return out


COMMANDS = {
    "simulate": cmd_simulate,
    "particles": cmd_particles,
    "precompute": cmd_precompute,
    "run": cmd_run,
    "diagnose": cmd_diagnose,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gpemul", description=__doc__.split("\n\n")[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="INI config file")
    p.add_argument("--stage-seed", type=int, default=None, help="override the derived stage seed")
    p.add_argument("--workers", type=int, default=None, help="parallel workers for precompute/ABC")
    p.add_argument("--out", default=None, help="output directory (overrides [general] out)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        pl = Pipeline(args.config, args.out, args.workers, args.stage_seed)
        COMMANDS[args.command](pl)
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, configparser.Error, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
