"""Importance-sampling estimates of log normalising-constant ratios.

A reference ensemble holds the final states of ``N`` independent chains
targeting ``h(.|theta_tilde)``. Each particle's estimate reuses the same
ensemble, so the table is a deterministic function of the master seed no
matter how the work is spread over workers.
"""

from __future__ import annotations

import json
import logging
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import ModelSpec, as_param, log_sum_exp, make_rng

log = logging.getLogger(__name__)

__all__ = [
    "ParticleTable",
    "ReferenceEnsemble",
    "TableError",
    "build_reference_ensemble",
    "is_log_lik",
    "is_log_z",
    "is_log_z_se",
    "precompute_table",
]


class TableError(RuntimeError):
    def __init__(self, message, rows=()):
        super().__init__(message)
        self.rows = list(rows)


@dataclass
class ReferenceEnsemble:
    model: ModelSpec
    theta_tilde: np.ndarray
    draws: list
    chain_cycles: int
    log_h_tilde: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.draws) < 1:
            raise ValueError("ensemble needs at least one draw")
        if self.log_h_tilde is None:
            self.log_h_tilde = self.model.log_h_many(self.draws, self.theta_tilde)

    @property
    def N(self) -> int:
        return len(self.draws)


def _map(fn, items, workers):
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def build_reference_ensemble(model: ModelSpec, theta_tilde, N: int, cycles: int,
                             seed: int, workers: int = 1,
                             mode: str = "independent") -> ReferenceEnsemble:
    """Simulate ``N`` draws from ``h(.|theta_tilde)``.

    ``mode="independent"`` runs one fresh chain per draw from the model's
    initial state; chain ``l`` uses RNG stream ``(seed, l)``.
    ``mode="thinned"`` takes every ``cycles``-th state of a single chain
    and is meant only for speed comparisons.
    """
    if N < 1 or cycles < 1:
        raise ValueError("N and cycles must be >= 1")
    theta_tilde = as_param(theta_tilde)

    if mode == "independent":
        def one(l):
            rng = make_rng(seed, l)
            x0 = model.initial_state(theta_tilde, rng)
            return model.reduce(model.simulate(theta_tilde, cycles, rng, init=x0))

        draws = _map(one, range(N), workers)
    elif mode == "thinned":
        rng = make_rng(seed, 0)
        x = model.initial_state(theta_tilde, rng)
        draws = []
        for _ in range(N):
            x = model.simulate(theta_tilde, cycles, rng, init=x)
            draws.append(model.reduce(x))
    else:
        raise ValueError(f"unknown ensemble mode {mode!r}")
    return ReferenceEnsemble(model, theta_tilde, draws, cycles)


def _log_ratios(theta, ens: ReferenceEnsemble) -> np.ndarray:
    return ens.model.log_h_many(ens.draws, theta) - ens.log_h_tilde


def is_log_z(theta, ens: ReferenceEnsemble) -> float:
    """``log( (1/N) sum_l h(x_l|theta) / h(x_l|theta_tilde) )``."""
    lr = _log_ratios(theta, ens)
    val = log_sum_exp(lr) - np.log(ens.N)
    if val == -np.inf:
        warnings.warn("all importance ratios are zero", RuntimeWarning, stacklevel=2)
    return val


def is_log_z_se(theta, ens: ReferenceEnsemble) -> tuple[float, float]:
    """Estimate and delta-method standard error of :func:`is_log_z`."""
    lr = _log_ratios(theta, ens)
    m = np.max(lr)
    w = np.exp(lr - m)
    mean = w.mean()
    se = w.std(ddof=1) / (np.sqrt(ens.N) * mean) if ens.N > 1 else np.inf
    return float(m + np.log(mean)), float(se)


def is_log_lik(theta, x_obs, ens: ReferenceEnsemble) -> float:
    """``log h(x_obs|theta) - log Z_IS(theta)`` (log-likelihood up to ``log Z(theta_tilde)``)."""
    lh = ens.model.log_h(x_obs, theta)
    if lh == -np.inf:
        return -np.inf
    return lh - is_log_z(theta, ens)


@dataclass
class ParticleTable:
    particles: np.ndarray
    values: np.ndarray
    kind: str  # "log_z_is", "log_lik_is" or "log_lik"
    theta_tilde: np.ndarray | None = None
    N: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.particles = np.atleast_2d(np.asarray(self.particles, dtype=float))
        self.values = np.asarray(self.values, dtype=float)
        if len(self.particles) != len(self.values):
            raise ValueError("one value per particle required")

    @property
    def d(self) -> int:
        return len(self.values)

    @property
    def p(self) -> int:
        return self.particles.shape[1]

    @property
    def mode(self) -> str:
        return "normem" if self.kind == "log_z_is" else "likem"

    def save(self, path) -> None:
        path = Path(path)
        header = ",".join([f"theta_{k + 1}" for k in range(self.p)] + [self.kind])
        rows = np.column_stack([self.particles, self.values])
        np.savetxt(path, rows, delimiter=",", header=header, comments="", fmt="%.17g")
        side = {
            "kind": self.kind,
            "mode": self.mode,
            "N": self.N,
            "d": self.d,
            "theta_tilde": None if self.theta_tilde is None else self.theta_tilde.tolist(),
            **self.meta,
        }
        path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ParticleTable":
        path = Path(path)
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        side = json.loads(path.with_suffix(".json").read_text())
        tt = side.pop("theta_tilde", None)
        kind = header[-1]
        side.pop("kind", None)
        side.pop("mode", None)
        side.pop("d", None)
        N = side.pop("N", 0)
        return cls(rows[:, :-1], rows[:, -1], kind,
                   None if tt is None else np.asarray(tt), N, side)


def precompute_table(model: ModelSpec, particles, theta_tilde, N: int, cycles: int,
                     mode: str, seed: int, x_obs=None, workers: int = 1,
                     ensemble_mode: str = "independent") -> ParticleTable:
    """Importance-sampling estimate at every particle.

    ``mode="normem"`` stores ``log Z_IS``; ``mode="likem"`` stores
    ``log L_IS`` and needs ``x_obs``. Any ``-inf`` entry aborts with a
    :class:`TableError` naming the offending rows.
    """
    particles = np.atleast_2d(np.asarray(particles, dtype=float))
    if len(particles) == 0:
        raise ValueError("no particles")
    if mode not in ("normem", "likem"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "likem" and x_obs is None:
        raise ValueError("likem tables need the observed data")
    t0 = time.perf_counter()
    ens = build_reference_ensemble(model, theta_tilde, N, cycles, seed, workers, ensemble_mode)
    t1 = time.perf_counter()

    if mode == "normem":
        def one(theta):
            return is_log_z(theta, ens)
    else:
        def one(theta):
            return is_log_lik(theta, x_obs, ens)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        values = np.array(_map(one, list(particles), workers))
    t2 = time.perf_counter()
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise TableError(f"non-finite estimates at particles {bad.tolist()}", bad)
    log.info("precompute: ensemble %.2fs, estimates %.2fs, workers=%d", t1 - t0, t2 - t1, workers)
    kind = "log_z_is" if mode == "normem" else "log_lik_is"
    meta = {"cycles": cycles, "seed": int(seed), "ensemble_mode": ensemble_mode,
            "timing": {"ensemble": t1 - t0, "estimates": t2 - t1}, "workers": workers}
    return ParticleTable(particles, values, kind, np.asarray(theta_tilde, float), N, meta)


def direct_table(log_lik, particles, workers: int = 1) -> ParticleTable:
    """Table of directly evaluated (expensive but tractable) log-likelihoods."""
    particles = np.atleast_2d(np.asarray(particles, dtype=float))
    values = np.array(_map(log_lik, list(particles), workers), dtype=float)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise TableError(f"non-finite log-likelihoods at particles {bad.tolist()}", bad)
    return ParticleTable(particles, values, "log_lik")
