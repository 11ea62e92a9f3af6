"""Samplers: emulated Metropolis-Hastings (NormEm, LikEm), double MH, and
particle generation by a short DMH run or ABC rejection.

All samplers use a symmetric multivariate-normal random walk whose
covariance is re-estimated from the chain history up to ``adapt_until``
iterations and frozen afterwards.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .core import BoxDomain, ChainOutput, ModelSpec, latin_hypercube, make_rng
from .diagnostics import mcse_batch_means
from .gp import GpEmulator

log = logging.getLogger(__name__)

__all__ = [
    "AbcError",
    "ProposalState",
    "RunConfig",
    "StallError",
    "abc_particles",
    "adapt_proposal",
    "dmh_log_ratio",
    "dmh_particles",
    "dmh_step",
    "likem_log_ratio",
    "likem_step",
    "normem_log_ratio",
    "normem_step",
    "run_chain",
]

RIDGE = 1e-8


class StallError(RuntimeError):
    def __init__(self, message, partial):
        super().__init__(message)
        self.partial = partial


class AbcError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# proposal

@dataclass(frozen=True)
class ProposalState:
    """Random-walk proposal ``N(theta, scale * cov)``."""

    cov: np.ndarray
    scale: float | None = None
    adapt_until: int = 10_000

    def __post_init__(self):
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape[0] != cov.shape[1] or not np.allclose(cov, cov.T):
            raise ValueError("proposal covariance must be square and symmetric")
        np.linalg.cholesky(cov)
        object.__setattr__(self, "cov", cov)
        if self.scale is None:
            object.__setattr__(self, "scale", 2.38 ** 2 / cov.shape[0])

    @property
    def dim(self) -> int:
        return self.cov.shape[0]

    def chol(self) -> np.ndarray:
        return np.linalg.cholesky(self.scale * self.cov)

    def log_q(self, to, frm) -> float:
        """Log proposal density of ``to`` given ``frm`` (symmetric)."""
        L = self.chol()
        z = np.linalg.solve(L, np.asarray(to) - np.asarray(frm))
        return float(-0.5 * z @ z - np.sum(np.log(np.diag(L))) - 0.5 * self.dim * math.log(2 * math.pi))


def _history_cov(sample_cov: np.ndarray) -> np.ndarray | None:
    """Ridge-regularised covariance, or None if the history is degenerate."""
    p = len(sample_cov)
    tr = np.trace(sample_cov)
    if not tr > 0:
        return None
    # require genuine spread in every direction before trusting the estimate
    if np.linalg.eigvalsh(sample_cov)[0] <= 1e-10 * tr:
        return None
    return sample_cov + RIDGE * np.eye(p)


def adapt_proposal(state: ProposalState, history, it: int) -> ProposalState:
    """Re-estimate the proposal covariance from ``history`` while adapting.

    After ``state.adapt_until`` iterations the state is returned unchanged.
    A degenerate history keeps the previous covariance.
    """
    if it < 1:
        raise ValueError("iteration counter starts at 1")
    if it > state.adapt_until:
        return state
    h = np.atleast_2d(np.asarray(history, dtype=float))
    if len(h) < 2:
        return state
    cov = _history_cov(np.atleast_2d(np.cov(h, rowvar=False)))
    if cov is None:
        return state
    return replace(state, cov=cov, scale=2.38 ** 2 / h.shape[1])


class _RunningCov:
    """Welford accumulator equal to ``np.cov`` of everything pushed so far."""

    def __init__(self, p):
        self.n = 0
        self.mean = np.zeros(p)
        self.m2 = np.zeros((p, p))

    def push(self, x):
        self.n += 1
        delta = x - self.mean
        self.mean = self.mean + delta / self.n
        self.m2 += np.outer(delta, x - self.mean)

    def cov(self):
        return self.m2 / (self.n - 1)


# ---------------------------------------------------------------------------
# acceptance ratios

def _log_prior(theta, prior: BoxDomain, log_prior: Callable | None = None) -> float:
    if not prior.contains(theta):
        return -np.inf
    if log_prior is not None:
        return float(log_prior(theta))
    return -prior.log_volume


def normem_log_ratio(theta, theta_prop, emulator: GpEmulator, model: ModelSpec, x_obs,
                     prior: BoxDomain, log_prior=None) -> float:
    """Unclipped log MH ratio with ``log Z`` replaced by the kriging mean."""
    lp_new = _log_prior(theta_prop, prior, log_prior)
    lp_old = _log_prior(theta, prior, log_prior)
    if lp_new == -np.inf:
        return -np.inf
    return ((lp_new + model.log_h(x_obs, theta_prop) - emulator.mean(theta_prop))
            - (lp_old + model.log_h(x_obs, theta) - emulator.mean(theta)))


def likem_log_ratio(theta, theta_prop, emulator: GpEmulator, prior: BoxDomain,
                    log_prior=None) -> float:
    """Unclipped log MH ratio with the log-likelihood replaced by the kriging mean."""
    lp_new = _log_prior(theta_prop, prior, log_prior)
    lp_old = _log_prior(theta, prior, log_prior)
    if lp_new == -np.inf:
        return -np.inf
    return (lp_new + emulator.mean(theta_prop)) - (lp_old + emulator.mean(theta))


def dmh_log_ratio(theta, theta_prop, model: ModelSpec, x_obs, y, prior: BoxDomain,
                  log_prior=None) -> float:
    """Unclipped log DMH ratio for auxiliary data ``y`` simulated at ``theta_prop``."""
    lp_new = _log_prior(theta_prop, prior, log_prior)
    lp_old = _log_prior(theta, prior, log_prior)
    if lp_new == -np.inf:
        return -np.inf
    return (lp_new - lp_old
            + model.log_h(x_obs, theta_prop) - model.log_h(x_obs, theta)
            + model.log_h(y, theta) - model.log_h(y, theta_prop))


def _accept(log_ratio, rng) -> bool:
    return log_ratio >= 0 or math.log(rng.random()) < log_ratio


def _propose(theta, proposal: ProposalState, rng):
    return theta + proposal.chol() @ rng.standard_normal(len(theta))


def normem_step(theta, emulator, model, x_obs, prior, proposal, rng, log_prior=None):
    """One NormEm transition; returns ``(theta_next, accepted)``."""
    prop = _propose(theta, proposal, rng)
    if not prior.contains(prop):
        return theta, False
    if _accept(normem_log_ratio(theta, prop, emulator, model, x_obs, prior, log_prior), rng):
        return prop, True
    return theta, False


def likem_step(theta, emulator, prior, proposal, rng, log_prior=None):
    """One LikEm transition; ``h(x|theta)`` is never evaluated."""
    prop = _propose(theta, proposal, rng)
    if not prior.contains(prop):
        return theta, False
    if _accept(likem_log_ratio(theta, prop, emulator, prior, log_prior), rng):
        return prop, True
    return theta, False


def dmh_step(theta, model, x_obs, prior, proposal, inner_cycles, rng, log_prior=None):
    """One double Metropolis-Hastings transition.

    The auxiliary draw is ``inner_cycles`` sweeps of the model's own
    sampler at the proposed parameter, started from ``x_obs``.
    """
    if inner_cycles < 1:
        raise ValueError("inner_cycles must be >= 1")
    prop = _propose(theta, proposal, rng)
    if not prior.contains(prop):
        return theta, False
    y = model.simulate(prop, inner_cycles, rng, init=x_obs)
    if _accept(dmh_log_ratio(theta, prop, model, x_obs, y, prior, log_prior), rng):
        return prop, True
    return theta, False


# ---------------------------------------------------------------------------
# chain driver

@dataclass
class RunConfig:
    n_iter: int
    mode: str  # "normem" | "likem" | "dmh"
    inner_cycles: int = 1
    seed: int = 0
    adapt_until: int = 10_000
    adapt_start: int = 200
    mcse_threshold: float | None = None
    min_iter: int = 10_000
    check_every: int = 1_000

    def __post_init__(self):
        if self.n_iter < 1:
            raise ValueError("n_iter must be >= 1")
        if self.inner_cycles < 1:
            raise ValueError("inner_cycles must be >= 1")
        if self.mode not in ("normem", "likem", "dmh"):
            raise ValueError(f"unknown mode {self.mode!r}")


class _Target:
    """Cached log target for the emulated samplers."""

    def __init__(self, mode, emulator, model, x_obs, prior, log_prior):
        self.mode = mode
        self.em = emulator
        self.model = model
        self.x_obs = x_obs
        self.prior = prior
        self.log_prior = log_prior
        if mode == "normem":
            self.log_hx = model.log_h

    def __call__(self, theta):
        lp = _log_prior(theta, self.prior, self.log_prior)
        if lp == -np.inf:
            return -np.inf
        if self.mode == "likem":
            return lp + self.em.mean(theta)
        return lp + self.log_hx(self.x_obs, theta) - self.em.mean(theta)


def run_chain(config: RunConfig, prior: BoxDomain, proposal: ProposalState, theta0,
              model: ModelSpec | None = None, x_obs=None, emulator: GpEmulator | None = None,
              log_prior: Callable | None = None, names=None) -> ChainOutput:
    """Run one chain of ``config.mode`` and return every state visited.

    Emulated modes need ``emulator`` (fitted on ``log Z_IS`` for NormEm,
    on log-likelihood values for LikEm); NormEm and DMH also need
    ``model`` and ``x_obs``. With ``mcse_threshold`` set, the run stops
    early once every coordinate's batch-means MCSE is below it (checked
    after ``min_iter`` iterations); ``n_iter`` is then an upper bound.
    """
    mode = config.mode
    if mode in ("normem", "likem") and emulator is None:
        raise ValueError(f"{mode} needs a fitted emulator")
    if mode in ("normem", "dmh") and (model is None or x_obs is None):
        raise ValueError(f"{mode} needs the model and observed data")
    theta = np.asarray(theta0, dtype=float).copy()
    p = theta.size
    if proposal.dim != p:
        raise ValueError("proposal dimension does not match theta0")
    if not prior.contains(theta):
        raise ValueError("starting point lies outside the prior box")
    if emulator is not None and emulator.p != p:
        raise ValueError("emulator dimension does not match theta0")

    rng = make_rng(config.seed, 0)
    sim_before = model.simulate_calls if model is not None else 0
    state = replace(proposal, adapt_until=config.adapt_until)
    adapt_scale = 2.38 ** 2 / p
    adapted = None
    L = state.chol()
    running = _RunningCov(p)

    target = _Target(mode, emulator, model, x_obs, prior, log_prior) if mode != "dmh" else None
    cur = target(theta) if target is not None else None
    if mode == "dmh":
        log_hx_cur = model.log_h(x_obs, theta)
        lp_cur = _log_prior(theta, prior, log_prior)

    n_max = config.n_iter
    out = np.empty((n_max, p))
    per_iter = np.empty(n_max)
    evaluated = np.ones(n_max, dtype=bool)
    acc = 0
    outside = 0
    stop_reason = "n_iter"
    block = 1024
    t_start = time.perf_counter()
    it = 0
    while it < n_max:
        nb = min(block, n_max - it)
        Z = rng.standard_normal((nb, p))
        U = rng.random(nb)
        for b in range(nb):
            t0 = time.perf_counter()
            prop = theta + L @ Z[b]
            if not prior.contains(prop):
                outside += 1
                evaluated[it] = False
            elif mode == "dmh":
                y = model.simulate(prop, config.inner_cycles, rng, init=x_obs)
                lp_prop = _log_prior(prop, prior, log_prior)
                log_hx_prop = model.log_h(x_obs, prop)
                lr = (lp_prop - lp_cur + log_hx_prop - log_hx_cur
                      + model.log_h(y, theta) - model.log_h(y, prop))
                if lr >= 0 or math.log(U[b]) < lr:
                    theta, lp_cur, log_hx_cur = prop, lp_prop, log_hx_prop
                    acc += 1
            else:
                new = target(prop)
                lr = new - cur
                if lr >= 0 or math.log(U[b]) < lr:
                    theta, cur = prop, new
                    acc += 1
            out[it] = theta
            n_done = it + 1
            if n_done <= state.adapt_until:
                running.push(theta)
                if n_done >= config.adapt_start:
                    cov = _history_cov(running.cov())
                    if cov is not None:
                        # factor directly; a full ProposalState is built once at the end
                        adapted = cov
                        L = np.linalg.cholesky(adapt_scale * cov)
            per_iter[it] = time.perf_counter() - t0
            it += 1
            if (config.mcse_threshold is not None and it >= config.min_iter
                    and it % config.check_every == 0):
                mcse = [mcse_batch_means(out[:it, k]) for k in range(p)]
                if max(mcse) <= config.mcse_threshold:
                    stop_reason = "mcse"
                    break
        if stop_reason == "mcse":
            break
    wall = time.perf_counter() - t_start
    if adapted is not None:
        state = replace(state, cov=adapted, scale=adapt_scale)
    sims = (model.simulate_calls - sim_before) if model is not None else 0
    meta = {
        "mode": mode,
        "acceptance_rate": acc / it,
        "outside_prior": outside,
        "stop_reason": stop_reason,
        "simulate_calls": sims,
        "final_proposal_cov": state.cov.tolist(),
        "proposal_scale": state.scale,
    }
    return ChainOutput(out[:it].copy(), acc, config.seed, wall, per_iter[:it].copy(), names, meta,
                       evaluated[:it].copy())


# ---------------------------------------------------------------------------
# particle generation

def dmh_particles(model: ModelSpec, x_obs, prior: BoxDomain, proposal: ProposalState, d: int,
                  burnin: int, inner_cycles: int, seed: int, theta0, max_iter: int = 100_000,
                  adapt_until: int = 10_000, adapt_start: int = 200) -> np.ndarray:
    """First ``d`` distinct accepted DMH states after ``burnin`` iterations."""
    if d < 1:
        raise ValueError("d must be >= 1")
    rng = make_rng(seed, 0)
    theta = np.asarray(theta0, dtype=float).copy()
    p = theta.size
    state = replace(proposal, adapt_until=adapt_until)
    adapt_scale = 2.38 ** 2 / p
    L = state.chol()
    running = _RunningCov(p)
    lp_cur = _log_prior(theta, prior)
    if lp_cur == -np.inf:
        raise ValueError("starting point lies outside the prior box")
    log_hx_cur = model.log_h(x_obs, theta)
    found: list[np.ndarray] = []
    seen = set()
    for it in range(1, max_iter + 1):
        prop = theta + L @ rng.standard_normal(p)
        accepted = False
        if prior.contains(prop):
            y = model.simulate(prop, inner_cycles, rng, init=x_obs)
            lp_prop = _log_prior(prop, prior)
            log_hx_prop = model.log_h(x_obs, prop)
            lr = (lp_prop - lp_cur + log_hx_prop - log_hx_cur
                  + model.log_h(y, theta) - model.log_h(y, prop))
            if lr >= 0 or math.log(rng.random()) < lr:
                theta, lp_cur, log_hx_cur = prop, lp_prop, log_hx_prop
                accepted = True
        if it <= adapt_until:
            running.push(theta)
            if it >= adapt_start:
                cov = _history_cov(running.cov())
                if cov is not None:
                    L = np.linalg.cholesky(adapt_scale * cov)
        if it > burnin and accepted:
            key = theta.tobytes()
            if key not in seen:
                seen.add(key)
                found.append(theta.copy())
                if len(found) == d:
                    log.info("dmh_particles: %d particles after %d iterations", d, it)
                    return np.array(found)
    raise StallError(f"only {len(found)} of {d} particles after {max_iter} iterations",
                     np.array(found).reshape(-1, p))


def abc_particles(model: ModelSpec, x_obs, mple, se, D: int, quantile: float, d: int,
                  cycles: int, seed: int, prior: BoxDomain | None = None, scale=None,
                  workers: int = 1, return_details: bool = False):
    """ABC rejection search for an important region, then a fresh design in it.

    Starts from the box ``mple +- 10 se`` (clipped to ``prior``), simulates
    data at ``D`` Latin-hypercube points (``cycles`` sweeps from ``x_obs``,
    stream ``(seed, i)`` for point ``i``), keeps the points whose summary
    distance to ``x_obs`` is within the ``quantile`` empirical quantile,
    and lays ``d`` Latin-hypercube particles over their bounding box.
    ``scale`` divides each summary coordinate before taking distances.
    """
    mple = np.asarray(mple, dtype=float)
    se = np.asarray(se, dtype=float)
    if D < d:
        raise ValueError("D must be at least d")
    D1 = BoxDomain(mple - 10 * se, mple + 10 * se)
    if prior is not None:
        D1 = D1.intersect(prior)
    design = latin_hypercube(D, D1, make_rng(seed, 1 << 40))
    s_obs = np.asarray(model.summary(x_obs), dtype=float)
    sc = np.ones_like(s_obs) if scale is None else np.asarray(scale, dtype=float)

    def one(i):
        rng = make_rng(seed, i)
        y = model.simulate(design[i], cycles, rng, init=x_obs)
        return np.asarray(model.summary(y), dtype=float)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            sims = list(pool.map(one, range(D)))
    else:
        sims = [one(i) for i in range(D)]
    dist = np.linalg.norm((np.array(sims) - s_obs) / sc, axis=1)
    eps = np.quantile(dist, quantile)
    keep = dist <= eps
    p = len(mple)
    if keep.sum() < p + 3:
        raise AbcError("tolerance too tight")
    kept = design[keep]
    lo, hi = kept.min(axis=0), kept.max(axis=0)
    if prior is not None:
        lo, hi = np.maximum(lo, prior.lower), np.minimum(hi, prior.upper)
    D2 = BoxDomain(lo, hi)
    particles = latin_hypercube(d, D2, make_rng(seed, (1 << 40) + 1))
    if return_details:
        return particles, D2, {"D1": D1, "design": design, "distances": dist, "eps": eps, "keep": keep}
    return particles, D2
