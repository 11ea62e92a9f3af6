"""Shared types, priors, designs and the plug-in model interface."""

from __future__ import annotations

import abc
import hashlib
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

__all__ = [
    "BoxDomain",
    "ChainOutput",
    "ModelSpec",
    "as_param",
    "latin_hypercube",
    "log_sum_exp",
    "make_rng",
    "stage_seed",
    "uniform_box_log_prior",
]


def as_param(values: Any, dim: int | None = None) -> np.ndarray:
    """Validate and return a parameter vector as a 1-D float array."""
    theta = np.atleast_1d(np.asarray(values, dtype=float))
    if theta.ndim != 1 or theta.size < 1:
        raise ValueError("parameter vector must be 1-D and non-empty")
    if not np.all(np.isfinite(theta)):
        raise ValueError("parameter vector has non-finite entries")
    if dim is not None and theta.size != dim:
        raise ValueError(f"expected {dim} parameters, got {theta.size}")
    return theta


@dataclass(frozen=True)
class BoxDomain:
    """Axis-aligned rectangle ``[lower, upper]`` in parameter space."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lower and upper must be 1-D with equal length")
        if not np.all(lo < hi):
            raise ValueError("box requires lower < upper on every axis")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        # plain-float copies: membership is checked on every MCMC step
        object.__setattr__(self, "_bounds", tuple(zip(lo.tolist(), hi.tolist())))
        object.__setattr__(self, "log_volume", float(np.sum(np.log(hi - lo))))

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower

    def contains(self, theta) -> bool:
        vals = np.asarray(theta, dtype=float).ravel().tolist()
        if len(vals) != len(self._bounds):
            raise ValueError(f"expected a {len(self._bounds)}-dimensional point")
        return all(lo <= v <= hi for v, (lo, hi) in zip(vals, self._bounds))

    def intersect(self, other: "BoxDomain") -> "BoxDomain":
        return BoxDomain(np.maximum(self.lower, other.lower), np.minimum(self.upper, other.upper))

    def clip(self, theta) -> np.ndarray:
        return np.clip(theta, self.lower, self.upper)

    def to_dict(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}


def log_sum_exp(v) -> float:
    """Numerically stable ``log(sum(exp(v)))``."""
    v = np.asarray(v, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("empty vector")
    m = np.max(v)
    if not np.isfinite(m):
        # all -inf gives -inf; any +inf gives +inf
        return float(m)
    return float(m + np.log(np.sum(np.exp(v - m))))


def latin_hypercube(d: int, box: BoxDomain, rng: np.random.Generator) -> np.ndarray:
    """Latin hypercube design of ``d`` points in ``box``.

    Every axis is split into ``d`` equal strata and each stratum receives
    exactly one point. Returns an array of shape ``(d, p)``.
    """
    if d < 1:
        raise ValueError("latin_hypercube needs d >= 1")
    p = box.dim
    u = np.empty((d, p))
    for k in range(p):
        strata = rng.permutation(d)
        u[:, k] = (strata + rng.random(d)) / d
    pts = box.lower + u * box.widths
    # guard against round-off pushing a point onto the open upper edge
    return np.minimum(pts, box.upper)


def uniform_box_log_prior(theta, box: BoxDomain) -> float:
    """Log density of the uniform prior on ``box`` (``-inf`` outside)."""
    if not box.contains(theta):
        return -np.inf
    return -box.log_volume


def stage_seed(master: int, name: str) -> int:
    """Stable 63-bit seed derived from a master seed and a stage name."""
    digest = hashlib.sha256(f"{int(master)}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based (Philox) generator for stream ``(seed, *stream)``.

    Distinct stream ids give statistically independent generators, so
    per-worker streams do not depend on how work is scheduled.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class ChainOutput:
    samples: np.ndarray
    acc_count: int
    seed: int
    wall_time: float
    per_iter_time: np.ndarray | None = None
    names: Sequence[str] | None = None
    meta: dict = field(default_factory=dict)
    #: per-iteration flag, True where the proposal fell inside the prior and the target was evaluated
    evaluated: np.ndarray | None = None

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=float))
        if not 0 <= self.acc_count <= len(self.samples):
            raise ValueError("acc_count outside [0, n_iter]")

    @property
    def n_iter(self) -> int:
        return len(self.samples)

    @property
    def acceptance_rate(self) -> float:
        return self.acc_count / max(self.n_iter, 1)


class ModelSpec(abc.ABC):
    """Model with an unnormalised likelihood ``h(x | theta)``.

    Subclasses implement :meth:`log_h` and :meth:`_simulate`. Calls to
    :meth:`simulate` are counted in ``simulate_calls`` so samplers that
    claim not to simulate can be audited.
    """

    name = "model"
    param_names: Sequence[str] = ()

    def __init__(self):
        self.simulate_calls = 0

    @property
    def dim(self) -> int:
        return len(self.param_names)

    @abc.abstractmethod
    def log_h(self, data, theta) -> float:
        ...

    @abc.abstractmethod
    def _simulate(self, theta, cycles: int, rng: np.random.Generator, init=None):
        ...

    def simulate(self, theta, cycles: int, rng: np.random.Generator, init=None):
        """Approximate draw from ``h(.|theta)/Z(theta)`` after ``cycles`` sweeps."""
        self.simulate_calls += 1
        return self._simulate(theta, cycles, rng, init)

    def initial_state(self, theta, rng: np.random.Generator):
        """Starting state for an independent reference chain."""
        raise NotImplementedError

    def summary(self, data) -> np.ndarray:
        raise NotImplementedError(f"{self.name} has no summary statistics")

    def reduce(self, data):
        """Compact stand-in for ``data`` kept by importance-sampling ensembles."""
        return data

    def log_h_many(self, reduced: Sequence, theta) -> np.ndarray:
        """``log_h`` over a sequence of reduced draws."""
        return np.array([self.log_h(r, theta) for r in reduced])

    def default_theta_tilde(self, particles: np.ndarray, x_obs=None) -> np.ndarray:
        return np.mean(particles, axis=0)


LogPrior = Callable[[np.ndarray], float]
