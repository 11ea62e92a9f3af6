"""Attraction-repulsion pairwise-interaction point process.

The interaction function is zero inside the hard-core radius ``R``, rises
along a parabola to its peak ``theta1`` at distance ``theta2`` and then
decays towards one through an inverse-square tail. The parabola and the
tail are joined at ``D1`` with matching value and slope; ``D2`` is the
pole of the tail.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
from scipy.optimize import brentq

from .core import ModelSpec

CAP = 1.2
DEFAULT_R = 5.0

__all__ = [
    "CAP",
    "DEFAULT_R",
    "InteractionParams",
    "PointPattern",
    "PointProcessModel",
    "BreakpointError",
    "birth_death_step",
    "log_h_pp",
    "phi",
    "read_pattern_csv",
    "solve_breakpoints",
    "write_pattern_csv",
]


class BreakpointError(ValueError):
    pass


@dataclass(frozen=True)
class Window:
    xmin: float
    xmax: float
    ymin: float
    ymax: float

    def __post_init__(self):
        if not (self.xmin < self.xmax and self.ymin < self.ymax):
            raise ValueError("window must have positive width and height")

    @property
    def area(self) -> float:
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)

    def as_tuple(self):
        return (self.xmin, self.xmax, self.ymin, self.ymax)


class PointPattern:
    """Finite set of distinct points inside a rectangular window."""

    def __init__(self, points, window):
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        win = window if isinstance(window, Window) else Window(*window)
        if pts.size:
            inside = ((pts[:, 0] >= win.xmin) & (pts[:, 0] <= win.xmax)
                      & (pts[:, 1] >= win.ymin) & (pts[:, 1] <= win.ymax))
            if not inside.all():
                raise ValueError("points must lie inside the window")
            if len(np.unique(pts, axis=0)) != len(pts):
                raise ValueError("points must be distinct")
        self.points = pts
        self.window = win

    @property
    def n(self) -> int:
        return len(self.points)

    def __len__(self):
        return self.n

    def __repr__(self):
        return f"PointPattern(n={self.n}, window={self.window.as_tuple()})"


# ---------------------------------------------------------------------------
# interaction function

def _parabola(d, t1, t2, R):
    a2 = t1 / (t2 - R) ** 2
    return t1 - a2 * (d - t2) ** 2


def _tail(d, t3, d2):
    return 1.0 + 1.0 / (t3 * (d - d2)) ** 2


def _residual(D1, D2, t1, t2, t3, R):
    a2 = t1 / (t2 - R) ** 2
    u = D1 - D2
    f1 = t1 - a2 * (D1 - t2) ** 2 - 1.0 - 1.0 / (t3 * u) ** 2
    f2 = -2.0 * a2 * (D1 - t2) + 2.0 / (t3 ** 2 * u ** 3)
    return np.array([f1, f2])


def solve_breakpoints(theta1, theta2, theta3, R=DEFAULT_R, tol=1e-10):
    """Join point ``D1`` and tail pole ``D2`` of the interaction function.

    ``D1 > theta2`` is chosen so the parabola and the tail agree in value
    and first derivative at ``D1``. Eliminating ``D2`` leaves a monotone
    equation in ``s = D1 - theta2`` on ``(0, sqrt(K))`` which is bracketed
    and solved, then polished with damped Newton on the 2x2 system.
    """
    t1, t2, t3, R = float(theta1), float(theta2), float(theta3), float(R)
    if not (t1 > 1.0 and t2 > R and t3 > 0.0):
        raise BreakpointError("breakpoints unsolvable for parameters")
    a2 = t1 / (t2 - R) ** 2
    K = (t1 - 1.0) / a2
    root_k = math.sqrt(K)

    # log of a2 t3^2 (K - s^2)^3 / s^2, decreasing from +inf to -inf
    def g(s):
        return math.log(a2 * t3 * t3) + 3.0 * math.log(K - s * s) - 2.0 * math.log(s)

    lo, hi = root_k * 1e-12, root_k * (1.0 - 1e-15)
    if not (g(lo) > 0.0 > g(hi)):
        raise BreakpointError("breakpoints unsolvable for parameters")
    s = brentq(g, lo, hi, xtol=1e-15 * root_k, rtol=4 * np.finfo(float).eps, maxiter=500)
    u = (K - s * s) / s
    x = np.array([t2 + s, t2 + s - u])

    for _ in range(50):
        F = _residual(x[0], x[1], t1, t2, t3, R)
        scale = np.array([1.0, 1.0 / max(abs(x[0]), 1.0)])
        if np.max(np.abs(F) * scale) < tol and np.max(np.abs(F)) < tol:
            break
        D1, D2 = x
        u = D1 - D2
        Jm = np.array([
            [-2.0 * a2 * (D1 - t2) + 2.0 / (t3 ** 2 * u ** 3), -2.0 / (t3 ** 2 * u ** 3)],
            [-2.0 * a2 - 6.0 / (t3 ** 2 * u ** 4), 6.0 / (t3 ** 2 * u ** 4)],
        ])
        try:
            step = np.linalg.solve(Jm, -F)
        except np.linalg.LinAlgError:
            break
        lam = 1.0
        norm0 = np.linalg.norm(F)
        while lam > 1e-6:
            cand = x + lam * step
            if cand[0] > t2 and cand[0] > cand[1]:
                if np.linalg.norm(_residual(cand[0], cand[1], t1, t2, t3, R)) <= norm0:
                    x = cand
                    break
            lam *= 0.5
        else:
            break
    D1, D2 = float(x[0]), float(x[1])
    if not (D1 > t2) or np.max(np.abs(_residual(D1, D2, t1, t2, t3, R))) > 1e-8:
        raise BreakpointError("breakpoints unsolvable for parameters")
    return D1, D2


@dataclass(frozen=True)
class InteractionParams:
    """``(lambda, theta1, theta2, theta3)`` with hard core ``R``."""

    lam: float
    theta1: float
    theta2: float
    theta3: float
    R: float = DEFAULT_R
    D1: float = float("nan")
    D2: float = float("nan")

    @classmethod
    def from_theta(cls, theta, R=DEFAULT_R) -> "InteractionParams":
        lam, t1, t2, t3 = (float(v) for v in theta)
        if lam <= 0:
            raise ValueError("intensity must be positive")
        D1, D2 = solve_breakpoints(t1, t2, t3, R)
        return cls(lam, t1, t2, t3, float(R), D1, D2)

    def kernel_args(self):
        return (self.theta1, self.theta2, self.theta3, self.R, self.D1, self.D2)


@numba.njit(cache=True, nogil=True)
def _log_phi(d, t1, t2, t3, R, D1, D2):
    if d <= R:
        return -np.inf
    if d <= D1:
        z = math.sqrt(t1) / (t2 - R) * (d - t2)
        v = t1 - z * z
        if v <= 0.0:
            return -np.inf
        return math.log(v)
    z = t3 * (d - D2)
    return math.log1p(1.0 / (z * z))


def phi(D, params: InteractionParams):
    """Interaction function evaluated at distance(s) ``D``."""
    d = np.asarray(D, dtype=float)
    if np.any(d < 0):
        raise ValueError("distances must be non-negative")
    t1, t2, t3, R = params.theta1, params.theta2, params.theta3, params.R
    out = np.where(d <= R, 0.0,
                   np.where(d <= params.D1, _parabola(d, t1, t2, R),
                            _tail(np.maximum(d, params.D1), t3, params.D2)))
    return out if out.ndim else float(out)


@numba.njit(cache=True, nogil=True)
def _interaction_sums(pts, t1, t2, t3, R, D1, D2, interact):
    n = pts.shape[0]
    s = np.zeros(n)
    if not interact:
        return s, True
    for i in range(n):
        for j in range(i + 1, n):
            dx = pts[i, 0] - pts[j, 0]
            dy = pts[i, 1] - pts[j, 1]
            lp = _log_phi(math.sqrt(dx * dx + dy * dy), t1, t2, t3, R, D1, D2)
            if lp == -np.inf:
                return s, False
            s[i] += lp
            s[j] += lp
    return s, True


@numba.njit(cache=True, nogil=True)
def _log_h_kernel(pts, log_lam, t1, t2, t3, R, D1, D2, cap, interact):
    s, ok = _interaction_sums(pts, t1, t2, t3, R, D1, D2, interact)
    if not ok:
        return -np.inf
    total = pts.shape[0] * log_lam
    for i in range(pts.shape[0]):
        total += min(s[i], cap)
    return total


def log_h_pp(x: PointPattern, params: InteractionParams, cap: float = CAP,
             interact: bool = True) -> float:
    """Unnormalised log-likelihood with the per-point interaction cap."""
    if x.n == 0:
        return 0.0
    pts = np.ascontiguousarray(x.points)
    return float(_log_h_kernel(pts, math.log(params.lam), *params.kernel_args(), cap, interact))


# ---------------------------------------------------------------------------
# birth-death sampler

@numba.njit(cache=True, nogil=True)
def _birth_death(pts, n, s, log_lam, t1, t2, t3, R, D1, D2, cap, interact,
                 xmin, xmax, ymin, ymax, uniforms):
    """Run ``uniforms.shape[0]`` birth-death proposals in place.

    ``pts[:n]`` holds the pattern and ``s[:n]`` each point's summed log
    interaction. Arrays must have spare capacity; returns ``(n, ok)`` with
    ``ok`` False if capacity ran out.
    """
    area = (xmax - xmin) * (ymax - ymin)
    log_area = math.log(area)
    cap_n = pts.shape[0]
    lp = np.empty(cap_n)
    for t in range(uniforms.shape[0]):
        u0 = uniforms[t, 0]
        if u0 < 0.5:
            if n + 1 > cap_n:
                return n, False
            px = xmin + uniforms[t, 1] * (xmax - xmin)
            py = ymin + uniforms[t, 2] * (ymax - ymin)
            delta = log_lam
            own = 0.0
            dead = False
            if interact:
                for i in range(n):
                    dx = pts[i, 0] - px
                    dy = pts[i, 1] - py
                    v = _log_phi(math.sqrt(dx * dx + dy * dy), t1, t2, t3, R, D1, D2)
                    if v == -np.inf:
                        dead = True
                        break
                    lp[i] = v
                    own += v
            if dead:
                continue
            if interact:
                delta += min(own, cap)
                for i in range(n):
                    delta += min(s[i] + lp[i], cap) - min(s[i], cap)
            log_acc = log_area + delta - math.log(n + 1)
            if math.log(uniforms[t, 3]) < log_acc:
                if interact:
                    for i in range(n):
                        s[i] += lp[i]
                pts[n, 0] = px
                pts[n, 1] = py
                s[n] = own
                n += 1
        else:
            if n == 0:
                continue
            k = int(uniforms[t, 1] * n)
            if k >= n:
                k = n - 1
            delta = -log_lam
            if interact:
                delta -= min(s[k], cap)
                for i in range(n):
                    if i == k:
                        continue
                    dx = pts[i, 0] - pts[k, 0]
                    dy = pts[i, 1] - pts[k, 1]
                    v = _log_phi(math.sqrt(dx * dx + dy * dy), t1, t2, t3, R, D1, D2)
                    lp[i] = v
                    delta += min(s[i] - v, cap) - min(s[i], cap)
            log_acc = delta + math.log(n) - log_area
            if math.log(uniforms[t, 3]) < log_acc:
                if interact:
                    for i in range(n):
                        if i != k:
                            s[i] -= lp[i]
                # swap-remove keeps storage dense
                last = n - 1
                pts[k, 0] = pts[last, 0]
                pts[k, 1] = pts[last, 1]
                s[k] = s[last]
                n -= 1
    return n, True


def _run_birth_death(x: PointPattern, params: InteractionParams, n_steps: int, rng,
                     cap=CAP, interact=True) -> PointPattern:
    win = x.window
    pts = np.ascontiguousarray(x.points)
    s, ok = _interaction_sums(pts, *params.kernel_args(), interact)
    if not ok:
        raise ValueError("starting pattern violates the hard core")
    args = (math.log(params.lam), *params.kernel_args(), cap, interact,
            win.xmin, win.xmax, win.ymin, win.ymax)
    # every accepted birth adds one point, so this capacity always suffices
    capacity = x.n + n_steps + 1
    buf = np.zeros((capacity, 2))
    buf[: x.n] = pts
    sb = np.zeros(capacity)
    sb[: x.n] = s
    u = rng.random((n_steps, 4))
    n, _ = _birth_death(buf, x.n, sb, *args, u)
    out = PointPattern.__new__(PointPattern)
    out.points = buf[:n].copy()
    out.window = win
    return out


def birth_death_step(x: PointPattern, params: InteractionParams, rng, n_steps: int = 1,
                     cap: float = CAP, interact: bool = True) -> PointPattern:
    """Apply ``n_steps`` birth-or-death Metropolis-Hastings proposals.

    Births are uniform in the window and accepted with
    ``min(1, |S| h(x+xi) / ((n+1) h(x)))``; deaths pick a uniform point and
    are accepted with ``min(1, n h(x-eta) / (|S| h(x)))``. A death proposed
    on the empty pattern is rejected. ``interact=False`` gives a Poisson
    process with intensity ``lambda``.
    """
    return _run_birth_death(x, params, n_steps, rng, cap, interact)


def birth_log_ratio(x: PointPattern, xi, params: InteractionParams, cap=CAP) -> float:
    """Log Hastings ratio for adding ``xi`` to ``x``."""
    bigger = PointPattern(np.vstack([x.points, np.reshape(xi, (1, 2))]), x.window)
    return (math.log(x.window.area) + log_h_pp(bigger, params, cap)
            - math.log(x.n + 1) - log_h_pp(x, params, cap))


def death_log_ratio(x: PointPattern, k: int, params: InteractionParams, cap=CAP) -> float:
    """Log Hastings ratio for removing point ``k`` from ``x``."""
    smaller = PointPattern(np.delete(x.points, k, axis=0), x.window)
    return (math.log(x.n) + log_h_pp(smaller, params, cap)
            - math.log(x.window.area) - log_h_pp(x, params, cap))


# ---------------------------------------------------------------------------
# model

class PointProcessModel(ModelSpec):
    """``theta = (lambda, theta1, theta2, theta3)`` on a fixed window.

    One simulation cycle is ``steps_per_cycle`` birth-death proposals when
    given, otherwise the expected Poisson count ``lambda |S|`` (at least 1)
    at the parameter being simulated.
    """

    name = "pointproc"
    param_names = ("lambda", "theta1", "theta2", "theta3")

    def __init__(self, window, R: float = DEFAULT_R, cap: float = CAP,
                 steps_per_cycle: int | None = None):
        super().__init__()
        self.window = window if isinstance(window, Window) else Window(*window)
        self.R = float(R)
        self.cap = float(cap)
        self.steps_per_cycle = steps_per_cycle

    def params(self, theta) -> InteractionParams:
        return InteractionParams.from_theta(theta, self.R)

    def log_h(self, data, theta) -> float:
        try:
            prm = self.params(theta)
        except (BreakpointError, ValueError):
            return -np.inf
        return log_h_pp(data, prm, self.cap)

    def log_h_many(self, reduced, theta) -> np.ndarray:
        try:
            prm = self.params(theta)
        except (BreakpointError, ValueError):
            return np.full(len(reduced), -np.inf)
        args = (math.log(prm.lam), *prm.kernel_args(), self.cap, True)
        out = np.empty(len(reduced))
        for k, x in enumerate(reduced):
            out[k] = _log_h_kernel(x.points, *args) if x.n else 0.0
        return out

    def cycle_steps(self, theta) -> int:
        if self.steps_per_cycle is not None:
            return int(self.steps_per_cycle)
        return max(1, int(round(float(theta[0]) * self.window.area)))

    def initial_state(self, theta, rng):
        """Binomial pattern of ``round(lambda |S|)`` points, hard core respected."""
        target = max(1, int(round(float(theta[0]) * self.window.area)))
        w = self.window
        pts = []
        tries = 0
        while len(pts) < target and tries < 100 * target:
            tries += 1
            p = (w.xmin + rng.random() * (w.xmax - w.xmin), w.ymin + rng.random() * (w.ymax - w.ymin))
            if all((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 > self.R ** 2 for q in pts):
                pts.append(p)
        return PointPattern(np.array(pts).reshape(-1, 2), w)

    def _simulate(self, theta, cycles, rng, init=None):
        prm = self.params(theta)
        start = init if init is not None else self.initial_state(theta, rng)
        return _run_birth_death(start, prm, cycles * self.cycle_steps(theta), rng, self.cap)

    def summary(self, data) -> np.ndarray:
        return np.array([float(data.n)])


def read_pattern_csv(path, window) -> PointPattern:
    pts = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return PointPattern(pts.reshape(-1, 2), window)


def write_pattern_csv(x: PointPattern, path) -> None:
    np.savetxt(path, x.points, delimiter=",", header="x,y", comments="", fmt="%.10g")
