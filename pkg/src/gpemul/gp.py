"""Matérn-3/2 Gaussian-process emulator with a linear trend.

The trend basis is ``[1, z]`` where ``z`` is the particle location after
per-coordinate standardisation; ``beta`` is estimated by generalised least
squares and profiled out of the likelihood, leaving the partial sill,
range and nugget to be found numerically.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize
from scipy.spatial.distance import cdist, pdist, squareform

from .core import BoxDomain, latin_hypercube, make_rng

SQRT3 = math.sqrt(3.0)
LOG2PI = math.log(2.0 * math.pi)

__all__ = [
    "GpEmulator",
    "GpHyper",
    "SingularCovarianceError",
    "blup_predict",
    "covariance_matrix",
    "fit_gp_mle",
    "gls_beta",
    "matern32",
    "profile_loglik",
]


class SingularCovarianceError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class GpHyper:
    sigma2: float
    phi: float
    tau2: float
    beta: np.ndarray | None = None

    def __post_init__(self):
        if not (self.sigma2 > 0 and self.phi > 0 and self.tau2 >= 0):
            raise ValueError("need sigma2 > 0, phi > 0, tau2 >= 0")


def _matern_from_dist(dist, sigma2, phi):
    r = SQRT3 * dist / phi
    return sigma2 * (1.0 + r) * np.exp(-r)


def matern32(a, b, hyper: GpHyper, same_index: bool = False) -> float:
    """Matérn-3/2 covariance between two locations.

    The nugget is added only when ``a`` and ``b`` are the same design
    index, not merely equal coordinates.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("dimension mismatch")
    k = float(_matern_from_dist(np.linalg.norm(a - b), hyper.sigma2, hyper.phi))
    return k + (hyper.tau2 if same_index else 0.0)


def covariance_matrix(X, sigma2, phi, tau2=0.0, dist=None) -> np.ndarray:
    """``C = K(X, X) + tau2 I``; symmetric by construction."""
    if dist is None:
        dist = squareform(pdist(np.atleast_2d(X)))
    C = _matern_from_dist(dist, sigma2, phi)
    C[np.diag_indices_from(C)] = sigma2 + tau2
    return C


def _cholesky(C, sigma2):
    """Lower Cholesky factor, adding escalating jitter on failure."""
    try:
        return np.linalg.cholesky(C), 0.0
    except np.linalg.LinAlgError:
        pass
    jitter = 1e-10 * sigma2
    while jitter <= 1e-6 * sigma2 * (1 + 1e-9):
        try:
            return np.linalg.cholesky(C + jitter * np.eye(len(C))), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise SingularCovarianceError("covariance numerically singular")


def gls_beta(F, C, y, chol=None) -> np.ndarray:
    """Generalised least-squares coefficients ``(F'C^-1F)^-1 F'C^-1 y``.

    Uses two triangular solves against the Cholesky factor of ``C``
    (computed here unless ``chol`` is supplied).
    """
    F = np.asarray(F, dtype=float)
    if F.ndim == 1:
        F = F[:, None]
    y = np.asarray(y, dtype=float)
    L = np.linalg.cholesky(C) if chol is None else chol
    G = solve_triangular(L, F, lower=True)
    u = solve_triangular(L, y, lower=True)
    if np.linalg.matrix_rank(G) < F.shape[1]:
        raise np.linalg.LinAlgError("design matrix rank deficient")
    beta, *_ = np.linalg.lstsq(G, u, rcond=None)
    return beta


def _trend(Z) -> np.ndarray:
    Z = np.atleast_2d(Z)
    return np.column_stack([np.ones(len(Z)), Z])


def profile_loglik(sigma2, phi, tau2, F, y, dist):
    """Gaussian log-likelihood with ``beta`` replaced by its GLS estimate.

    Returns ``(loglik, beta, L, jitter)``.
    """
    C = covariance_matrix(None, sigma2, phi, tau2, dist=dist)
    L, jitter = _cholesky(C, sigma2)
    beta = gls_beta(F, None, y, chol=L)
    r = solve_triangular(L, y - F @ beta, lower=True)
    ll = -0.5 * (r @ r) - np.sum(np.log(np.diag(L))) - 0.5 * len(y) * LOG2PI
    return float(ll), beta, L, jitter


class GpEmulator:
    """Fitted GP: kriging mean and mean-squared error at new locations."""

    def __init__(self, design, response, hyper: GpHyper, center=None, scale=None):
        self.design = np.atleast_2d(np.asarray(design, dtype=float))
        self.response = np.asarray(response, dtype=float)
        d, p = self.design.shape
        if len(self.response) != d:
            raise ValueError("one response per design point required")
        self.center = np.zeros(p) if center is None else np.asarray(center, dtype=float)
        self.scale = np.ones(p) if scale is None else np.asarray(scale, dtype=float)
        self.Z = (self.design - self.center) / self.scale
        self.F = _trend(self.Z)
        dist = squareform(pdist(self.Z))
        self.C = covariance_matrix(None, hyper.sigma2, hyper.phi, hyper.tau2, dist=dist)
        self.chol, self.jitter = _cholesky(self.C, hyper.sigma2)
        beta = gls_beta(self.F, None, self.response, chol=self.chol)
        self.hyper = GpHyper(hyper.sigma2, hyper.phi, hyper.tau2, beta)
        self.weights = cho_solve((self.chol, True), self.response - self.F @ beta)
        G = solve_triangular(self.chol, self.F, lower=True)
        self._G = G
        self._A_chol = np.linalg.cholesky(G.T @ G)
        self._c1 = SQRT3 / hyper.phi

    @property
    def p(self) -> int:
        return self.design.shape[1]

    def _z(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape[-1] != self.p:
            raise ValueError(f"expected {self.p}-dimensional input")
        return (theta - self.center) / self.scale

    def mean(self, theta) -> float:
        """Kriging mean at a single location (hot path for samplers)."""
        z = self._z(theta)
        diff = self.Z - z
        r = self._c1 * np.sqrt(np.einsum("ij,ij->i", diff, diff))
        c = self.hyper.sigma2 * (1.0 + r) * np.exp(-r)
        beta = self.hyper.beta
        return float(beta[0] + z @ beta[1:] + c @ self.weights)

    def mean_many(self, thetas) -> np.ndarray:
        Z = self._z(np.atleast_2d(thetas))
        c = _matern_from_dist(cdist(Z, self.Z), self.hyper.sigma2, self.hyper.phi)
        return _trend(Z) @ self.hyper.beta + c @ self.weights

    def predict(self, theta, noisy: bool = True):
        return blup_predict(self, theta, noisy)

    # -- persistence ------------------------------------------------------
    def to_dict(self) -> dict:
        h = self.hyper
        return {
            "design": self.design.tolist(),
            "response": self.response.tolist(),
            "hyper": {"sigma2": h.sigma2, "phi": h.phi, "tau2": h.tau2, "beta": h.beta.tolist()},
            "center": self.center.tolist(),
            "scale": self.scale.tolist(),
            "jitter": self.jitter,
            "chol_diag_logsum": float(np.sum(np.log(np.diag(self.chol)))),
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def from_dict(cls, obj) -> "GpEmulator":
        h = obj["hyper"]
        em = cls(obj["design"], obj["response"], GpHyper(h["sigma2"], h["phi"], h["tau2"]),
                 obj["center"], obj["scale"])
        stored = obj.get("chol_diag_logsum")
        if stored is not None:
            now = float(np.sum(np.log(np.diag(em.chol))))
            if abs(now - stored) > 1e-8 * max(1.0, abs(stored)):
                raise ValueError("emulator checksum mismatch after reloading")
        return em

    @classmethod
    def load(cls, path) -> "GpEmulator":
        return cls.from_dict(json.loads(Path(path).read_text()))


def blup_predict(em: GpEmulator, theta_star, noisy: bool = True):
    """Kriging mean and mean-squared error at ``theta_star``.

    With ``noisy=True`` the error is for a fresh noisy observation at
    ``theta_star`` (includes the nugget); ``noisy=False`` gives the error
    for the latent smooth surface. Slightly negative values from round-off
    are clamped to zero.
    """
    z = em._z(theta_star)
    if z.ndim != 1:
        raise ValueError("blup_predict takes a single location")
    h = em.hyper
    c = _matern_from_dist(np.linalg.norm(em.Z - z, axis=1), h.sigma2, h.phi)
    f = np.concatenate([[1.0], z])
    mean = float(f @ h.beta + c @ em.weights)
    v = solve_triangular(em.chol, c, lower=True)
    b = f - em._G.T @ v
    q = solve_triangular(em._A_chol, b, lower=True)
    mse = h.sigma2 + (h.tau2 if noisy else 0.0) - v @ v + q @ q
    if mse < 0:
        if mse < -1e-8:
            warnings.warn(f"negative kriging MSE {mse:.3g} clamped to 0", RuntimeWarning, stacklevel=2)
        mse = 0.0
    return mean, float(mse)


def fit_gp_mle(design, y, seed: int = 0, n_starts: int = 5, standardize: bool = True,
               maxfev: int = 600) -> GpEmulator:
    """Fit ``(sigma2, phi, tau2)`` by maximum profile likelihood.

    Nelder-Mead runs in log-parameter space from ``n_starts`` starting
    points laid out as a Latin hypercube. Bounds: ``phi`` within
    ``[1e-3, 1e3]`` times the median inter-particle distance, ``tau2``
    within ``[1e-8, 1] * var(y)``, ``sigma2`` within ``[1e-8, 1e4] * var(y)``.
    """
    X = np.atleast_2d(np.asarray(design, dtype=float))
    y = np.asarray(y, dtype=float)
    d, p = X.shape
    if d < p + 3:
        raise ValueError("need at least p + 3 design points")
    if standardize:
        center = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale == 0] = 1.0
    else:
        center, scale = np.zeros(p), np.ones(p)
    Z = (X - center) / scale
    F = _trend(Z)
    dvec = pdist(Z)
    if np.any(dvec == 0):
        raise ValueError("duplicate design points")
    dist = squareform(dvec)
    med = float(np.median(dvec))
    vy = float(np.var(y))
    if vy <= 0:
        vy = 1.0
    lo = np.log([1e-8 * vy, 1e-3 * med, 1e-8 * vy])
    hi = np.log([1e4 * vy, 1e3 * med, vy])

    def nll(x):
        s2, ph, t2 = np.exp(np.clip(x, lo, hi))
        try:
            ll = profile_loglik(s2, ph, t2, F, y, dist)[0]
        except np.linalg.LinAlgError:
            return 1e300
        return -ll if np.isfinite(ll) else 1e300

    # starts spread over a central region of the search box
    start_box = BoxDomain(np.log([1e-2 * vy, 0.1 * med, 1e-6 * vy]), np.log([2.0 * vy, 2.0 * med, 0.1 * vy]))
    starts = latin_hypercube(n_starts, start_box, make_rng(seed, 0xC0FFEE))
    opts = {"xatol": 1e-5, "fatol": 1e-7, "maxfev": maxfev}
    best = None
    for x0 in starts:
        res = minimize(nll, x0, method="Nelder-Mead", bounds=list(zip(lo, hi)), options=opts)
        if res.fun < 1e299 and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        raise SingularCovarianceError("covariance numerically singular")
    # one restart from the winner rebuilds a collapsed simplex
    res = minimize(nll, best.x, method="Nelder-Mead", bounds=list(zip(lo, hi)), options=opts)
    if res.fun <= best.fun:
        best = res
    s2, ph, t2 = np.exp(np.clip(best.x, lo, hi))
    return GpEmulator(X, y, GpHyper(float(s2), float(ph), float(t2)), center, scale)
