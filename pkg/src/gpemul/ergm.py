"""Undirected ERGM with edge and GWESP terms.

Graphs are held as dense ``uint8`` adjacency matrices together with the
matrix of shared-partner counts, which lets a Gibbs update evaluate the
GWESP change statistic in O(n) and keep the counts current in O(n).
"""

from __future__ import annotations

import functools
import itertools
import math
from pathlib import Path

import numba
import numpy as np
from scipy.special import expit

from .core import ModelSpec, as_param, log_sum_exp

DEFAULT_TAU = 0.25

__all__ = [
    "DEFAULT_TAU",
    "ErgmModel",
    "MpleError",
    "UndirectedGraph",
    "all_graph_stats",
    "change_stats",
    "enumerate_graphs",
    "esp_counts",
    "exact_logZ_bruteforce",
    "gibbs_cycle",
    "graph_stats",
    "mple",
    "read_edgelist",
    "read_edges_csv",
    "read_matrix_csv",
    "stat_edges",
    "stat_gwesp",
    "write_edgelist",
    "write_edges_csv",
    "write_matrix_csv",
]


class MpleError(ValueError):
    pass


class UndirectedGraph:
    """Simple undirected graph on ``n`` nodes."""

    def __init__(self, adj):
        adj = np.array(adj, dtype=np.uint8, copy=True)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise ValueError("adjacency must be square")
        if np.any(np.diag(adj)):
            raise ValueError("adjacency must have a zero diagonal")
        if not np.array_equal(adj, adj.T):
            raise ValueError("adjacency must be symmetric")
        if np.any(adj > 1):
            raise ValueError("adjacency must be 0/1")
        self.adj = adj
        self._sp = None

    @classmethod
    def empty(cls, n: int) -> "UndirectedGraph":
        return cls(np.zeros((n, n), dtype=np.uint8))

    @classmethod
    def from_edges(cls, n: int, edges) -> "UndirectedGraph":
        adj = np.zeros((n, n), dtype=np.uint8)
        for i, j in edges:
            if i == j:
                raise ValueError("self loops are not allowed")
            adj[i, j] = adj[j, i] = 1
        return cls(adj)

    @property
    def n(self) -> int:
        return self.adj.shape[0]

    @property
    def shared_partners(self) -> np.ndarray:
        """``SP[i, j]`` = number of common neighbours of ``i`` and ``j``."""
        if self._sp is None:
            a = self.adj.astype(np.int32)
            sp = a @ a
            np.fill_diagonal(sp, 0)
            self._sp = sp
        return self._sp

    def edges(self) -> np.ndarray:
        i, j = np.nonzero(np.triu(self.adj, 1))
        return np.column_stack([i, j])

    def density(self) -> float:
        n = self.n
        return stat_edges(self) / (n * (n - 1) / 2) if n > 1 else 0.0

    def copy(self) -> "UndirectedGraph":
        g = UndirectedGraph.__new__(UndirectedGraph)
        g.adj = self.adj.copy()
        g._sp = None if self._sp is None else self._sp.copy()
        return g

    def __eq__(self, other):
        return isinstance(other, UndirectedGraph) and np.array_equal(self.adj, other.adj)

    def __repr__(self):
        return f"UndirectedGraph(n={self.n}, edges={stat_edges(self)})"


def stat_edges(g: UndirectedGraph) -> int:
    return int(np.triu(g.adj, 1).sum())


def esp_counts(g: UndirectedGraph) -> np.ndarray:
    """``ESP_k`` for ``k = 1..n-2``; entry ``k-1`` holds ``ESP_k``."""
    n = g.n
    if n < 3:
        return np.zeros(max(n - 2, 0), dtype=np.int64)
    sp = g.shared_partners[np.triu(g.adj, 1).astype(bool)]
    counts = np.bincount(sp, minlength=n - 1)
    return counts[1 : n - 1].astype(np.int64)


def _gwesp_weights(n: int, tau: float) -> np.ndarray:
    k = np.arange(1, max(n - 1, 1))
    return math.exp(tau) * (1.0 - (1.0 - math.exp(-tau)) ** k)


def stat_gwesp(g: UndirectedGraph, tau: float = DEFAULT_TAU) -> float:
    if tau <= 0:
        raise ValueError("tau must be positive")
    esp = esp_counts(g)
    if esp.size == 0:
        return 0.0
    return float(np.dot(_gwesp_weights(g.n, tau)[: esp.size], esp))


def graph_stats(g: UndirectedGraph, tau: float = DEFAULT_TAU) -> np.ndarray:
    return np.array([stat_edges(g), stat_gwesp(g, tau)], dtype=float)


# ---------------------------------------------------------------------------
# compiled kernels

@numba.njit(cache=True, nogil=True)
def _dyad_delta(A, SP, i, j, rpow, etau):
    """GWESP change statistic for dyad (i, j) given the rest of the graph."""
    n = A.shape[0]
    xij = A[i, j]
    common = 0
    acc = 0.0
    for k in range(n):
        if A[i, k] and A[j, k]:
            common += 1
            acc += rpow[SP[i, k] - xij] + rpow[SP[j, k] - xij]
    return etau * (1.0 - rpow[common]) + acc


@numba.njit(cache=True, nogil=True)
def _toggle(A, SP, i, j, sign):
    n = A.shape[0]
    for k in range(n):
        if k != i and A[j, k]:
            SP[i, k] += sign
            SP[k, i] += sign
        if k != j and A[i, k]:
            SP[j, k] += sign
            SP[k, j] += sign
    v = 1 if sign > 0 else 0
    A[i, j] = v
    A[j, i] = v


@numba.njit(cache=True, nogil=True)
def _gibbs_sweeps(A, SP, I, J, theta1, theta2, rpow, etau, uniforms):
    """Run ``uniforms.shape[0]`` random-permutation Gibbs sweeps in place."""
    m = I.shape[0]
    order = np.empty(m, dtype=np.int64)
    for c in range(uniforms.shape[0]):
        for k in range(m):
            order[k] = k
        # Fisher-Yates on the first m uniforms of this sweep
        for k in range(m - 1, 0, -1):
            s = int(uniforms[c, k] * (k + 1))
            if s > k:
                s = k
            t = order[k]
            order[k] = order[s]
            order[s] = t
        for k in range(m):
            e = order[k]
            i = I[e]
            j = J[e]
            d2 = _dyad_delta(A, SP, i, j, rpow, etau)
            eta = theta1 + theta2 * d2
            p = 1.0 / (1.0 + math.exp(-eta))
            new = 1 if uniforms[c, m + k] < p else 0
            if new != A[i, j]:
                _toggle(A, SP, i, j, 1 if new else -1)


@numba.njit(cache=True, nogil=True)
def _stats_from_sp(A, SP, w):
    n = A.shape[0]
    s1 = 0.0
    s2 = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            if A[i, j]:
                s1 += 1.0
                s2 += w[SP[i, j]]
    return s1, s2


@numba.njit(cache=True, nogil=True)
def _all_change_stats(A, SP, I, J, rpow, etau):
    m = I.shape[0]
    out = np.empty(m)
    for e in range(m):
        out[e] = _dyad_delta(A, SP, I[e], J[e], rpow, etau)
    return out


@functools.lru_cache(maxsize=32)
def _dyads(n: int):
    i, j = np.triu_indices(n, 1)
    return i.astype(np.int64), j.astype(np.int64)


@functools.lru_cache(maxsize=64)
def _tables(n: int, tau: float):
    r = 1.0 - math.exp(-tau)
    rpow = r ** np.arange(n + 1, dtype=float)
    # weight of an edge with s shared partners; w[0] = 0
    w = math.exp(tau) * (1.0 - rpow)
    return rpow, w, math.exp(tau)


def change_stats(g: UndirectedGraph, i: int, j: int, tau: float = DEFAULT_TAU):
    """``(S(g with x_ij=1) - S(g with x_ij=0))`` as ``(d_s1, d_s2)``."""
    if i == j:
        raise ValueError("change statistics need i != j")
    rpow, _, etau = _tables(g.n, float(tau))
    return 1.0, float(_dyad_delta(g.adj, g.shared_partners, i, j, rpow, etau))


def gibbs_cycle(g: UndirectedGraph, theta, tau: float = DEFAULT_TAU, rng=None,
                cycles: int = 1) -> UndirectedGraph:
    """Return a new graph after ``cycles`` Gibbs sweeps, each over a fresh random permutation of dyads."""
    theta = as_param(theta, 2)
    if rng is None:
        rng = np.random.default_rng()
    out = g.copy()
    I, J = _dyads(g.n)
    m = I.size
    if m == 0:
        return out
    rpow, _, etau = _tables(g.n, float(tau))
    sp = out.shared_partners.copy()
    u = rng.random((cycles, 2 * m))
    _gibbs_sweeps(out.adj, sp, I, J, theta[0], theta[1], rpow, etau, u)
    out._sp = sp
    return out


def _dyad_design(g: UndirectedGraph, tau: float):
    I, J = _dyads(g.n)
    rpow, _, etau = _tables(g.n, float(tau))
    d2 = _all_change_stats(g.adj, g.shared_partners, I, J, rpow, etau)
    X = np.column_stack([np.ones(I.size), d2])
    y = g.adj[I, J].astype(float)
    return X, y


def _logistic_newton(X, y, tol=1e-8, max_iter=200):
    beta = np.zeros(X.shape[1])
    for _ in range(max_iter):
        eta = X @ beta
        p = expit(eta)
        grad = X.T @ (y - p)
        if np.linalg.norm(grad) < tol:
            break
        W = p * (1.0 - p)
        H = (X * W[:, None]).T @ X
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError as exc:
            raise MpleError("MPLE does not exist") from exc
        # halve the step until the log pseudo-likelihood does not decrease
        ll = np.sum(y * eta - np.logaddexp(0.0, eta))
        t = 1.0
        while t > 1e-10:
            eta_new = X @ (beta + t * step)
            if np.sum(y * eta_new - np.logaddexp(0.0, eta_new)) >= ll - 1e-12:
                break
            t *= 0.5
        beta = beta + t * step
        if np.max(np.abs(beta)) > 1e6:
            raise MpleError("MPLE does not exist")
    else:
        raise MpleError("MPLE does not exist")
    eta = X @ beta
    # saturated fitted probabilities signal (quasi-)separation
    if np.max(np.abs(eta)) > 30.0:
        raise MpleError("MPLE does not exist")
    p = expit(eta)
    info = (X * (p * (1.0 - p))[:, None]).T @ X
    return beta, info


def mple(g: UndirectedGraph, tau: float = DEFAULT_TAU, terms: str = "edges+gwesp"):
    """Maximum pseudo-likelihood estimate and standard errors.

    Fits a logistic regression of every dyad indicator on its change
    statistics. ``terms="edges"`` drops the GWESP column.

    Returns
    -------
    theta_hat, se, info
        Estimate, standard errors and the observed pseudo-information
        (negative Hessian) at the estimate.
    """
    s1 = stat_edges(g)
    if s1 == 0 or s1 == g.n * (g.n - 1) // 2:
        raise MpleError("MPLE does not exist")
    X, y = _dyad_design(g, tau)
    if terms == "edges":
        X = X[:, :1]
    elif terms != "edges+gwesp":
        raise ValueError(f"unknown terms {terms!r}")
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise MpleError("MPLE does not exist")
    beta, info = _logistic_newton(X, y)
    cov = np.linalg.inv(info)
    se = np.sqrt(np.diag(cov))
    if not np.all(np.isfinite(se)) or np.any(se <= 0):
        raise MpleError("MPLE does not exist")
    return beta, se, info


# ---------------------------------------------------------------------------
# brute-force oracle

@functools.lru_cache(maxsize=16)
def _all_graph_stats(n: int, tau: float) -> np.ndarray:
    I, J = _dyads(n)
    m = I.size
    codes = np.arange(2 ** m, dtype=np.int64)
    bits = ((codes[:, None] >> np.arange(m)) & 1).astype(np.int32)
    A = np.zeros((codes.size, n, n), dtype=np.int32)
    A[:, I, J] = bits
    A[:, J, I] = bits
    SP = A @ A
    s1 = bits.sum(axis=1).astype(float)
    w = _tables(n, tau)[1]
    s2 = (w[SP[:, I, J]] * bits).sum(axis=1)
    return np.column_stack([s1, s2])


def exact_logZ_bruteforce(n: int, theta, tau: float = DEFAULT_TAU) -> float:
    """``log Z(theta)`` by summing over all ``2^(n(n-1)/2)`` graphs."""
    if n > 6:
        raise ValueError("too large for brute force")
    theta = as_param(theta, 2)
    return log_sum_exp(_all_graph_stats(n, float(tau)) @ theta)


def all_graph_stats(n: int, tau: float = DEFAULT_TAU) -> np.ndarray:
    """Statistics ``(S1, S2)`` of every graph on ``n <= 6`` nodes."""
    if n > 6:
        raise ValueError("too large for brute force")
    return _all_graph_stats(n, float(tau)).copy()


def enumerate_graphs(n: int):
    """Yield every simple graph on ``n`` nodes (for small-n oracles)."""
    pairs = list(itertools.combinations(range(n), 2))
    for bits in itertools.product((0, 1), repeat=len(pairs)):
        yield UndirectedGraph.from_edges(n, [pr for pr, b in zip(pairs, bits) if b])


# ---------------------------------------------------------------------------
# model

class ErgmModel(ModelSpec):
    """Edges + GWESP ERGM on a fixed node set, simulated by Gibbs sweeps."""

    name = "ergm"
    param_names = ("theta1", "theta2")

    def __init__(self, n: int, tau: float = DEFAULT_TAU):
        super().__init__()
        self.n = int(n)
        self.tau = float(tau)

    def stats(self, data) -> np.ndarray:
        if isinstance(data, UndirectedGraph):
            cached = getattr(data, "_stats", None)
            if cached is None or cached[0] != self.tau:
                data._stats = (self.tau, graph_stats(data, self.tau))
            return data._stats[1]
        return np.asarray(data, dtype=float)

    def log_h(self, data, theta) -> float:
        return float(np.dot(self.stats(data), theta))

    def reduce(self, data):
        return self.stats(data)

    def log_h_many(self, reduced, theta) -> np.ndarray:
        return np.asarray(reduced, dtype=float).reshape(-1, 2) @ np.asarray(theta, dtype=float)

    def summary(self, data) -> np.ndarray:
        return self.stats(data)

    def initial_state(self, theta, rng):
        return UndirectedGraph.empty(self.n)

    def _simulate(self, theta, cycles, rng, init=None):
        start = UndirectedGraph.empty(self.n) if init is None else init
        g = gibbs_cycle(start, theta, self.tau, rng, cycles=cycles)
        rpow, w, _ = _tables(g.n, self.tau)
        s1, s2 = _stats_from_sp(g.adj, g.shared_partners, w)
        g._stats = (self.tau, np.array([s1, s2]))
        return g

    def default_theta_tilde(self, particles, x_obs=None):
        if x_obs is not None:
            try:
                return mple(x_obs, self.tau)[0]
            except MpleError:
                pass
        return np.mean(particles, axis=0)


# ---------------------------------------------------------------------------
# I/O

def read_edgelist(path, n: int | None = None) -> UndirectedGraph:
    """Read ``i j`` pairs (0-indexed), one per line; ``#`` starts a comment."""
    edges = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        i, j = (int(t) for t in line.split()[:2])
        edges.append((i, j))
    size = n if n is not None else (1 + max(max(e) for e in edges) if edges else 0)
    return UndirectedGraph.from_edges(size, edges)


def write_edgelist(g: UndirectedGraph, path) -> None:
    lines = [f"# n={g.n}"] + [f"{i} {j}" for i, j in g.edges()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_matrix_csv(path) -> UndirectedGraph:
    adj = np.loadtxt(path, delimiter=",", dtype=np.uint8, ndmin=2)
    return UndirectedGraph(adj)


def write_matrix_csv(g: UndirectedGraph, path) -> None:
    np.savetxt(path, g.adj, fmt="%d", delimiter=",")


def read_edges_csv(path, n: int) -> UndirectedGraph:
    """Edge list CSV with header ``i,j`` (0-indexed nodes)."""
    lines = Path(path).read_text().splitlines()[1:]
    edges = [tuple(int(t) for t in ln.split(",")[:2]) for ln in lines if ln.strip()]
    return UndirectedGraph.from_edges(n, edges)


def write_edges_csv(g: UndirectedGraph, path) -> None:
    np.savetxt(path, g.edges().reshape(-1, 2), fmt="%d", delimiter=",", header="i,j", comments="")
