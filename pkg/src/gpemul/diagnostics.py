"""Posterior summaries: ESS, batch-means MCSE, HPD intervals, KDE-based TV."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import ChainOutput

__all__ = [
    "SummaryRow",
    "ess",
    "format_table",
    "hpd",
    "kde_curve",
    "kde_tv",
    "mcse_batch_means",
    "silverman_bandwidth",
    "summarize",
    "write_summary_csv",
]


def _autocorr(x: np.ndarray) -> np.ndarray:
    n = len(x)
    xc = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n] / n
    return acov / acov[0]


def ess(x) -> float:
    """Effective sample size with initial-positive-sequence truncation.

    ``n / (1 + 2 sum_k rho_k)`` where the sum stops before the first
    non-positive autocorrelation. The result is clamped to ``(0, n]``.
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    if np.ptp(x) == 0:
        raise ValueError("zero variance")
    rho = _autocorr(x)
    total = 0.0
    for k in range(1, n):
        if rho[k] <= 0:
            break
        total += rho[k]
    return float(min(n / (1.0 + 2.0 * total), n))


def mcse_batch_means(x) -> float:
    """Batch-means Monte Carlo standard error with batches of ``floor(sqrt(n))``."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    b = int(math.isqrt(n))
    a = n // b
    if a < 2:
        raise ValueError("too few samples for batch means")
    means = x[: a * b].reshape(a, b).mean(axis=1)
    return float(means.std(ddof=1) / math.sqrt(a))


def hpd(x, level: float = 0.95) -> tuple[float, float]:
    """Shortest interval containing ``ceil(level * n)`` of the sorted draws."""
    s = np.sort(np.asarray(x, dtype=float))
    n = len(s)
    m = min(max(int(math.ceil(level * n)), 1), n)
    widths = s[m - 1:] - s[: n - m + 1]
    i = int(np.argmin(widths))
    return float(s[i]), float(s[i + m - 1])


def silverman_bandwidth(x) -> float:
    """Rule-of-thumb bandwidth ``0.9 min(sd, IQR/1.34) n^(-1/5)``."""
    x = np.asarray(x, dtype=float)
    sd = x.std(ddof=1)
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34)
    if spread <= 0:
        spread = sd if sd > 0 else (abs(x[0]) if x[0] != 0 else 1.0)
    return float(0.9 * spread * len(x) ** -0.2)


def _kde(x, grid, bw, chunk=2048):
    out = np.zeros_like(grid)
    norm = 1.0 / (len(x) * bw * math.sqrt(2.0 * math.pi))
    for start in range(0, len(x), chunk):
        z = (grid[None, :] - x[start:start + chunk, None]) / bw
        out += np.exp(-0.5 * z * z).sum(axis=0)
    return out * norm


def kde_curve(x, grid=None, n_grid: int = 512):
    """Gaussian KDE of ``x`` on ``grid`` (default: 512 points over range +- 3 bw)."""
    x = np.asarray(x, dtype=float)
    bw = silverman_bandwidth(x)
    if grid is None:
        grid = np.linspace(x.min() - 3 * bw, x.max() + 3 * bw, n_grid)
    return grid, _kde(x, grid, bw)


def kde_tv(a, b, n_grid: int = 512) -> float:
    """Total-variation distance between KDEs of two samples.

    Both densities use Silverman bandwidths and share one grid covering
    the pooled range padded by three (larger) bandwidths;
    ``TV = 0.5 * sum |f - g| * dx``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ba, bb = silverman_bandwidth(a), silverman_bandwidth(b)
    pad = 3.0 * max(ba, bb)
    lo = min(a.min(), b.min()) - pad
    hi = max(a.max(), b.max()) + pad
    grid = np.linspace(lo, hi, n_grid)
    f = _kde(a, grid, ba)
    g = _kde(b, grid, bb)
    return float(0.5 * np.sum(np.abs(f - g)) * (grid[1] - grid[0]))


@dataclass
class SummaryRow:
    name: str
    mean: float
    hpd_lo: float
    hpd_hi: float
    ess: float
    mcse: float
    time: float
    ess_per_time: float
    tv_vs_gold: float | None = None


def summarize(chain: ChainOutput, gold: ChainOutput | None = None,
              names: Sequence[str] | None = None) -> list[SummaryRow]:
    """Per-parameter mean, 95% HPD, ESS, MCSE, ESS/time and optional TV."""
    x = chain.samples
    if len(x) == 0:
        raise ValueError("empty chain")
    p = x.shape[1]
    names = list(names or chain.names or [f"theta_{k + 1}" for k in range(p)])
    rows = []
    for k in range(p):
        col = x[:, k]
        try:
            e = ess(col)
        except ValueError:
            e = float("nan")
        lo, hi = hpd(col)
        tv = kde_tv(col, gold.samples[:, k]) if gold is not None else None
        t = chain.wall_time
        rows.append(SummaryRow(names[k], float(col.mean()), lo, hi, e, mcse_batch_means(col), t,
                               e / t if t > 0 else float("nan"), tv))
    return rows


_TIMING_FIELDS = ("time", "ess_per_time")


def write_summary_csv(rows: Sequence[SummaryRow], path, timing: bool = False) -> None:
    """Write one row per parameter.

    Wall-clock columns are left out unless ``timing`` is set, so that
    reruns with the same seed produce byte-identical files.
    """
    fields = [k for k in asdict(rows[0]) if timing or k not in _TIMING_FIELDS]
    lines = [",".join(fields)]
    for r in rows:
        vals = []
        d = asdict(r)
        for v in (d[k] for k in fields):
            if v is None:
                vals.append("")
            elif isinstance(v, float):
                vals.append(f"{v:.10g}")
            else:
                vals.append(str(v))
        lines.append(",".join(vals))
    Path(path).write_text("\n".join(lines) + "\n")


def format_table(rows: Sequence[SummaryRow], title: str = "") -> str:
    """Aligned text table with Mean / 95%HPD / ESS / Time / ESS/Time (and TV)."""
    header = [""] + [r.name for r in rows]
    body = [
        ["Mean"] + [f"{r.mean:.4g}" for r in rows],
        ["95%HPD"] + [f"({r.hpd_lo:.4g}, {r.hpd_hi:.4g})" for r in rows],
        ["ESS"] + [f"{r.ess:.2f}" for r in rows],
        ["MCSE"] + [f"{r.mcse:.2g}" for r in rows],
    ]
    if any(r.tv_vs_gold is not None for r in rows):
        body.append(["TV"] + [f"{r.tv_vs_gold:.3f}" if r.tv_vs_gold is not None else "" for r in rows])
    body.append(["Time(s)", f"{rows[0].time:.2f}"] + [""] * (len(rows) - 1))
    min_ess = min(r.ess for r in rows)
    rate = min_ess / rows[0].time if rows[0].time > 0 else float("nan")
    body.append(["minESS/Time", f"{rate:.2f}"] + [""] * (len(rows) - 1))
    table = [header] + body
    widths = [max(len(row[c]) for row in table) for c in range(len(header))]
    lines = [title] if title else []
    for row in table:
        lines.append("  ".join(cell.rjust(w) for cell, w in zip(row, widths)))
    return "\n".join(lines)
