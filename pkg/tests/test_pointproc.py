import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpemul.core import make_rng
from gpemul.pointproc import (CAP, BreakpointError, InteractionParams, PointPattern, PointProcessModel,
                              Window, _residual, birth_death_step, birth_log_ratio, death_log_ratio,
                              log_h_pp, phi, read_pattern_csv, solve_breakpoints, write_pattern_csv)

R = 5.0
TRUTH = (4e-4, 1.2, 15.0, 0.3)


def parabola(d, t1, t2):
    return t1 - (math.sqrt(t1) / (t2 - R) * (d - t2)) ** 2


def tail(d, t3, d2):
    return 1.0 + 1.0 / (t3 * (d - d2)) ** 2


def check_smooth_join(t1, t2, t3):
    D1, D2 = solve_breakpoints(t1, t2, t3, R)
    assert D1 > t2
    assert np.max(np.abs(_residual(D1, D2, t1, t2, t3, R))) < 1e-9
    assert abs(parabola(D1, t1, t2) - tail(D1, t3, D2)) < 1e-9
    h = 1e-6 * max(1.0, D1)
    dq = (parabola(D1 + h, t1, t2) - parabola(D1 - h, t1, t2)) / (2 * h)
    dt = (tail(D1 + h, t3, D2) - tail(D1 - h, t3, D2)) / (2 * h)
    assert abs(dq - dt) < 1e-6 * max(1.0, abs(dq))
    prm = InteractionParams.from_theta((1e-3, t1, t2, t3), R)
    assert abs(phi(D1 + 1e-9, prm) - phi(D1 - 1e-9, prm)) < 1e-6


def test_breakpoints_rsv_truth():
    check_smooth_join(1.2, 15.0, 0.3)


@settings(max_examples=100, deadline=None)
@given(st.floats(1.05, 3.0), st.floats(R + 1.0, 30.0), st.floats(0.05, 2.0))
def test_breakpoints_random_parameters(t1, t2, t3):
    check_smooth_join(t1, t2, t3)


@pytest.mark.parametrize("args", [(1.0, 15.0, 0.3), (1.2, 4.0, 0.3), (1.2, 15.0, 0.0)])
def test_breakpoints_invalid_parameters(args):
    with pytest.raises(BreakpointError, match="breakpoints unsolvable"):
        solve_breakpoints(*args, R)


def test_phi_examples():
    prm = InteractionParams.from_theta(TRUTH, R)
    assert phi(15.0, prm) == pytest.approx(1.2, abs=1e-12)
    assert phi(R, prm) == pytest.approx(0.0, abs=1e-12)
    assert phi(2.0, prm) == 0.0
    assert phi(1e7, prm) == pytest.approx(1.0, abs=1e-9)


def test_phi_continuous_on_fine_grid():
    prm = InteractionParams.from_theta(TRUTH, R)
    grid = np.linspace(R + 1e-6, 60, 200_001)
    vals = np.array([phi(d, prm) for d in grid])
    assert np.max(np.abs(np.diff(vals))) < 1e-3  # no jump beyond grid-step slope
    assert np.all(vals > 0)


# -- likelihood --------------------------------------------------------------

def window():
    return Window(0.0, 100.0, 0.0, 100.0)


def test_log_h_empty_single_and_hard_core():
    prm = InteractionParams.from_theta(TRUTH, R)
    w = window()
    assert log_h_pp(PointPattern(np.zeros((0, 2)), w), prm) == 0.0
    assert log_h_pp(PointPattern([[50.0, 50.0]], w), prm) == pytest.approx(math.log(4e-4))
    assert log_h_pp(PointPattern([[50.0, 50.0], [52.0, 50.0]], w), prm) == -np.inf


def test_log_h_matches_direct_formula(rng):
    prm = InteractionParams.from_theta(TRUTH, R)
    pts = rng.uniform(0, 100, size=(15, 2))
    d = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    if np.any(d[np.triu_indices(15, 1)] <= R):
        pts = pts[:3] * 0 + np.array([[10, 10], [40, 10], [10, 60]])
        d = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    n = len(pts)
    s = [sum(math.log(phi(d[i, j], prm)) for j in range(n) if j != i) for i in range(n)]
    expect = n * math.log(prm.lam) + sum(min(v, CAP) for v in s)
    assert log_h_pp(PointPattern(pts, window()), prm) == pytest.approx(expect, rel=1e-12)


def test_log_h_is_exchangeable(rng):
    prm = InteractionParams.from_theta(TRUTH, R)
    pts = np.array([[10.0, 10.0], [25.0, 12.0], [18.0, 30.0], [60.0, 60.0], [70.0, 66.0]])
    a = log_h_pp(PointPattern(pts, window()), prm)
    b = log_h_pp(PointPattern(pts[rng.permutation(5)], window()), prm)
    assert a == b


def test_cap_binds_exactly():
    """A point with many neighbours at the peak distance contributes exactly the cap."""
    prm = InteractionParams.from_theta((1e-3, 2.0, 15.0, 0.3), R)
    centre = np.array([50.0, 50.0])
    ring = centre + 15.0 * np.column_stack([np.cos(np.arange(6) * np.pi / 3), np.sin(np.arange(6) * np.pi / 3)])
    pts = np.vstack([centre, ring])
    x = PointPattern(pts, window())
    total = log_h_pp(x, prm)
    without_cap = log_h_pp(x, prm, cap=1e9)
    assert 6 * math.log(2.0) > CAP
    assert without_cap > total
    # centre contributes exactly CAP
    d = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    s = [sum(math.log(phi(d[i, j], prm)) for j in range(7) if j != i) for i in range(7)]
    assert s[0] > CAP
    assert total == pytest.approx(7 * math.log(prm.lam) + sum(min(v, CAP) for v in s), rel=1e-12)


def test_pattern_validation():
    with pytest.raises(ValueError):
        PointPattern([[150.0, 1.0]], window())
    with pytest.raises(ValueError):
        PointPattern([[1.0, 1.0], [1.0, 1.0]], window())


# -- birth-death ---------------------------------------------------------------

def test_poisson_regime_count_mean():
    prm = InteractionParams.from_theta((2e-3, 1.2, 15.0, 0.3), R)
    w = Window(0, 100, 0, 100)
    x = PointPattern(np.zeros((0, 2)), w)
    rng = make_rng(3, 0)
    x = birth_death_step(x, prm, rng, n_steps=2000, interact=False)
    counts = np.empty(100_000)
    for k in range(counts.size):
        x = birth_death_step(x, prm, rng, n_steps=1, interact=False)
        counts[k] = x.n
    from gpemul.diagnostics import mcse_batch_means
    assert abs(counts.mean() - 20.0) < 3 * mcse_batch_means(counts)


def test_birth_then_death_ratios_cancel(rng):
    prm = InteractionParams.from_theta(TRUTH, R)
    w = window()
    for _ in range(50):
        pts = rng.uniform(0, 100, size=(6, 2))
        x = PointPattern(pts[:5], w)
        if log_h_pp(PointPattern(pts, w), prm) == -np.inf or log_h_pp(x, prm) == -np.inf:
            continue
        bigger = PointPattern(pts, w)
        assert birth_log_ratio(x, pts[5], prm) + death_log_ratio(bigger, 5, prm) == pytest.approx(0.0, abs=1e-10)


def test_birth_inside_hard_core_is_rejected():
    prm = InteractionParams.from_theta(TRUTH, R)
    x = PointPattern([[50.0, 50.0]], window())
    assert birth_log_ratio(x, [51.0, 50.0], prm) == -np.inf


def test_sampler_never_violates_hard_core():
    m = PointProcessModel(Window(0, 150, 0, 150), R)
    theta = (4e-3, 1.2, 15.0, 0.3)
    x = m.simulate(theta, 20, make_rng(1, 0))
    d = np.linalg.norm(x.points[:, None] - x.points[None], axis=2)
    assert np.all(d[np.triu_indices(x.n, 1)] > R)
    assert np.isfinite(m.log_h(x, theta))


def test_model_invalid_theta_gives_minus_inf():
    m = PointProcessModel(window(), R)
    x = PointPattern([[10.0, 10.0]], window())
    assert m.log_h(x, (4e-4, 0.9, 15.0, 0.3)) == -np.inf


def test_pattern_csv_roundtrip(tmp_path):
    x = PointPattern([[1.5, 2.25], [30.0, 40.0]], window())
    write_pattern_csv(x, tmp_path / "p.csv")
    assert (tmp_path / "p.csv").read_text().startswith("x,y\n")
    np.testing.assert_allclose(read_pattern_csv(tmp_path / "p.csv", window()).points, x.points)
