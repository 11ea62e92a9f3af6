import time

import numpy as np
import pytest

from gpemul.core import BoxDomain, latin_hypercube, make_rng
from gpemul.diagnostics import kde_tv, mcse_batch_means
from gpemul.ergm import ErgmModel, UndirectedGraph, _dyad_design, graph_stats, mple
from gpemul.gp import fit_gp_mle
from gpemul.isampling import direct_table, precompute_table
from gpemul.mcmc import (AbcError, ProposalState, RunConfig, StallError, abc_particles, adapt_proposal,
                         dmh_log_ratio, dmh_particles, dmh_step, likem_log_ratio, likem_step,
                         normem_log_ratio, normem_step, run_chain)
from oracles import ExactLogLik, ExactLogZ, grid_posterior_sample
from plugins import GaussianMeanModel, conjugate_posterior

BOX4 = BoxDomain([-3.0, -1.0], [1.0, 2.0])


@pytest.fixture(scope="module")
def tiny():
    """Observed 4-node graph with a path and a triangle-free edge."""
    g = UndirectedGraph.from_edges(4, [(0, 1), (1, 2), (0, 2)])
    return ErgmModel(4), g, graph_stats(g)


@pytest.fixture(scope="module")
def gold4(tiny):
    return grid_posterior_sample(4, tiny[2], BOX4)


def start_prop():
    return ProposalState(np.diag([0.5, 0.3]))


# -- proposal -------------------------------------------------------------

def test_proposal_requires_spd():
    with pytest.raises(np.linalg.LinAlgError):
        ProposalState(np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(ValueError):
        ProposalState(np.array([[1.0, 0.5], [0.0, 1.0]]))
    assert ProposalState(np.eye(3)).scale == pytest.approx(2.38 ** 2 / 3)


def test_adapt_frozen_after_limit():
    s = ProposalState(np.eye(2), adapt_until=100)
    assert adapt_proposal(s, np.random.default_rng(0).normal(size=(500, 2)), 101) is s


def test_adapt_converges_to_identity():
    s = ProposalState(np.diag([5.0, 0.1]))
    h = np.random.default_rng(1).standard_normal((5000, 2))
    out = adapt_proposal(s, h, 5000)
    np.testing.assert_allclose(out.cov, np.eye(2), atol=0.06)
    assert out.scale == pytest.approx(2.38 ** 2 / 2)


def test_adapt_constant_history_keeps_cov():
    s = ProposalState(np.diag([2.0, 3.0]))
    assert adapt_proposal(s, np.ones((50, 2)), 50) is s


def test_adapt_iteration_must_be_positive():
    with pytest.raises(ValueError):
        adapt_proposal(ProposalState(np.eye(1)), np.zeros((3, 1)), 0)


# -- acceptance ratios ---------------------------------------------------------

def test_degenerate_proposal_ratio_is_zero(tiny):
    m, x, s = tiny
    th = np.array([-1.0, 0.5])
    y = m.simulate(th, 3, make_rng(1, 0), init=x)
    assert normem_log_ratio(th, th, ExactLogZ(4), m, x, BOX4) == 0.0
    assert likem_log_ratio(th, th, ExactLogLik(4, s), BOX4) == 0.0
    assert dmh_log_ratio(th, th, m, x, y, BOX4) == 0.0


def test_log_ratio_antisymmetry(tiny):
    m, x, s = tiny
    rng = np.random.default_rng(3)
    ez, el = ExactLogZ(4), ExactLogLik(4, s)
    ys = [m.simulate([-1.0, 0.5], 2, make_rng(2, k), init=x) for k in range(10)]
    for k in range(1000):
        a = BOX4.lower + rng.random(2) * BOX4.widths
        b = BOX4.lower + rng.random(2) * BOX4.widths
        y = ys[k % 10]
        for f in (lambda u, v: normem_log_ratio(u, v, ez, m, x, BOX4),
                  lambda u, v: likem_log_ratio(u, v, el, BOX4),
                  lambda u, v: dmh_log_ratio(u, v, m, x, y, BOX4)):
            assert f(a, b) == pytest.approx(-f(b, a), abs=1e-10)


class CountingEmulator:
    p = 2

    def __init__(self):
        self.calls = 0

    def mean(self, theta):
        self.calls += 1
        return 0.0


def test_outside_prior_rejected_without_evaluation(tiny):
    m, x, _ = tiny
    em = CountingEmulator()
    far = ProposalState(np.eye(2) * 1e6)
    th = np.array([0.9, 1.9])
    rng = make_rng(4, 0)
    before = m.simulate_calls
    for _ in range(50):
        out, acc = normem_step(th, em, m, x, BOX4, far, rng)
        assert not acc and np.array_equal(out, th)
        out, acc = likem_step(th, em, BOX4, far, rng)
        assert not acc
        out, acc = dmh_step(th, m, x, BOX4, far, 5, rng)
        assert not acc
    assert em.calls == 0
    assert m.simulate_calls == before


def test_step_functions_move(tiny):
    m, x, s = tiny
    rng = make_rng(5, 0)
    th = np.array([-1.0, 0.5])
    moves = sum(normem_step(th, ExactLogZ(4), m, x, BOX4, start_prop(), rng)[1] for _ in range(200))
    assert 0 < moves < 200
    with pytest.raises(ValueError):
        dmh_step(th, m, x, BOX4, start_prop(), 0, rng)


# -- posterior agreement on exact oracles -------------------------------------

def test_normem_exact_logz_matches_grid_posterior(tiny, gold4):
    m, x, _ = tiny
    ch = run_chain(RunConfig(50_000, "normem", seed=1), BOX4, start_prop(), [-1.0, 0.5],
                   model=m, x_obs=x, emulator=ExactLogZ(4))
    for k in range(2):
        assert kde_tv(ch.samples[:, k], gold4[:, k]) < 0.05


def test_dmh_matches_grid_posterior(tiny, gold4):
    m, x, _ = tiny
    ch = run_chain(RunConfig(50_000, "dmh", inner_cycles=50, seed=2), BOX4, start_prop(), [-1.0, 0.5],
                   model=m, x_obs=x)
    for k in range(2):
        assert kde_tv(ch.samples[:, k], gold4[:, k]) < 0.08


def test_emulated_samplers_on_fitted_tables_match_grid(tiny, gold4):
    m, x, _ = tiny
    parts = latin_hypercube(100, BOX4, make_rng(3, 0))
    tt = parts.mean(axis=0)
    for mode in ("normem", "likem"):
        table = precompute_table(m, parts, tt, 1000, 20, mode, seed=4, x_obs=x)
        em = fit_gp_mle(table.particles, table.values, seed=1)
        before = m.simulate_calls
        ch = run_chain(RunConfig(50_000, mode, seed=5), BOX4, start_prop(), [-1.0, 0.5],
                       model=m, x_obs=x, emulator=em)
        assert m.simulate_calls == before
        assert ch.meta["simulate_calls"] == 0
        for k in range(2):
            assert kde_tv(ch.samples[:, k], gold4[:, k]) < 0.08


def test_likem_conjugate_gaussian():
    rng = np.random.default_rng(8)
    y = 1.5 + rng.standard_normal(50)
    model = GaussianMeanModel(y)
    mu, sd = conjugate_posterior(y)
    prior = BoxDomain([mu - 8 * sd], [mu + 8 * sd])
    parts = latin_hypercube(30, prior, make_rng(1, 0))
    em = fit_gp_mle(*_table_arrays(direct_table(model.log_lik, parts)), seed=0)
    ch = run_chain(RunConfig(100_000, "likem", seed=3), prior, ProposalState(np.eye(1) * sd ** 2),
                   [mu], emulator=em)
    assert ch.samples.mean() == pytest.approx(mu, rel=0.02)
    assert ch.samples.std() == pytest.approx(sd, rel=0.02)


def _table_arrays(table):
    return table.particles, table.values


def test_dmh_and_normem_agree_on_five_nodes():
    m = ErgmModel(5)
    x = m.simulate([-1.0, 0.5], 100, make_rng(1, 0))
    box = BoxDomain([-3.0, -1.0], [1.0, 2.0])
    parts = latin_hypercube(100, box, make_rng(2, 0))
    table = precompute_table(m, parts, parts.mean(axis=0), 1000, 20, "normem", seed=3)
    em = fit_gp_mle(table.particles, table.values, seed=1)
    a = run_chain(RunConfig(50_000, "normem", seed=4), box, start_prop(), [-1.0, 0.5], model=m, x_obs=x, emulator=em)
    b = run_chain(RunConfig(50_000, "dmh", inner_cycles=50, seed=5), box, start_prop(), [-1.0, 0.5], model=m, x_obs=x)
    for k in range(2):
        tol = 3 * np.hypot(mcse_batch_means(a.samples[:, k]), mcse_batch_means(b.samples[:, k]))
        assert abs(a.samples[:, k].mean() - b.samples[:, k].mean()) < tol


# -- chain driver --------------------------------------------------------------

def test_run_config_validation():
    with pytest.raises(ValueError):
        RunConfig(0, "normem")
    with pytest.raises(ValueError):
        RunConfig(10, "dmh", inner_cycles=0)
    with pytest.raises(ValueError):
        RunConfig(10, "exchange")


def test_run_chain_component_checks(tiny):
    m, x, _ = tiny
    with pytest.raises(ValueError):
        run_chain(RunConfig(10, "normem"), BOX4, start_prop(), [0.0, 0.0], model=m, x_obs=x)
    with pytest.raises(ValueError):
        run_chain(RunConfig(10, "dmh"), BOX4, start_prop(), [0.0, 0.0])
    with pytest.raises(ValueError):
        run_chain(RunConfig(10, "likem"), BOX4, start_prop(), [5.0, 0.0], emulator=ExactLogZ(4))


def test_chain_rows_prior_and_determinism(tiny):
    m, x, s = tiny
    cfg = RunConfig(25_000, "likem", seed=11)
    a = run_chain(cfg, BOX4, start_prop(), [-1.0, 0.5], emulator=ExactLogLik(4, s))
    b = run_chain(cfg, BOX4, start_prop(), [-1.0, 0.5], emulator=ExactLogLik(4, s))
    assert a.samples.shape == (25_000, 2)
    assert np.array_equal(a.samples, b.samples)
    assert all(BOX4.contains(t) for t in a.samples)
    assert a.per_iter_time.shape == (25_000,)
    assert 0 < a.acceptance_rate < 1
    assert a.evaluated.dtype == bool
    assert int((~a.evaluated).sum()) == a.meta["outside_prior"] > 0


def test_dmh_chain_deterministic_and_in_prior(tiny):
    m, x, _ = tiny
    cfg = RunConfig(2000, "dmh", inner_cycles=1, seed=12)
    a = run_chain(cfg, BOX4, start_prop(), [-1.0, 0.5], model=m, x_obs=x)
    b = run_chain(cfg, BOX4, start_prop(), [-1.0, 0.5], model=m, x_obs=x)
    assert np.array_equal(a.samples, b.samples)
    assert all(BOX4.contains(t) for t in a.samples)


def test_mcse_stopping_rule():
    rng = np.random.default_rng(8)
    y = rng.standard_normal(50)
    model = GaussianMeanModel(y)
    prior = BoxDomain([-2.0], [2.0])
    em = fit_gp_mle(*_table_arrays(direct_table(model.log_lik, latin_hypercube(20, prior, make_rng(1, 0)))))
    ch = run_chain(RunConfig(200_000, "likem", seed=1, mcse_threshold=0.01), prior,
                   ProposalState(np.eye(1) * 0.02), [0.0], emulator=em)
    assert ch.meta["stop_reason"] == "mcse"
    assert 10_000 <= ch.n_iter < 200_000
    assert mcse_batch_means(ch.samples[:, 0]) <= 0.01


def test_adaptation_freezes(tiny):
    m, x, s = tiny
    cfg = RunConfig(3000, "likem", seed=2, adapt_until=1000)
    ch = run_chain(cfg, BOX4, start_prop(), [-1.0, 0.5], emulator=ExactLogLik(4, s))
    expect = np.cov(ch.samples[:1000].T) + 1e-8 * np.eye(2)
    np.testing.assert_allclose(ch.meta["final_proposal_cov"], expect, rtol=1e-8)


# -- particles -----------------------------------------------------------------

def test_dmh_particles_basic(tiny):
    m, x, _ = tiny
    one = dmh_particles(m, x, BOX4, start_prop(), 1, 100, 5, seed=1, theta0=[-1.0, 0.5])
    assert one.shape == (1, 2)
    many = dmh_particles(m, x, BOX4, start_prop(), 50, 200, 5, seed=2, theta0=[-1.0, 0.5])
    assert len({tuple(p) for p in many}) == 50
    assert all(BOX4.contains(p) for p in many)


def test_dmh_particles_stall_returns_partial(tiny):
    m, x, _ = tiny
    with pytest.raises(StallError) as err:
        dmh_particles(m, x, BOX4, ProposalState(np.eye(2) * 1e8), 5, 0, 1, seed=1,
                      theta0=[-1.0, 0.5], max_iter=300)
    assert err.value.partial.shape[1] == 2


def _gaussian_abc_model():
    y = 2.0 + np.random.default_rng(4).standard_normal(30)
    return GaussianMeanModel(y), y


def test_abc_accept_all_box():
    model, y = _gaussian_abc_model()
    prior = BoxDomain([-5.0], [10.0])
    parts, D2, info = abc_particles(model, y, [2.0], [0.2], 200, 1.0, 20, 1, seed=1, prior=prior,
                                    return_details=True)
    np.testing.assert_allclose(D2.lower, info["design"].min(axis=0))
    np.testing.assert_allclose(D2.upper, info["design"].max(axis=0))
    assert parts.shape == (20, 1)


def test_abc_tolerance_too_tight():
    model, y = _gaussian_abc_model()
    with pytest.raises(AbcError, match="tolerance too tight"):
        abc_particles(model, y, [2.0], [0.2], 100, 0.01, 10, 1, seed=1)


def test_abc_scaling_consistency():
    model, y = _gaussian_abc_model()
    kw = dict(D=300, quantile=0.05, d=10, cycles=1, seed=5, return_details=True)
    _, _, plain = abc_particles(model, y, [2.0], [0.2], **kw)
    _, _, scaled = abc_particles(model, y, [2.0], [0.2], scale=[7.5], **kw)
    np.testing.assert_array_equal(plain["keep"], scaled["keep"])


def test_abc_region_contains_truth_on_simulated_ergm():
    m = ErgmModel(30)
    truth = np.array([-2.5, 0.8])
    x = m.simulate(truth, 50, make_rng(6, 0))
    b, se, _ = mple(x)
    parts, D2, info = abc_particles(m, x, b, se, 3000, 0.03, 400, 5, seed=7, return_details=True)
    D1 = info["D1"]
    assert np.all(D2.lower >= D1.lower) and np.all(D2.upper <= D1.upper)
    assert D2.contains(truth)
    assert parts.shape == (400, 2) and all(D2.contains(p) for p in parts)


def test_abc_clips_to_prior():
    model, y = _gaussian_abc_model()
    prior = BoxDomain([1.0], [2.1])
    _, D2 = abc_particles(model, y, [2.0], [0.2], 200, 0.5, 10, 1, seed=3, prior=prior)
    assert D2.lower[0] >= 1.0 and D2.upper[0] <= 2.1


def test_likem_cost_does_not_depend_on_network_size():
    """Same d, networks of 200 and 800 nodes: per-iteration time within 20%."""
    medians = []
    for n, seed in ((200, 1), (800, 2)):
        m = ErgmModel(n)
        x = m.simulate([-6.0, 2.0], 1, make_rng(seed, 0))
        b, se, _ = mple(x)
        prior = BoxDomain(b - 5 * se, b + 5 * se)
        parts = latin_hypercube(100, prior, make_rng(seed, 1))
        X, yv = _dyad_design(x, 0.25)
        # log pseudo-likelihood: a cheap stand-in for an expensive log-likelihood
        vals = [float(yv @ (X @ t) - np.logaddexp(0, X @ t).sum()) for t in parts]
        em = fit_gp_mle(parts, np.array(vals), seed=0)
        ch = run_chain(RunConfig(20_000, "likem", seed=3), prior, ProposalState(np.diag(se ** 2)), b, emulator=em)
        medians.append(np.median(ch.per_iter_time))
    assert medians[1] == pytest.approx(medians[0], rel=0.2)
