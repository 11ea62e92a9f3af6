"""Small plug-in models used by the tests and the CLI plug-in path."""

from __future__ import annotations

import numpy as np

from gpemul.core import ModelSpec


class GaussianMeanModel(ModelSpec):
    """``y_i ~ N(theta, sigma^2)`` with known ``sigma``: tractable, so every
    sampler can be checked against the conjugate closed form."""

    name = "gaussian"
    param_names = ("mu",)

    def __init__(self, y, sigma=1.0):
        super().__init__()
        self.y = np.asarray(y, dtype=float)
        self.sigma = float(sigma)

    def log_h(self, data, theta):
        r = np.asarray(data, dtype=float) - float(np.asarray(theta).ravel()[0])
        return float(-0.5 * np.sum(r * r) / self.sigma ** 2)

    def log_lik(self, theta):
        return self.log_h(self.y, theta)

    def _simulate(self, theta, cycles, rng, init=None):
        return float(np.asarray(theta).ravel()[0]) + self.sigma * rng.standard_normal(len(self.y))

    def initial_state(self, theta, rng):
        return np.zeros(len(self.y))

    def summary(self, data):
        return np.array([np.mean(data)])

    def read_data(self, path):
        return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=1)

    def write_data(self, x, path):
        np.savetxt(path, np.asarray(x), header="y", comments="", fmt="%.17g")


class FlatModel(ModelSpec):
    """``h`` does not depend on ``theta``."""

    name = "flat"
    param_names = ("a",)

    def log_h(self, data, theta):
        return float(-np.sum(np.asarray(data) ** 2))

    def _simulate(self, theta, cycles, rng, init=None):
        return rng.standard_normal(3)

    def initial_state(self, theta, rng):
        return np.zeros(3)


def make_gaussian(options):
    """CLI factory: ``[model] factory = plugins:make_gaussian``."""
    rng = np.random.default_rng(int(options.get("data_seed", 3)))
    n = int(options.get("n_obs", 50))
    y = float(options.get("true_mu", 1.5)) + rng.standard_normal(n)
    return GaussianMeanModel(y)


def conjugate_posterior(y, sigma=1.0):
    """Posterior mean and sd under a flat prior."""
    y = np.asarray(y, dtype=float)
    return float(y.mean()), float(sigma / np.sqrt(len(y)))
