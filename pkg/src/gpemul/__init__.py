"""Gaussian-process emulation MCMC for doubly intractable posteriors."""

__version__ = "0.1.0"

from .core import BoxDomain, ChainOutput, ModelSpec, latin_hypercube, make_rng, stage_seed
from .diagnostics import ess, hpd, kde_tv, mcse_batch_means, summarize
from .ergm import ErgmModel, UndirectedGraph, mple
from .gp import GpEmulator, blup_predict, fit_gp_mle
from .isampling import ParticleTable, build_reference_ensemble, is_log_z, precompute_table
from .mcmc import ProposalState, RunConfig, abc_particles, dmh_particles, run_chain
from .pointproc import PointPattern, PointProcessModel, Window

__all__ = [
    "BoxDomain", "ChainOutput", "ErgmModel", "GpEmulator", "ModelSpec", "ParticleTable",
    "PointPattern", "PointProcessModel", "ProposalState", "RunConfig", "UndirectedGraph",
    "Window", "abc_particles", "blup_predict", "build_reference_ensemble", "dmh_particles",
    "ess", "fit_gp_mle", "hpd", "is_log_z", "kde_tv", "latin_hypercube", "make_rng",
    "mcse_batch_means", "mple", "precompute_table", "run_chain", "stage_seed", "summarize",
]
