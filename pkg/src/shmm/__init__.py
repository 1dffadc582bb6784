"""Seasonal hidden Markov models.

Periodic transition matrices and emission laws, exact likelihood and EM
fitting, spectral moment-based recovery, simulation, and a validation
harness for daily weather generators.
"""

from shmm.core import (
    ChunkedHMM,
    ModelDims,
    PeriodicLogitTransition,
    SeasonalHMM,
    check_assumptions,
    chunk,
    phase_marginals,
    stationary_distribution,
    transition_matrix,
)
from shmm.dataio import DailySeries, IngestConfig, ingest, load_model, save_model
from shmm.emissions import ExpPeriodicScale, GaussianPeriodicMean, ZeroInflatedExpMixture
from shmm.inference import (
    FitConfig,
    align_states,
    em_iterate,
    fit,
    forward_backward,
    log_likelihood,
    viterbi,
)
from shmm.sim import Trajectory, simulate, simulate_batch

__version__ = "0.1.0"

__all__ = [
    "ChunkedHMM", "ModelDims", "PeriodicLogitTransition", "SeasonalHMM", "check_assumptions", "chunk",
    "phase_marginals", "stationary_distribution", "transition_matrix", "DailySeries", "IngestConfig",
    "ingest", "load_model", "save_model", "ExpPeriodicScale", "GaussianPeriodicMean",
    "ZeroInflatedExpMixture", "FitConfig", "align_states", "em_iterate", "fit", "forward_backward",
    "log_likelihood", "viterbi", "Trajectory", "simulate", "simulate_batch",
]
