"""Treatment and spillover effects when network links are misclassified.

Submodules: ``simgen`` (synthetic populations), ``kde`` (kernel first
stage), ``ident`` (eigen-identification of the latent degree law),
``estim`` (second-stage estimators and variance) and ``harness`` (Monte
Carlo runner, CSV and configuration).
"""

from .casf import DEFAULT_MODEL, THETA_PAPER, CasfModel
from .data import Sample
from .errors import NetmisError
from .estim import SPE, EffectEstimate, ThetaFit, effects, naive_ols, sandwich_variance
from .harness import ExperimentConfig, McSummary, ingest_csv, run_montecarlo
from .kernels import BACKEND
from .simgen import MisclassModel, SimConfig, simulate

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "CasfModel", "DEFAULT_MODEL", "EffectEstimate", "ExperimentConfig", "McSummary",
    "MisclassModel", "NetmisError", "SPE", "Sample", "SimConfig", "THETA_PAPER", "ThetaFit",
    "effects", "ingest_csv", "naive_ols", "run_montecarlo", "sandwich_variance", "simulate",
]
