"""Longitudinal self-supervised pretraining with latent neural ODEs, on a synthetic cohort."""

from __future__ import annotations

from .models import MODES, LossWeights, init_bundle
from .odesolve import SolverConfig, integrate, odeint
from .synthdata import CohortParams, generate_cohort, make_pair_dataset, make_sequence_dataset

__version__ = "0.1.0"

__all__ = [
    "MODES",
    "LossWeights",
    "init_bundle",
    "SolverConfig",
    "integrate",
    "odeint",
    "CohortParams",
    "generate_cohort",
    "make_pair_dataset",
    "make_sequence_dataset",
]
