"""Bayesian inference for multinomial data with misclassification and structural zeros.

The main entry points are :func:`run_chain` / :func:`run_chains` for
fitting, the scenario generators in :mod:`missmult.simgen`, and the
metrics in :mod:`missmult.eval`.
"""
__version__ = "0.1.0"

from .model import (
    VARIANTS, CovariateBundle, Dataset, Dimensions, Hyperparameters, InvariantError,
    LatentState, ObservationRecord, RecordTable, compose_confusion, log_joint, logistic, logit,
)
from .gibbs import ChainOutput, RunConfig, run_chain, run_chains, sweep
from .simgen import Scenario1Config, Scenario2Config, gen_scenario1, gen_scenario2
from .eval import (
    abs_metric, coverage_metric, frob_metric, gelman_rubin, posterior_summary, replicate_study,
)

__all__ = [
    "VARIANTS", "CovariateBundle", "Dataset", "Dimensions", "Hyperparameters",
    "InvariantError", "LatentState", "ObservationRecord", "RecordTable", "compose_confusion",
    "log_joint", "logistic", "logit", "ChainOutput", "RunConfig", "run_chain", "run_chains",
    "sweep", "Scenario1Config", "Scenario2Config", "gen_scenario1", "gen_scenario2",
    "abs_metric", "coverage_metric", "frob_metric", "gelman_rubin", "posterior_summary",
    "replicate_study",
]
