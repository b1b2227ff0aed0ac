"""Bayesian estimation of transmission flows between population strata."""

from .strata import (
    EstimatorUndefinedError,
    FlowCounts,
    FlowIntensities,
    FlowProportions,
    MaskedPairError,
    ScoreMatrix,
    StrataError,
    StrataSpace,
    Stratum,
    UndefinedFunctionalError,
    adjusted_estimate,
    aggregate,
    counts_from_scores,
    expected_total,
    flow_ratio,
    mle_estimate,
    naive_estimate,
    recipients,
    sources,
    summary_functionals,
)
from .sampling import BetaXi, EmpiricalXi, FixedXi, SamplingSpec

__version__ = "0.1.0"
