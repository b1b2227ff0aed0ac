from .diagnostics import Diagnostic, diagnose, diagnostics
from .draws import PosteriorDraws
from .gibbs import GammaFlowModel, GibbsError, ZeroSupportError, gibbs_fit
from .gpflow import FlowGPModel, build_flow_gp, hmc_fit
from .hmc import HmcConfig, SamplerError
from .priors import PriorError, invgamma_from_quantiles
from .summary import SummaryTable, summarize

__all__ = [
    "Diagnostic",
    "FlowGPModel",
    "GammaFlowModel",
    "GibbsError",
    "HmcConfig",
    "PosteriorDraws",
    "PriorError",
    "SamplerError",
    "SummaryTable",
    "ZeroSupportError",
    "build_flow_gp",
    "diagnose",
    "diagnostics",
    "gibbs_fit",
    "hmc_fit",
    "invgamma_from_quantiles",
    "summarize",
]
