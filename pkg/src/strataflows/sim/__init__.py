from .flows import (
    GP_FLOW_PARAMS,
    EventList,
    SimOutput,
    SimulationError,
    ThinResult,
    events_from_counts,
    exact_gp_draw,
    gp_strata_space,
    simulate_gp_flows,
    simulate_multinomial,
    thin_events,
    thin_observations,
)
from .sit import (
    SIT_RATES,
    EventBudgetExceeded,
    SitModel,
    frozen_waiting_times,
    simulate_sit_gillespie,
    simulate_sit_ode,
    reference_sit_model,
)

__all__ = [
    "SIT_RATES",
    "GP_FLOW_PARAMS",
    "EventBudgetExceeded",
    "EventList",
    "SimOutput",
    "SimulationError",
    "SitModel",
    "ThinResult",
    "events_from_counts",
    "exact_gp_draw",
    "frozen_waiting_times",
    "gp_strata_space",
    "simulate_gp_flows",
    "simulate_multinomial",
    "simulate_sit_gillespie",
    "simulate_sit_ode",
    "reference_sit_model",
    "thin_events",
    "thin_observations",
]
