from pytorch_v2g.modeling.behavior import (
    BehaviorForecast,
    SessionRecord,
    forecast_fleet,
    forecast_user,
)
from pytorch_v2g.modeling.coordinator import (
    Coordinator,
    EvseAgentState,
    EvseSpec,
    RunConfig,
    ScheduleResult,
    build_agents,
    run,
)
from pytorch_v2g.modeling.grid import RateBounds, TimeGrid, build_bounds
from pytorch_v2g.modeling.solver import LocalProblem, LocalSolution, local_solve

__all__ = [
    "BehaviorForecast",
    "SessionRecord",
    "forecast_fleet",
    "forecast_user",
    "Coordinator",
    "EvseAgentState",
    "EvseSpec",
    "RunConfig",
    "ScheduleResult",
    "build_agents",
    "run",
    "RateBounds",
    "TimeGrid",
    "build_bounds",
    "LocalProblem",
    "LocalSolution",
    "local_solve",
]
