"""Distributed bi-directional charging coordination.

.. Pipeline:
   - initialize profiles p_n = 0 and control signal c from the baseload
   - every iteration each EVSE solves its local problem against the signal it sees
   - every v-th iteration EVSEs publish their candidate profiles
   - every u-th iteration the center recomputes c = (B + sum_n p_n) / (lambda N)
   - stop when a fresh signal update moves c by at most epsilon
"""
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import torch

from pytorch_v2g.exceptions import ConstraintViolation, InvalidInputError
from pytorch_v2g.modeling.behavior import BehaviorForecast
from pytorch_v2g.modeling.grid import (
    DTYPE,
    RateBounds,
    TimeGrid,
    build_bounds,
    slot_vector,
)
from pytorch_v2g.modeling.solver import ENERGY_RTOL, LocalProblem, local_solve
from pytorch_v2g.run.metrics import (
    LoadMetrics,
    compute_metrics,
    flatness_objective,
    total_load,
)

logger = logging.getLogger(__name__)

norms: Dict[str, Callable[[torch.Tensor], float]] = {
    "l2": lambda delta: float(torch.linalg.vector_norm(delta, ord=2)),
    "linf": lambda delta: float(torch.linalg.vector_norm(delta, ord=float("inf"))),
}


@dataclass(frozen=True)
class RunConfig:
    """Coordination parameters.

    :param lambda_: control parameter scaling the signal, c = load / (lambda N)
    :param epsilon: convergence threshold on the control signal change
    :param u: control signal is updated every u-th iteration
    :param v: charging profiles are published every v-th iteration
    :param max_iters: iteration budget
    :param norm: norm of the control signal change, one of `norms`
    """

    lambda_: float = 2.0
    epsilon: float = 1e-3
    u: int = 1
    v: int = 1
    max_iters: int = 500
    norm: str = "l2"

    def __post_init__(self):
        for name in ("lambda_", "epsilon"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"{name} must be > 0, got {getattr(self, name)}")
        for name in ("u", "v", "max_iters"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise InvalidInputError(f"{name} must be a positive integer, got {value}")
        if self.norm not in norms:
            raise InvalidInputError(
                f"Unknown norm {self.norm!r}. Available: {list(norms.keys())}"
            )

    @classmethod
    def from_dict(cls, values: Mapping) -> "RunConfig":
        """Build config from file-style keys (`lambda` instead of `lambda_`)."""
        values = dict(values)
        if "lambda" in values:
            values["lambda_"] = values.pop("lambda")
        unknown = set(values) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidInputError(f"Unknown run config keys: {sorted(unknown)}")
        return cls(**values)

    def to_dict(self) -> Dict:
        return {
            "lambda": self.lambda_,
            "epsilon": self.epsilon,
            "u": self.u,
            "v": self.v,
            "max_iters": self.max_iters,
            "norm": self.norm,
        }


@dataclass(frozen=True)
class EvseSpec:
    """Charging station of the fleet and the user it serves."""

    evse_id: str
    user_id: str
    p_max_kw: float
    d_max_kw: float
    lag: int = 0

    def __post_init__(self):
        if self.p_max_kw < 0:
            raise InvalidInputError(
                f"{self.evse_id}: p_max_kw must be >= 0, got {self.p_max_kw}"
            )
        if self.d_max_kw > 0:
            raise InvalidInputError(
                f"{self.evse_id}: d_max_kw must be <= 0, got {self.d_max_kw}"
            )
        if self.lag < 0:
            raise InvalidInputError(f"{self.evse_id}: lag must be >= 0, got {self.lag}")


@dataclass
class EvseAgentState:
    """What the center knows about a single EVSE."""

    evse_id: str
    user_id: str
    bounds: RateBounds
    energy_kwh: float
    published_profile: torch.Tensor
    candidate_profile: torch.Tensor
    lag: int = 0


@dataclass(frozen=True)
class IterationTrace:
    iteration: int
    control_delta: Optional[float]
    objective: float
    peak_kw: float
    signal_updated: bool
    profiles_updated: bool


@dataclass
class ScheduleResult:
    evse_ids: List[str]
    baseload: torch.Tensor
    profiles: torch.Tensor
    total_load: torch.Tensor
    control: torch.Tensor
    converged: bool
    iterations: int
    trace: List[IterationTrace]
    metrics: LoadMetrics
    uncoordinated_metrics: LoadMetrics
    config: RunConfig
    warnings: List[str] = field(default_factory=list)


class DemandClamp(NamedTuple):
    energy_kwh: Optional[float]
    warning: Optional[str]
    excluded: bool = False


def clamp_demand(
    forecast: BehaviorForecast, bounds: RateBounds, dt_hours: float
) -> DemandClamp:
    """Fit predicted demand into what the charging window can deliver."""
    if bounds.n_available == 0:
        return DemandClamp(
            energy_kwh=None,
            warning=f"user {forecast.user_id}: charging window covers no slot",
            excluded=True,
        )
    lowest, highest = bounds.capacity_kwh(dt_hours)
    energy = min(max(forecast.energy_pred_kwh, lowest, 0.0), highest)
    if energy != forecast.energy_pred_kwh:
        return DemandClamp(
            energy_kwh=energy,
            warning=(
                f"user {forecast.user_id}: demand {forecast.energy_pred_kwh:.6g} kWh "
                f"clamped to {energy:.6g} kWh"
            ),
        )
    return DemandClamp(energy_kwh=energy, warning=None)


def update_control_signal(
    baseload: torch.Tensor,
    published_profiles: torch.Tensor,
    lambda_: float,
    n_total: int,
) -> torch.Tensor:
    """c(t) = (B(t) + sum_n p_n(t)) / (lambda N)

    :param baseload: B (T)
    :param published_profiles: profiles known to the center (N x T)
    :param lambda_: control parameter
    :param n_total: enrolled fleet size N
    """
    if n_total < 1:
        raise InvalidInputError(f"fleet size must be >= 1, got {n_total}")
    if not lambda_ > 0:
        raise InvalidInputError(f"lambda must be > 0, got {lambda_}")
    return total_load(baseload, published_profiles) / (lambda_ * n_total)


def build_agents(
    forecasts: Mapping[str, BehaviorForecast],
    fleet: Sequence[EvseSpec],
    grid: TimeGrid,
) -> Tuple[List[EvseAgentState], List[str]]:
    """Turn user forecasts into EVSE agents, excluding those that cannot charge."""
    agents = []
    warnings = []
    for evse in sorted(fleet, key=lambda spec: spec.evse_id):
        forecast = forecasts.get(evse.user_id)
        if forecast is None:
            warnings.append(
                f"{evse.evse_id}: no forecast for user {evse.user_id}, excluded"
            )
            continue
        if not forecast.valid:
            warnings.append(
                f"{evse.evse_id}: invalid forecast for user {evse.user_id}, excluded"
            )
            continue
        bounds = build_bounds(
            grid,
            window_start=grid.at_minutes(forecast.t_start_pred),
            window_end=grid.at_minutes(forecast.t_end_pred),
            p_max=evse.p_max_kw,
            d_max=evse.d_max_kw,
        )
        clamp = clamp_demand(forecast, bounds, grid.dt_hours)
        if clamp.warning is not None:
            warnings.append(f"{evse.evse_id}: {clamp.warning}")
        if clamp.excluded:
            continue
        agents.append(
            EvseAgentState(
                evse_id=evse.evse_id,
                user_id=evse.user_id,
                bounds=bounds,
                energy_kwh=clamp.energy_kwh,
                published_profile=grid.zeros(),
                candidate_profile=grid.zeros(),
                lag=evse.lag,
            )
        )
    for warning in warnings:
        logger.warning(warning)
    return agents, warnings


def uncoordinated_profiles(
    agents: Sequence[EvseAgentState], grid: TimeGrid
) -> torch.Tensor:
    """Charge at full rate from plug-in until the demand is delivered."""
    profiles = grid.zeros(len(agents))
    for row, agent in enumerate(agents):
        remaining = agent.energy_kwh
        tolerance = ENERGY_RTOL * max(1.0, abs(agent.energy_kwh))
        for slot in torch.nonzero(agent.bounds.available).flatten().tolist():
            if remaining <= tolerance:
                break
            rate = min(float(agent.bounds.upper[slot]), remaining / grid.dt_hours)
            profiles[row, slot] = rate
            remaining -= rate * grid.dt_hours
    return profiles


class Coordinator:
    """Control center iterating with a fixed fleet of EVSE agents."""

    def __init__(
        self,
        baseload: torch.Tensor,
        agents: Sequence[EvseAgentState],
        grid: TimeGrid,
        config: RunConfig,
        on_iteration: Optional[Callable[[IterationTrace], None]] = None,
    ):
        if not agents:
            raise InvalidInputError("no EVSE agents to schedule")
        self.agents = sorted(agents, key=lambda agent: agent.evse_id)
        self.baseload = slot_vector(baseload, grid)
        self.grid = grid
        self.config = config
        self.on_iteration = on_iteration
        self.n_total = len(self.agents)

        self.bounds = RateBounds(
            lower=torch.stack([agent.bounds.lower for agent in self.agents]),
            upper=torch.stack([agent.bounds.upper for agent in self.agents]),
            available=torch.stack([agent.bounds.available for agent in self.agents]),
        )
        self.energy = torch.tensor(
            [agent.energy_kwh for agent in self.agents], dtype=DTYPE
        )
        self.lags = torch.tensor([agent.lag for agent in self.agents])
        self.published = torch.stack(
            [agent.published_profile.to(DTYPE) for agent in self.agents]
        )
        self.candidate = self.published.clone()
        self.signals = deque(maxlen=int(self.lags.max()) + 1)
        self.signals.append(self.control_signal())

    def control_signal(self) -> torch.Tensor:
        return update_control_signal(
            self.baseload, self.published, self.config.lambda_, self.n_total
        )

    def visible_signals(self) -> torch.Tensor:
        """Signal each agent sees, `lag` generations behind the latest (N x T)."""
        history = torch.stack(list(self.signals))
        index = (len(self.signals) - 1 - self.lags).clamp(min=0)
        return history[index]

    def solve_locally(self) -> torch.Tensor:
        solution = local_solve(
            LocalProblem(
                control=self.visible_signals(),
                prev_profile=self.published,
                bounds=self.bounds,
                energy_kwh=self.energy,
                dt_hours=self.grid.dt_hours,
            )
        )
        return solution.profile

    def check_published(self):
        """Published profiles respect bounds and deliver their demand."""
        if not self.bounds.contains(self.published):
            raise ConstraintViolation("published profile out of its rate bounds")
        delivered = self.published.sum(dim=-1) * self.grid.dt_hours
        slack = ENERGY_RTOL * self.energy.abs().clamp(min=1.0)
        missed = ((delivered - self.energy).abs() > slack).tolist()
        if any(missed):
            evse_ids = [agent.evse_id for agent, m in zip(self.agents, missed) if m]
            raise ConstraintViolation(
                f"published profiles of {evse_ids} miss their energy demand"
            )

    def run(self) -> ScheduleResult:
        """Iterate until the control signal settles or the budget runs out."""
        config = self.config
        norm = norms[config.norm]
        trace: List[IterationTrace] = []
        converged = False
        fresh = False
        iteration = 0
        for iteration in range(config.max_iters):
            self.candidate = self.solve_locally()

            profiles_updated = iteration % config.v == 0
            if profiles_updated:
                self.published = self.candidate
                self.check_published()
                fresh = True

            signal_updated = iteration % config.u == 0
            control_delta = None
            if signal_updated:
                control = self.control_signal()
                control_delta = norm(control - self.signals[-1])
                self.signals.append(control)

            load = total_load(self.baseload, self.published)
            step = IterationTrace(
                iteration=iteration,
                control_delta=control_delta,
                objective=flatness_objective(self.baseload, self.published),
                peak_kw=float(load.max()),
                signal_updated=signal_updated,
                profiles_updated=profiles_updated,
            )
            trace.append(step)
            if self.on_iteration is not None:
                self.on_iteration(step)

            if signal_updated:
                if fresh and control_delta <= config.epsilon:
                    converged = True
                    break
                fresh = False

        iterations = iteration + 1
        if converged:
            logger.info("Converged after %d iterations", iterations)
        else:
            logger.warning(
                "No convergence within %d iterations (last change %s)",
                iterations,
                next(
                    (s.control_delta for s in reversed(trace) if s.signal_updated),
                    None,
                ),
            )

        for row, agent in enumerate(self.agents):
            agent.published_profile = self.published[row].clone()
            agent.candidate_profile = self.candidate[row].clone()

        return ScheduleResult(
            evse_ids=[agent.evse_id for agent in self.agents],
            baseload=self.baseload,
            profiles=self.published.clone(),
            total_load=total_load(self.baseload, self.published),
            control=self.signals[-1],
            converged=converged,
            iterations=iterations,
            trace=trace,
            metrics=compute_metrics(self.baseload, self.published),
            uncoordinated_metrics=compute_metrics(
                self.baseload, uncoordinated_profiles(self.agents, self.grid)
            ),
            config=config,
        )


def run(
    baseload: torch.Tensor,
    agents: Sequence[EvseAgentState],
    grid: TimeGrid,
    config: RunConfig,
    on_iteration: Optional[Callable[[IterationTrace], None]] = None,
) -> ScheduleResult:
    """Run the distributed charging algorithm on a fixed fleet."""
    return Coordinator(
        baseload, agents, grid, config, on_iteration=on_iteration
    ).run()
