"""Common tests tools."""
from datetime import datetime, timedelta
from typing import List, Sequence

import pytest
import torch

from pytorch_v2g.data.synthetic import generate
from pytorch_v2g.modeling.behavior import SessionRecord, forecast_fleet
from pytorch_v2g.modeling.coordinator import EvseAgentState, build_agents
from pytorch_v2g.modeling.grid import DTYPE, TimeGrid, build_bounds

HORIZON_START = datetime(2016, 9, 20, 7, 0)


def make_agent(
    grid: TimeGrid,
    evse_id: str,
    first_slot: int,
    last_slot: int,
    p_max: float,
    d_max: float,
    energy: float,
    lag: int = 0,
) -> EvseAgentState:
    """Agent plugged in from first_slot to last_slot (inclusive)."""
    bounds = build_bounds(
        grid,
        window_start=grid.horizon_start + first_slot * grid.slot_delta,
        window_end=grid.horizon_start + (last_slot + 1) * grid.slot_delta,
        p_max=p_max,
        d_max=d_max,
    )
    return EvseAgentState(
        evse_id=evse_id,
        user_id=f"user-{evse_id}",
        bounds=bounds,
        energy_kwh=energy,
        published_profile=grid.zeros(),
        candidate_profile=grid.zeros(),
        lag=lag,
    )


def make_session(
    start: str, hours: float, energy: float, user_id: str = "user", day: int = 1
) -> SessionRecord:
    """Session starting at HH:MM on the given day of September 2016."""
    hour, minute = (int(part) for part in start.split(":"))
    begin = datetime(2016, 9, day, hour, minute)
    return SessionRecord(
        user_id=user_id,
        start=begin,
        end=begin + timedelta(hours=hours),
        energy_kwh=energy,
    )


def tensor(values: Sequence[float]) -> torch.Tensor:
    return torch.tensor(values, dtype=DTYPE)


@pytest.fixture
def grid():
    """Twelve hour horizon of 60 slots, 12 minutes each."""
    return TimeGrid(horizon_start=HORIZON_START, slot_count=60, slot_minutes=12)


@pytest.fixture
def hourly_grid():
    """Factory of horizons with hour-long slots."""

    def factory(slot_count: int) -> TimeGrid:
        return TimeGrid(
            horizon_start=HORIZON_START, slot_count=slot_count, slot_minutes=60
        )

    return factory


@pytest.fixture(scope="session")
def synthetic_instance():
    """Synthetic instance of 30 users over 60 slots, seed 1."""
    return generate(seed=1, n_users=30, t_slots=60)


@pytest.fixture(scope="session")
def synthetic_forecasts(synthetic_instance):
    return forecast_fleet(synthetic_instance.sessions)


@pytest.fixture
def synthetic_agents(synthetic_instance, synthetic_forecasts):
    """Fresh agents of the synthetic fleet (runs mutate agent state)."""

    def factory(lags: Sequence[int] = ()) -> List[EvseAgentState]:
        agents, _ = build_agents(
            synthetic_forecasts, synthetic_instance.fleet, synthetic_instance.grid
        )
        for agent, lag in zip(agents, lags):
            agent.lag = lag
        return agents

    return factory
