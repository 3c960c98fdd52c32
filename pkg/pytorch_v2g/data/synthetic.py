"""Seeded synthetic baseload, session history and fleet."""
from dataclasses import dataclass
from datetime import datetime, timedelta
from typing import List, Optional

import torch

from pytorch_v2g.exceptions import InvalidInputError
from pytorch_v2g.modeling.behavior import SessionRecord, minutes_since_midnight
from pytorch_v2g.modeling.coordinator import EvseSpec, RunConfig
from pytorch_v2g.modeling.grid import DTYPE, TimeGrid

DEFAULT_HORIZON_START = datetime(2016, 9, 20, 7, 0)


@dataclass(frozen=True)
class LoadShape:
    """Baseload with a single gaussian peak and valley over a flat level.

    Positions and widths are fractions of the horizon.
    """

    base_kw: float = 100.0
    peak_kw: float = 40.0
    peak_at: float = 0.37
    peak_width: float = 0.05
    valley_kw: float = 30.0
    valley_at: float = 0.69
    valley_width: float = 0.07
    noise_kw: float = 1.0

    def __post_init__(self):
        for name in ("peak_at", "valley_at"):
            if not 0 <= getattr(self, name) <= 1:
                raise InvalidInputError(f"{name} must be within [0, 1]")
        for name in ("peak_width", "valley_width"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"{name} must be > 0")
        for name in ("peak_kw", "valley_kw", "noise_kw"):
            if getattr(self, name) < 0:
                raise InvalidInputError(f"{name} must be >= 0")


@dataclass(frozen=True)
class UserPattern:
    """Routine plug-in behavior of synthetic users (fractions of the horizon)."""

    start_from: float = 0.05
    start_to: float = 0.2
    stay_from: float = 0.62
    stay_to: float = 0.78
    jitter_minutes: float = 15.0
    theta_from: float = 0.3
    theta_to: float = 0.6
    energy_noise: float = 0.05


@dataclass
class SyntheticInstance:
    grid: TimeGrid
    baseload: torch.Tensor
    sessions: List[SessionRecord]
    fleet: List[EvseSpec]
    config: RunConfig


def _bump(grid: TimeGrid, at: float, width: float) -> torch.Tensor:
    slots = torch.arange(grid.slot_count, dtype=DTYPE)
    center = at * (grid.slot_count - 1)
    return torch.exp(-0.5 * ((slots - center) / (width * grid.slot_count)) ** 2)


def synth_baseload(
    grid: TimeGrid, shape: LoadShape, generator: torch.Generator
) -> torch.Tensor:
    noise = torch.randn(grid.slot_count, generator=generator, dtype=DTYPE)
    baseload = (
        shape.base_kw
        + shape.peak_kw * _bump(grid, shape.peak_at, shape.peak_width)
        - shape.valley_kw * _bump(grid, shape.valley_at, shape.valley_width)
        + shape.noise_kw * noise
    )
    return torch.round(baseload, decimals=3)


def _uniform(generator: torch.Generator, low: float, high: float) -> float:
    return low + (high - low) * float(
        torch.rand(1, generator=generator, dtype=DTYPE)
    )


def synth_sessions(
    grid: TimeGrid,
    n_users: int,
    sessions_per_user: int,
    pattern: UserPattern,
    generator: torch.Generator,
) -> List[SessionRecord]:
    """Daily sessions of every user over the days preceding the horizon."""
    horizon_minutes = grid.slot_count * grid.slot_minutes
    first_minute = minutes_since_midnight(grid.horizon_start)
    last_minute = min(first_minute + horizon_minutes, 24 * 60 - 1)
    sessions = []
    for user in range(1, n_users + 1):
        start = first_minute + horizon_minutes * _uniform(
            generator, pattern.start_from, pattern.start_to
        )
        stay = horizon_minutes * _uniform(generator, pattern.stay_from, pattern.stay_to)
        theta = _uniform(generator, pattern.theta_from, pattern.theta_to)
        for day in range(sessions_per_user, 0, -1):
            jitter = pattern.jitter_minutes * torch.randn(
                2, generator=generator, dtype=DTYPE
            )
            noise = float(torch.randn(1, generator=generator, dtype=DTYPE))
            plug_in = round(min(max(start + float(jitter[0]), 0), last_minute - 30))
            plug_out = round(
                min(max(start + stay + float(jitter[1]), plug_in + 30), last_minute)
            )
            midnight = datetime.combine(
                (grid.horizon_start - timedelta(days=day)).date(), datetime.min.time()
            )
            stay_hours = (plug_out - plug_in) / 60
            sessions.append(
                SessionRecord(
                    user_id=f"user-{user:02d}",
                    start=midnight + timedelta(minutes=plug_in),
                    end=midnight + timedelta(minutes=plug_out),
                    energy_kwh=round(
                        max(theta * stay_hours * (1 + pattern.energy_noise * noise), 0),
                        3,
                    ),
                )
            )
    return sessions


def synth_fleet(n_users: int, p_max_kw: float, d_max_kw: float) -> List[EvseSpec]:
    return [
        EvseSpec(
            evse_id=f"evse-{user:02d}",
            user_id=f"user-{user:02d}",
            p_max_kw=p_max_kw,
            d_max_kw=d_max_kw,
        )
        for user in range(1, n_users + 1)
    ]


def generate(
    seed: int,
    n_users: int = 30,
    t_slots: int = 60,
    slot_minutes: int = 12,
    horizon_start: datetime = DEFAULT_HORIZON_START,
    sessions_per_user: int = 20,
    shape: Optional[LoadShape] = None,
    pattern: Optional[UserPattern] = None,
    p_max_kw: float = 6.6,
    d_max_kw: float = -6.6,
) -> SyntheticInstance:
    """Generate a reproducible scheduling instance.

    :param seed: random seed; equal seeds give identical instances
    :param n_users: number of EV users (one EVSE each)
    :param t_slots: number of slots in the horizon
    :param slot_minutes: slot duration
    :param horizon_start: first instant of the horizon
    :param sessions_per_user: historical sessions per user (one per day)
    :param shape: baseload peak / valley shape
    :param pattern: user plug-in routine
    :param p_max_kw: maximum charging rate of every EVSE
    :param d_max_kw: maximum V2G discharging rate of every EVSE (negative)
    """
    if n_users < 1:
        raise InvalidInputError(f"n_users must be >= 1, got {n_users}")
    if sessions_per_user < 1:
        raise InvalidInputError(
            f"sessions_per_user must be >= 1, got {sessions_per_user}"
        )
    grid = TimeGrid(
        horizon_start=horizon_start, slot_count=t_slots, slot_minutes=slot_minutes
    )
    if grid.horizon_end > datetime.combine(
        horizon_start.date() + timedelta(days=1), datetime.min.time()
    ):
        raise InvalidInputError("synthetic horizon must end before midnight")
    generator = torch.Generator().manual_seed(seed)
    baseload = synth_baseload(grid, shape or LoadShape(), generator)
    sessions = synth_sessions(
        grid, n_users, sessions_per_user, pattern or UserPattern(), generator
    )
    return SyntheticInstance(
        grid=grid,
        baseload=baseload,
        sessions=sessions,
        fleet=synth_fleet(n_users, p_max_kw, d_max_kw),
        config=RunConfig(),
    )
