"""Discretized scheduling horizon and per-EV rate bounds."""
from dataclasses import dataclass
from datetime import datetime, time, timedelta
from typing import Iterable, List, Union

import torch

from pytorch_v2g.exceptions import InvalidInputError

DTYPE = torch.float64


@dataclass(frozen=True)
class TimeGrid:
    """Horizon of `slot_count` contiguous slots, `slot_minutes` each.

    .. slot k covers [horizon_start + k * dt, horizon_start + (k + 1) * dt)
    """

    horizon_start: datetime
    slot_count: int
    slot_minutes: int

    def __post_init__(self):
        if self.slot_count < 1:
            raise InvalidInputError(f"slot_count must be >= 1, got {self.slot_count}")
        if self.slot_minutes < 1:
            raise InvalidInputError(
                f"slot_minutes must be >= 1, got {self.slot_minutes}"
            )

    @property
    def dt_hours(self) -> float:
        """Slot duration in hours, used for all energy arithmetic."""
        return self.slot_minutes / 60

    @property
    def slot_delta(self) -> timedelta:
        return timedelta(minutes=self.slot_minutes)

    @property
    def horizon_end(self) -> datetime:
        return self.horizon_start + self.slot_count * self.slot_delta

    def slot_midpoint(self, k: int) -> datetime:
        """Wall-clock instant in the middle of slot k."""
        if not 0 <= k < self.slot_count:
            raise IndexError(
                f"slot index {k} out of range for {self.slot_count} slots"
            )
        return self.horizon_start + (k + 0.5) * self.slot_delta

    def midpoints(self) -> List[datetime]:
        return [self.slot_midpoint(k) for k in range(self.slot_count)]

    def at_minutes(self, minutes: float) -> datetime:
        """Instant `minutes` after midnight of the horizon's first day."""
        midnight = datetime.combine(
            self.horizon_start.date(), time(), tzinfo=self.horizon_start.tzinfo
        )
        return midnight + timedelta(minutes=minutes)

    def zeros(self, *batch: int) -> torch.Tensor:
        return torch.zeros(*batch, self.slot_count, dtype=DTYPE)


def slot_vector(
    values: Union[torch.Tensor, Iterable[float]], grid: TimeGrid
) -> torch.Tensor:
    """Validate per-slot values against the grid and return a float64 tensor."""
    vector = torch.as_tensor(values, dtype=DTYPE)
    if vector.dim() != 1 or vector.shape[0] != grid.slot_count:
        raise InvalidInputError(
            f"expected {grid.slot_count} slot values, got shape {tuple(vector.shape)}"
        )
    if not torch.isfinite(vector).all():
        raise InvalidInputError("slot values must be finite")
    return vector


@dataclass(frozen=True)
class RateBounds:
    """Per-slot charging rate box; V2G discharge is negative.

    .. lower(t) <= 0 <= upper(t), both 0 where the EV is not plugged in
    """

    lower: torch.Tensor
    upper: torch.Tensor
    available: torch.Tensor

    @property
    def n_available(self) -> int:
        return int(self.available.sum())

    def capacity_kwh(self, dt_hours: float):
        """Minimum and maximum deliverable energy over the window."""
        return (
            float(self.lower.sum(dim=-1)) * dt_hours,
            float(self.upper.sum(dim=-1)) * dt_hours,
        )

    def contains(self, profile: torch.Tensor) -> bool:
        return bool(((profile >= self.lower) & (profile <= self.upper)).all())


def build_bounds(
    grid: TimeGrid,
    window_start: datetime,
    window_end: datetime,
    p_max: float,
    d_max: float,
) -> RateBounds:
    """Build rate bounds for a plug-in window [window_start, window_end).

    A slot is available iff its midpoint falls inside the window.

    :param grid: scheduling horizon
    :param window_start: predicted plug-in instant
    :param window_end: predicted departure instant
    :param p_max: maximum charging rate (kW, >= 0)
    :param d_max: maximum V2G discharging rate (kW, <= 0)
    :return: rate bounds
    """
    if p_max < 0:
        raise InvalidInputError(f"p_max must be >= 0, got {p_max}")
    if d_max > 0:
        raise InvalidInputError(f"d_max must be <= 0, got {d_max}")
    available = torch.tensor(
        [window_start <= midpoint < window_end for midpoint in grid.midpoints()],
        dtype=torch.bool,
    )
    zeros = grid.zeros()
    upper = torch.where(available, zeros + p_max, zeros)
    lower = torch.where(available, zeros + d_max, zeros)
    return RateBounds(lower=lower, upper=upper, available=available)
