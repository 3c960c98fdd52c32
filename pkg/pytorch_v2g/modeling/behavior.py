"""EV user charging behavior prediction.

.. window: mean of historical plug-in and departure times (minutes since midnight)
   energy: E_pred = theta * t_stay, theta fitted by least squares through origin
"""
import logging
import math
from dataclasses import dataclass
from datetime import datetime
from itertools import groupby
from typing import Dict, Iterable, List, Sequence, Tuple

import torch

from pytorch_v2g.exceptions import (
    InvalidForecastError,
    InvalidInputError,
    NoDataError,
    SingularModelError,
)
from pytorch_v2g.modeling.grid import DTYPE

logger = logging.getLogger(__name__)


def minutes_since_midnight(instant: datetime) -> float:
    return instant.hour * 60 + instant.minute + instant.second / 60


@dataclass(frozen=True)
class SessionRecord:
    """Single historical charging session."""

    user_id: str
    start: datetime
    end: datetime
    energy_kwh: float

    def __post_init__(self):
        if not self.end > self.start:
            raise InvalidInputError(
                f"session of {self.user_id} ends ({self.end}) before it starts "
                f"({self.start})"
            )
        if not math.isfinite(self.energy_kwh) or self.energy_kwh < 0:
            raise InvalidInputError(
                f"session energy must be finite and >= 0, got {self.energy_kwh}"
            )

    @property
    def duration_hours(self) -> float:
        return (self.end - self.start).total_seconds() / 3600

    @property
    def start_minutes(self) -> float:
        return minutes_since_midnight(self.start)

    @property
    def end_minutes(self) -> float:
        return minutes_since_midnight(self.end)

    @property
    def spans_midnight(self) -> bool:
        return self.end.date() != self.start.date()


@dataclass(frozen=True)
class BehaviorForecast:
    """Predicted charging window and energy demand of a single user."""

    user_id: str
    t_start_pred: float
    t_end_pred: float
    theta: float
    energy_pred_kwh: float
    sample_count: int
    valid: bool = True

    def __post_init__(self):
        for name in ("t_start_pred", "t_end_pred", "theta", "energy_pred_kwh"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise InvalidInputError(f"{name} must be finite, got {value}")
        if self.theta < 0 or self.energy_pred_kwh < 0:
            raise InvalidInputError(
                f"theta and energy must be >= 0, "
                f"got {self.theta} and {self.energy_pred_kwh}"
            )
        if self.sample_count < 1:
            raise InvalidInputError(
                f"sample_count must be >= 1, got {self.sample_count}"
            )
        if self.valid and not self.t_end_pred > self.t_start_pred:
            raise InvalidForecastError(
                f"window [{self.t_start_pred}, {self.t_end_pred}) of a valid forecast "
                "has no duration"
            )

    @property
    def duration_hours(self) -> float:
        return (self.t_end_pred - self.t_start_pred) / 60


def _check_sessions(sessions: Sequence[SessionRecord]):
    if not sessions:
        raise NoDataError("no charging sessions given")
    users = {session.user_id for session in sessions}
    if len(users) > 1:
        raise InvalidInputError(f"sessions of several users given: {sorted(users)}")


def predict_window(sessions: Sequence[SessionRecord]) -> Tuple[float, float]:
    """Mean plug-in and departure times in minutes since midnight."""
    _check_sessions(sessions)
    # canonical order, sums independent of session order
    starts = torch.tensor(sorted(s.start_minutes for s in sessions), dtype=DTYPE)
    ends = torch.tensor(sorted(s.end_minutes for s in sessions), dtype=DTYPE)
    return starts.mean().item(), ends.mean().item()


def fit_through_origin(
    durations: Sequence[float], energies: Sequence[float]
) -> float:
    """Least squares slope of energies over durations with no intercept.

    .. theta = [X^T X]^-1 X^T y with X the (M x 1) column of stay durations
    """
    if len(durations) != len(energies):
        raise InvalidInputError(
            f"{len(durations)} durations given for {len(energies)} energies"
        )
    if not durations:
        raise NoDataError("no samples to fit energy model")
    samples = torch.tensor(sorted(zip(durations, energies)), dtype=DTYPE)
    x, y = samples[:, :1], samples[:, 1:]
    gram = x.T @ x
    if gram.item() == 0.0:
        raise SingularModelError("all stay durations are zero")
    return torch.linalg.solve(gram, x.T @ y).item()


def fit_energy_model(sessions: Sequence[SessionRecord]) -> float:
    """Fit theta (kWh per hour of stay) on a user's session history."""
    _check_sessions(sessions)
    return fit_through_origin(
        [session.duration_hours for session in sessions],
        [session.energy_kwh for session in sessions],
    )


def predict_energy(theta: float, t_start_pred: float, t_end_pred: float) -> float:
    """Predicted energy demand (kWh) over a window given in minutes."""
    if not t_end_pred > t_start_pred:
        raise InvalidForecastError(
            f"predicted window [{t_start_pred}, {t_end_pred}) has no duration"
        )
    if theta < 0:
        raise InvalidInputError(f"theta must be >= 0, got {theta}")
    return theta * (t_end_pred - t_start_pred) / 60


def forecast_user(sessions: Sequence[SessionRecord]) -> BehaviorForecast:
    """Predict window and energy demand of a single user.

    A reversed or empty predicted window yields a forecast marked invalid
    with zero energy instead of raising.
    """
    t_start, t_end = predict_window(sessions)
    theta = fit_energy_model(sessions)
    user_id = sessions[0].user_id
    try:
        energy = predict_energy(theta, t_start, t_end)
    except InvalidForecastError as error:
        logger.warning("Invalid forecast for user %s: %s", user_id, error)
        return BehaviorForecast(
            user_id=user_id,
            t_start_pred=t_start,
            t_end_pred=t_end,
            theta=theta,
            energy_pred_kwh=0.0,
            sample_count=len(sessions),
            valid=False,
        )
    return BehaviorForecast(
        user_id=user_id,
        t_start_pred=t_start,
        t_end_pred=t_end,
        theta=theta,
        energy_pred_kwh=energy,
        sample_count=len(sessions),
    )


def forecast_fleet(sessions: Iterable[SessionRecord]) -> Dict[str, BehaviorForecast]:
    """Forecast every user present in the session history, keyed by user_id."""
    ordered: List[SessionRecord] = sorted(sessions, key=lambda s: s.user_id)
    return {
        user_id: forecast_user(list(user_sessions))
        for user_id, user_sessions in groupby(ordered, key=lambda s: s.user_id)
    }
