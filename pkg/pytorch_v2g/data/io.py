"""Input and artifact files.

.. baseload.csv   slot,baseload_kw            exactly T rows in slot order
   sessions.csv   user_id,start,end,energy_kwh (ISO-8601 local timestamps)
   fleet.toml     [[evse]] evse_id, user_id, p_max_kw, d_max_kw, lag
   config.toml    [grid] horizon_start, slot_count, slot_minutes
                  [run] lambda, epsilon, u, v, max_iters, norm
   forecasts.toml [[forecast]] ..., warnings, notes
   schedule.csv   slot,<evse_id>...
   trace.csv      iteration,control_delta,objective,peak_kw,signal_updated,
                  profiles_updated
   report.toml    converged, iterations, [metrics], [config], [grid], warnings,
                  [series]
"""
import logging
import math

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import (
    Any,
    Dict,
    List,
    Mapping,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import pandas as pd
import tomli_w
import torch

from pytorch_v2g.exceptions import (
    ArtifactWriteError,
    DataFormatError,
    InvalidInputError,
)
from pytorch_v2g.modeling.behavior import BehaviorForecast, SessionRecord
from pytorch_v2g.modeling.coordinator import EvseSpec, RunConfig, ScheduleResult
from pytorch_v2g.modeling.grid import DTYPE, TimeGrid, slot_vector

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

BASELOAD_COLUMNS = ["slot", "baseload_kw"]
SESSION_COLUMNS = ["user_id", "start", "end", "energy_kwh"]
TRACE_COLUMNS = [
    "iteration",
    "control_delta",
    "objective",
    "peak_kw",
    "signal_updated",
    "profiles_updated",
]
SCHEDULE_FILE = "schedule.csv"
TRACE_FILE = "trace.csv"
REPORT_FILE = "report.toml"


def _read_table(path: PathLike, columns: Sequence[str]) -> pd.DataFrame:
    """Read a CSV table as strings and check its header."""
    path = Path(path)
    if not path.is_file():
        raise DataFormatError("file not found", path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        return pd.DataFrame(columns=list(columns))
    except (pd.errors.ParserError, UnicodeDecodeError) as error:
        raise DataFormatError(f"cannot parse CSV: {error}", path) from error
    if list(frame.columns) != list(columns):
        raise DataFormatError(
            f"expected header {','.join(columns)}, got {','.join(frame.columns)}", path
        )
    return frame


def _parse_float(value: str, name: str, path: Path, row: int) -> float:
    try:
        number = float(value)
    except ValueError:
        raise DataFormatError(f"{name} {value!r} is not a number", path, row) from None
    if not math.isfinite(number):
        raise DataFormatError(f"{name} {value!r} is not finite", path, row)
    return number


def _parse_timestamp(value: str, name: str, path: Path, row: int) -> datetime:
    try:
        timestamp = pd.Timestamp(value.strip())
    except (ValueError, TypeError):
        timestamp = pd.NaT
    if pd.isna(timestamp):
        raise DataFormatError(
            f"{name} {value!r} is not an ISO-8601 timestamp", path, row
        )
    return timestamp.to_pydatetime()


def read_baseload(path: PathLike, grid: TimeGrid) -> torch.Tensor:
    """Read the day-ahead baseload profile (kW per slot)."""
    path = Path(path)
    frame = _read_table(path, BASELOAD_COLUMNS)
    values = []
    for row, (slot, value) in enumerate(frame.itertuples(index=False), start=1):
        if slot.strip() != str(row - 1):
            raise DataFormatError(f"expected slot {row - 1}, got {slot!r}", path, row)
        values.append(_parse_float(value, "baseload_kw", path, row))
    try:
        return slot_vector(values, grid)
    except InvalidInputError as error:
        raise DataFormatError(str(error), path) from None


def write_baseload(baseload: torch.Tensor, path: PathLike):
    frame = pd.DataFrame(
        {"slot": range(baseload.shape[0]), "baseload_kw": baseload.tolist()}
    )
    frame.to_csv(path, index=False)


class SessionHistory(NamedTuple):
    sessions: List[SessionRecord]
    dropped_overnight: int = 0
    dropped_weekend: int = 0


def read_sessions(path: PathLike, weekday_only: bool = False) -> SessionHistory:
    """Read historical charging sessions.

    Sessions spanning midnight are dropped, as are weekend sessions when
    `weekday_only` is set; both are counted.
    """
    path = Path(path)
    frame = _read_table(path, SESSION_COLUMNS)
    sessions = []
    dropped_overnight = 0
    dropped_weekend = 0
    for row, (user_id, start, end, energy) in enumerate(
        frame.itertuples(index=False), start=1
    ):
        if not user_id.strip():
            raise DataFormatError("empty user_id", path, row)
        start_time = _parse_timestamp(start, "start", path, row)
        end_time = _parse_timestamp(end, "end", path, row)
        energy_kwh = _parse_float(energy, "energy_kwh", path, row)
        if energy_kwh < 0:
            raise DataFormatError(f"negative energy_kwh {energy_kwh}", path, row)
        if not end_time > start_time:
            raise DataFormatError(
                f"session ends ({end}) before it starts ({start})", path, row
            )
        session = SessionRecord(
            user_id=user_id.strip(),
            start=start_time,
            end=end_time,
            energy_kwh=energy_kwh,
        )
        if session.spans_midnight:
            dropped_overnight += 1
            continue
        if weekday_only and session.start.weekday() >= 5:
            dropped_weekend += 1
            continue
        sessions.append(session)
    if dropped_overnight:
        logger.warning(
            "%s: dropped %d sessions spanning midnight", path, dropped_overnight
        )
    if dropped_weekend:
        logger.info("%s: dropped %d weekend sessions", path, dropped_weekend)
    return SessionHistory(
        sessions=sessions,
        dropped_overnight=dropped_overnight,
        dropped_weekend=dropped_weekend,
    )


def write_sessions(sessions: Sequence[SessionRecord], path: PathLike):
    frame = pd.DataFrame(
        [
            {
                "user_id": session.user_id,
                "start": session.start.isoformat(),
                "end": session.end.isoformat(),
                "energy_kwh": session.energy_kwh,
            }
            for session in sessions
        ],
        columns=SESSION_COLUMNS,
    )
    frame.to_csv(path, index=False)


def _read_toml(path: PathLike) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise DataFormatError("file not found", path)
    try:
        with path.open("rb") as file:
            return tomllib.load(file)
    except tomllib.TOMLDecodeError as error:
        raise DataFormatError(f"cannot parse TOML: {error}", path) from error


def _write_toml(document: Mapping[str, Any], path: PathLike):
    with Path(path).open("wb") as file:
        tomli_w.dump(document, file)


def read_fleet(path: PathLike) -> List[EvseSpec]:
    """Read EVSE specifications; evse_ids must be unique."""
    path = Path(path)
    document = _read_toml(path)
    fleet = []
    for row, entry in enumerate(document.get("evse", []), start=1):
        try:
            fleet.append(
                EvseSpec(
                    evse_id=str(entry["evse_id"]),
                    user_id=str(entry["user_id"]),
                    p_max_kw=float(entry["p_max_kw"]),
                    d_max_kw=float(entry["d_max_kw"]),
                    lag=int(entry.get("lag", 0)),
                )
            )
        except KeyError as error:
            raise DataFormatError(f"missing key {error}", path, row) from None
        except (TypeError, ValueError) as error:
            raise DataFormatError(str(error), path, row) from None
    evse_ids = [evse.evse_id for evse in fleet]
    duplicates = sorted({evse_id for evse_id in evse_ids if evse_ids.count(evse_id) > 1})
    if duplicates:
        raise DataFormatError(f"duplicate evse_id {duplicates}", path)
    return fleet


def write_fleet(fleet: Sequence[EvseSpec], path: PathLike):
    _write_toml(
        {
            "evse": [
                {
                    "evse_id": evse.evse_id,
                    "user_id": evse.user_id,
                    "p_max_kw": evse.p_max_kw,
                    "d_max_kw": evse.d_max_kw,
                    "lag": evse.lag,
                }
                for evse in fleet
            ]
        },
        path,
    )


def grid_to_dict(grid: TimeGrid) -> Dict[str, Any]:
    return {
        "horizon_start": grid.horizon_start,
        "slot_count": grid.slot_count,
        "slot_minutes": grid.slot_minutes,
    }


def read_config(path: PathLike) -> Tuple[TimeGrid, RunConfig]:
    """Read the horizon grid and run parameters."""
    path = Path(path)
    document = _read_toml(path)
    try:
        grid_values = document["grid"]
        grid = TimeGrid(
            horizon_start=grid_values["horizon_start"],
            slot_count=int(grid_values["slot_count"]),
            slot_minutes=int(grid_values["slot_minutes"]),
        )
        config = RunConfig.from_dict(document.get("run", {}))
    except KeyError as error:
        raise DataFormatError(f"missing key {error}", path) from None
    except (TypeError, ValueError) as error:
        raise DataFormatError(str(error), path) from None
    if not isinstance(grid.horizon_start, datetime):
        raise DataFormatError("grid.horizon_start must be a local datetime", path)
    return grid, config


def write_config(grid: TimeGrid, config: RunConfig, path: PathLike):
    _write_toml({"grid": grid_to_dict(grid), "run": config.to_dict()}, path)


def write_forecasts(
    forecasts: Sequence[BehaviorForecast],
    path: PathLike,
    warnings: Sequence[str] = (),
    notes: Sequence[str] = (),
):
    _write_toml(
        {
            "warnings": list(warnings),
            "notes": list(notes),
            "forecast": [
                {
                    "user_id": forecast.user_id,
                    "t_start_pred": forecast.t_start_pred,
                    "t_end_pred": forecast.t_end_pred,
                    "theta": forecast.theta,
                    "energy_pred_kwh": forecast.energy_pred_kwh,
                    "sample_count": forecast.sample_count,
                    "valid": forecast.valid,
                }
                for forecast in forecasts
            ],
        },
        path,
    )


def read_forecasts(path: PathLike) -> Dict[str, BehaviorForecast]:
    path = Path(path)
    document = _read_toml(path)
    forecasts = {}
    for row, entry in enumerate(document.get("forecast", []), start=1):
        try:
            valid = entry.get("valid", True)
            if not isinstance(valid, bool):
                raise TypeError(f"valid must be a boolean, got {valid!r}")
            forecast = BehaviorForecast(
                user_id=str(entry["user_id"]),
                t_start_pred=float(entry["t_start_pred"]),
                t_end_pred=float(entry["t_end_pred"]),
                theta=float(entry["theta"]),
                energy_pred_kwh=float(entry["energy_pred_kwh"]),
                sample_count=int(entry["sample_count"]),
                valid=valid,
            )
        except KeyError as error:
            raise DataFormatError(f"missing key {error}", path, row) from None
        except (AttributeError, TypeError, ValueError) as error:
            raise DataFormatError(str(error), path, row) from None
        forecasts[forecast.user_id] = forecast
    return forecasts


@dataclass(frozen=True)
class RunArtifacts:
    schedule_path: Path
    trace_path: Path
    report_path: Path
    schedule: pd.DataFrame
    trace: pd.DataFrame
    report: Dict[str, Any]


def schedule_frame(result: ScheduleResult) -> pd.DataFrame:
    frame = pd.DataFrame(
        result.profiles.T.numpy(), columns=result.evse_ids, dtype="float64"
    )
    frame.insert(0, "slot", range(frame.shape[0]))
    return frame


def trace_frame(result: ScheduleResult) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "iteration": step.iteration,
                "control_delta": step.control_delta,
                "objective": step.objective,
                "peak_kw": step.peak_kw,
                "signal_updated": step.signal_updated,
                "profiles_updated": step.profiles_updated,
            }
            for step in result.trace
        ],
        columns=TRACE_COLUMNS,
    )


def report_document(
    result: ScheduleResult, grid: Optional[TimeGrid] = None
) -> Dict[str, Any]:
    metrics = result.metrics.to_dict()
    metrics["uncoordinated_peak_kw"] = result.uncoordinated_metrics.peak_after_kw
    metrics["uncoordinated_variance"] = result.uncoordinated_metrics.variance_after
    document = {
        "converged": result.converged,
        "iterations": result.iterations,
        "n_evse": len(result.evse_ids),
        "metrics": metrics,
        "config": result.config.to_dict(),
        "warnings": list(result.warnings),
        "series": {"baseload_kw": result.baseload.tolist()},
    }
    if grid is not None:
        document["grid"] = grid_to_dict(grid)
    return document


def write_artifacts(
    result: ScheduleResult, out_dir: PathLike, grid: Optional[TimeGrid] = None
) -> RunArtifacts:
    """Write schedule, trace and report files of a run."""
    out_dir = Path(out_dir)
    artifacts = RunArtifacts(
        schedule_path=out_dir / SCHEDULE_FILE,
        trace_path=out_dir / TRACE_FILE,
        report_path=out_dir / REPORT_FILE,
        schedule=schedule_frame(result),
        trace=trace_frame(result),
        report=report_document(result, grid),
    )
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        artifacts.schedule.to_csv(artifacts.schedule_path, index=False)
        artifacts.trace.to_csv(artifacts.trace_path, index=False)
        _write_toml(artifacts.report, artifacts.report_path)
    except OSError as error:
        raise ArtifactWriteError(
            f"cannot write artifacts to {out_dir}: {error.strerror or error}"
        ) from error
    return artifacts


def read_schedule(path: PathLike) -> Tuple[List[str], torch.Tensor]:
    """Read a schedule table back into evse_ids and an (N x T) profile tensor."""
    path = Path(path)
    if not path.is_file():
        raise DataFormatError("file not found", path)
    frame = pd.read_csv(path, float_precision="round_trip")
    if frame.columns[0] != "slot":
        raise DataFormatError("first column must be slot", path)
    evse_ids = [str(column) for column in frame.columns[1:]]
    profiles = torch.tensor(
        frame[frame.columns[1:]].to_numpy(dtype="float64").T, dtype=DTYPE
    )
    return evse_ids, profiles.reshape(len(evse_ids), len(frame))


def read_trace(path: PathLike) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise DataFormatError("file not found", path)
    return pd.read_csv(path, float_precision="round_trip")


def read_report(path: PathLike) -> Dict[str, Any]:
    return _read_toml(path)


def read_artifacts(out_dir: PathLike) -> RunArtifacts:
    """Load the artifacts of a finished run."""
    out_dir = Path(out_dir)
    missing = [
        name
        for name in (SCHEDULE_FILE, TRACE_FILE, REPORT_FILE)
        if not (out_dir / name).is_file()
    ]
    if missing:
        raise DataFormatError(
            f"missing artifacts {missing}; run the schedule command first", out_dir
        )
    try:
        schedule = pd.read_csv(out_dir / SCHEDULE_FILE, float_precision="round_trip")
        trace = read_trace(out_dir / TRACE_FILE)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as error:
        raise DataFormatError(f"cannot parse artifacts: {error}", out_dir) from error
    return RunArtifacts(
        schedule_path=out_dir / SCHEDULE_FILE,
        trace_path=out_dir / TRACE_FILE,
        report_path=out_dir / REPORT_FILE,
        schedule=schedule,
        trace=trace,
        report=read_report(out_dir / REPORT_FILE),
    )


def write_series(frame: pd.DataFrame, path: PathLike):
    try:
        frame.to_csv(path, index=False)
    except OSError as error:
        raise ArtifactWriteError(f"cannot write {path}: {error}") from error
