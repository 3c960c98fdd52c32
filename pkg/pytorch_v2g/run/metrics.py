"""Load flatness objective and peak / variance metrics."""
from dataclasses import asdict, dataclass
from typing import Dict

import torch

from pytorch_v2g.exceptions import InvalidInputError


def total_load(baseload: torch.Tensor, profiles: torch.Tensor) -> torch.Tensor:
    """B(t) + sum_n p_n(t); profiles is (N x T), N may be 0."""
    if profiles.shape[-1] != baseload.shape[-1]:
        raise InvalidInputError(
            f"profiles cover {profiles.shape[-1]} slots, "
            f"baseload {baseload.shape[-1]}"
        )
    return baseload + profiles.reshape(-1, baseload.shape[-1]).sum(dim=0)


def flatness_objective(baseload: torch.Tensor, profiles: torch.Tensor) -> float:
    """sum_t (B(t) + sum_n p_n(t))^2"""
    return float((total_load(baseload, profiles) ** 2).sum())


def variance(load: torch.Tensor) -> float:
    """Population variance over all slots."""
    return float(((load - load.mean()) ** 2).mean())


@dataclass(frozen=True)
class LoadMetrics:
    peak_before_kw: float
    peak_after_kw: float
    variance_before: float
    variance_after: float
    peak_reduction: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def peak_reduction(peak_before: float, peak_after: float) -> float:
    """Fraction of the original peak removed, (before - after) / before.

    A zero original peak reports no reduction.
    """
    if peak_before == 0:
        return 0.0
    return (peak_before - peak_after) / peak_before


def compute_metrics(baseload: torch.Tensor, profiles: torch.Tensor) -> LoadMetrics:
    """Peak and variance of the load before and after adding EV profiles."""
    load = total_load(baseload, profiles)
    peak_before = float(baseload.max())
    peak_after = float(load.max())
    return LoadMetrics(
        peak_before_kw=peak_before,
        peak_after_kw=peak_after,
        variance_before=variance(baseload),
        variance_after=variance(load),
        peak_reduction=peak_reduction(peak_before, peak_after),
    )
