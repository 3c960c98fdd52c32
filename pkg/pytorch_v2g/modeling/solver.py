"""Local EVSE charging profile optimization."""
from dataclasses import dataclass

import torch

from pytorch_v2g.exceptions import InfeasibleDemand, InvalidInputError
from pytorch_v2g.modeling.grid import DTYPE, RateBounds

ENERGY_RTOL = 1e-9
BRACKET_WIDTH = 1e-12
MAX_BISECTIONS = 200


@dataclass(frozen=True)
class LocalProblem:
    """Proximal step of a single EVSE (or a batch of them).

    .. minimize  sum_t c(t) p(t) + 1/2 ||p - p_prev||^2
       s.t.      lower(t) <= p(t) <= upper(t),  sum_t p(t) dt = E'

    All tensors share the last (slot) dimension; leading dimensions are
    treated as a batch of independent problems. `control` broadcasts.
    """

    control: torch.Tensor
    prev_profile: torch.Tensor
    bounds: RateBounds
    energy_kwh: torch.Tensor
    dt_hours: float


@dataclass(frozen=True)
class LocalSolution:
    profile: torch.Tensor
    multiplier: torch.Tensor
    objective: torch.Tensor


def local_objective(
    profile: torch.Tensor, control: torch.Tensor, prev_profile: torch.Tensor
) -> torch.Tensor:
    """sum_t c(t) p(t) + 1/2 sum_t (p(t) - p_prev(t))^2 over the last dimension."""
    if profile.shape[-1] != control.shape[-1] or (
        profile.shape[-1] != prev_profile.shape[-1]
    ):
        raise InvalidInputError(
            f"slot count mismatch: profile {tuple(profile.shape)}, "
            f"control {tuple(control.shape)}, previous {tuple(prev_profile.shape)}"
        )
    return (control * profile).sum(dim=-1) + 0.5 * (
        (profile - prev_profile) ** 2
    ).sum(dim=-1)


class ClipProfile:
    """Profile as a function of the energy multiplier.

    .. p(t; mu) = clip(p_prev(t) - c(t) + mu * dt, lower(t), upper(t))
       g(mu) = sum_t p(t; mu) dt - E'   (nondecreasing in mu)
    """

    def __init__(self, problem: LocalProblem):
        self.dt = problem.dt_hours
        self.lower = problem.bounds.lower
        self.upper = problem.bounds.upper
        self.available = problem.bounds.available
        self.energy = problem.energy_kwh
        self.base = problem.prev_profile - problem.control

    def __call__(self, mu: torch.Tensor) -> torch.Tensor:
        unclipped = self.base + mu.unsqueeze(-1) * self.dt
        profile = torch.minimum(torch.maximum(unclipped, self.lower), self.upper)
        return torch.where(self.available, profile, torch.zeros_like(profile))

    def residual(self, profile: torch.Tensor) -> torch.Tensor:
        return profile.sum(dim=-1) * self.dt - self.energy

    def bracket(self):
        """Multipliers pinning every available slot to lower / upper bound."""
        inf = torch.tensor(float("inf"), dtype=DTYPE)
        mu_lo = torch.where(self.available, (self.lower - self.base) / self.dt, inf)
        mu_hi = torch.where(self.available, (self.upper - self.base) / self.dt, -inf)
        mu_lo = mu_lo.amin(dim=-1)
        mu_hi = mu_hi.amax(dim=-1)
        # no available slot: any multiplier gives the zero profile
        empty = ~self.available.any(dim=-1)
        zero = torch.zeros_like(mu_lo)
        return torch.where(empty, zero, mu_lo), torch.where(empty, zero, mu_hi)

    def polish(self, mu: torch.Tensor, residual: torch.Tensor) -> torch.Tensor:
        """Exact multiplier on the current active set (g is linear there)."""
        unclipped = self.base + mu.unsqueeze(-1) * self.dt
        free = self.available & (unclipped > self.lower) & (unclipped < self.upper)
        n_free = free.sum(dim=-1).to(DTYPE)
        step = residual / (n_free.clamp(min=1.0) * self.dt * self.dt)
        return torch.where(n_free > 0, mu - step, mu)


def _check_problem(problem: LocalProblem):
    tensors = {
        "control": problem.control,
        "previous profile": problem.prev_profile,
        "lower bound": problem.bounds.lower,
        "upper bound": problem.bounds.upper,
        "energy": problem.energy_kwh,
    }
    for name, tensor in tensors.items():
        if not torch.isfinite(tensor).all():
            raise InvalidInputError(f"{name} must be finite")
    if not problem.dt_hours > 0:
        raise InvalidInputError(f"slot duration must be > 0, got {problem.dt_hours}")
    lowest, highest = (
        problem.bounds.lower.sum(dim=-1) * problem.dt_hours,
        problem.bounds.upper.sum(dim=-1) * problem.dt_hours,
    )
    energy = problem.energy_kwh
    slack = ENERGY_RTOL * energy.abs().clamp(min=1.0)
    infeasible = (energy < lowest - slack) | (energy > highest + slack)
    if infeasible.any():
        index = torch.nonzero(infeasible.reshape(-1))[0].item()
        raise InfeasibleDemand(
            f"demand {energy.reshape(-1)[index].item():.6g} kWh outside window "
            f"capacity [{lowest.reshape(-1)[index].item():.6g}, "
            f"{highest.reshape(-1)[index].item():.6g}] kWh"
        )


def local_solve(problem: LocalProblem) -> LocalSolution:
    """Minimize the local EVSE objective by bisection on the energy multiplier.

    :param problem: local problem (possibly batched)
    :return: minimizer, its multiplier and objective value
    """
    energy = torch.as_tensor(problem.energy_kwh, dtype=DTYPE)
    problem = LocalProblem(
        control=problem.control,
        prev_profile=problem.prev_profile,
        bounds=problem.bounds,
        energy_kwh=energy,
        dt_hours=problem.dt_hours,
    )
    _check_problem(problem)

    clip_profile = ClipProfile(problem)
    tolerance = ENERGY_RTOL * energy.abs().clamp(min=1.0)
    mu_lo, mu_hi = clip_profile.bracket()
    mu = 0.5 * (mu_lo + mu_hi)
    for _ in range(MAX_BISECTIONS):
        residual = clip_profile.residual(clip_profile(mu))
        done = (
            (residual.abs() <= tolerance)
            | (mu_hi - mu_lo <= BRACKET_WIDTH)
            | (mu == mu_lo)
            | (mu == mu_hi)
        )
        if done.all():
            break
        mu_lo = torch.where(~done & (residual < 0), mu, mu_lo)
        mu_hi = torch.where(~done & (residual > 0), mu, mu_hi)
        mu = torch.where(done, mu, 0.5 * (mu_lo + mu_hi))

    residual = clip_profile.residual(clip_profile(mu))
    polished = clip_profile.polish(mu, residual)
    polished_residual = clip_profile.residual(clip_profile(polished))
    mu = torch.where(polished_residual.abs() < residual.abs(), polished, mu)

    profile = clip_profile(mu)
    return LocalSolution(
        profile=profile,
        multiplier=mu,
        objective=local_objective(profile, problem.control, problem.prev_profile),
    )
