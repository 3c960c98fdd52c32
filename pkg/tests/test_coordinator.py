"""Test distributed charging coordination."""
import random
from typing import List, Sequence

import numpy as np
import pytest
import torch
from scipy.optimize import minimize

from pytorch_v2g.exceptions import (
    ConstraintViolation,
    InfeasibleDemand,
    InvalidInputError,
)
from pytorch_v2g.modeling.behavior import BehaviorForecast
from pytorch_v2g.modeling.coordinator import (
    Coordinator,
    EvseAgentState,
    EvseSpec,
    RunConfig,
    build_agents,
    clamp_demand,
    run,
    uncoordinated_profiles,
    update_control_signal,
)
from pytorch_v2g.modeling.grid import DTYPE, TimeGrid, build_bounds
from pytorch_v2g.modeling.solver import ENERGY_RTOL
from pytorch_v2g.run.metrics import flatness_objective
from tests.conftest import make_agent, tensor


def forecast(user_id: str, t_start: float, t_end: float, energy: float, valid=True):
    return BehaviorForecast(
        user_id=user_id,
        t_start_pred=t_start,
        t_end_pred=t_end,
        theta=0.5,
        energy_pred_kwh=energy,
        sample_count=3,
        valid=valid,
    )


def centralized_optimum(
    baseload: torch.Tensor, agents: Sequence[EvseAgentState], grid: TimeGrid
) -> float:
    """Minimum flatness objective of the joint problem, solved with SLSQP."""
    n_agents, slot_count = len(agents), grid.slot_count
    base = baseload.numpy()

    def objective(x):
        load = base + x.reshape(n_agents, slot_count).sum(axis=0)
        return float((load ** 2).sum())

    def gradient(x):
        load = base + x.reshape(n_agents, slot_count).sum(axis=0)
        return np.tile(2 * load, n_agents)

    bounds = [
        (float(lower), float(upper))
        for agent in agents
        for lower, upper in zip(agent.bounds.lower, agent.bounds.upper)
    ]
    constraints = [
        {
            "type": "eq",
            "fun": lambda x, row=row, energy=agent.energy_kwh: (
                x.reshape(n_agents, slot_count)[row].sum() * grid.dt_hours - energy
            ),
        }
        for row, agent in enumerate(agents)
    ]
    start = uncoordinated_profiles(agents, grid).numpy().ravel()
    result = minimize(
        objective,
        start,
        jac=gradient,
        bounds=bounds,
        constraints=constraints,
        method="SLSQP",
        options={"ftol": 1e-12, "maxiter": 1000},
    )
    return float(result.fun)


def random_instance(seed: int, hourly_grid):
    rng = random.Random(seed)
    grid = hourly_grid(rng.randint(2, 8))
    baseload = tensor([rng.uniform(5.0, 15.0) for _ in range(grid.slot_count)])
    agents = []
    for index in range(rng.randint(1, 3)):
        first = rng.randrange(grid.slot_count)
        last = rng.randrange(first, grid.slot_count)
        p_max = rng.uniform(1.0, 5.0)
        agents.append(
            make_agent(
                grid,
                f"evse-{index}",
                first,
                last,
                p_max=p_max,
                d_max=-rng.uniform(0.0, 5.0),
                energy=rng.uniform(0.0, p_max * (last - first + 1) * grid.dt_hours),
            )
        )
    return grid, baseload, agents


class RecordingCoordinator(Coordinator):
    """Coordinator keeping a copy of every publication."""

    def __init__(self, *args, **kwargs):
        self.publications: List[torch.Tensor] = []
        super().__init__(*args, **kwargs)

    def check_published(self):
        super().check_published()
        self.publications.append(self.published.clone())


@pytest.mark.parametrize(
    "baseload, profiles, lambda_, n_total, expected",
    [
        ([100.0] * 4, [[0.0] * 4] * 10, 2.0, 10, [5.0] * 4),
        ([0.0] * 3, [[7.0] * 3], 1.0, 1, [7.0] * 3),
        ([100.0, 120.0], [[20.0, -20.0]], 2.0, 10, [6.0, 5.0]),
    ],
)
def test_update_control_signal(baseload, profiles, lambda_, n_total, expected):
    """Verify control signal on worked examples."""
    control = update_control_signal(tensor(baseload), tensor(profiles), lambda_, n_total)
    assert torch.allclose(control, tensor(expected), atol=1e-12)


@pytest.mark.parametrize("lambda_, n_total", [(2.0, 0), (0.0, 3), (-1.0, 3)])
def test_update_control_signal_invalid(lambda_, n_total):
    """Verify fleet size and control parameter must be positive."""
    with pytest.raises(InvalidInputError):
        update_control_signal(tensor([1.0]), tensor([[0.0]]), lambda_, n_total)


@pytest.fixture
def window_bounds(grid):
    """09:00-12:00 window (15 slots) with 33 kW charging, 40 kW discharging."""
    return build_bounds(
        grid,
        window_start=grid.at_minutes(540),
        window_end=grid.at_minutes(720),
        p_max=33.0,
        d_max=-40.0,
    )


def test_clamp_demand_interior(window_bounds, grid):
    """Verify deliverable demand is kept as is."""
    clamp = clamp_demand(forecast("a", 540, 720, 16.0), window_bounds, grid.dt_hours)
    assert clamp == (16.0, None, False)
    assert window_bounds.capacity_kwh(grid.dt_hours) == pytest.approx((-120.0, 99.0))


def test_clamp_demand_over_capacity(window_bounds, grid):
    """Verify demand above capacity is clamped with a warning."""
    clamp = clamp_demand(forecast("a", 540, 720, 120.0), window_bounds, grid.dt_hours)
    assert clamp.energy_kwh == pytest.approx(99.0)
    assert "clamped" in clamp.warning
    assert not clamp.excluded


def test_clamp_demand_empty_window(grid):
    """Verify a window with no slot excludes the EV."""
    bounds = build_bounds(
        grid, grid.at_minutes(1200), grid.at_minutes(1260), p_max=6.6, d_max=-6.6
    )
    clamp = clamp_demand(forecast("a", 1200, 1260, 3.0), bounds, grid.dt_hours)
    assert clamp.excluded and clamp.energy_kwh is None
    assert clamp.warning is not None


def test_run_config_defaults():
    """Verify default coordination parameters."""
    config = RunConfig()
    assert config.to_dict() == {
        "lambda": 2.0,
        "epsilon": 1e-3,
        "u": 1,
        "v": 1,
        "max_iters": 500,
        "norm": "l2",
    }
    assert RunConfig.from_dict(config.to_dict()) == config


@pytest.mark.parametrize(
    "values",
    [
        {"lambda": 0.0},
        {"epsilon": -1.0},
        {"u": 0},
        {"v": 1.5},
        {"max_iters": 0},
        {"norm": "l1"},
        {"gamma": 1.0},
    ],
)
def test_run_config_invalid(values):
    """Verify invalid coordination parameters are rejected."""
    with pytest.raises(InvalidInputError):
        RunConfig.from_dict(values)


@pytest.mark.parametrize(
    "p_max, d_max, lag", [(-1.0, -1.0, 0), (1.0, 1.0, 0), (1.0, -1.0, -1)]
)
def test_evse_spec_invalid(p_max, d_max, lag):
    """Verify EVSE rate signs and lag are validated."""
    with pytest.raises(InvalidInputError):
        EvseSpec("evse", "user", p_max_kw=p_max, d_max_kw=d_max, lag=lag)


def test_build_agents_exclusions(grid):
    """Verify missing, invalid and empty-window forecasts are excluded."""
    forecasts = {
        "u1": forecast("u1", 540, 720, 16.0),
        "u2": forecast("u2", 720, 540, 0.0, valid=False),
        "u3": forecast("u3", 1200, 1260, 3.0),
        "u5": forecast("u5", 480, 600, 100.0),
    }
    fleet = [
        EvseSpec(f"evse-{user[1]}", user, p_max_kw=6.6, d_max_kw=-6.6, lag=1)
        for user in ("u5", "u4", "u3", "u2", "u1")
    ]
    agents, warnings = build_agents(forecasts, fleet, grid)
    assert [agent.evse_id for agent in agents] == ["evse-1", "evse-5"]
    assert len(warnings) == 4
    assert agents[0].energy_kwh == 16.0 and agents[0].lag == 1
    assert agents[1].energy_kwh == pytest.approx(6.6 * 10 * 0.2)
    assert torch.equal(agents[0].published_profile, grid.zeros())


def test_run_single_flat(grid):
    """Verify a single EV on a zero baseload fills the horizon uniformly."""
    agent = make_agent(grid, "evse-1", 0, 59, p_max=6.6, d_max=-6.6, energy=12.0)
    result = run(grid.zeros(), [agent], grid, RunConfig())
    assert result.converged
    assert torch.allclose(result.profiles[0], torch.ones(60, dtype=DTYPE), atol=1e-9)
    assert torch.equal(agent.published_profile, result.profiles[0])


def test_run_toy_centralized(hourly_grid):
    """Verify a two EV, four slot toy instance reaches the centralized optimum."""
    grid = hourly_grid(4)
    baseload = tensor([10.0, 20.0, 10.0, 5.0])
    agents = [
        make_agent(grid, "evse-1", 0, 3, p_max=5.0, d_max=-5.0, energy=4.0),
        make_agent(grid, "evse-2", 1, 3, p_max=3.0, d_max=-2.0, energy=2.0),
    ]
    optimum = centralized_optimum(baseload, agents, grid)
    result = run(baseload, agents, grid, RunConfig(epsilon=1e-8, max_iters=20000))
    assert result.converged
    assert flatness_objective(baseload, result.profiles) == pytest.approx(
        optimum, rel=1e-3
    )


def test_run_random_centralized(hourly_grid):
    """Verify random small instances reach the centralized optimum."""
    for seed in range(20):
        grid, baseload, agents = random_instance(seed, hourly_grid)
        optimum = centralized_optimum(baseload, agents, grid)
        result = run(baseload, agents, grid, RunConfig(epsilon=1e-8, max_iters=20000))
        assert result.converged, seed
        assert flatness_objective(baseload, result.profiles) == pytest.approx(
            optimum, rel=1e-3
        ), seed


@pytest.mark.parametrize(
    "config, lags",
    [
        (RunConfig(), ()),
        (RunConfig(u=3, v=2, max_iters=2000), [index % 3 for index in range(30)]),
    ],
)
def test_run_publications_feasible(config, lags, synthetic_instance, synthetic_agents):
    """Verify every publication respects bounds, demands and total energy."""
    agents = synthetic_agents(lags)
    coordinator = RecordingCoordinator(
        synthetic_instance.baseload, agents, synthetic_instance.grid, config
    )
    coordinator.run()
    dt_hours = synthetic_instance.grid.dt_hours
    energies = torch.tensor([agent.energy_kwh for agent in agents], dtype=DTYPE)
    assert coordinator.publications
    for published in coordinator.publications:
        assert coordinator.bounds.contains(published)
        delivered = published.sum(dim=-1) * dt_hours
        assert torch.all(
            (delivered - energies).abs() <= ENERGY_RTOL * energies.abs().clamp(min=1.0)
        )
        assert float(delivered.sum()) == pytest.approx(float(energies.sum()), abs=1e-6)


def test_run_synthetic(synthetic_instance, synthetic_agents):
    """Verify the synthetic fleet converges, shaves the peak and fills the valley."""
    result = run(
        synthetic_instance.baseload,
        synthetic_agents(),
        synthetic_instance.grid,
        synthetic_instance.config,
    )
    assert result.converged
    assert result.iterations <= 200
    assert result.metrics.peak_after_kw < result.metrics.peak_before_kw
    assert result.metrics.variance_after <= 0.5 * result.metrics.variance_before
    assert result.profiles.shape == (30, 60)


def test_run_objective_nonincreasing(synthetic_instance, synthetic_agents):
    """Verify the synchronous flatness objective never increases."""
    result = run(
        synthetic_instance.baseload,
        synthetic_agents(),
        synthetic_instance.grid,
        RunConfig(epsilon=1e-6),
    )
    objectives = [step.objective for step in result.trace]
    for before, after in zip(objectives, objectives[1:]):
        assert after <= before + 1e-9 * max(1.0, abs(before))


def test_run_asynchronous(synthetic_instance, synthetic_agents):
    """Verify delayed updates with stale signals still reach the same objective."""
    synchronous = run(
        synthetic_instance.baseload,
        synthetic_agents(),
        synthetic_instance.grid,
        RunConfig(),
    )
    delayed = run(
        synthetic_instance.baseload,
        synthetic_agents([index % 3 for index in range(30)]),
        synthetic_instance.grid,
        RunConfig(u=3, v=2, max_iters=2000),
    )
    assert delayed.converged
    assert delayed.trace[-1].signal_updated
    assert flatness_objective(
        delayed.baseload, delayed.profiles
    ) == pytest.approx(
        flatness_objective(synchronous.baseload, synchronous.profiles), rel=5e-3
    )


def test_run_trace_semantics(synthetic_instance, synthetic_agents):
    """Verify control changes are only recorded on signal updates."""
    steps = []
    result = run(
        synthetic_instance.baseload,
        synthetic_agents(),
        synthetic_instance.grid,
        RunConfig(u=3, v=2, max_iters=40),
        on_iteration=steps.append,
    )
    assert steps == result.trace
    assert len(result.trace) == result.iterations
    for step in result.trace:
        assert step.signal_updated == (step.iteration % 3 == 0)
        assert step.profiles_updated == (step.iteration % 2 == 0)
        assert (step.control_delta is None) == (not step.signal_updated)


def test_run_lambda_scaling(synthetic_instance, synthetic_agents):
    """Verify doubling the control parameter keeps the converged total load."""
    results = [
        run(
            synthetic_instance.baseload,
            synthetic_agents(),
            synthetic_instance.grid,
            RunConfig(lambda_=lambda_, epsilon=1e-5, max_iters=2000),
        )
        for lambda_ in (2.0, 4.0)
    ]
    assert all(result.converged for result in results)
    assert torch.allclose(
        results[0].total_load, results[1].total_load, rtol=5e-3, atol=0.0
    )


def test_run_deterministic(synthetic_instance, synthetic_agents):
    """Verify identical inputs give identical traces and profiles."""
    first, second = (
        run(
            synthetic_instance.baseload,
            synthetic_agents(),
            synthetic_instance.grid,
            RunConfig(),
        )
        for _ in range(2)
    )
    assert first.trace == second.trace
    assert torch.equal(first.profiles, second.profiles)


def test_run_not_converged(synthetic_instance, synthetic_agents):
    """Verify an exhausted iteration budget is reported."""
    result = run(
        synthetic_instance.baseload,
        synthetic_agents(),
        synthetic_instance.grid,
        RunConfig(epsilon=1e-12, max_iters=5),
    )
    assert not result.converged
    assert result.iterations == 5


def test_run_requires_fresh_profiles(grid):
    """Verify a zero control change without a new publication is not convergence."""
    agent = make_agent(grid, "evse-1", 0, 59, p_max=6.6, d_max=-6.6, energy=12.0)
    result = run(grid.zeros(), [agent], grid, RunConfig(v=3))
    assert result.converged
    assert result.iterations == 4
    assert result.trace[1].control_delta == 0.0
    assert result.trace[-1].profiles_updated


def test_visible_signals_lag(grid):
    """Verify lagging agents see older control signals."""
    agents = [
        make_agent(grid, "evse-1", 0, 59, 6.6, -6.6, 1.0, lag=0),
        make_agent(grid, "evse-2", 0, 59, 6.6, -6.6, 1.0, lag=2),
    ]
    coordinator = Coordinator(grid.zeros() + 10, agents, grid, RunConfig())
    initial = coordinator.signals[-1]
    coordinator.signals.append(initial + 1)
    visible = coordinator.visible_signals()
    assert torch.equal(visible[0], initial + 1)
    assert torch.equal(visible[1], initial)
    coordinator.signals.append(initial + 2)
    coordinator.signals.append(initial + 3)
    visible = coordinator.visible_signals()
    assert torch.equal(visible[0], initial + 3)
    assert torch.equal(visible[1], initial + 1)


def test_uncoordinated_profiles(grid):
    """Verify uncontrolled charging runs at full rate from plug-in."""
    agent = make_agent(grid, "evse-1", 10, 24, p_max=6.6, d_max=-6.6, energy=5.0)
    profile = uncoordinated_profiles([agent], grid)[0]
    assert torch.allclose(profile[10:13], torch.full((3,), 6.6, dtype=DTYPE))
    assert float(profile[13]) == pytest.approx(5.2)
    assert torch.all(profile[14:] == 0) and torch.all(profile[:10] == 0)


def test_coordinator_invalid(grid):
    """Verify empty fleets and mismatching baseloads are rejected."""
    agent = make_agent(grid, "evse-1", 0, 59, 6.6, -6.6, 1.0)
    with pytest.raises(InvalidInputError):
        Coordinator(grid.zeros(), [], grid, RunConfig())
    with pytest.raises(InvalidInputError):
        Coordinator(torch.zeros(59, dtype=DTYPE), [agent], grid, RunConfig())
    baseload = grid.zeros()
    baseload[3] = float("nan")
    with pytest.raises(InvalidInputError, match="finite"):
        Coordinator(baseload, [agent], grid, RunConfig())


@pytest.mark.parametrize(
    "first_slot, corruption, message",
    [(0, 7.0, "rate bounds"), (0, -0.5, "energy demand"), (10, 0.5, "rate bounds")],
)
def test_check_published_violation(first_slot, corruption, message, grid):
    """Verify a published profile breaking its constraints raises."""
    agent = make_agent(grid, "evse-1", first_slot, 59, 6.6, -6.6, 5.0)
    coordinator = Coordinator(grid.zeros() + 50.0, [agent], grid, RunConfig())
    coordinator.published = coordinator.solve_locally()
    coordinator.check_published()
    coordinator.published[0, 0] += corruption
    with pytest.raises(ConstraintViolation, match=message):
        coordinator.check_published()


def test_run_infeasible_agent(grid):
    """Verify an unclamped demand above capacity propagates."""
    agent = make_agent(grid, "evse-1", 0, 4, p_max=1.0, d_max=-1.0, energy=50.0)
    with pytest.raises(InfeasibleDemand):
        run(grid.zeros(), [agent], grid, RunConfig())
