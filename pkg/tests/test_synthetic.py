"""Test synthetic instance generation."""
from datetime import datetime

import pytest
import torch

from pytorch_v2g.data.synthetic import LoadShape, generate
from pytorch_v2g.exceptions import InvalidInputError


def test_generate_deterministic():
    """Verify equal seeds give identical instances."""
    first, second = generate(seed=3, n_users=5), generate(seed=3, n_users=5)
    assert torch.equal(first.baseload, second.baseload)
    assert first.sessions == second.sessions
    assert first.fleet == second.fleet


def test_generate_seed_sensitivity():
    """Verify different seeds give different session histories."""
    assert generate(seed=1, n_users=5).sessions != generate(seed=2, n_users=5).sessions


def test_generate_shape(synthetic_instance):
    """Verify instance dimensions and fleet layout."""
    instance = synthetic_instance
    assert instance.baseload.shape == (60,)
    assert len(instance.sessions) == 30 * 20
    assert [evse.evse_id for evse in instance.fleet][:2] == ["evse-01", "evse-02"]
    assert {evse.user_id for evse in instance.fleet} == {
        session.user_id for session in instance.sessions
    }
    assert all(evse.p_max_kw == 6.6 and evse.d_max_kw == -6.6 for evse in instance.fleet)


def test_generate_baseload_shape(synthetic_instance):
    """Verify the baseload peaks before the valley around its base level."""
    baseload = synthetic_instance.baseload
    assert 20 <= int(baseload.argmax()) <= 24
    assert 38 <= int(baseload.argmin()) <= 44
    assert float(baseload.max()) > 130.0
    assert float(baseload.min()) < 80.0
    assert torch.equal(baseload, torch.round(baseload, decimals=3))


def test_generate_sessions_before_horizon(synthetic_instance):
    """Verify sessions are same-day visits on the days before the horizon."""
    horizon_start = synthetic_instance.grid.horizon_start
    for session in synthetic_instance.sessions:
        assert session.end < horizon_start
        assert not session.spans_midnight
        assert session.duration_hours >= 0.5
        assert session.energy_kwh >= 0


def test_generate_flat_shape():
    """Verify a noiseless shape without peak and valley is flat."""
    shape = LoadShape(peak_kw=0.0, valley_kw=0.0, noise_kw=0.0)
    instance = generate(seed=1, n_users=2, shape=shape)
    assert torch.all(instance.baseload == 100.0)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"n_users": 0},
        {"sessions_per_user": 0},
        {"t_slots": 0},
        {"horizon_start": datetime(2016, 9, 20, 20, 0)},
    ],
)
def test_generate_invalid(kwargs):
    """Verify invalid generator parameters are rejected."""
    with pytest.raises(InvalidInputError):
        generate(seed=1, **kwargs)


def test_load_shape_invalid():
    """Verify shape positions must be horizon fractions."""
    with pytest.raises(InvalidInputError):
        LoadShape(peak_at=1.5)
