import numpy as np
import pytest

import core.reference_cell as reference_cell_module
from core.cell_model import CurrentProfile, simulate_states, state_at_soc
from core.errors import ParameterError, ReferenceStepError
from core.mission import MissionProfile
from core.reference_cell import ReferenceCell, reference_cell_from_dict, reference_simulate


def test_linear_limit_matches_exact_propagation(params, fresh_state):
    cell = ReferenceCell(base=params)
    assert cell.is_linear
    profile = MissionProfile.default().to_current_profile(params.capacity_ah)
    reference = reference_simulate(cell, fresh_state, profile, step=0.1)
    times, states, _ = simulate_states(params, fresh_state, profile, step=1.0)
    np.testing.assert_allclose(reference.times, times)
    np.testing.assert_allclose(reference.states, states, rtol=1e-6, atol=1e-9)


def test_step_limit(reference_cell, fresh_state):
    with pytest.raises(ReferenceStepError):
        reference_simulate(reference_cell, fresh_state, CurrentProfile.constant(2.5, 10.0), step=0.2)


def test_rest_from_equilibrium_is_constant(reference_cell):
    x = state_at_soc(reference_cell.base, 0.5)
    trajectory = reference_simulate(reference_cell, x, CurrentProfile.constant(0.0, 60.0))
    np.testing.assert_allclose(trajectory.states, np.tile(x.as_array(), (len(trajectory), 1)), atol=1e-12)
    np.testing.assert_allclose(trajectory.voltages, 3.77)


def test_higher_rate_heats_more(reference_cell, fresh_state):
    slow = reference_simulate(reference_cell, fresh_state, CurrentProfile.constant(2.5, 100.0))
    fast = reference_simulate(reference_cell, fresh_state, CurrentProfile.constant(12.5, 100.0))
    assert np.all(fast.temperatures[1:] > slow.temperatures[1:])
    assert np.all(fast.voltages < slow.voltages)


def test_resistance_grows_when_cold_and_deep(reference_cell, params):
    warm = state_at_soc(params, 0.5, 25.0).as_array()
    cold = state_at_soc(params, 0.5, 0.0).as_array()
    empty = state_at_soc(params, 0.02, 25.0).as_array()
    assert reference_cell.ohmic_resistance(cold) > reference_cell.ohmic_resistance(warm)
    assert reference_cell.ohmic_resistance(empty) > reference_cell.ohmic_resistance(warm)


def test_reference_cell_validation(params):
    with pytest.raises(ParameterError):
        ReferenceCell(base=params, r0_soc_table=((0.0, 1.0),))
    with pytest.raises(ParameterError):
        ReferenceCell(base=params, polarization_gain=-0.1)
    data = {"ndc": {"r_b": 0.006, "c_b": 8100, "c_s": 900, "r_0": 0.02, "r_1": 0.01, "c_1": 3000},
            "thermal": {"r_core": 1.5, "r_surf": 7.5, "c_core": 28, "c_surf": 4},
            "ocv": [[0, 3.0], [1, 4.2]], "capacity_ah": 2.5,
            "reference": {"r0_soc_table": [[0, 1]]}}
    with pytest.raises(ParameterError):
        reference_cell_from_dict(data)


def test_hot_core_keeps_nominal_resistance(reference_cell, params):
    warm = state_at_soc(params, 0.5, 25.0).as_array()
    hot = state_at_soc(params, 0.5, 50.0).as_array()
    assert reference_cell.ohmic_resistance(hot) == pytest.approx(reference_cell.ohmic_resistance(warm))
    assert reference_cell.ohmic_resistance(warm) == pytest.approx(params.ndc.r_0)


def test_integration_step_never_exceeds_limit(monkeypatch, reference_cell, fresh_state):
    used = []
    original = reference_cell_module._rk4

    def recording_rk4(cell, arr, i, t_amb, h):
        used.append(h)
        return original(cell, arr, i, t_amb, h)

    monkeypatch.setattr(reference_cell_module, "_rk4", recording_rk4)
    trajectory = reference_simulate(reference_cell, fresh_state, CurrentProfile.constant(12.5, 2.1),
                                    step=0.1, record_every=0.25)
    assert max(used) <= 0.1 + 1e-12
    assert sum(used) == pytest.approx(2.1)
    assert trajectory.times[-1] == pytest.approx(2.1)


def test_warm_cell_heats_like_linear_model(reference_cell, params, fresh_state):
    profile = CurrentProfile.constant(20.0, 150.0)
    reference = reference_simulate(reference_cell, fresh_state, profile)
    _, states, _ = simulate_states(params, fresh_state, profile, step=1.0)
    np.testing.assert_allclose(reference.states[:, 3:], states[:, 3:], atol=1e-3)
