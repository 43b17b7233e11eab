import math
from dataclasses import replace

import numpy as np
import pytest

from core.cell_model import CellState, CurrentProfile, simulate_states, state_at_soc
from core.errors import ParameterError
from core.mission import MissionProfile
from core.power_search import (CONSTRAINT_CURRENT_BOUND, CONSTRAINT_TEMPERATURE,
                               CONSTRAINT_VOLTAGE, METHOD_PROPOSED, METHOD_SHORTCUT, SearchConfig,
                               feasible_over_horizon, power_limit, proposed_search, shortcut_search)
from core.mlp import Layer, init_net
from core.rdt import OracleRdtPredictor, RdtPredictor


def _mission_states(params, times):
    profile = MissionProfile.default().to_current_profile(params.capacity_ah)
    _, states, _ = simulate_states(params, state_at_soc(params, 1.0), profile)
    return [CellState.from_array(states[t]) for t in times]


@pytest.fixture(scope="module")
def tight_oracle(physics_model):
    return OracleRdtPredictor(physics_model, temp_bisect_tol=1e-4, time_tol=1e-3)


def test_config_validation():
    with pytest.raises(ParameterError):
        SearchConfig(h=0.0)
    with pytest.raises(ParameterError):
        SearchConfig(h=10.0, i_min=5.0, i_max_bound=5.0)
    with pytest.raises(ParameterError):
        SearchConfig(h=10.0, eps=0.0)
    with pytest.raises(ParameterError):
        SearchConfig(h=10.0, h_el=-1.0)


def test_config_from_c_rates():
    cfg = SearchConfig.from_c_rates(2.5, h=300.0)
    assert cfg.i_el == pytest.approx(12.5)
    assert cfg.i_max_bound == pytest.approx(20.0)
    assert cfg.i_min == 0.0
    assert cfg.max_iterations == 11


def test_zero_current_is_feasible_at_rest(physics_model, fresh_state):
    cfg = SearchConfig(h=300.0, h_el=0.0)
    assert feasible_over_horizon(physics_model, fresh_state, 0.0, cfg)


def test_depleted_cell_violates_voltage(physics_model, params):
    x = state_at_soc(params, 0.02)
    verdict = feasible_over_horizon(physics_model, x, 20.0, SearchConfig(h=10.0))
    assert not verdict.feasible
    assert verdict.constraint == CONSTRAINT_VOLTAGE
    assert verdict.time == 1.0


def test_hot_run_violates_temperature(physics_model, fresh_state):
    verdict = feasible_over_horizon(physics_model, fresh_state, 20.0, SearchConfig(h=300.0, h_el=0.0))
    assert verdict.constraint == CONSTRAINT_TEMPERATURE
    assert 140.0 <= verdict.time <= 170.0


def test_feasibility_agrees_with_trajectory(physics_model, params):
    x = state_at_soc(params, 0.3)
    cfg = SearchConfig(h=60.0)
    for current in (2.0, 8.0, 14.0, 20.0):
        _, states, currents = simulate_states(params, x, _profile(current, cfg), step=1.0)
        voltages = (np.interp(states[:, 1], params.ocv.xs, params.ocv.us) + states[:, 2]
                    - params.ndc.r_0 * currents)
        ok = bool(np.all(voltages[1:] >= cfg.v_min) and np.all(states[1:, 4] <= cfg.t_max))
        assert feasible_over_horizon(physics_model, x, current, cfg).feasible == ok


def _profile(current, cfg):
    return CurrentProfile(((current, cfg.h), (cfg.i_el, cfg.h_el)))


def test_fresh_cell_short_horizon_hits_current_bound(physics_model, fresh_state):
    cfg = SearchConfig(h=10.0)
    result = shortcut_search(physics_model, fresh_state, cfg)
    assert result.feasible
    assert result.i_max >= cfg.i_max_bound - cfg.eps
    assert result.constraint_binding == CONSTRAINT_CURRENT_BOUND
    assert result.iterations <= cfg.max_iterations
    assert result.method == METHOD_SHORTCUT
    assert result.p_max > 60.0


def test_infeasible_state(physics_model, params):
    result = shortcut_search(physics_model, state_at_soc(params, 0.0), SearchConfig(h=10.0))
    assert not result.feasible
    assert result.i_max == 0.0
    assert result.p_max == 0.0
    assert result.constraint_binding == CONSTRAINT_VOLTAGE


def test_matches_grid_search(physics_model, params):
    cfg = SearchConfig(h=180.0)
    step = cfg.eps / 2.0
    grid = np.arange(0.0, cfg.i_max_bound + 1e-9, step)
    checked = 0
    for x in _mission_states(params, range(0, 1080, 108)):
        if not feasible_over_horizon(physics_model, x, 0.0, cfg):
            continue
        checked += 1
        result = shortcut_search(physics_model, x, cfg)
        # 可行域随电流单调，从上往下找第一个可行的网格点
        best = next(float(i) for i in grid[::-1] if feasible_over_horizon(physics_model, x, float(i), cfg))
        assert best - cfg.eps - 1e-9 <= result.i_max <= best + step + 1e-9
    assert checked == 10


@pytest.mark.parametrize("h", [60.0, 180.0])
def test_result_is_bracketed(physics_model, params, h):
    cfg = SearchConfig(h=h)
    for x in _mission_states(params, range(0, 1080, 54)):
        result = shortcut_search(physics_model, x, cfg)
        assert result.iterations <= cfg.max_iterations
        if not result.feasible:
            continue
        assert feasible_over_horizon(physics_model, x, result.i_max, cfg)
        if result.i_max + 2.0 * cfg.eps <= cfg.i_max_bound:
            assert not feasible_over_horizon(physics_model, x, result.i_max + 2.0 * cfg.eps, cfg)
        voltage_at_horizon = result.p_max / result.i_max
        assert cfg.v_min <= voltage_at_horizon <= 4.2


def test_temperature_binds_at_take_off(physics_model, fresh_state):
    result = shortcut_search(physics_model, fresh_state, SearchConfig(h=180.0))
    assert result.constraint_binding == CONSTRAINT_TEMPERATURE
    assert 15.0 < result.i_max < 20.0


def test_proposed_matches_shortcut(physics_model, params, tight_oracle):
    cfg = SearchConfig(h=60.0)
    for x in _mission_states(params, (0, 300, 1000)):
        fast = proposed_search(physics_model, tight_oracle, x, cfg)
        slow = shortcut_search(physics_model, x, cfg)
        assert fast.method == METHOD_PROPOSED
        assert fast.feasible == slow.feasible
        assert abs(fast.i_max - slow.i_max) <= cfg.eps
        assert fast.iterations <= cfg.max_iterations


@pytest.mark.slow
def test_proposed_matches_shortcut_along_mission(physics_model, params, tight_oracle):
    for h in (180.0, 300.0):
        cfg = SearchConfig(h=h)
        for x in _mission_states(params, range(0, 1080, 54)):
            fast = proposed_search(physics_model, tight_oracle, x, cfg)
            slow = shortcut_search(physics_model, x, cfg)
            assert abs(fast.i_max - slow.i_max) <= cfg.eps


def test_relaxed_constraints_never_lower_the_limit(physics_model, params):
    cfg = SearchConfig(h=300.0)
    for x in _mission_states(params, (0, 75, 500)):
        full = shortcut_search(physics_model, x, cfg).i_max
        assert shortcut_search(physics_model, x, replace(cfg, t_max=math.inf)).i_max >= full - cfg.eps
        assert shortcut_search(physics_model, x, replace(cfg, h_el=0.0)).i_max >= full - cfg.eps


def test_power_limit(physics_model, fresh_state):
    cfg = SearchConfig(h=10.0)
    assert power_limit(physics_model, fresh_state, 0.0, cfg) == 0.0
    p = power_limit(physics_model, fresh_state, 10.0, cfg)
    assert 10.0 * 3.0 < p < 10.0 * 4.2


def test_proposed_refuses_other_vmin_for_trained_net(physics_model, fresh_state):
    layer = Layer(np.zeros((1, 7)), np.array([0.5]), "identity")
    net = init_net([7, 1], hidden_activation="identity").with_layers([layer], trained=True)
    predictor = RdtPredictor(physics_model, net=net)
    with pytest.raises(ParameterError):
        proposed_search(physics_model, predictor, fresh_state, SearchConfig(h=60.0, v_min=3.1))
    relaxed = proposed_search(physics_model, predictor, fresh_state, SearchConfig(h=60.0, t_max=math.inf))
    assert relaxed.feasible


def test_oracle_follows_search_limits(physics_model, params):
    x = state_at_soc(params, 0.3)
    oracle = OracleRdtPredictor(physics_model)
    cfg = SearchConfig(h=60.0, v_min=3.3)
    assert proposed_search(physics_model, oracle, x, cfg).i_max < proposed_search(
        physics_model, oracle, x, replace(cfg, v_min=3.0)).i_max
