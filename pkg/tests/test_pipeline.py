"""完整训练流水线 gen-data → train-nets → train-rdt 之后的验收检查"""

from types import SimpleNamespace

import appdirs
import numpy as np
import pandas as pd
import pytest

from cli.commands import EXIT_OK, load_model, load_predictor, mission_profile, search_config
from core.cell_model import CellState, propagate, simulate_states, state_at_soc
from core.config_manager import ConfigManager
from core.mission import (MissionProfile, benchmark_table, run_ablation_comparison, run_benchmark,
                          run_mission)
from core.power_search import METHOD_PROPOSED, proposed_search, shortcut_search
from core.rdt import predict_rdt
from main import main

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    with pytest.MonkeyPatch.context() as mp:
        mp.setattr(appdirs, "user_data_dir", lambda *args, **kwargs: str(root / "data"))
        mp.setattr(appdirs, "user_log_dir", lambda *args, **kwargs: str(root / "logs"))
        artifacts = str(root / "artifacts")
        codes = {}
        for command in (["gen-data"], ["train-nets"], ["train-rdt", "--outdir", str(root / "out")]):
            codes[command[0]] = main(["--artifact-dir", artifacts, *command])

        config = ConfigManager()
        config.set_setting("artifact_dir", artifacts)
        model = load_model(config)
        yield SimpleNamespace(
            codes=codes,
            report=pd.read_csv(root / "out" / "rdt_validation.csv"),
            config=config,
            model=model,
            net=load_predictor(config, model, "net"),
            oracle=load_predictor(config, model, "oracle"),
            profile=mission_profile(config),
        )


def _cfg(pipeline, h):
    return search_config(pipeline.config, pipeline.model.capacity_ah, h)


def _mission_states(pipeline, times):
    params = pipeline.model.params
    current_profile = pipeline.profile.to_current_profile(params.capacity_ah)
    _, states, _ = simulate_states(params, state_at_soc(params, 1.0), current_profile)
    return [CellState.from_array(states[t]) for t in times]


def test_pipeline_commands_succeed(pipeline):
    assert pipeline.codes == {"gen-data": EXIT_OK, "train-nets": EXIT_OK, "train-rdt": EXIT_OK}


def test_rdt_net_accuracy_on_held_out_points(pipeline):
    report = pipeline.report
    assert len(report) >= 200
    assert report["within_tol"].mean() >= 0.95


def test_emergency_rdt_after_full_power_horizon(pipeline):
    params = pipeline.model.params
    x_h = propagate(state_at_soc(params, 0.95), 19.98, params.t_amb, 180.0, params)
    truth = predict_rdt(pipeline.oracle, x_h, 12.5, params.t_amb)
    guess = predict_rdt(pipeline.net, x_h, 12.5, params.t_amb)
    assert truth > 105.0
    assert abs(guess - truth) <= max(0.02 * truth, 5.0)


@pytest.mark.parametrize("h", [180.0, 300.0])
def test_net_search_tracks_shortcut_along_mission(pipeline, h):
    cfg = _cfg(pipeline, h)
    for x in _mission_states(pipeline, range(0, 1080, 30)):
        fast = proposed_search(pipeline.model, pipeline.net, x, cfg)
        slow = shortcut_search(pipeline.model, x, cfg)
        assert abs(fast.i_max - slow.i_max) <= max(2.0 * cfg.eps, 0.02 * slow.i_max)


def test_oracle_search_matches_shortcut(pipeline):
    cfg = _cfg(pipeline, 180.0)
    for x in _mission_states(pipeline, range(0, 1080, 54)):
        fast = proposed_search(pipeline.model, pipeline.oracle, x, cfg)
        slow = shortcut_search(pipeline.model, x, cfg)
        assert abs(fast.i_max - slow.i_max) <= cfg.eps


def test_speedup_over_shortcut(pipeline):
    cfg = _cfg(pipeline, 300.0)
    bench = run_benchmark(pipeline.model, pipeline.net, pipeline.profile, [300.0, 600.0], cfg, cadence=60)
    speedup = benchmark_table(bench).set_index("horizon")["speedup"]
    assert speedup[300.0] >= 10.0
    assert speedup[600.0] >= 20.0


def test_mission_limits_shape(pipeline):
    horizons = [10.0, 180.0, 300.0, 420.0, 600.0]
    cfg = _cfg(pipeline, horizons[0])
    records = run_mission(pipeline.model, pipeline.net, pipeline.profile, horizons, cfg,
                          method=METHOD_PROPOSED, cadence=30)
    searched = [r for r in records if r.searched]
    for record in searched:
        limits = [record.result(h, METHOD_PROPOSED).i_max for h in horizons]
        assert all(b <= a + cfg.eps for a, b in zip(limits, limits[1:]))
    at_bound = [r.result(10.0, METHOD_PROPOSED).i_max >= cfg.i_max_bound - cfg.eps for r in searched]
    assert np.mean(at_bound) >= 0.8


def test_limit_rises_after_take_off(pipeline):
    cfg = _cfg(pipeline, 180.0)
    profile = MissionProfile((("takeoff", 5.0, 75.0), ("cruise", 1.48, 61.0)))
    records = run_mission(pipeline.model, pipeline.net, profile, [180.0], cfg,
                          method=METHOD_PROPOSED, cadence=1)
    limits = [r.result(180.0, METHOD_PROPOSED).i_max for r in records if r.time >= 75.0]
    assert any(b > a for a, b in zip(limits, limits[1:]))


def test_ablations_overestimate_power(pipeline):
    cfg = _cfg(pipeline, 300.0)
    table = run_ablation_comparison(pipeline.model, pipeline.net, pipeline.profile, cfg, h=300.0,
                                    method=METHOD_PROPOSED, cadence=30)
    slack = cfg.eps * 4.2
    for mode in ("no_tmax", "no_emergency"):
        assert np.all(table[f"p_max_{mode}"] >= table["p_max_full"] - slack)
        assert (table[f"p_max_{mode}"] > table["p_max_full"]).mean() >= 0.2
