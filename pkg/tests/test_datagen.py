import numpy as np
import pytest

from core.cell_model import CellState, ndc_output, state_at_soc
from core.datagen import (RDT_FLAG_BELOW_VMIN, RDT_FLAG_OK, RdtGrid, RdtSample,
                          audit_rdt_monotonicity, build_fit_dataset, build_rdt_dataset,
                          fit_ndc_params, fit_thermal_params, grid_states, load_fit_pairs,
                          load_rdt_dataset, rdt_training_arrays, save_fit_dataset,
                          save_rdt_dataset)
from core.errors import ParameterError, TrainingError
from core.params import replace_ndc, replace_thermal
from core.reference_cell import ReferenceCell


@pytest.fixture(scope="module")
def linear_cell(params):
    return ReferenceCell(base=params)


def test_empty_rate_list_gives_empty_dataset(reference_cell):
    dataset = build_fit_dataset(reference_cell, [])
    assert len(dataset) == 0
    X, Y = dataset.voltage_pairs()
    assert X.shape == (0, 6)
    assert Y.shape == (0, 1)
    with pytest.raises(TrainingError):
        fit_ndc_params(dataset, reference_cell.base)


def test_duplicate_rates_double_the_data(reference_cell):
    once = build_fit_dataset(reference_cell, [8])
    twice = build_fit_dataset(reference_cell, [8, 8])
    assert len(twice) == 2 * len(once)
    X1, Y1 = once.voltage_pairs()
    X2, Y2 = twice.voltage_pairs()
    np.testing.assert_array_equal(X2[:len(X1)], X1)
    np.testing.assert_array_equal(Y2[len(Y1):], Y1)


def test_runs_stop_at_cutoff(reference_cell):
    dataset = build_fit_dataset(reference_cell, [0, 8])
    rest, discharge = dataset.runs
    assert rest.label == "0C"
    assert len(rest) == 301
    assert np.all(discharge.v_true >= 3.0)
    # 8C 名义时长 450 s，截止电压先到
    assert discharge.times[-1] < 450.0


def test_negative_rate_rejected(reference_cell):
    with pytest.raises(ParameterError):
        build_fit_dataset(reference_cell, [-1])


def test_noise_is_seeded(reference_cell):
    clean = build_fit_dataset(reference_cell, [8])
    noisy = build_fit_dataset(reference_cell, [8], noise_std_v=0.002, seed=5)
    again = build_fit_dataset(reference_cell, [8], noise_std_v=0.002, seed=5)
    assert not np.allclose(noisy.v_true, clean.v_true[:len(noisy.v_true)])
    np.testing.assert_array_equal(noisy.v_true, again.v_true)


def test_fit_dataset_csv(reference_cell, tmp_path):
    dataset = build_fit_dataset(reference_cell, [8])
    path = tmp_path / "fit.csv"
    save_fit_dataset(dataset, path)
    (x_v, y_v), (x_t, y_t) = load_fit_pairs(path)
    assert x_v.shape == (len(dataset), 6)
    assert x_t.shape == (len(dataset), 3)
    np.testing.assert_allclose(y_v[:, 0], dataset.v_true)


def test_ndc_fit_recovers_linear_cell(linear_cell, params):
    dataset = build_fit_dataset(linear_cell, [2])
    start = replace_ndc(params, r_0=0.026, r_1=0.007)
    report = fit_ndc_params(dataset, start)
    assert report.rmse < report.initial_rmse
    assert report.rmse < 1e-3
    assert report.params.ndc.total_capacitance == pytest.approx(params.ndc.total_capacitance)


def test_thermal_fit_recovers_linear_cell(linear_cell, params):
    dataset = build_fit_dataset(linear_cell, [5])
    start = replace_thermal(params, r_surf=9.0, c_core=22.0)
    report = fit_thermal_params(dataset, start)
    assert report.rmse < report.initial_rmse
    assert report.rmse < 0.05


@pytest.mark.slow
def test_low_rate_fit_tracks_reference(reference_cell):
    dataset = build_fit_dataset(reference_cell, [1])
    report = fit_ndc_params(dataset, reference_cell.base)
    check = build_fit_dataset(reference_cell, [0.5], linear_params=report.params)
    run = check.runs[0]
    predicted = np.array([ndc_output(report.params, CellState.from_array(s), i)
                          for s, i in zip(run.states, run.currents)])
    rmse = float(np.sqrt(np.mean((predicted - run.v_true) ** 2)))
    assert rmse < 0.020


@pytest.fixture(scope="module")
def rdt_grid():
    return RdtGrid(socs=tuple(np.linspace(0.05, 1.0, 20)))


@pytest.fixture(scope="module")
def rdt_samples(physics_model, rdt_grid):
    return build_rdt_dataset(physics_model, rdt_grid)


def test_rdt_grid_shape(rdt_grid, rdt_samples, params):
    assert rdt_grid.size == 320
    assert len(rdt_samples) == 320
    assert len(grid_states(params, rdt_grid)) == 20
    assert all(np.isfinite(s.rdt_vmin) and s.rdt_vmin >= 0.0 for s in rdt_samples)
    X, Y = rdt_training_arrays(rdt_samples, params.capacity_ah)
    assert X.shape[1] == 7
    assert Y.shape == (len(X), 1)
    # 目标为放出电量占额定容量的比例
    assert np.all((Y > 0.0) & (Y <= 1.0))


def test_rdt_dataset_is_monotone(rdt_samples):
    audit = audit_rdt_monotonicity(rdt_samples)
    assert audit.current_pairs == 20 * 15
    assert audit.soc_pairs == 19 * 16
    assert audit.current_ordered_fraction == 1.0
    assert audit.soc_ordered_fraction == 1.0
    by_index = {s.grid_index: s for s in rdt_samples}
    for (si, pi, ti, ci), sample in by_index.items():
        nxt = by_index.get((si, pi, ti, ci + 1))
        if nxt is not None and sample.flag == RDT_FLAG_OK and nxt.flag == RDT_FLAG_OK:
            assert nxt.rdt_vmin < sample.rdt_vmin


def test_rdt_dataset_is_deterministic(physics_model):
    grid = RdtGrid(socs=(0.2, 0.6), c_rates=(2.0, 6.0), preconditions=((0.0, 0.0), (5.0, 75.0)))
    serial = build_rdt_dataset(physics_model, grid)
    parallel = build_rdt_dataset(physics_model, grid, workers=4)
    assert [s.rdt_vmin for s in serial] == [s.rdt_vmin for s in parallel]
    assert [s.grid_index for s in serial] == [s.grid_index for s in parallel]


def test_depleted_states_are_flagged(physics_model):
    samples = build_rdt_dataset(physics_model, RdtGrid(socs=(0.0, 0.5), c_rates=(4.0,)))
    assert samples[0].flag == RDT_FLAG_BELOW_VMIN
    assert samples[0].rdt_vmin == 0.0
    assert samples[1].flag == RDT_FLAG_OK


def test_rdt_csv(physics_model, tmp_path):
    samples = build_rdt_dataset(physics_model, RdtGrid(socs=(0.5,), c_rates=(4.0, 8.0)))
    path = tmp_path / "rdt.csv"
    save_rdt_dataset(samples, path)
    loaded = load_rdt_dataset(path)
    assert [s.grid_index for s in loaded] == [s.grid_index for s in samples]
    np.testing.assert_allclose([s.rdt_vmin for s in loaded], [s.rdt_vmin for s in samples])


def test_rdt_validation(params):
    with pytest.raises(ParameterError):
        RdtGrid(socs=(0.5,), c_rates=(9.0,))
    with pytest.raises(ParameterError):
        RdtSample(state_at_soc(params, 0.5), 2.5, 25.0, -1.0)


def test_post_load_states_cover_emergency_queries(physics_model, params):
    grid = RdtGrid(socs=(0.3, 0.95), c_rates=(5.0,), preconditions=((0.0, 0.0), (8.0, 180.0)))
    # SoC 0.3 在 8C 预放电 180 s 内已越过 V_min
    states = grid_states(params, grid, physics_model)
    assert [index for index, _, _ in states] == [(0, 0, 0), (1, 0, 0), (1, 1, 0)]
    assert len(grid_states(params, grid)) == 4

    samples = build_rdt_dataset(physics_model, grid)
    assert [s.grid_index for s in samples] == [(0, 0, 0, 0), (1, 0, 0, 0), (1, 1, 0, 0)]
    loaded = samples[-1]
    assert loaded.flag == RDT_FLAG_OK
    assert loaded.state.t_core > 40.0
    # 满功率 3 分钟后仍能完成 105 s 的 5C 应急段
    assert 250.0 < loaded.rdt_vmin < 400.0


def test_training_arrays_drop_depleted_samples(physics_model, params):
    samples = build_rdt_dataset(physics_model, RdtGrid(socs=(0.0, 0.5), c_rates=(4.0,)))
    X, Y = rdt_training_arrays(samples, params.capacity_ah)
    assert len(X) == 1
    assert X[0, 5] == pytest.approx(10.0)
    assert Y[0, 0] == pytest.approx(samples[1].rdt_vmin * 10.0 / 9000.0)
    X, _ = rdt_training_arrays(samples, params.capacity_ah, include_below_vmin=True)
    assert len(X) == 2
