import json

import numpy as np
import pytest

from core.errors import ParameterError
from core.params import (OcvCurve, load_params, ocv, params_from_dict, params_to_dict,
                         replace_ndc, replace_thermal, save_params)


def test_default_calibration(params):
    assert params.capacity_ah == pytest.approx(2.5)
    assert params.ndc.total_capacitance == pytest.approx(3600.0 * params.capacity_ah)
    assert params.amps(8.0) == pytest.approx(20.0)
    assert params.c_rate(12.5) == pytest.approx(5.0)
    assert params.ocv.u_min == pytest.approx(3.0)
    assert params.ocv.u_max == pytest.approx(4.2)


def test_ocv_interpolates_and_clamps(params):
    curve = params.ocv
    assert ocv(curve, 0.5) == pytest.approx(3.77)
    assert ocv(curve, 0.45) == pytest.approx(3.735)
    # 定义域外取端点值
    assert ocv(curve, -0.3) == pytest.approx(3.0)
    assert ocv(curve, 1.7) == pytest.approx(4.2)
    values = ocv(curve, np.array([0.0, 1.0]))
    np.testing.assert_allclose(values, [3.0, 4.2])


@pytest.mark.parametrize("points", [
    [[0.0, 3.0]],
    [[0.0, 3.0], [0.5, 2.9], [1.0, 4.2]],
    [[0.0, 3.0], [0.0, 3.5], [1.0, 4.2]],
])
def test_ocv_rejects_bad_breakpoints(points):
    with pytest.raises(ParameterError):
        OcvCurve(tuple(tuple(p) for p in points))


def test_matrices_conserve_charge(params):
    # c_b·v_b + c_s·v_s 的变化率只取决于电流
    ndc = params.ndc
    weights = np.array([ndc.c_b, ndc.c_s, 0.0])
    np.testing.assert_allclose(weights @ ndc.a_matrix, 0.0, atol=1e-12)
    assert weights @ ndc.b_vector == pytest.approx(-1.0)


def test_thermal_steady_state_rise(params):
    th = params.thermal
    heat = params.amps(5.0) ** 2 * params.ndc.r_0
    # 稳态：T_surf − T_amb = P·R_surf
    u = np.array([params.amps(5.0) ** 2, params.t_amb])
    steady = np.linalg.solve(th.a_matrix, -th.b_matrix(params.ndc.r_0) @ u)
    assert steady[1] - params.t_amb == pytest.approx(heat * th.r_surf)
    assert steady[0] - steady[1] == pytest.approx(heat * th.r_core)


def test_rejects_non_positive_values(params):
    with pytest.raises(ParameterError):
        replace_ndc(params, r_0=0.0)
    with pytest.raises(ParameterError):
        replace_thermal(params, c_core=-1.0)
    with pytest.raises(ParameterError):
        replace_ndc(params, r_b=float("nan"))


def test_missing_field_is_parameter_error(params):
    data = params_to_dict(params)
    del data["thermal"]
    with pytest.raises(ParameterError):
        params_from_dict(data)


def test_save_and_load(params, tmp_path):
    path = tmp_path / "params.json"
    save_params(replace_ndc(params, r_0=0.025), path, "测试")
    loaded = load_params(path)
    assert loaded.ndc.r_0 == pytest.approx(0.025)
    assert loaded.thermal == params.thermal
    assert json.loads(path.read_text(encoding="utf-8"))["_provenance"] == "测试"


def test_load_invalid_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{ not json", encoding="utf-8")
    with pytest.raises(ParameterError):
        load_params(path)
