"""
合成参考电池

替代真实电芯实验的"真值"电池：在线性模型基础上加入温度、放电深度相关的欧姆内阻
和大电流极化非线性，用定步长四阶 Runge-Kutta 积分。所有扰动为零时精确退化为线性模型。
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from core.cell_model import CellState, CurrentProfile, Trajectory, step_counts
from core.errors import ParameterError, PropagationError, ReferenceStepError
from core.params import ModelParams, params_from_dict

logger = logging.getLogger(__name__)

MAX_REFERENCE_STEP = 0.1


@dataclass(frozen=True)
class ReferenceCell:
    base: ModelParams
    # 每降低 1 °C 欧姆内阻增加的量 (Ω/°C)
    r0_temp_coeff: float = 0.0
    r0_ref_temp: float = 25.0
    # (放电深度, 内阻倍数) 分段线性表
    r0_soc_table: Tuple[Tuple[float, float], ...] = ((0.0, 1.0), (1.0, 1.0))
    polarization_gain: float = 0.0

    def __post_init__(self):
        table = tuple((float(d), float(f)) for d, f in self.r0_soc_table)
        if len(table) < 2:
            raise ParameterError("r0_soc_table 至少需要两个点")
        dods = np.array([d for d, _ in table])
        factors = np.array([f for _, f in table])
        if np.any(np.diff(dods) <= 0.0) or np.any(factors <= 0.0):
            raise ParameterError("r0_soc_table 放电深度必须递增且倍数为正")
        if self.polarization_gain < 0.0:
            raise ParameterError(f"polarization_gain 不能为负: {self.polarization_gain}")
        object.__setattr__(self, "r0_soc_table", table)
        object.__setattr__(self, "_dods", dods)
        object.__setattr__(self, "_factors", factors)

    @property
    def is_linear(self) -> bool:
        return (self.r0_temp_coeff == 0.0 and self.polarization_gain == 0.0
                and bool(np.all(self._factors == 1.0)))

    def ohmic_resistance(self, arr: np.ndarray) -> float:
        """随放电深度变化的 R_0，核心温度低于 r0_ref_temp 时再线性增加"""
        ndc = self.base.ndc
        curve = self.base.ocv
        mean_v = (ndc.c_b * arr[0] + ndc.c_s * arr[1]) / ndc.total_capacitance
        dod = 1.0 - (mean_v - curve.vs_lo) / (curve.vs_hi - curve.vs_lo)
        factor = float(np.interp(dod, self._dods, self._factors))
        r_0 = ndc.r_0 * factor + self.r0_temp_coeff * max(self.r0_ref_temp - arr[3], 0.0)
        return max(r_0, 0.25 * ndc.r_0)

    def derivative(self, arr: np.ndarray, i: float, t_amb: float) -> np.ndarray:
        ndc = self.base.ndc
        th = self.base.thermal
        r_0 = self.ohmic_resistance(arr)
        polarization = 1.0 + self.polarization_gain * abs(i) / self.base.capacity_ah
        d_e = ndc.a_matrix @ arr[:3]
        d_e[1] -= i / ndc.c_s
        d_e[2] -= i * polarization / ndc.c_1
        d_t = th.a_matrix @ arr[3:] + np.array([r_0 * i * i / th.c_core,
                                                 t_amb / (th.r_surf * th.c_surf)])
        return np.concatenate([d_e, d_t])

    def terminal_voltage(self, arr: np.ndarray, i: float) -> float:
        return float(np.interp(arr[1], self.base.ocv.xs, self.base.ocv.us)
                     + arr[2] - self.ohmic_resistance(arr) * i)


def reference_cell_from_dict(data: Dict[str, Any]) -> ReferenceCell:
    """参考电池配置 = 参数文件 + reference 段"""
    base = params_from_dict(data)
    extra = data.get("reference", {})
    try:
        return ReferenceCell(
            base=base,
            r0_temp_coeff=float(extra.get("r0_temp_coeff", 0.0)),
            r0_ref_temp=float(extra.get("r0_ref_temp", 25.0)),
            r0_soc_table=tuple((p[0], p[1]) for p in extra.get("r0_soc_table", [[0.0, 1.0], [1.0, 1.0]])),
            polarization_gain=float(extra.get("polarization_gain", 0.0)),
        )
    except (TypeError, IndexError, ValueError) as e:
        raise ParameterError(f"参考电池配置格式错误: {e}") from e


def load_reference_cell(path: Union[str, Path]) -> ReferenceCell:
    path = Path(path)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except (json.JSONDecodeError, IOError) as e:
        raise ParameterError(f"加载参考电池配置失败 {path}: {e}") from e
    return reference_cell_from_dict(data)


def _rk4(cell: ReferenceCell, arr: np.ndarray, i: float, t_amb: float, h: float) -> np.ndarray:
    k1 = cell.derivative(arr, i, t_amb)
    k2 = cell.derivative(arr + 0.5 * h * k1, i, t_amb)
    k3 = cell.derivative(arr + 0.5 * h * k2, i, t_amb)
    k4 = cell.derivative(arr + h * k3, i, t_amb)
    return arr + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def reference_simulate(cell: ReferenceCell, x0: CellState, profile: CurrentProfile,
                       step: float = 0.1, t_amb: Optional[float] = None,
                       record_every: float = 1.0) -> Trajectory:
    """
    参考电池真值仿真

    每 record_every 秒（以及每段结束时）输出一条 (t, V_true, T_true, 状态) 记录。
    """
    if not 0.0 < step <= MAX_REFERENCE_STEP + 1e-12:
        raise ReferenceStepError(f"参考电池积分步长必须在 (0, {MAX_REFERENCE_STEP}] s 内: {step}")
    if record_every < step:
        raise ParameterError(f"记录间隔 {record_every} s 不能小于积分步长 {step} s")
    t_amb = cell.base.t_amb if t_amb is None else float(t_amb)
    substeps = max(1, math.ceil(record_every / step - 1e-9))
    h = record_every / substeps

    arr = x0.as_array()
    first_current = profile.segments[0][0] if profile.segments else 0.0
    times = [0.0]
    states = [arr]
    currents = [first_current]
    voltages = [cell.terminal_voltage(arr, first_current)]

    t_start = 0.0
    for current, duration in profile.segments:
        n_records, remainder = step_counts(duration, record_every)
        for k in range(1, n_records + 1):
            for _ in range(substeps):
                arr = _rk4(cell, arr, current, t_amb, h)
            times.append(t_start + k * record_every)
            states.append(arr)
            currents.append(current)
            voltages.append(cell.terminal_voltage(arr, current))
        if remainder:
            n_sub = max(1, int(np.ceil(remainder / step - 1e-9)))
            for _ in range(n_sub):
                arr = _rk4(cell, arr, current, t_amb, remainder / n_sub)
            times.append(t_start + duration)
            states.append(arr)
            currents.append(current)
            voltages.append(cell.terminal_voltage(arr, current))
        if not np.all(np.isfinite(arr)):
            raise PropagationError(f"参考电池状态非有限值: t={t_start + duration}, x={arr}")
        t_start += duration

    states_arr = np.array(states)
    return Trajectory(np.array(times), states_arr, np.array(currents),
                      np.array(voltages), states_arr[:, 4].copy())
