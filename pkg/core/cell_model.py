"""
混合电池模型

NDC 电路模型 + 两节点热模型组成线性状态方程，外接两个神经网络输出头
h_V（端电压）和 h_T（表面温度）。恒定输入下的状态传播用增广矩阵指数精确求解。
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.linalg import expm

from core.errors import DimensionError, ParameterError, PropagationError, UntrainedNetError
from core.mlp import NeuralNet, forward
from core.params import ModelParams, ocv

logger = logging.getLogger(__name__)

STATE_FIELDS = ("v_b", "v_s", "v_1", "t_core", "t_surf")

# h_T 默认输入：v_b, t_core, t_surf
DEFAULT_T_MASK = (0, 3, 4)


@dataclass(frozen=True)
class CellState:
    """混合模型状态 x = [V_b, V_s, V_1, T_core, T_surf]"""

    v_b: float
    v_s: float
    v_1: float
    t_core: float
    t_surf: float

    def __post_init__(self):
        for name in STATE_FIELDS:
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise PropagationError(f"状态分量 {name} 非有限值: {value}")
            object.__setattr__(self, name, value)

    def as_array(self) -> np.ndarray:
        return np.array([self.v_b, self.v_s, self.v_1, self.t_core, self.t_surf])

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "CellState":
        if len(values) != 5:
            raise DimensionError(f"状态向量长度应为 5，实际为 {len(values)}")
        return cls(*(float(v) for v in values))


@dataclass(frozen=True)
class CellStateDerivative:
    v_b: float
    v_s: float
    v_1: float
    t_core: float
    t_surf: float

    def as_array(self) -> np.ndarray:
        return np.array([self.v_b, self.v_s, self.v_1, self.t_core, self.t_surf])


def state_at_soc(params: ModelParams, soc: float, t_amb: Optional[float] = None) -> CellState:
    """静置状态约定：v_b = v_s 按 SoC 映射到 OCV 定义域，v_1 = 0，温度等于环境温度"""
    if not 0.0 <= soc <= 1.0:
        raise ParameterError(f"SoC 必须在 [0, 1] 内: {soc}")
    t = params.t_amb if t_amb is None else float(t_amb)
    curve = params.ocv
    v = curve.vs_lo + soc * (curve.vs_hi - curve.vs_lo)
    return CellState(v, v, 0.0, t, t)


def soc_of(params: ModelParams, x: CellState) -> float:
    """按电荷守恒量计算的 SoC"""
    ndc = params.ndc
    curve = params.ocv
    mean_v = (ndc.c_b * x.v_b + ndc.c_s * x.v_s) / ndc.total_capacitance
    return (mean_v - curve.vs_lo) / (curve.vs_hi - curve.vs_lo)


def stored_charge(params: ModelParams, x: CellState) -> float:
    """c_b·v_b + c_s·v_s，单位库仑"""
    return params.ndc.c_b * x.v_b + params.ndc.c_s * x.v_s


def state_derivative(x: CellState, i: float, t_amb: float, p: ModelParams) -> CellStateDerivative:
    """ẋ = f_phy(x, I, T_amb)"""
    arr = x.as_array()
    d_e = p.ndc.a_matrix @ arr[:3] + p.ndc.b_vector * i
    d_t = p.thermal.a_matrix @ arr[3:] + p.thermal.b_matrix(p.ndc.r_0) @ np.array([i * i, t_amb])
    return CellStateDerivative(*d_e, *d_t)


@dataclass(frozen=True)
class StepMap:
    """恒定输入下 dt 时长的仿射状态转移 x' = F x + g"""

    matrix: np.ndarray
    offset: np.ndarray

    def apply(self, arr: np.ndarray) -> np.ndarray:
        return self.matrix @ arr + self.offset

    def then(self, other: "StepMap") -> "StepMap":
        """先执行 self 再执行 other"""
        return StepMap(other.matrix @ self.matrix, other.matrix @ self.offset + other.offset)


def _check_inputs(i: float, t_amb: float, dt: float) -> None:
    if not (math.isfinite(i) and math.isfinite(t_amb) and math.isfinite(dt)):
        raise PropagationError(f"输入必须为有限值: i={i}, t_amb={t_amb}, dt={dt}")
    if dt < 0.0:
        raise PropagationError(f"时间步长不能为负: {dt}")


def step_map(i: float, t_amb: float, dt: float, p: ModelParams) -> StepMap:
    """
    构造精确转移映射

    A_NDC 有零特征值，不能用 A⁻¹(e^{AΔt}−I)B。电学和热学两块在给定输入下解耦，
    分别对 [[A, B·u], [0, 0]]·dt 求矩阵指数。
    """
    _check_inputs(i, t_amb, dt)
    aug_e = np.zeros((4, 4))
    aug_e[:3, :3] = p.ndc.a_matrix
    aug_e[:3, 3] = p.ndc.b_vector * i
    aug_t = np.zeros((3, 3))
    aug_t[:2, :2] = p.thermal.a_matrix
    aug_t[:2, 2] = p.thermal.b_matrix(p.ndc.r_0) @ np.array([i * i, t_amb])

    exp_e = expm(aug_e * dt)
    exp_t = expm(aug_t * dt)

    matrix = np.zeros((5, 5))
    matrix[:3, :3] = exp_e[:3, :3]
    matrix[3:, 3:] = exp_t[:2, :2]
    offset = np.concatenate([exp_e[:3, 3], exp_t[:2, 2]])
    return StepMap(matrix, offset)


def propagate(x: CellState, i: float, t_amb: float, dt: float, p: ModelParams) -> CellState:
    """φ(x, i, T_amb, Δt)：恒定输入下的解析解"""
    i, t_amb, dt = float(i), float(t_amb), float(dt)
    _check_inputs(i, t_amb, dt)
    if dt == 0.0:
        return x
    result = step_map(i, t_amb, dt, p).apply(x.as_array())
    if not np.all(np.isfinite(result)):
        raise PropagationError(f"传播结果非有限值: {result}")
    return CellState.from_array(result)


def ndc_output(p: ModelParams, x: CellState, i: float) -> float:
    """物理端电压 h(V_s) + V_1 − R_0·I"""
    return ocv(p.ocv, x.v_s) + x.v_1 - p.ndc.r_0 * i


# ---------------------------------------------------------------------------
# 混合模型
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HybridModel:
    """物理状态方程 + 神经网络输出头"""

    params: ModelParams
    net_v: Optional[NeuralNet] = None
    net_t: Optional[NeuralNet] = None
    t_mask: Tuple[int, ...] = DEFAULT_T_MASK
    physics_only: bool = False

    def __post_init__(self):
        mask = tuple(int(k) for k in self.t_mask)
        if not mask or any(k < 0 or k > 4 for k in mask) or len(set(mask)) != len(mask):
            raise ParameterError(f"h_T 输入掩码非法: {self.t_mask}")
        object.__setattr__(self, "t_mask", mask)
        if self.net_v is not None and self.net_v.input_width != 6:
            raise DimensionError(f"h_V 输入宽度应为 6，实际为 {self.net_v.input_width}")
        if self.net_t is not None and self.net_t.input_width != len(mask):
            raise DimensionError(
                f"h_T 输入宽度应为 {len(mask)}，实际为 {self.net_t.input_width}")

    @property
    def ndc(self):
        return self.params.ndc

    @property
    def thermal(self):
        return self.params.thermal

    @property
    def capacity_ah(self) -> float:
        return self.params.capacity_ah

    @property
    def t_amb(self) -> float:
        return self.params.t_amb

    @classmethod
    def physics(cls, params: ModelParams) -> "HybridModel":
        """只用物理输出的模型（无网络）"""
        return cls(params=params, physics_only=True)


def _usable(net: Optional[NeuralNet]) -> bool:
    return net is not None and net.trained


def hybrid_voltage_batch(m: HybridModel, states: np.ndarray, currents: np.ndarray,
                         fallback: bool = False) -> np.ndarray:
    """批量计算 V_hybrid，states 形状为 (N, 5)"""
    states = np.atleast_2d(states)
    currents = np.broadcast_to(np.asarray(currents, dtype=float), (states.shape[0],))
    if _usable(m.net_v):
        inputs = np.column_stack([states, currents])
        return forward(m.net_v, inputs)[:, 0]
    if fallback or m.physics_only:
        return ocv(m.params.ocv, states[:, 1]) + states[:, 2] - m.params.ndc.r_0 * currents
    raise UntrainedNetError("h_V 网络未训练，且未允许退回物理模型")


def hybrid_temperature_batch(m: HybridModel, states: np.ndarray,
                             fallback: bool = False) -> np.ndarray:
    states = np.atleast_2d(states)
    if _usable(m.net_t):
        return forward(m.net_t, states[:, list(m.t_mask)])[:, 0]
    if fallback or m.physics_only:
        return states[:, 4].copy()
    raise UntrainedNetError("h_T 网络未训练，且未允许退回物理模型")


def hybrid_voltage(m: HybridModel, x: CellState, i: float, fallback: bool = False) -> float:
    """V_hybrid = h_V(x, I)"""
    return float(hybrid_voltage_batch(m, x.as_array()[None, :], np.array([i]), fallback)[0])


def hybrid_temperature(m: HybridModel, x: CellState, fallback: bool = False) -> float:
    """T_hybrid = h_T(x)；物理退回时返回 t_surf"""
    return float(hybrid_temperature_batch(m, x.as_array()[None, :], fallback)[0])


# ---------------------------------------------------------------------------
# 电流工况与仿真
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CurrentProfile:
    """分段恒定电流工况，每段为 (电流 A, 持续时间 s)"""

    segments: Tuple[Tuple[float, float], ...] = ()

    def __post_init__(self):
        segments = tuple((float(c), float(d)) for c, d in self.segments)
        for current, duration in segments:
            if not (math.isfinite(current) and math.isfinite(duration)) or duration <= 0.0:
                raise ParameterError(f"工况段非法: current={current}, duration={duration}")
        object.__setattr__(self, "segments", segments)

    @property
    def duration(self) -> float:
        return sum(d for _, d in self.segments)

    @classmethod
    def constant(cls, current: float, duration: float) -> "CurrentProfile":
        return cls(((current, duration),))

    @classmethod
    def from_c_rates(cls, phases: Iterable[Tuple[float, float]], capacity_ah: float) -> "CurrentProfile":
        return cls(tuple((c * capacity_ah, d) for c, d in phases))


@dataclass(frozen=True)
class Trajectory:
    """仿真轨迹：每条记录为 (时间, 状态, 电流, 电压, 温度)"""

    times: np.ndarray
    states: np.ndarray
    currents: np.ndarray
    voltages: np.ndarray
    temperatures: np.ndarray

    def __len__(self) -> int:
        return len(self.times)

    @property
    def final_state(self) -> CellState:
        return CellState.from_array(self.states[-1])

    def state(self, k: int) -> CellState:
        return CellState.from_array(self.states[k])

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.states, columns=list(STATE_FIELDS))
        frame.insert(0, "time", self.times)
        frame["current"] = self.currents
        frame["voltage"] = self.voltages
        frame["temperature"] = self.temperatures
        return frame


def step_counts(duration: float, step: float) -> Tuple[int, float]:
    """整步数和剩余的不足一步的时长"""
    n_full = int(math.floor(duration / step + 1e-9))
    remainder = duration - n_full * step
    if remainder < 1e-9 * max(1.0, duration):
        remainder = 0.0
    return n_full, remainder


def simulate_states(params: ModelParams, x0: CellState, profile: CurrentProfile,
                    step: float = 1.0, t_amb: Optional[float] = None
                    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """只传播状态，返回 (times, states, currents)"""
    if not step > 0.0:
        raise ParameterError(f"仿真步长必须为正: {step}")
    t_amb = params.t_amb if t_amb is None else float(t_amb)

    first_current = profile.segments[0][0] if profile.segments else 0.0
    times: List[float] = [0.0]
    states: List[np.ndarray] = [x0.as_array()]
    currents: List[float] = [first_current]

    arr = x0.as_array()
    t_start = 0.0
    for current, duration in profile.segments:
        n_full, remainder = step_counts(duration, step)
        if n_full:
            full = step_map(current, t_amb, step, params)
            for k in range(1, n_full + 1):
                arr = full.apply(arr)
                times.append(t_start + k * step)
                states.append(arr)
                currents.append(current)
        if remainder:
            arr = step_map(current, t_amb, remainder, params).apply(arr)
            times.append(t_start + duration)
            states.append(arr)
            currents.append(current)
        t_start += duration

    states_arr = np.array(states)
    if not np.all(np.isfinite(states_arr)):
        raise PropagationError("仿真过程中出现非有限状态")
    return np.array(times), states_arr, np.array(currents)


def simulate(m: HybridModel, x0: CellState, profile: CurrentProfile, step: float = 1.0,
             t_amb: Optional[float] = None, fallback: bool = False) -> Trajectory:
    """
    沿分段恒定工况仿真混合模型

    每段内逐步调用精确转移，步长只决定输出分辨率。记录 k 的电压按该步所加电流计算，
    初始记录使用第一段电流（工况为空时为 0）。
    """
    times, states, currents = simulate_states(m.params, x0, profile, step, t_amb)
    voltages = hybrid_voltage_batch(m, states, currents, fallback)
    temperatures = hybrid_temperature_batch(m, states, fallback)
    return Trajectory(times, states, currents, voltages, temperatures)
