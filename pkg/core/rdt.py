"""
剩余放电时间 (RDT) 预测

Δt_RDT = min(Δt_RDT^Vmin, Δt_RDT^Tmax)：
- Vmin 分支由神经网络直接预测（或用仿真真值代替）；
- Tmax 分支在 (0, Δt_RDT^Vmin] 上均匀布置检查点，用精确传播计算温度，
  找到第一个越限区间后二分求交点。
"""

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Union

import numpy as np
import pandas as pd

from core.cell_model import (CellState, HybridModel, StepMap, hybrid_temperature,
                             hybrid_temperature_batch, hybrid_voltage, hybrid_voltage_batch,
                             propagate, step_map)
from core.errors import ParameterError, RdtCapExceeded, UntrainedNetError
from core.mlp import NeuralNet, forward

logger = logging.getLogger(__name__)

BRANCH_VMIN = "voltage"
BRANCH_TMAX = "temperature"

# 真值仿真每批推进的步数
_ORACLE_CHUNK = 256
_ORACLE_REFINE_TOL = 1e-3


def rdt_vmin_oracle(model: HybridModel, x: CellState, i: float, t_amb: float,
                    v_min: float = 3.0, cap: float = 7200.0, step: float = 1.0,
                    fallback: bool = False) -> float:
    """
    恒流仿真得到的 Δt_RDT^Vmin 真值

    以 1 s 步长推进并批量计算 V_hybrid，找到第一个低于 V_min 的步后在该步内二分细化。
    """
    if not i > 0.0:
        raise ParameterError(f"RDT 只对放电电流定义: i={i}")
    if hybrid_voltage(model, x, i, fallback) <= v_min:
        return 0.0

    smap = step_map(i, t_amb, step, model.params)
    arr = x.as_array()
    elapsed = 0.0
    while elapsed < cap:
        previous = arr
        n = int(min(_ORACLE_CHUNK, math.ceil((cap - elapsed) / step)))
        chunk = np.empty((n, 5))
        for k in range(n):
            arr = smap.apply(arr)
            chunk[k] = arr
        voltages = hybrid_voltage_batch(model, chunk, i, fallback)
        below = np.flatnonzero(voltages < v_min)
        if below.size:
            k = int(below[0])
            start = CellState.from_array(chunk[k - 1] if k > 0 else previous)
            return _refine_vmin(model, start, i, t_amb, v_min, elapsed + k * step, step, fallback)
        elapsed += n * step
    raise RdtCapExceeded(cap)


def _refine_vmin(model: HybridModel, start: CellState, i: float, t_amb: float, v_min: float,
                 t0: float, step: float, fallback: bool) -> float:
    """在 [t0, t0 + step] 内二分，start 为 t0 时刻状态且满足 V ≥ V_min"""
    lo, hi = 0.0, step
    while hi - lo > _ORACLE_REFINE_TOL:
        mid = 0.5 * (lo + hi)
        x_mid = propagate(start, i, t_amb, mid, model.params)
        if hybrid_voltage(model, x_mid, i, fallback) < v_min:
            hi = mid
        else:
            lo = mid
    return t0 + 0.5 * (lo + hi)


def rdt_to_charge_fraction(seconds, current, capacity_ah: float):
    """Δt_RDT (s) 换算为放出电量占额定容量的比例"""
    return np.asarray(seconds) * np.asarray(current) / (3600.0 * capacity_ah)


def charge_fraction_to_rdt(fraction: float, current: float, capacity_ah: float) -> float:
    if not current > 0.0:
        raise ParameterError(f"RDT 只对放电电流定义: i={current}")
    return float(fraction) * 3600.0 * capacity_ah / current


# ---------------------------------------------------------------------------
# 预测器
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RdtPredictor:
    """
    RDT 预测器 Ψ(x, i, T_amb; V_min, T_max)

    net 输入为 (v_b, v_s, v_1, t_core, t_surf, i, t_amb)，输出到达 V_min 前放出的电量占额定
    容量的比例 z，换算为 Δt_RDT^Vmin = z·3600·Q/i。V_min 和 T_max 在训练时固定，不作为网络输入；
    起始端电压已不高于 V_min 时直接返回 0，不调用网络。
    """

    model: HybridModel
    net: Optional[NeuralNet] = None
    v_min: float = 3.0
    t_max: float = 50.0
    checkpoints_m: int = 16
    temp_bisect_tol: float = 0.05
    time_tol: float = 0.5
    # 网络未训练时是否退回物理输出
    fallback: bool = False

    def __post_init__(self):
        if self.checkpoints_m < 2:
            raise ParameterError(f"检查点数量至少为 2: {self.checkpoints_m}")
        if not self.temp_bisect_tol > 0.0 or not self.time_tol > 0.0:
            raise ParameterError("温度二分容差必须为正")
        curve = self.model.params.ocv
        if not curve.u_min <= self.v_min <= curve.u_max:
            raise ParameterError(f"V_min={self.v_min} 不在 OCV 范围 [{curve.u_min}, {curve.u_max}] 内")
        if self.net is not None and self.net.input_width != 7:
            raise ParameterError(f"RDT 网络输入宽度应为 7，实际为 {self.net.input_width}")

    def vmin_time(self, x: CellState, i: float, t_amb: float) -> float:
        if self.net is None or not self.net.trained:
            raise UntrainedNetError("RDT 网络未训练")
        if hybrid_voltage(self.model, x, i, self.fallback) <= self.v_min:
            return 0.0
        features = np.concatenate([x.as_array(), [i, t_amb]])
        fraction = float(forward(self.net, features)[0])
        return charge_fraction_to_rdt(max(0.0, fraction), i, self.model.capacity_ah)

    def with_limits(self, v_min: Optional[float] = None, t_max: Optional[float] = None) -> "RdtPredictor":
        """换约束限值；网络按固定 V_min 训练，不能改 V_min"""
        if v_min is not None and v_min != self.v_min and self.net is not None:
            raise ParameterError(f"RDT 网络按 V_min={self.v_min} V 训练，不能改为 {v_min} V")
        return replace(self, v_min=self.v_min if v_min is None else v_min,
                       t_max=self.t_max if t_max is None else t_max)


@dataclass(frozen=True)
class OracleRdtPredictor(RdtPredictor):
    """Vmin 分支用仿真真值代替网络；超出上限时返回上限"""

    cap: float = 7200.0

    def vmin_time(self, x: CellState, i: float, t_amb: float) -> float:
        try:
            return rdt_vmin_oracle(self.model, x, i, t_amb, v_min=self.v_min, cap=self.cap,
                                   fallback=self.fallback)
        except RdtCapExceeded:
            return self.cap


def predict_rdt_vmin(p: RdtPredictor, x: CellState, i: float, t_amb: float) -> float:
    return p.vmin_time(x, i, t_amb)


class TmaxCrossing(NamedTuple):
    time: float
    iterations: int


def _temperatures(p: RdtPredictor, states: np.ndarray) -> np.ndarray:
    return hybrid_temperature_batch(p.model, states, fallback=p.fallback)


def temperature_crossing(p: RdtPredictor, x: CellState, i: float, t_amb: float,
                         upper: float) -> Optional[TmaxCrossing]:
    """
    在 (0, upper] 内寻找 T_hybrid 第一次超过 T_max 的时刻

    检查点都不越限时返回 None；初始温度已越限时返回时间 0。
    二分在 |T − T_max| < temp_bisect_tol 或区间短于 time_tol 时停止。
    """
    if not upper > 0.0:
        raise ParameterError(f"温度搜索上界必须为正: {upper}")
    if not math.isfinite(p.t_max):
        return None
    fallback = p.fallback
    if hybrid_temperature(p.model, x, fallback) > p.t_max:
        return TmaxCrossing(0.0, 0)

    m = p.checkpoints_m
    delta = upper / m
    smap: StepMap = step_map(i, t_amb, delta, p.model.params)
    checkpoints = np.empty((m, 5))
    arr = x.as_array()
    for k in range(m):
        arr = smap.apply(arr)
        checkpoints[k] = arr
    temperatures = _temperatures(p, checkpoints)
    above = np.flatnonzero(temperatures > p.t_max)
    if not above.size:
        return None

    k = int(above[0])
    base = x if k == 0 else CellState.from_array(checkpoints[k - 1])
    t_base = k * delta
    lo, hi = 0.0, delta
    iterations = 0
    while True:
        tau = 0.5 * (lo + hi)
        iterations += 1
        temperature = hybrid_temperature(p.model, propagate(base, i, t_amb, tau, p.model.params), fallback)
        if abs(temperature - p.t_max) < p.temp_bisect_tol:
            return TmaxCrossing(t_base + tau, iterations)
        if temperature < p.t_max:
            lo = tau
        else:
            hi = tau
        if hi - lo < p.time_tol:
            return TmaxCrossing(t_base + 0.5 * (lo + hi), iterations)


def find_rdt_tmax(p: RdtPredictor, x: CellState, i: float, t_amb: float,
                  upper: float) -> Optional[float]:
    """Δt_RDT^Tmax；在 (0, upper] 内未到达 T_max 时返回 None"""
    crossing = temperature_crossing(p, x, i, t_amb, upper)
    return None if crossing is None else crossing.time


class RdtPrediction(NamedTuple):
    seconds: float
    branch: str


def predict_rdt_detail(p: RdtPredictor, x: CellState, i: float, t_amb: float) -> RdtPrediction:
    """RDT 以及先到达的约束分支"""
    if not i > 0.0:
        raise ParameterError(f"RDT 只对放电电流定义: i={i}")
    vmin_time = predict_rdt_vmin(p, x, i, t_amb)
    if vmin_time <= 0.0:
        return RdtPrediction(0.0, BRANCH_VMIN)
    tmax_time = find_rdt_tmax(p, x, i, t_amb, upper=vmin_time)
    if tmax_time is not None and tmax_time < vmin_time:
        return RdtPrediction(tmax_time, BRANCH_TMAX)
    return RdtPrediction(vmin_time, BRANCH_VMIN)


def predict_rdt(p: RdtPredictor, x: CellState, i: float, t_amb: float) -> float:
    """Δt_RDT = min(Δt_RDT^Vmin, Δt_RDT^Tmax)"""
    return predict_rdt_detail(p, x, i, t_amb).seconds


# ---------------------------------------------------------------------------
# 验证报告
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ValidationPoint:
    state: CellState
    current: float
    t_amb: float


def validate_predictor(p: RdtPredictor, oracle: OracleRdtPredictor,
                       points: Sequence[ValidationPoint],
                       rel_tol: float = 0.02, abs_tol: float = 5.0) -> pd.DataFrame:
    """
    逐点比较预测器与双仿真真值

    容差为 max(rel_tol × 真值, abs_tol)。返回列：grid_index, oracle, prediction, branch,
    oracle_branch, abs_error, within_tol。
    """
    rows: List[dict] = []
    for index, point in enumerate(points):
        truth = predict_rdt_detail(oracle, point.state, point.current, point.t_amb)
        guess = predict_rdt_detail(p, point.state, point.current, point.t_amb)
        error = abs(guess.seconds - truth.seconds)
        rows.append({
            "grid_index": index,
            "oracle": truth.seconds,
            "prediction": guess.seconds,
            "branch": guess.branch,
            "oracle_branch": truth.branch,
            "abs_error": error,
            "within_tol": error <= max(rel_tol * truth.seconds, abs_tol),
        })
    report = pd.DataFrame(rows, columns=["grid_index", "oracle", "prediction", "branch",
                                         "oracle_branch", "abs_error", "within_tol"])
    if len(report):
        logger.info(f"RDT 验证: {len(report)} 个点，容差内比例 {report['within_tol'].mean():.1%}，"
                    f"平均绝对误差 {report['abs_error'].mean():.2f} s")
    return report


def save_validation_report(report: pd.DataFrame, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    report.to_csv(path, index=False)
    logger.info(f"RDT 验证报告已保存: {path}")
