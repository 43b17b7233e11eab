"""
峰值功率预测

在 [i_min, i_max_bound] 上二分搜索 i_max：在 (0, H] 内以电流 i 放电、随后 (H, H+H_el]
内以紧急降落电流 i_el 放电，全程满足 V ≥ V_min 且 T ≤ T_max。

- shortcut_search：每个候选电流都逐秒仿真整个 H + H_el 窗口；
- proposed_search：用 RDT 预测器与 H、H_el 比较，每次迭代只做一次状态传播。

时刻 t+H 归属于电流 i 段：逐秒检查时第 H 步用 i 计算电压，power_limit 也用 i_max
计算 V(t+H)。
"""

import logging
import math
import time
from dataclasses import dataclass, replace
from typing import Callable, NamedTuple, Optional

from core.cell_model import (CellState, HybridModel, hybrid_temperature_batch,
                             hybrid_voltage, hybrid_voltage_batch, propagate, step_counts, step_map)
from core.errors import ParameterError
from core.rdt import RdtPredictor, predict_rdt_detail

logger = logging.getLogger(__name__)

CONSTRAINT_VOLTAGE = "voltage"
CONSTRAINT_TEMPERATURE = "temperature"
CONSTRAINT_CURRENT_BOUND = "current_bound"
CONSTRAINT_NONE = "none"

METHOD_SHORTCUT = "shortcut"
METHOD_PROPOSED = "proposed"


@dataclass(frozen=True)
class SearchConfig:
    """搜索设置，电流单位 A，时间单位 s"""

    h: float
    h_el: float = 105.0
    i_el: float = 12.5
    i_min: float = 0.0
    i_max_bound: float = 20.0
    v_min: float = 3.0
    t_max: float = 50.0
    eps: float = 0.025
    # None 表示使用模型参数中的环境温度
    t_amb: Optional[float] = None

    def __post_init__(self):
        if not self.i_min < self.i_max_bound:
            raise ParameterError(f"要求 i_min < i_max_bound: {self.i_min}, {self.i_max_bound}")
        if not self.h > 0.0:
            raise ParameterError(f"预测时域必须为正: {self.h}")
        if self.h_el < 0.0:
            raise ParameterError(f"紧急降落时域不能为负: {self.h_el}")
        if not self.eps > 0.0:
            raise ParameterError(f"二分容差必须为正: {self.eps}")
        if self.i_min < 0.0:
            raise ParameterError(f"i_min 不能为负: {self.i_min}")

    @classmethod
    def from_c_rates(cls, capacity_ah: float, h: float, h_el: float = 105.0, i_el_c: float = 5.0,
                     i_min_c: float = 0.0, i_max_c: float = 8.0, **kwargs) -> "SearchConfig":
        return cls(h=h, h_el=h_el, i_el=i_el_c * capacity_ah, i_min=i_min_c * capacity_ah,
                   i_max_bound=i_max_c * capacity_ah, **kwargs)

    @property
    def max_iterations(self) -> int:
        return math.ceil(math.log2((self.i_max_bound - self.i_min) / self.eps)) + 1

    def resolve_t_amb(self, m: HybridModel) -> float:
        return m.params.t_amb if self.t_amb is None else float(self.t_amb)


@dataclass(frozen=True)
class SearchResult:
    i_max: float
    p_max: float
    feasible: bool
    iterations: int
    wall_time: float
    constraint_binding: str
    method: str = METHOD_SHORTCUT


class Feasibility(NamedTuple):
    feasible: bool
    time: Optional[float] = None
    constraint: Optional[str] = None

    def __bool__(self) -> bool:
        return self.feasible


FEASIBLE = Feasibility(True)


def _check_segment(m: HybridModel, arr, current: float, t_amb: float, duration: float,
                   t_offset: float, cfg: SearchConfig, fallback: bool):
    """逐秒推进一段恒流，返回 (末状态, 第一个违例或 None)"""
    n_full, remainder = step_counts(duration, 1.0)
    smap = step_map(current, t_amb, 1.0, m.params) if n_full else None
    for k in range(1, n_full + 2 if remainder else n_full + 1):
        if k <= n_full:
            arr = smap.apply(arr)
            elapsed = t_offset + k
        else:
            arr = step_map(current, t_amb, remainder, m.params).apply(arr)
            elapsed = t_offset + duration
        row = arr[None, :]
        if hybrid_voltage_batch(m, row, current, fallback)[0] < cfg.v_min:
            return arr, Feasibility(False, elapsed, CONSTRAINT_VOLTAGE)
        if hybrid_temperature_batch(m, row, fallback)[0] > cfg.t_max:
            return arr, Feasibility(False, elapsed, CONSTRAINT_TEMPERATURE)
    return arr, None


def feasible_over_horizon(m: HybridModel, x: CellState, i: float, cfg: SearchConfig,
                          fallback: bool = False) -> Feasibility:
    """
    逐秒检查 (0, H + H_el] 内的电压/温度约束

    返回第一个违例的时间和约束类型。
    """
    t_amb = cfg.resolve_t_amb(m)
    arr, violation = _check_segment(m, x.as_array(), i, t_amb, cfg.h, 0.0, cfg, fallback)
    if violation is not None:
        return violation
    if cfg.h_el > 0.0:
        _, violation = _check_segment(m, arr, cfg.i_el, t_amb, cfg.h_el, cfg.h, cfg, fallback)
        if violation is not None:
            return violation
    return FEASIBLE


def power_limit(m: HybridModel, x: CellState, i_max: float, cfg: SearchConfig,
                fallback: bool = False) -> float:
    """P_max = i_max · V_hybrid(x(t+H), i_max)"""
    if i_max <= 0.0:
        return 0.0
    x_h = propagate(x, i_max, cfg.resolve_t_amb(m), cfg.h, m.params)
    return i_max * hybrid_voltage(m, x_h, i_max, fallback)


# ---------------------------------------------------------------------------
# 二分搜索
# ---------------------------------------------------------------------------

class _Bisection(NamedTuple):
    i_max: float
    feasible: bool
    iterations: int
    hi_lowered: bool
    wall_time: float


def _bisect(accepts: Callable[[float], bool], cfg: SearchConfig) -> _Bisection:
    """
    候选 i = (lo + hi)/2，可行时若 |i − hi| < eps 则停止，否则 lo = i；不可行时 hi = i。

    所有候选都不可行时区间宽度小于 eps 也停止；若 lo 从未验证可行则最后检查一次 i_min。
    """
    started = time.perf_counter()
    lo, hi = cfg.i_min, cfg.i_max_bound
    lo_verified = False
    hi_lowered = False
    iterations = 0
    while hi - lo >= cfg.eps:
        i = 0.5 * (lo + hi)
        iterations += 1
        if accepts(i):
            lo = i
            lo_verified = True
            if abs(i - hi) < cfg.eps:
                break
        else:
            hi = i
            hi_lowered = True
    if not lo_verified:
        iterations += 1
        lo_verified = accepts(cfg.i_min)
    wall = time.perf_counter() - started
    if not lo_verified:
        return _Bisection(0.0, False, iterations, hi_lowered, wall)
    return _Bisection(lo, True, iterations, hi_lowered, wall)


def _finish(m: HybridModel, x: CellState, cfg: SearchConfig, outcome: _Bisection,
            binding_probe: Callable[[float], str], method: str, fallback: bool) -> SearchResult:
    if not outcome.feasible:
        binding = binding_probe(cfg.i_min)
        logger.debug(f"{method} 搜索不可行: 连 i_min={cfg.i_min:.3f} A 也违反 {binding} 约束")
        return SearchResult(0.0, 0.0, False, outcome.iterations, outcome.wall_time, binding, method)
    if not outcome.hi_lowered:
        binding = CONSTRAINT_CURRENT_BOUND
    else:
        binding = binding_probe(outcome.i_max + 2.0 * cfg.eps)
    p_max = power_limit(m, x, outcome.i_max, cfg, fallback)
    return SearchResult(outcome.i_max, p_max, True, outcome.iterations, outcome.wall_time,
                        binding, method)


def shortcut_search(m: HybridModel, x: CellState, cfg: SearchConfig,
                    fallback: bool = False) -> SearchResult:
    """全时域逐秒仿真做可行性检查的二分搜索"""

    def accepts(i: float) -> bool:
        return feasible_over_horizon(m, x, i, cfg, fallback).feasible

    def probe(i: float) -> str:
        verdict = feasible_over_horizon(m, x, i, cfg, fallback)
        return CONSTRAINT_NONE if verdict.feasible else verdict.constraint

    outcome = _bisect(accepts, cfg)
    return _finish(m, x, cfg, outcome, probe, METHOD_SHORTCUT, fallback)


def proposed_search(m: HybridModel, p: RdtPredictor, x: CellState, cfg: SearchConfig,
                    fallback: bool = False) -> SearchResult:
    """
    RDT 引导的二分搜索

    候选 i 可行当且仅当 Δt¹_RDT = Ψ(x, i) ≥ H，且传播到 t+H 后 Δt²_RDT = Ψ(x(t+H), i_el) ≥ H_el。
    """
    if p.v_min != cfg.v_min or p.t_max != cfg.t_max:
        p = p.with_limits(v_min=cfg.v_min, t_max=cfg.t_max)
    t_amb = cfg.resolve_t_amb(m)

    def judge(i: float) -> Optional[str]:
        """返回先触发的约束，可行时返回 None"""
        if i > 0.0:
            first = predict_rdt_detail(p, x, i, t_amb)
            if first.seconds < cfg.h:
                return first.branch
        else:
            # 零电流下 RDT 无定义，直接检查主时域
            verdict = feasible_over_horizon(m, x, i, replace(cfg, h_el=0.0), fallback)
            if not verdict.feasible:
                return verdict.constraint
        if cfg.h_el > 0.0 and cfg.i_el > 0.0:
            x_h = propagate(x, i, t_amb, cfg.h, m.params)
            second = predict_rdt_detail(p, x_h, cfg.i_el, t_amb)
            if second.seconds < cfg.h_el:
                return second.branch
        return None

    def accepts(i: float) -> bool:
        return judge(i) is None

    def probe(i: float) -> str:
        return judge(i) or CONSTRAINT_NONE

    outcome = _bisect(accepts, cfg)
    return _finish(m, x, cfg, outcome, probe, METHOD_PROPOSED, fallback)
