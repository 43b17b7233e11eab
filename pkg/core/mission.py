"""
任务剖面回放、消融对比与计时基准

沿 eVTOL 任务剖面（起飞 5C、巡航 1.48C、降落 5C）逐秒开环推进混合模型状态，
每隔 cadence 秒对每个预测时域运行一次功率搜索。
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from core.cell_model import (CellState, CurrentProfile, HybridModel, hybrid_temperature,
                             hybrid_voltage, propagate, state_at_soc)
from core.errors import ParameterError
from core.power_search import (METHOD_PROPOSED, METHOD_SHORTCUT, SearchConfig, SearchResult,
                               proposed_search, shortcut_search)
from core.rdt import RdtPredictor

logger = logging.getLogger(__name__)

MODE_FULL = "full"
MODE_NO_TMAX = "no_tmax"
MODE_NO_EMERGENCY = "no_emergency"
MODES = (MODE_FULL, MODE_NO_TMAX, MODE_NO_EMERGENCY)

METHOD_BOTH = "both"
METHODS = (METHOD_PROPOSED, METHOD_SHORTCUT, METHOD_BOTH)


@dataclass(frozen=True)
class MissionProfile:
    """任务剖面，每个阶段为 (名称, C 倍率, 时长 s)"""

    phases: Tuple[Tuple[str, float, float], ...]

    def __post_init__(self):
        phases = tuple((str(n), float(c), float(d)) for n, c, d in self.phases)
        if not phases:
            raise ParameterError("任务剖面至少需要一个阶段")
        for name, c_rate, duration in phases:
            if not duration > 0.0 or c_rate < 0.0 or not math.isfinite(c_rate):
                raise ParameterError(f"任务阶段 {name} 非法: c_rate={c_rate}, duration={duration}")
        object.__setattr__(self, "phases", phases)

    @classmethod
    def default(cls) -> "MissionProfile":
        return cls((("takeoff", 5.0, 75.0), ("cruise", 1.48, 900.0), ("landing", 5.0, 105.0)))

    @classmethod
    def from_list(cls, phases: Sequence[Sequence]) -> "MissionProfile":
        try:
            return cls(tuple((p[0], p[1], p[2]) for p in phases))
        except (TypeError, IndexError) as e:
            raise ParameterError(f"任务剖面格式错误: {e}") from e

    @property
    def duration(self) -> float:
        return sum(d for _, _, d in self.phases)

    def phase_at(self, t: float) -> Tuple[str, float]:
        """t 时刻所处阶段的 (名称, C 倍率)；阶段区间左闭右开"""
        elapsed = 0.0
        for name, c_rate, duration in self.phases:
            if t < elapsed + duration:
                return name, c_rate
            elapsed += duration
        name, c_rate, _ = self.phases[-1]
        return name, c_rate

    def current_at(self, t: float, capacity_ah: float) -> float:
        return self.phase_at(t)[1] * capacity_ah

    def to_current_profile(self, capacity_ah: float) -> CurrentProfile:
        return CurrentProfile.from_c_rates(((c, d) for _, c, d in self.phases), capacity_ah)


@dataclass
class MissionRecord:
    """
    任务回放中的一秒

    predictions[H][method] 为该时刻的搜索结果；非搜索时刻沿用最近一次结果，searched 为 False。
    """

    time: float
    phase: str
    actual_current: float
    v_hybrid: float
    t_hybrid: float
    state: CellState
    searched: bool = False
    predictions: Dict[float, Dict[str, SearchResult]] = field(default_factory=dict)

    def result(self, h: float, method: str) -> SearchResult:
        return self.predictions[h][method]


def config_for_mode(cfg: SearchConfig, mode: str) -> SearchConfig:
    if mode == MODE_FULL:
        return cfg
    if mode == MODE_NO_TMAX:
        return replace(cfg, t_max=math.inf)
    if mode == MODE_NO_EMERGENCY:
        return replace(cfg, h_el=0.0)
    raise ParameterError(f"未知模式: {mode}，可选 {MODES}")


def methods_for(method: str) -> Tuple[str, ...]:
    if method == METHOD_BOTH:
        return (METHOD_PROPOSED, METHOD_SHORTCUT)
    if method in (METHOD_PROPOSED, METHOD_SHORTCUT):
        return (method,)
    raise ParameterError(f"未知方法: {method}，可选 {METHODS}")


def run_search(m: HybridModel, p: Optional[RdtPredictor], x: CellState, cfg: SearchConfig,
               method: str, fallback: bool = False) -> SearchResult:
    if method == METHOD_SHORTCUT:
        return shortcut_search(m, x, cfg, fallback)
    if p is None:
        raise ParameterError("proposed 方法需要 RDT 预测器")
    return proposed_search(m, p, x, cfg, fallback)


def _search_all(m: HybridModel, p: Optional[RdtPredictor], x: CellState,
                configs: Dict[float, SearchConfig], methods: Tuple[str, ...], fallback: bool,
                pool: Optional[ThreadPoolExecutor]) -> Dict[float, Dict[str, SearchResult]]:
    jobs = [(h, method) for h in configs for method in methods]

    def run(job):
        h, method = job
        return run_search(m, p, x, configs[h], method, fallback)

    results = list(pool.map(run, jobs)) if pool is not None else [run(job) for job in jobs]
    predictions: Dict[float, Dict[str, SearchResult]] = {h: {} for h in configs}
    for (h, method), result in zip(jobs, results):
        predictions[h][method] = result
    return predictions


def run_mission(m: HybridModel, p: Optional[RdtPredictor], profile: MissionProfile,
                horizons: Sequence[float], cfg: SearchConfig, mode: str = MODE_FULL,
                method: str = METHOD_PROPOSED, cadence: int = 5, x0: Optional[CellState] = None,
                workers: int = 1, fallback: bool = False) -> List[MissionRecord]:
    """
    沿任务剖面回放并预测功率

    每秒一条记录 (t = 0, 1, ..., duration−1)。cfg 中的 h 会被 horizons 覆盖；
    no_tmax 令 T_max = +∞，no_emergency 令 H_el = 0。搜索不可行只记录，不中断回放。
    """
    if not horizons:
        raise ParameterError("至少需要一个预测时域")
    if cadence < 1:
        raise ParameterError(f"搜索间隔至少为 1 s: {cadence}")
    methods = methods_for(method)
    base = config_for_mode(cfg, mode)
    configs = {float(h): replace(base, h=float(h)) for h in horizons}
    if p is not None and mode == MODE_NO_TMAX:
        p = p.with_limits(t_max=math.inf)

    params = m.params
    t_amb = base.resolve_t_amb(m)
    x = state_at_soc(params, 1.0, t_amb) if x0 is None else x0
    n_steps = int(math.floor(profile.duration + 1e-9))

    records: List[MissionRecord] = []
    last: Dict[float, Dict[str, SearchResult]] = {}
    infeasible = 0
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for k in range(n_steps):
            phase, c_rate = profile.phase_at(float(k))
            current = c_rate * params.capacity_ah
            record = MissionRecord(
                time=float(k), phase=phase, actual_current=current,
                v_hybrid=hybrid_voltage(m, x, current, fallback),
                t_hybrid=hybrid_temperature(m, x, fallback), state=x)
            if k % cadence == 0:
                last = _search_all(m, p, x, configs, methods, fallback, pool)
                record.searched = True
                infeasible += sum(not r.feasible for by_method in last.values() for r in by_method.values())
                logger.debug(f"t={k}s {phase}: " + ", ".join(
                    f"H={h:g}s/{meth} i_max={r.i_max:.3f}A"
                    for h, by_method in last.items() for meth, r in by_method.items()))
            record.predictions = last
            records.append(record)
            x = propagate(x, current, t_amb, 1.0, params)
    finally:
        if pool is not None:
            pool.shutdown()

    if infeasible:
        logger.warning(f"任务回放中有 {infeasible} 次搜索不可行")
    logger.info(f"任务回放完成: 模式 {mode}，方法 {method}，{n_steps} 条记录")
    return records


def horizon_label(h: float) -> str:
    return f"{h:g}s"


def records_to_frame(records: Sequence[MissionRecord], include_timing: bool = True) -> pd.DataFrame:
    """
    mission.csv 的列：time, phase, current, voltage, temperature, searched，
    然后每个时域 H 的 i_max_H, p_max_H, binding_H, iterations_H, wall_s_H；
    两种方法同时运行时列名追加 _proposed / _shortcut。
    """
    rows = []
    for record in records:
        row = {"time": record.time, "phase": record.phase, "current": record.actual_current,
               "voltage": record.v_hybrid, "temperature": record.t_hybrid,
               "searched": record.searched}
        for h, by_method in record.predictions.items():
            both = len(by_method) > 1
            for method, result in by_method.items():
                suffix = horizon_label(h) + (f"_{method}" if both else "")
                row[f"i_max_{suffix}"] = result.i_max
                row[f"p_max_{suffix}"] = result.p_max
                row[f"binding_{suffix}"] = result.constraint_binding
                row[f"iterations_{suffix}"] = result.iterations
                if include_timing:
                    row[f"wall_s_{suffix}"] = result.wall_time
        rows.append(row)
    return pd.DataFrame(rows)


def run_ablation_comparison(m: HybridModel, p: Optional[RdtPredictor], profile: MissionProfile,
                            cfg: SearchConfig, h: float = 300.0, method: str = METHOD_PROPOSED,
                            cadence: int = 5, workers: int = 1, fallback: bool = False) -> pd.DataFrame:
    """
    三种约束设定下的 P_max 对比表（只含搜索时刻）

    列：time, phase, 以及每个模式的 i_max_<mode>, p_max_<mode>, binding_<mode>。
    """
    if method == METHOD_BOTH:
        raise ParameterError("消融对比只能使用单一方法")
    frames = []
    for mode in MODES:
        records = run_mission(m, p, profile, [h], cfg, mode=mode, method=method,
                              cadence=cadence, workers=workers, fallback=fallback)
        searched = [r for r in records if r.searched]
        frame = pd.DataFrame({
            "time": [r.time for r in searched],
            "phase": [r.phase for r in searched],
            f"i_max_{mode}": [r.result(float(h), method).i_max for r in searched],
            f"p_max_{mode}": [r.result(float(h), method).p_max for r in searched],
            f"binding_{mode}": [r.result(float(h), method).constraint_binding for r in searched],
        })
        frames.append(frame.set_index(["time", "phase"]))
    table = pd.concat(frames, axis=1).reset_index()
    for mode in (MODE_NO_TMAX, MODE_NO_EMERGENCY):
        strict = (table[f"p_max_{mode}"] > table[f"p_max_{MODE_FULL}"]).mean() if len(table) else 0.0
        logger.info(f"{mode} 相对 full 高估功率的时刻比例: {strict:.1%}")
    return table


def run_benchmark(m: HybridModel, p: Optional[RdtPredictor], profile: MissionProfile,
                  horizons: Sequence[float], cfg: SearchConfig, repetitions: int = 1,
                  cadence: int = 5, methods: Sequence[str] = (METHOD_SHORTCUT, METHOD_PROPOSED),
                  fallback: bool = False) -> pd.DataFrame:
    """
    单线程计时基准

    每个 (H, 方法) 的每步平均耗时和标准差，汇总 repetitions 次完整回放。
    列：horizon, method, mean_s, std_s, iterations_mean, steps。
    """
    if repetitions < 1:
        raise ParameterError(f"重复次数至少为 1: {repetitions}")
    timings: Dict[Tuple[float, str], List[float]] = {}
    iterations: Dict[Tuple[float, str], List[int]] = {}
    for method in methods:
        for rep in range(repetitions):
            records = run_mission(m, p, profile, horizons, cfg, method=method,
                                  cadence=cadence, workers=1, fallback=fallback)
            for record in records:
                if not record.searched:
                    continue
                for h in horizons:
                    result = record.result(float(h), method)
                    timings.setdefault((float(h), method), []).append(result.wall_time)
                    iterations.setdefault((float(h), method), []).append(result.iterations)
            logger.info(f"基准: 方法 {method} 第 {rep + 1}/{repetitions} 次回放完成")

    rows = []
    for h in horizons:
        for method in methods:
            values = np.array(timings[(float(h), method)])
            rows.append({"horizon": float(h), "method": method,
                         "mean_s": float(values.mean()), "std_s": float(values.std()),
                         "iterations_mean": float(np.mean(iterations[(float(h), method)])),
                         "steps": len(values)})
    return pd.DataFrame(rows, columns=["horizon", "method", "mean_s", "std_s", "iterations_mean", "steps"])


def benchmark_table(bench: pd.DataFrame) -> pd.DataFrame:
    """每个时域一行、每种方法一列的平均耗时表，附 shortcut/proposed 加速比"""
    table = bench.pivot(index="horizon", columns="method", values="mean_s")
    table.columns = [f"{c}_mean_s" for c in table.columns]
    if {"shortcut_mean_s", "proposed_mean_s"} <= set(table.columns):
        table["speedup"] = table["shortcut_mean_s"] / table["proposed_mean_s"]
    return table.reset_index()
