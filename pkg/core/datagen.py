"""
数据集生成

- 拟合数据集：参考电池给出"实测"电压/温度，同一电流下并行运行的线性模型给出状态，
  二者配对后用于辨识电路参数和训练两个输出头网络。
- RDT 数据集：在 (SoC, 电流, 环境温度) 网格上用混合模型做恒流仿真，记录到达 V_min 的时间。
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.optimize import least_squares

from core.cell_model import (DEFAULT_T_MASK, STATE_FIELDS, CellState, CurrentProfile, HybridModel,
                             hybrid_voltage, propagate, simulate_states, state_at_soc)
from core.errors import ParameterError, RdtCapExceeded, TrainingError
from core.params import ModelParams, NdcParams, ThermalParams, ocv
from core.rdt import rdt_to_charge_fraction, rdt_vmin_oracle
from core.reference_cell import ReferenceCell, reference_simulate

logger = logging.getLogger(__name__)

# 0C 工况按静置处理的时长
REST_DURATION = 300.0

RDT_FLAG_OK = "ok"
RDT_FLAG_BELOW_VMIN = "below_vmin"
RDT_FLAG_CAPPED = "capped"


# ---------------------------------------------------------------------------
# 拟合数据集
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FitRun:
    """一条工况的配对数据：参考电池输出 + 线性模型状态"""

    label: str
    x0: CellState
    profile: CurrentProfile
    times: np.ndarray
    currents: np.ndarray
    states: np.ndarray
    v_true: np.ndarray
    t_true: np.ndarray

    def __len__(self) -> int:
        return len(self.times)


@dataclass(frozen=True)
class FitDataset:
    runs: Tuple[FitRun, ...] = ()
    t_amb: float = 25.0

    def __len__(self) -> int:
        return sum(len(run) for run in self.runs)

    def _stack(self, name: str, width: Optional[int] = None) -> np.ndarray:
        if not self.runs:
            return np.zeros((0, width)) if width else np.zeros(0)
        return np.concatenate([getattr(run, name) for run in self.runs])

    @property
    def states(self) -> np.ndarray:
        return self._stack("states", 5)

    @property
    def currents(self) -> np.ndarray:
        return self._stack("currents")

    @property
    def v_true(self) -> np.ndarray:
        return self._stack("v_true")

    @property
    def t_true(self) -> np.ndarray:
        return self._stack("t_true")

    def voltage_pairs(self) -> Tuple[np.ndarray, np.ndarray]:
        """h_V 训练对：输入 (5 个状态, I)，目标 V_true"""
        return np.column_stack([self.states, self.currents]), self.v_true[:, None]

    def temperature_pairs(self, t_mask: Sequence[int] = DEFAULT_T_MASK) -> Tuple[np.ndarray, np.ndarray]:
        """h_T 训练对：输入为掩码选中的状态，目标 T_true"""
        return self.states[:, list(t_mask)], self.t_true[:, None]

    def to_frame(self) -> pd.DataFrame:
        frames = []
        for run in self.runs:
            frame = pd.DataFrame(run.states, columns=list(STATE_FIELDS))
            frame.insert(0, "time", run.times)
            frame.insert(0, "run", run.label)
            frame["current"] = run.currents
            frame["v_true"] = run.v_true
            frame["t_true"] = run.t_true
            frames.append(frame)
        if not frames:
            return pd.DataFrame(columns=["run", "time", *STATE_FIELDS, "current", "v_true", "t_true"])
        return pd.concat(frames, ignore_index=True)


def _truncate_at_cutoff(v_true: np.ndarray, v_min: float) -> int:
    """到达截止电压前的记录数"""
    below = np.flatnonzero(v_true < v_min)
    return int(below[0]) if below.size else len(v_true)


def _pair_run(cell: ReferenceCell, linear: ModelParams, label: str, x0: CellState,
              profile: CurrentProfile, step: float, t_amb: float, v_min: Optional[float],
              noise: Optional[Tuple[float, float, np.random.Generator]]) -> FitRun:
    reference = reference_simulate(cell, x0, profile, step=step, t_amb=t_amb)
    times, states, currents = simulate_states(linear, x0, profile, step=1.0, t_amb=t_amb)
    if len(times) != len(reference.times) or not np.allclose(times, reference.times):
        raise ParameterError(f"工况 {label} 的参考轨迹与线性模型时间轴不一致")

    v_true = reference.voltages.copy()
    t_true = reference.temperatures.copy()
    n = len(times) if v_min is None else max(1, _truncate_at_cutoff(v_true, v_min))
    if noise is not None:
        sigma_v, sigma_t, rng = noise
        v_true = v_true + rng.normal(0.0, sigma_v, size=v_true.shape)
        t_true = t_true + rng.normal(0.0, sigma_t, size=t_true.shape)
    return FitRun(label, x0, profile, times[:n], currents[:n], states[:n], v_true[:n], t_true[:n])


def build_fit_dataset(cell: ReferenceCell, c_rates: Sequence[float], step: float = 0.1,
                      v_min: float = 3.0, soc0: float = 1.0, t_amb: Optional[float] = None,
                      extra_profiles: Sequence[Tuple[str, CurrentProfile]] = (),
                      noise_std_v: float = 0.0, noise_std_t: float = 0.0,
                      seed: int = 0, linear_params: Optional[ModelParams] = None) -> FitDataset:
    """
    按 C 倍率列表生成拟合数据集

    每个倍率从 soc0 静置状态恒流放电到截止电压（最长为名义放电时长），0C 表示静置
    REST_DURATION 秒。extra_profiles 为附加的分段工况（例如任务剖面），不做截止截断。
    线性模型默认使用参考电池的基础参数，linear_params 可替换为辨识得到的参数。
    """
    t_amb = cell.base.t_amb if t_amb is None else float(t_amb)
    linear = cell.base if linear_params is None else linear_params
    x0 = state_at_soc(cell.base, soc0, t_amb)
    noise = None
    if noise_std_v > 0.0 or noise_std_t > 0.0:
        noise = (noise_std_v, noise_std_t, np.random.default_rng(seed))

    runs: List[FitRun] = []
    for c_rate in c_rates:
        c_rate = float(c_rate)
        if c_rate < 0.0 or not math.isfinite(c_rate):
            raise ParameterError(f"C 倍率必须为非负有限值: {c_rate}")
        if c_rate == 0.0:
            profile = CurrentProfile.constant(0.0, REST_DURATION)
        else:
            profile = CurrentProfile.constant(cell.base.amps(c_rate), math.ceil(3600.0 / c_rate))
        runs.append(_pair_run(cell, linear, f"{c_rate:g}C", x0, profile, step, t_amb, v_min, noise))
        logger.debug(f"{c_rate:g}C 工况: {len(runs[-1])} 条记录")

    for label, profile in extra_profiles:
        runs.append(_pair_run(cell, linear, label, x0, profile, step, t_amb, None, noise))

    dataset = FitDataset(tuple(runs), t_amb)
    logger.info(f"拟合数据集生成完成: {len(runs)} 条工况，{len(dataset)} 条记录")
    return dataset


def save_fit_dataset(dataset: FitDataset, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dataset.to_frame().to_csv(path, index=False)
    logger.info(f"拟合数据集已保存: {path}")


def load_fit_pairs(path: Union[str, Path], t_mask: Sequence[int] = DEFAULT_T_MASK
                   ) -> Tuple[Tuple[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]:
    """从 CSV 读出 (h_V 训练对, h_T 训练对)"""
    frame = pd.read_csv(path)
    missing = [c for c in (*STATE_FIELDS, "current", "v_true", "t_true") if c not in frame.columns]
    if missing:
        raise ParameterError(f"拟合数据集 {path} 缺少列: {missing}")
    states = frame[list(STATE_FIELDS)].to_numpy(dtype=float)
    voltage = (np.column_stack([states, frame["current"].to_numpy(dtype=float)]),
               frame["v_true"].to_numpy(dtype=float)[:, None])
    temperature = (states[:, list(t_mask)], frame["t_true"].to_numpy(dtype=float)[:, None])
    return voltage, temperature


# ---------------------------------------------------------------------------
# 参数辨识
# ---------------------------------------------------------------------------

NDC_FIT_FIELDS = ("r_0", "r_1", "c_1", "r_b", "c_s")
THERMAL_FIT_FIELDS = ("r_core", "r_surf", "c_core", "c_surf")


@dataclass(frozen=True)
class FitReport:
    params: ModelParams
    rmse: float
    initial_rmse: float
    evaluations: int
    values: Dict[str, float] = field(default_factory=dict)


def _ndc_with(initial: ModelParams, values: np.ndarray) -> ModelParams:
    ndc = initial.ndc
    fitted = dict(zip(NDC_FIT_FIELDS, values))
    # 总电容由容量和 OCV 定义域决定，c_b 随 c_s 调整
    total = 3600.0 * initial.capacity_ah / (ndc.ocv.vs_hi - ndc.ocv.vs_lo)
    c_b = total - fitted["c_s"]
    new_ndc = NdcParams(r_b=fitted["r_b"], c_b=c_b, c_s=fitted["c_s"], r_0=fitted["r_0"],
                        r_1=fitted["r_1"], c_1=fitted["c_1"], ocv=ndc.ocv)
    return ModelParams(new_ndc, initial.thermal, initial.capacity_ah, initial.t_amb)


def _thermal_with(initial: ModelParams, values: np.ndarray) -> ModelParams:
    thermal = ThermalParams(**dict(zip(THERMAL_FIT_FIELDS, values)))
    return ModelParams(initial.ndc, thermal, initial.capacity_ah, initial.t_amb)


def _run_residuals(params: ModelParams, dataset: FitDataset, target: str) -> np.ndarray:
    parts = []
    for run in dataset.runs:
        _, states, currents = simulate_states(params, run.x0, run.profile, step=1.0, t_amb=dataset.t_amb)
        states = states[:len(run)]
        currents = currents[:len(run)]
        if target == "voltage":
            predicted = ocv(params.ocv, states[:, 1]) + states[:, 2] - params.ndc.r_0 * currents
            parts.append(predicted - run.v_true)
        else:
            parts.append(states[:, 4] - run.t_true)
    return np.concatenate(parts) if parts else np.zeros(0)


def _fit(initial: ModelParams, dataset: FitDataset, names: Tuple[str, ...], start: np.ndarray,
         upper_cap: np.ndarray, build, target: str) -> FitReport:
    if len(dataset) == 0:
        raise TrainingError("拟合数据集为空，无法辨识参数")
    lower = np.log(start / 10.0)
    upper = np.log(np.minimum(start * 10.0, upper_cap))

    def residuals(log_values: np.ndarray) -> np.ndarray:
        return _run_residuals(build(initial, np.exp(log_values)), dataset, target)

    initial_rmse = float(np.sqrt(np.mean(residuals(np.log(start)) ** 2)))
    result = least_squares(residuals, np.log(start), bounds=(lower, upper), x_scale=1.0)
    values = np.exp(result.x)
    fitted = build(initial, values)
    rmse = float(np.sqrt(np.mean(result.fun ** 2)))
    logger.info(f"{target} 参数辨识: RMSE {initial_rmse:.4g} -> {rmse:.4g}，函数调用 {result.nfev} 次")
    return FitReport(fitted, rmse, initial_rmse, int(result.nfev),
                     {name: float(v) for name, v in zip(names, values)})


def fit_ndc_params(dataset: FitDataset, initial: ModelParams) -> FitReport:
    """
    最小二乘辨识 NDC 参数 (R_0, R_1, C_1, R_b, C_s)

    在对数参数上优化，上下界为初值的 10 倍。应使用低倍率（≤1C）数据。
    """
    ndc = initial.ndc
    start = np.array([getattr(ndc, name) for name in NDC_FIT_FIELDS])
    total = ndc.total_capacitance
    cap = np.array([np.inf, np.inf, np.inf, np.inf, 0.99 * total])
    start[-1] = min(start[-1], 0.9 * total)
    return _fit(initial, dataset, NDC_FIT_FIELDS, start, cap, _ndc_with, "voltage")


def fit_thermal_params(dataset: FitDataset, initial: ModelParams) -> FitReport:
    """
    最小二乘辨识热模型参数，拟合目标为表面温度轨迹

    焦耳热使用 initial 中的 R_0，应先辨识 NDC 参数。
    """
    th = initial.thermal
    start = np.array([getattr(th, name) for name in THERMAL_FIT_FIELDS])
    cap = np.full(len(start), np.inf)
    return _fit(initial, dataset, THERMAL_FIT_FIELDS, start, cap, _thermal_with, "temperature")


# ---------------------------------------------------------------------------
# RDT 数据集
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RdtSample:
    state: CellState
    current: float
    t_amb: float
    rdt_vmin: float
    flag: str = RDT_FLAG_OK
    soc: float = float("nan")
    grid_index: Tuple[int, int, int, int] = (0, 0, 0, 0)

    def __post_init__(self):
        if not (math.isfinite(self.rdt_vmin) and self.rdt_vmin >= 0.0):
            raise ParameterError(f"rdt_vmin 必须为非负有限值: {self.rdt_vmin}")

    def features(self) -> np.ndarray:
        """RDT 网络输入 (v_b, v_s, v_1, t_core, t_surf, i, t_amb)"""
        return np.concatenate([self.state.as_array(), [self.current, self.t_amb]])


@dataclass(frozen=True)
class RdtGrid:
    """
    RDT 网格

    preconditions 为 (C 倍率, 时长 s) 的预放电段，用于产生带极化和温升的非静置状态，
    覆盖功率搜索在 t+H 时刻查询应急段 RDT 的负载后状态；(0, 0) 表示直接使用静置状态。
    """

    socs: Tuple[float, ...]
    c_rates: Tuple[float, ...] = tuple(np.linspace(0.5, 8.0, 16))
    t_ambs: Tuple[float, ...] = (25.0,)
    preconditions: Tuple[Tuple[float, float], ...] = ((0.0, 0.0),)

    def __post_init__(self):
        object.__setattr__(self, "socs", tuple(float(s) for s in self.socs))
        object.__setattr__(self, "c_rates", tuple(float(c) for c in self.c_rates))
        object.__setattr__(self, "t_ambs", tuple(float(t) for t in self.t_ambs))
        object.__setattr__(self, "preconditions",
                           tuple((float(c), float(d)) for c, d in self.preconditions))
        if any(c <= 0.0 or c > 8.0 for c in self.c_rates):
            raise ParameterError(f"网格电流必须在 (0, 8] C 内: {self.c_rates}")
        if any(not 0.0 <= s <= 1.0 for s in self.socs):
            raise ParameterError(f"网格 SoC 必须在 [0, 1] 内: {self.socs}")

    @property
    def size(self) -> int:
        return len(self.socs) * len(self.preconditions) * len(self.t_ambs) * len(self.c_rates)

    @classmethod
    def from_dict(cls, data: Dict) -> "RdtGrid":
        socs = data.get("socs")
        if socs is None:
            socs = np.linspace(data.get("soc_min", 0.05), data.get("soc_max", 1.0), data.get("soc_count", 20))
        c_rates = data.get("c_rates")
        if c_rates is None:
            c_rates = np.linspace(data.get("c_min", 0.5), data.get("c_max", 8.0), data.get("c_count", 16))
        return cls(socs=tuple(socs), c_rates=tuple(c_rates),
                   t_ambs=tuple(data.get("t_ambs", [25.0])),
                   preconditions=tuple(tuple(p) for p in data.get("preconditions", [[0.0, 0.0]])))


def grid_states(params: ModelParams, grid: RdtGrid, model: Optional[HybridModel] = None,
                v_min: float = 3.0) -> List[Tuple[Tuple[int, int, int], float, CellState]]:
    """
    网格中的初始状态，按 (SoC, 预放电, 环境温度) 索引排序

    给定 model 时丢弃预放电结束时端电压已低于 v_min 的状态。
    """
    result = []
    dropped = 0
    for si, soc in enumerate(grid.socs):
        for pi, (c_rate, duration) in enumerate(grid.preconditions):
            for ti, t_amb in enumerate(grid.t_ambs):
                x = state_at_soc(params, soc, t_amb)
                if duration > 0.0:
                    current = params.amps(c_rate)
                    x = propagate(x, current, t_amb, duration, params)
                    if model is not None and hybrid_voltage(model, x, current) < v_min:
                        dropped += 1
                        continue
                result.append(((si, pi, ti), soc, x))
    if dropped:
        logger.info(f"丢弃 {dropped} 个预放电中已越过 V_min 的网格状态")
    return result


def build_rdt_dataset(model: HybridModel, grid: RdtGrid, v_min: float = 3.0,
                      cap: float = 7200.0, workers: int = 1) -> List[RdtSample]:
    """
    在网格上生成 RDT 样本

    预放电中已越过 V_min 的网格状态不生成样本；起始即低于 V_min 的点记为 0 并标记 below_vmin；
    超出仿真上限的点记为上限并标记 capped。
    输出顺序与网格索引一致，和并行度无关。
    """
    params = model.params
    jobs = []
    for (si, pi, ti), soc, x in grid_states(params, grid, model, v_min):
        t_amb = grid.t_ambs[ti]
        for ci, c_rate in enumerate(grid.c_rates):
            jobs.append(((si, pi, ti, ci), soc, x, params.amps(c_rate), t_amb))

    def run(job) -> RdtSample:
        index, soc, x, current, t_amb = job
        try:
            seconds = rdt_vmin_oracle(model, x, current, t_amb, v_min=v_min, cap=cap)
            flag = RDT_FLAG_BELOW_VMIN if seconds == 0.0 else RDT_FLAG_OK
        except RdtCapExceeded:
            seconds, flag = cap, RDT_FLAG_CAPPED
        return RdtSample(x, current, t_amb, seconds, flag, soc, index)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(run, jobs))
    else:
        samples = [run(job) for job in jobs]

    flags = pd.Series([s.flag for s in samples]).value_counts().to_dict()
    logger.info(f"RDT 数据集生成完成: {len(samples)} 个样本，标记统计 {flags}")
    return samples


@dataclass(frozen=True)
class MonotonicityAudit:
    current_pairs: int
    current_violations: int
    soc_pairs: int
    soc_violations: int

    @property
    def current_ordered_fraction(self) -> float:
        return 1.0 - self.current_violations / self.current_pairs if self.current_pairs else 1.0

    @property
    def soc_ordered_fraction(self) -> float:
        return 1.0 - self.soc_violations / self.soc_pairs if self.soc_pairs else 1.0


def audit_rdt_monotonicity(samples: Sequence[RdtSample], values: Optional[Sequence[float]] = None,
                           tolerance: float = 1e-9) -> MonotonicityAudit:
    """
    检查 RDT 随电流不增、随 SoC 不减

    values 默认取样本的 rdt_vmin，也可以传入网络预测值做同样的检查。违例记 WARNING。
    """
    values = [s.rdt_vmin for s in samples] if values is None else list(values)
    by_index = {s.grid_index: v for s, v in zip(samples, values)}

    current_pairs = current_bad = soc_pairs = soc_bad = 0
    for (si, pi, ti, ci), value in by_index.items():
        nxt = by_index.get((si, pi, ti, ci + 1))
        if nxt is not None:
            current_pairs += 1
            if nxt > value + tolerance:
                current_bad += 1
                logger.warning(f"RDT 随电流增大而增大: 网格 {(si, pi, ti, ci)} {value:.1f} s -> {nxt:.1f} s")
        nxt = by_index.get((si + 1, pi, ti, ci))
        if nxt is not None:
            soc_pairs += 1
            if nxt < value - tolerance:
                soc_bad += 1
                logger.warning(f"RDT 随 SoC 增大而减小: 网格 {(si, pi, ti, ci)} {value:.1f} s -> {nxt:.1f} s")
    audit = MonotonicityAudit(current_pairs, current_bad, soc_pairs, soc_bad)
    logger.info(f"单调性检查: 电流方向 {audit.current_ordered_fraction:.2%}，"
                f"SoC 方向 {audit.soc_ordered_fraction:.2%}")
    return audit


RDT_COLUMNS = ["soc_index", "precondition_index", "t_amb_index", "current_index", "soc",
               *STATE_FIELDS, "current", "t_amb", "rdt_vmin", "flag"]


def rdt_samples_to_frame(samples: Sequence[RdtSample]) -> pd.DataFrame:
    rows = []
    for s in samples:
        rows.append([*s.grid_index, s.soc, *s.state.as_array(), s.current, s.t_amb, s.rdt_vmin, s.flag])
    return pd.DataFrame(rows, columns=RDT_COLUMNS)


def save_rdt_dataset(samples: Sequence[RdtSample], path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rdt_samples_to_frame(samples).to_csv(path, index=False)
    logger.info(f"RDT 数据集已保存: {path}")


def load_rdt_dataset(path: Union[str, Path]) -> List[RdtSample]:
    frame = pd.read_csv(path)
    missing = [c for c in RDT_COLUMNS if c not in frame.columns]
    if missing:
        raise ParameterError(f"RDT 数据集 {path} 缺少列: {missing}")
    samples = []
    for row in frame.itertuples(index=False):
        state = CellState(row.v_b, row.v_s, row.v_1, row.t_core, row.t_surf)
        index = (int(row.soc_index), int(row.precondition_index), int(row.t_amb_index), int(row.current_index))
        samples.append(RdtSample(state, float(row.current), float(row.t_amb), float(row.rdt_vmin),
                                 str(row.flag), float(row.soc), index))
    return samples


def rdt_training_arrays(samples: Sequence[RdtSample], capacity_ah: float, include_capped: bool = False,
                        include_below_vmin: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """
    RDT 网络训练对 (N, 7) -> (N, 1)

    目标为到达 V_min 前放出电量占额定容量的比例。默认剔除 capped 和 below_vmin 样本，
    后者由预测器的端电压检查直接给出 0。
    """
    excluded = set()
    if not include_capped:
        excluded.add(RDT_FLAG_CAPPED)
    if not include_below_vmin:
        excluded.add(RDT_FLAG_BELOW_VMIN)
    kept = [s for s in samples if s.flag not in excluded]
    if not kept:
        raise TrainingError("RDT 数据集为空")
    X = np.array([s.features() for s in kept])
    seconds = np.array([s.rdt_vmin for s in kept])
    Y = rdt_to_charge_fraction(seconds, X[:, 5], capacity_ah)[:, None]
    return X, Y
