"""
模型参数

NDC 等效电路参数、两节点集总热模型参数、OCV 曲线以及参数文件的读写。
参数文件为 JSON 格式，所有数值均为 SI 单位。
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np

from core.errors import ParameterError

logger = logging.getLogger(__name__)


def _require_positive(name: str, value: float) -> float:
    value = float(value)
    if not math.isfinite(value) or value <= 0.0:
        raise ParameterError(f"参数 {name} 必须为正数: {value}")
    return value


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class OcvCurve:
    """开路电压曲线 U = h(V_s)，分段线性，两个坐标都严格递增"""

    breakpoints: Tuple[Tuple[float, float], ...]
    xs: np.ndarray = field(init=False, repr=False, compare=False)
    us: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        points = tuple((float(v), float(u)) for v, u in self.breakpoints)
        if len(points) < 2:
            raise ParameterError("OCV 曲线至少需要两个断点")
        xs = np.array([p[0] for p in points])
        us = np.array([p[1] for p in points])
        if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(us))):
            raise ParameterError("OCV 断点必须为有限值")
        if np.any(np.diff(xs) <= 0.0) or np.any(np.diff(us) <= 0.0):
            raise ParameterError("OCV 断点必须在两个坐标上严格递增")
        object.__setattr__(self, "breakpoints", points)
        object.__setattr__(self, "xs", _frozen(xs))
        object.__setattr__(self, "us", _frozen(us))

    @property
    def vs_lo(self) -> float:
        return float(self.xs[0])

    @property
    def vs_hi(self) -> float:
        return float(self.xs[-1])

    @property
    def u_min(self) -> float:
        return float(self.us[0])

    @property
    def u_max(self) -> float:
        return float(self.us[-1])


def ocv(curve: OcvCurve, v_s: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """分段线性插值，定义域外取端点值"""
    value = np.interp(v_s, curve.xs, curve.us)
    if np.ndim(value) == 0:
        return float(value)
    return value


@dataclass(frozen=True)
class NdcParams:
    """非线性双电容模型参数"""

    r_b: float
    c_b: float
    c_s: float
    r_0: float
    r_1: float
    c_1: float
    ocv: OcvCurve

    def __post_init__(self):
        for name in ("r_b", "c_b", "c_s", "r_0", "r_1", "c_1"):
            object.__setattr__(self, name, _require_positive(name, getattr(self, name)))

    @property
    def a_matrix(self) -> np.ndarray:
        r_b, c_b, c_s = self.r_b, self.c_b, self.c_s
        tau_1 = 1.0 / (self.r_1 * self.c_1)
        return np.array([
            [-1.0 / (c_b * r_b), 1.0 / (c_b * r_b), 0.0],
            [1.0 / (c_s * r_b), -1.0 / (c_s * r_b), 0.0],
            [0.0, 0.0, -tau_1],
        ])

    @property
    def b_vector(self) -> np.ndarray:
        return np.array([0.0, -1.0 / self.c_s, -1.0 / self.c_1])

    @property
    def total_capacitance(self) -> float:
        return self.c_b + self.c_s


@dataclass(frozen=True)
class ThermalParams:
    """两节点（核心/表面）集总热模型参数"""

    r_core: float
    r_surf: float
    c_core: float
    c_surf: float

    def __post_init__(self):
        for name in ("r_core", "r_surf", "c_core", "c_surf"):
            object.__setattr__(self, name, _require_positive(name, getattr(self, name)))

    @property
    def a_matrix(self) -> np.ndarray:
        rc, rs, cc, cs = self.r_core, self.r_surf, self.c_core, self.c_surf
        return np.array([
            [-1.0 / (rc * cc), 1.0 / (rc * cc)],
            [1.0 / (rc * cs), -1.0 / (rs * cs) - 1.0 / (rc * cs)],
        ])

    def b_matrix(self, r_0: float) -> np.ndarray:
        """输入为 [I², T_amb]，焦耳热只作用在核心节点"""
        return np.array([
            [r_0 / self.c_core, 0.0],
            [0.0, 1.0 / (self.r_surf * self.c_surf)],
        ])


@dataclass(frozen=True)
class ModelParams:
    """完整的物理模型参数"""

    ndc: NdcParams
    thermal: ThermalParams
    capacity_ah: float
    t_amb: float = 25.0

    def __post_init__(self):
        object.__setattr__(self, "capacity_ah", _require_positive("capacity_ah", self.capacity_ah))
        if not math.isfinite(float(self.t_amb)):
            raise ParameterError(f"环境温度必须为有限值: {self.t_amb}")
        object.__setattr__(self, "t_amb", float(self.t_amb))

    @property
    def ocv(self) -> OcvCurve:
        return self.ndc.ocv

    @property
    def one_c(self) -> float:
        """1C 对应的电流 (A)"""
        return self.capacity_ah

    def amps(self, c_rate: float) -> float:
        return float(c_rate) * self.capacity_ah

    def c_rate(self, amps: float) -> float:
        return float(amps) / self.capacity_ah


# ---------------------------------------------------------------------------
# 参数文件
# ---------------------------------------------------------------------------

def params_from_dict(data: Dict[str, Any]) -> ModelParams:
    """从参数字典构造 ModelParams"""
    try:
        ndc = data["ndc"]
        thermal = data["thermal"]
        curve = OcvCurve(tuple((p[0], p[1]) for p in data["ocv"]))
        return ModelParams(
            ndc=NdcParams(
                r_b=ndc["r_b"], c_b=ndc["c_b"], c_s=ndc["c_s"],
                r_0=ndc["r_0"], r_1=ndc["r_1"], c_1=ndc["c_1"], ocv=curve,
            ),
            thermal=ThermalParams(
                r_core=thermal["r_core"], r_surf=thermal["r_surf"],
                c_core=thermal["c_core"], c_surf=thermal["c_surf"],
            ),
            capacity_ah=data["capacity_ah"],
            t_amb=data.get("t_amb", 25.0),
        )
    except (KeyError, TypeError, IndexError) as e:
        raise ParameterError(f"参数文件缺少字段或格式错误: {e}") from e


def params_to_dict(params: ModelParams, provenance: str = "") -> Dict[str, Any]:
    ndc = params.ndc
    th = params.thermal
    data = {
        "ndc": {"r_b": ndc.r_b, "c_b": ndc.c_b, "c_s": ndc.c_s,
                "r_0": ndc.r_0, "r_1": ndc.r_1, "c_1": ndc.c_1},
        "thermal": {"r_core": th.r_core, "r_surf": th.r_surf,
                    "c_core": th.c_core, "c_surf": th.c_surf},
        "ocv": [[v, u] for v, u in ndc.ocv.breakpoints],
        "capacity_ah": params.capacity_ah,
        "t_amb": params.t_amb,
    }
    if provenance:
        data["_provenance"] = provenance
    return data


def load_params(path: Union[str, Path]) -> ModelParams:
    """读取参数文件"""
    path = Path(path)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except (json.JSONDecodeError, IOError) as e:
        raise ParameterError(f"加载参数文件失败 {path}: {e}") from e
    params = params_from_dict(data)
    logger.debug(f"参数文件已加载: {path}")
    return params


def save_params(params: ModelParams, path: Union[str, Path], provenance: str = "") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(params_to_dict(params, provenance), f, indent=2, ensure_ascii=False)
    logger.info(f"参数文件已保存: {path}")


def replace_ndc(params: ModelParams, **values: float) -> ModelParams:
    """返回替换了部分 NDC 参数的新参数集"""
    ndc = params.ndc
    fields_ = {"r_b": ndc.r_b, "c_b": ndc.c_b, "c_s": ndc.c_s,
               "r_0": ndc.r_0, "r_1": ndc.r_1, "c_1": ndc.c_1}
    fields_.update(values)
    return ModelParams(NdcParams(ocv=ndc.ocv, **fields_), params.thermal,
                       params.capacity_ah, params.t_amb)


def replace_thermal(params: ModelParams, **values: float) -> ModelParams:
    th = params.thermal
    fields_ = {"r_core": th.r_core, "r_surf": th.r_surf,
               "c_core": th.c_core, "c_surf": th.c_surf}
    fields_.update(values)
    return ModelParams(params.ndc, ThermalParams(**fields_), params.capacity_ah, params.t_amb)


