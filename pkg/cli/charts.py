"""
矢量图输出

图表只根据已经写出的 CSV 数据生成，CSV 是结果的正式格式。
"""

import logging
from pathlib import Path
from typing import Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

logger = logging.getLogger(__name__)


def _columns(frame: pd.DataFrame, prefix: str) -> Sequence[str]:
    return [c for c in frame.columns if c.startswith(prefix)]


def plot_mission(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    """i_max 与 P_max 随任务时间变化（每个时域/方法一条线）"""
    path = Path(path).with_suffix(".svg")
    searched = frame[frame["searched"]] if "searched" in frame.columns else frame
    fig, (ax_i, ax_p) = plt.subplots(2, 1, sharex=True, figsize=(8, 6))
    for column in _columns(searched, "i_max_"):
        ax_i.plot(searched["time"], searched[column], label=column[len("i_max_"):])
    for column in _columns(searched, "p_max_"):
        ax_p.plot(searched["time"], searched[column], label=column[len("p_max_"):])
    ax_i.set_ylabel("i_max (A)")
    ax_p.set_ylabel("P_max (W)")
    ax_p.set_xlabel("time (s)")
    ax_i.legend(fontsize="small")
    ax_i.grid(True, alpha=0.3)
    ax_p.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    logger.info(f"图表已保存: {path}")
    return path


def plot_ablation(table: pd.DataFrame, path: Union[str, Path]) -> Path:
    """三种约束设定下的 P_max 对比"""
    path = Path(path).with_suffix(".svg")
    fig, ax = plt.subplots(figsize=(8, 4))
    for column in _columns(table, "p_max_"):
        ax.plot(table["time"], table[column], label=column[len("p_max_"):])
    ax.set_xlabel("time (s)")
    ax.set_ylabel("P_max (W)")
    ax.legend(fontsize="small")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    logger.info(f"图表已保存: {path}")
    return path
