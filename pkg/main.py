#!/usr/bin/env python3
"""
eVTOL 电池峰值功率预测

混合物理/神经网络电池模型 + RDT 引导的二分搜索，预测任务剖面上每个时刻、
每个预测时域内可持续的最大放电电流和功率。
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import appdirs

# 添加项目根目录到Python路径
project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))

from cli.commands import EXIT_MISSING_ARTIFACT, EXIT_NUMERICAL, EXIT_USAGE, dispatch  # noqa: E402
from core.config_manager import APP_NAME  # noqa: E402
from core.errors import BatteryModelError, MissingArtifactError, ParameterError  # noqa: E402


class UsageError(Exception):
    """命令行用法错误"""


class _ArgumentParser(argparse.ArgumentParser):
    """用法错误抛异常而不是直接以 2 退出"""

    def error(self, message):
        raise UsageError(message)


def setup_logging(verbose: bool = False, log_dir: Optional[Path] = None):
    """设置日志配置"""
    log_dir = Path(appdirs.user_log_dir(APP_NAME)) if log_dir is None else log_dir
    log_dir.mkdir(parents=True, exist_ok=True)

    log_file = log_dir / "evtol_power.log"

    # 配置日志格式
    log_format = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

    # 设置日志级别和输出
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format=log_format,
        handlers=[
            logging.FileHandler(log_file, encoding='utf-8'),
            logging.StreamHandler()
        ],
        force=True
    )

    # 设置matplotlib日志级别
    logging.getLogger('matplotlib').setLevel(logging.WARNING)

    logger = logging.getLogger(__name__)
    logger.debug(f"日志文件: {log_file}")

    return logger


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(
        prog="evtol-power",
        description="eVTOL 电池峰值功率预测：数据生成、模型训练、任务回放、消融与计时基准",
    )
    parser.add_argument("--config", default="default",
                        help="运行配置文件（JSON），default 表示使用 config/default.json")
    parser.add_argument("--artifact-dir", default=None, help="覆盖配置中的产物目录")
    parser.add_argument("--verbose", action="store_true", help="输出 DEBUG 级别日志")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    sub.add_parser("fit-params", help="用参考电池低倍率数据辨识 NDC 与热模型参数")
    sub.add_parser("gen-data", help="生成 0~8C 拟合数据集（参考电池 + 线性模型状态）")
    sub.add_parser("train-nets", help="训练 h_V 与 h_T 两个输出头网络")

    train_rdt = sub.add_parser("train-rdt", help="生成 RDT 数据集、训练 RDT 网络并输出验证报告")
    train_rdt.add_argument("--physics-only", action="store_true", help="不使用输出头网络")
    train_rdt.add_argument("--outdir", default=None, help="验证报告输出目录")

    def add_search_options(p, methods=("proposed", "shortcut", "both"), default_method="proposed"):
        p.add_argument("--method", choices=methods, default=default_method)
        p.add_argument("--rdt", choices=("net", "oracle"), default="net",
                       help="proposed 方法的 RDT 来源：训练好的网络或仿真真值")
        p.add_argument("--physics-only", action="store_true",
                       help="混合模型只使用物理输出，不需要训练好的输出头网络")
        p.add_argument("--outdir", default=None, help="CSV 输出目录")

    mission = sub.add_parser("mission", help="沿任务剖面回放并预测 i_max / P_max")
    add_search_options(mission)
    mission.add_argument("--h", default=None, help="预测时域列表，如 10s,3m,5m")
    mission.add_argument("--mode", choices=("full", "no_tmax", "no_emergency"), default="full")
    mission.add_argument("--cadence", type=int, default=None, help="搜索间隔（秒）")
    mission.add_argument("--chart", action="store_true", help="同时输出 SVG 曲线图")

    ablation = sub.add_parser("ablation", help="full / no_tmax / no_emergency 三种设定的功率对比")
    add_search_options(ablation, methods=("proposed", "shortcut"))
    ablation.add_argument("--h", default=None, help="预测时域，默认 5m")
    ablation.add_argument("--cadence", type=int, default=None, help="搜索间隔（秒）")
    ablation.add_argument("--chart", action="store_true", help="同时输出 SVG 曲线图")

    bench = sub.add_parser("bench", help="两种搜索方法的单线程计时基准")
    bench.add_argument("--rdt", choices=("net", "oracle"), default="net")
    bench.add_argument("--physics-only", action="store_true")
    bench.add_argument("--h", default=None, help="预测时域列表")
    bench.add_argument("--repetitions", type=int, default=1)
    bench.add_argument("--cadence", type=int, default=None)
    bench.add_argument("--outdir", default=None)

    predict = sub.add_parser("predict", help="对给定 SoC 的静置状态预测 i_max / P_max")
    add_search_options(predict, default_method="proposed")
    predict.add_argument("--soc", type=float, required=True)
    predict.add_argument("--h", default="10s", help="预测时域列表")
    predict.add_argument("--t-amb", type=float, default=None, help="环境温度 (°C)")

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """主函数，返回退出码"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"错误: {e}", file=sys.stderr)
        return EXIT_USAGE

    logger = setup_logging(args.verbose)
    logger.info(f"=== 子命令 {args.command} 开始 ===")

    try:
        code = dispatch(args)
    except MissingArtifactError as e:
        logger.error(str(e))
        print(f"错误: {e}", file=sys.stderr)
        return EXIT_MISSING_ARTIFACT
    except ParameterError as e:
        logger.error(f"参数错误: {e}")
        print(f"错误: {e}", file=sys.stderr)
        return EXIT_USAGE
    except BatteryModelError as e:
        logger.error(f"数值计算失败: {e}", exc_info=True)
        print(f"错误: 数值计算失败 - {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except KeyboardInterrupt:
        logger.info("用户中断")
        return EXIT_USAGE

    logger.info(f"=== 子命令 {args.command} 完成 ===")
    return code


if __name__ == "__main__":
    sys.exit(main())
