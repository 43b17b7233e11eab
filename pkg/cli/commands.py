"""
子命令处理

每个 cmd_* 函数接收解析后的参数和 ConfigManager，返回进程退出码。
流水线顺序：fit-params → gen-data → train-nets → train-rdt → mission / ablation / bench / predict。
"""

import logging
import re
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from cli import charts
from core import mlp
from core.cell_model import HybridModel, hybrid_voltage, state_at_soc
from core.config_manager import ConfigManager
from core.datagen import (RdtGrid, audit_rdt_monotonicity, build_fit_dataset, build_rdt_dataset,
                          fit_ndc_params, fit_thermal_params, grid_states, load_fit_pairs,
                          rdt_training_arrays, save_fit_dataset, save_rdt_dataset)
from core.errors import ParameterError
from core.mission import (METHOD_BOTH, MODE_FULL, MissionProfile, benchmark_table, methods_for,
                          records_to_frame, run_ablation_comparison, run_benchmark, run_mission,
                          run_search)
from core.params import ModelParams, load_params, save_params
from core.power_search import METHOD_PROPOSED, SearchConfig
from core.rdt import (OracleRdtPredictor, RdtPredictor, ValidationPoint, predict_rdt_vmin,
                      save_validation_report, validate_predictor)
from core.reference_cell import load_reference_cell

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_MISSING_ARTIFACT = 2
EXIT_NUMERICAL = 3

_HORIZON_UNITS = {"s": 1.0, "m": 60.0, "h": 3600.0}


def parse_horizon(token: str) -> float:
    """时域标记转换为秒：10s、3m、1h，纯数字按秒处理"""
    match = re.fullmatch(r"\s*(\d+(?:\.\d+)?)\s*([smh]?)\s*", str(token))
    if not match:
        raise ParameterError(f"无法解析时域标记: {token!r}（示例: 10s, 3m）")
    value = float(match.group(1)) * _HORIZON_UNITS[match.group(2) or "s"]
    if value <= 0.0:
        raise ParameterError(f"时域必须为正: {token!r}")
    return value


def parse_horizons(tokens) -> List[float]:
    if isinstance(tokens, str):
        tokens = [t for t in tokens.split(",") if t.strip()]
    return [parse_horizon(t) for t in tokens]


# ---------------------------------------------------------------------------
# 组装
# ---------------------------------------------------------------------------

def model_params(config: ConfigManager) -> ModelParams:
    """混合模型使用的物理参数：gen-data 记录的参数优先，其次为配置中的参数文件"""
    if config.has_artifact("model_params"):
        return load_params(config.artifact_path("model_params"))
    return load_params(config.params_path)


def linear_params(config: ConfigManager) -> ModelParams:
    """生成数据时的线性模型参数：辨识结果优先"""
    if config.has_artifact("fitted_params"):
        logger.info("使用 fit-params 辨识得到的参数")
        return load_params(config.artifact_path("fitted_params"))
    return load_params(config.params_path)


def load_model(config: ConfigManager, physics_only: bool = False) -> HybridModel:
    if physics_only:
        return HybridModel.physics(model_params(config))
    params = load_params(config.require_artifact("model_params"))
    net_v = mlp.load(config.require_artifact("net_v"))
    net_t = mlp.load(config.require_artifact("net_t"))
    return HybridModel(params, net_v=net_v, net_t=net_t)


def load_predictor(config: ConfigManager, model: HybridModel, source: str = "net") -> RdtPredictor:
    section = config.get_setting("rdt", {})
    common = dict(
        model=model,
        v_min=float(config.get_setting("constraints.v_min", 3.0)),
        t_max=float(config.get_setting("constraints.t_max", 50.0)),
        checkpoints_m=int(section.get("checkpoints", 16)),
        temp_bisect_tol=float(section.get("temp_bisect_tol", 0.05)),
        time_tol=float(section.get("time_tol", 0.5)),
    )
    if source == "oracle":
        return OracleRdtPredictor(cap=float(section.get("cap_s", 7200.0)), **common)
    net = mlp.load(config.require_artifact("net_rdt"))
    return RdtPredictor(net=net, **common)


def search_config(config: ConfigManager, capacity_ah: float, h: float,
                  t_amb: Optional[float] = None) -> SearchConfig:
    return SearchConfig.from_c_rates(
        capacity_ah, h=h, t_amb=t_amb,
        h_el=float(config.get_setting("emergency.h_el", 105.0)),
        i_el_c=float(config.get_setting("emergency.i_el_c", 5.0)),
        i_min_c=float(config.get_setting("constraints.i_min_c", 0.0)),
        i_max_c=float(config.get_setting("constraints.i_max_c", 8.0)),
        v_min=float(config.get_setting("constraints.v_min", 3.0)),
        t_max=float(config.get_setting("constraints.t_max", 50.0)),
        eps=float(config.get_setting("constraints.eps", 0.025)),
    )


def mission_profile(config: ConfigManager) -> MissionProfile:
    phases = config.get_setting("mission.phases")
    return MissionProfile.from_list(phases) if phases else MissionProfile.default()


def _horizons(args, config: ConfigManager) -> List[float]:
    tokens = getattr(args, "h", None) or config.get_setting("horizons", ["10s"])
    return parse_horizons(tokens)


def _cadence(args, config: ConfigManager) -> int:
    value = getattr(args, "cadence", None)
    return int(value if value is not None else config.get_setting("cadence_s", 5))


def _output_path(args, config: ConfigManager, filename: str) -> Path:
    out_dir = Path(args.outdir).expanduser() if getattr(args, "outdir", None) else config.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir / filename


def _needs_predictor(method: str) -> bool:
    return METHOD_PROPOSED in methods_for(method)


def _init_net(sizes: Sequence[int], section: dict, seed: int) -> mlp.NeuralNet:
    return mlp.init_net(sizes, hidden_activation=section.get("activation", "tanh"), seed=seed)


def _train_config(section: dict, seed: int) -> mlp.TrainConfig:
    return mlp.TrainConfig.from_dict({**section, "seed": seed})


# ---------------------------------------------------------------------------
# 子命令
# ---------------------------------------------------------------------------

def cmd_fit_params(args, config: ConfigManager) -> int:
    """低倍率数据辨识 NDC 参数，全倍率数据辨识热参数"""
    cell = load_reference_cell(config.reference_cell_path)
    initial = load_params(config.params_path)
    gen = config.get_setting("datagen", {})
    step = float(gen.get("reference_step", 0.1))

    low = build_fit_dataset(cell, gen.get("low_rate_c_rates", [0.5, 1.0]), step=step,
                            linear_params=initial)
    ndc_report = fit_ndc_params(low, initial)
    full = build_fit_dataset(cell, [c for c in gen.get("fit_c_rates", [1.0, 5.0]) if c > 0],
                             step=step, linear_params=ndc_report.params)
    thermal_report = fit_thermal_params(full, ndc_report.params)

    path = config.artifact_path("fitted_params")
    provenance = (f"fit-params: 电压 RMSE {ndc_report.rmse * 1000:.2f} mV，"
                  f"表面温度 RMSE {thermal_report.rmse:.3f} °C")
    save_params(thermal_report.params, path, provenance)
    print(f"NDC 参数: {ndc_report.values}")
    print(f"热参数: {thermal_report.values}")
    print(provenance)
    return EXIT_OK


def cmd_gen_data(args, config: ConfigManager) -> int:
    cell = load_reference_cell(config.reference_cell_path)
    linear = linear_params(config)
    gen = config.get_setting("datagen", {})
    extra = []
    if gen.get("include_mission", True):
        extra.append(("mission", mission_profile(config).to_current_profile(cell.base.capacity_ah)))

    dataset = build_fit_dataset(
        cell, gen.get("fit_c_rates", [0, 1, 5, 8]), step=float(gen.get("reference_step", 0.1)),
        v_min=float(config.get_setting("constraints.v_min", 3.0)), extra_profiles=extra,
        noise_std_v=float(gen.get("noise_std_v", 0.0)), noise_std_t=float(gen.get("noise_std_t", 0.0)),
        seed=int(config.get_setting("seeds.data", 0)), linear_params=linear)
    save_fit_dataset(dataset, config.artifact_path("fit_dataset"))
    save_params(linear, config.artifact_path("model_params"), "gen-data 使用的线性模型参数")
    print(f"拟合数据集: {len(dataset)} 条记录 -> {config.artifact_path('fit_dataset')}")
    return EXIT_OK


def cmd_train_nets(args, config: ConfigManager) -> int:
    (x_v, y_v), (x_t, y_t) = load_fit_pairs(config.require_artifact("fit_dataset"))
    config.require_artifact("model_params")
    training = config.get_setting("training", {})

    for name, X, Y in (("net_v", x_v, y_v), ("net_t", x_t, y_t)):
        section = training.get(name, {})
        seed = int(config.get_setting(f"seeds.{name}", 0))
        sizes = [X.shape[1], *section.get("hidden", [32, 32]), 1]
        net, history = mlp.train_arrays(_init_net(sizes, section, seed), X, Y,
                                        _train_config(section, seed))
        mlp.save(net, config.artifact_path(name))
        best = min(h["val_loss"] for h in history) if history else float("nan")
        print(f"{name}: 结构 {net.sizes}，{len(history)} 轮，最佳验证损失 {best:.3e}")
    return EXIT_OK


def _validation_points(model: HybridModel, grid: RdtGrid, count: int, seed: int,
                       v_min: float = 3.0) -> List[ValidationPoint]:
    """在网格范围内随机抽取的留出验证点，预放电中已越过 V_min 的状态重新抽取"""
    rng = np.random.default_rng(seed)
    params = model.params
    c_lo, c_hi = min(grid.c_rates), max(grid.c_rates)
    s_lo, s_hi = min(grid.socs), max(grid.socs)
    points = []
    for _ in range(50 * count):
        if len(points) == count:
            break
        soc = float(rng.uniform(s_lo, s_hi))
        c_rate, duration = grid.preconditions[int(rng.integers(len(grid.preconditions)))]
        t_amb = float(grid.t_ambs[int(rng.integers(len(grid.t_ambs)))])
        current = params.amps(float(rng.uniform(c_lo, c_hi)))
        sub = RdtGrid(socs=(soc,), c_rates=(c_hi,), t_ambs=(t_amb,), preconditions=((c_rate, duration),))
        states = grid_states(params, sub, model, v_min)
        if states:
            points.append(ValidationPoint(states[0][2], current, t_amb))
    if len(points) < count:
        raise ParameterError(f"RDT 网格中可达的验证状态太少: 只抽到 {len(points)} 个")
    return points


def cmd_train_rdt(args, config: ConfigManager) -> int:
    model = load_model(config, physics_only=getattr(args, "physics_only", False))
    section = config.get_setting("rdt", {})
    grid = RdtGrid.from_dict(section.get("grid", {}))
    v_min = float(config.get_setting("constraints.v_min", 3.0))
    cap = float(section.get("cap_s", 7200.0))

    samples = build_rdt_dataset(model, grid, v_min=v_min, cap=cap,
                                workers=int(config.get_setting("workers", 1)))
    save_rdt_dataset(samples, config.artifact_path("rdt_dataset"))
    audit_rdt_monotonicity(samples)

    X, Y = rdt_training_arrays(samples, model.capacity_ah)
    train_section = config.get_setting("training.net_rdt", {})
    seed = int(config.get_setting("seeds.net_rdt", 0))
    sizes = [X.shape[1], *train_section.get("hidden", [64, 64]), 1]
    net, history = mlp.train_arrays(_init_net(sizes, train_section, seed), X, Y,
                                    _train_config(train_section, seed))
    mlp.save(net, config.artifact_path("net_rdt"))

    predictor = load_predictor(config, model, "net")
    predicted = [predict_rdt_vmin(predictor, s.state, s.current, s.t_amb) for s in samples]
    audit = audit_rdt_monotonicity(samples, predicted)
    if audit.current_ordered_fraction < 0.99:
        logger.warning(f"RDT 网络随电流的单调比例仅 {audit.current_ordered_fraction:.1%}")

    oracle = load_predictor(config, model, "oracle")
    points = _validation_points(model, grid, int(section.get("validation_points", 200)), seed + 1000, v_min)
    report = validate_predictor(predictor, oracle, points)
    save_validation_report(report, _output_path(args, config, "rdt_validation.csv"))
    within = float(report["within_tol"].mean())
    print(f"RDT 网络: {len(X)} 个训练样本，{len(history)} 轮；验证点容差内比例 {within:.1%}")
    target = float(section.get("accuracy_target", 0.95))
    if within < target:
        logger.error(f"RDT 网络精度不足: 容差内比例 {within:.1%} 低于要求的 {target:.0%}，"
                     f"请加密网格或调整 training.net_rdt 后重新运行 train-rdt")
        return EXIT_NUMERICAL
    return EXIT_OK


def _model_and_predictor(args, config: ConfigManager, method: str):
    physics_only = getattr(args, "physics_only", False)
    model = load_model(config, physics_only)
    predictor = None
    if _needs_predictor(method):
        predictor = load_predictor(config, model, getattr(args, "rdt", "net") or "net")
    return model, predictor


def cmd_mission(args, config: ConfigManager) -> int:
    method = args.method
    model, predictor = _model_and_predictor(args, config, method)
    horizons = _horizons(args, config)
    cfg = search_config(config, model.capacity_ah, horizons[0])
    records = run_mission(model, predictor, mission_profile(config), horizons, cfg,
                          mode=args.mode, method=method, cadence=_cadence(args, config),
                          workers=int(config.get_setting("workers", 1)))
    frame = records_to_frame(records)
    filename = "mission.csv" if args.mode == MODE_FULL else f"mission_{args.mode}.csv"
    path = _output_path(args, config, filename)
    frame.to_csv(path, index=False)
    print(f"任务回放结果: {len(frame)} 行 -> {path}")
    if args.chart:
        charts.plot_mission(frame, path.with_suffix(".svg"))
    return EXIT_OK


def cmd_ablation(args, config: ConfigManager) -> int:
    method = args.method
    if method == METHOD_BOTH:
        raise ParameterError("ablation 只支持单一方法")
    model, predictor = _model_and_predictor(args, config, method)
    horizons = parse_horizons(args.h) if args.h else [300.0]
    cfg = search_config(config, model.capacity_ah, horizons[0])
    table = run_ablation_comparison(model, predictor, mission_profile(config), cfg, h=horizons[0],
                                    method=method, cadence=_cadence(args, config),
                                    workers=int(config.get_setting("workers", 1)))
    path = _output_path(args, config, "ablation.csv")
    table.to_csv(path, index=False)
    print(f"消融对比: {len(table)} 行 -> {path}")
    if args.chart:
        charts.plot_ablation(table, path.with_suffix(".svg"))
    return EXIT_OK


def cmd_bench(args, config: ConfigManager) -> int:
    model, predictor = _model_and_predictor(args, config, METHOD_BOTH)
    horizons = _horizons(args, config)
    cfg = search_config(config, model.capacity_ah, horizons[0])
    bench = run_benchmark(model, predictor, mission_profile(config), horizons, cfg,
                          repetitions=args.repetitions, cadence=_cadence(args, config))
    path = _output_path(args, config, "bench.csv")
    bench.to_csv(path, index=False)
    table = benchmark_table(bench)
    table.to_csv(path.with_name("bench_table.csv"), index=False)
    print(table.to_string(index=False))
    return EXIT_OK


def cmd_predict(args, config: ConfigManager) -> int:
    method = args.method
    model, predictor = _model_and_predictor(args, config, method)
    x = state_at_soc(model.params, args.soc, args.t_amb)
    horizons = _horizons(args, config)
    print(f"SoC={args.soc:.3f}，V_hybrid(0 A)={hybrid_voltage(model, x, 0.0):.4f} V")
    for h in horizons:
        cfg = search_config(config, model.capacity_ah, h, args.t_amb)
        for name in methods_for(method):
            result = run_search(model, predictor, x, cfg, name)
            status = "可行" if result.feasible else "不可行"
            print(f"H={h:g}s [{name}] i_max={result.i_max:.3f} A "
                  f"({model.params.c_rate(result.i_max):.2f}C)  P_max={result.p_max:.2f} W  "
                  f"约束={result.constraint_binding}  迭代={result.iterations}  {status}")
    return EXIT_OK


COMMANDS = {
    "fit-params": cmd_fit_params,
    "gen-data": cmd_gen_data,
    "train-nets": cmd_train_nets,
    "train-rdt": cmd_train_rdt,
    "mission": cmd_mission,
    "ablation": cmd_ablation,
    "bench": cmd_bench,
    "predict": cmd_predict,
}


def dispatch(args, config: Optional[ConfigManager] = None) -> int:
    config = config or ConfigManager(args.config)
    if getattr(args, "artifact_dir", None):
        config.set_setting("artifact_dir", args.artifact_dir)
    return COMMANDS[args.command](args, config)
