import copy
import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

import appdirs

from core.errors import MissingArtifactError, ParameterError

APP_NAME = "evtol_power"

# 仓库自带的配置目录
BUNDLED_CONFIG_DIR = Path(__file__).parent.parent / "config"
DEFAULT_CONFIG_FILE = BUNDLED_CONFIG_DIR / "default.json"

# 产物文件名 -> 生成它的子命令
ARTIFACTS = {
    "fit_dataset": ("fit_dataset.csv", "gen-data"),
    "model_params": ("model_params.json", "gen-data"),
    "fitted_params": ("fitted_params.json", "fit-params"),
    "net_v": ("net_v.bin", "train-nets"),
    "net_t": ("net_t.bin", "train-nets"),
    "rdt_dataset": ("rdt_dataset.csv", "train-rdt"),
    "net_rdt": ("net_rdt.bin", "train-rdt"),
}


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """递归合并，override 中的键优先"""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


class ConfigManager:
    """运行配置管理器，负责读取运行配置、解析路径和定位产物目录"""

    def __init__(self, config_path: Optional[Union[str, Path]] = None):
        """初始化配置管理器，config_path 为 None 或 "default" 时只使用默认配置"""
        self.logger = logging.getLogger(__name__)

        # 数据目录
        self.data_dir = Path(appdirs.user_data_dir(APP_NAME))

        # 默认配置
        self.default_settings = self.load_config(DEFAULT_CONFIG_FILE, {})

        if config_path is None or str(config_path) == "default":
            self.config_file = DEFAULT_CONFIG_FILE
            self.settings = copy.deepcopy(self.default_settings)
        else:
            self.config_file = Path(config_path)
            if not self.config_file.exists():
                raise ParameterError(f"配置文件不存在: {self.config_file}")
            self.settings = _merge(self.default_settings, self.load_config(self.config_file, {}))

        self.logger.info(f"运行配置: {self.config_file}")

    def load_config(self, file_path: Path, default_config: Any) -> Any:
        """加载单个配置文件，失败时记录日志并返回默认值"""
        try:
            if file_path.exists():
                with open(file_path, 'r', encoding='utf-8') as f:
                    return json.load(f)
            return default_config
        except (json.JSONDecodeError, IOError) as e:
            self.logger.error(f"加载配置文件失败 {file_path}: {e}")
            return default_config

    def save_config(self, file_path: Optional[Path] = None, config: Any = None):
        """保存配置，默认写回当前运行配置"""
        file_path = Path(file_path) if file_path else self.config_file
        config = self.settings if config is None else config
        try:
            file_path.parent.mkdir(parents=True, exist_ok=True)
            with open(file_path, 'w', encoding='utf-8') as f:
                json.dump(config, f, indent=2, ensure_ascii=False)
        except IOError as e:
            self.logger.error(f"保存配置文件失败 {file_path}: {e}")

    def get_setting(self, key: str, default: Any = None) -> Any:
        """获取设置项，支持 "constraints.v_min" 形式的点分键"""
        node: Any = self.settings
        for part in key.split("."):
            if not isinstance(node, dict) or part not in node:
                return default
            node = node[part]
        return node

    def set_setting(self, key: str, value: Any):
        """设置配置项（只修改内存中的配置）"""
        parts = key.split(".")
        node = self.settings
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value

    def resolve_path(self, value: Union[str, Path]) -> Path:
        """相对路径先按配置文件所在目录解析，再按仓库配置目录解析"""
        path = Path(value).expanduser()
        if path.is_absolute():
            return path
        for base in (self.config_file.parent, BUNDLED_CONFIG_DIR):
            candidate = base / path
            if candidate.exists():
                return candidate
        return self.config_file.parent / path

    @property
    def params_path(self) -> Path:
        return self.resolve_path(self.get_setting("params_path", "default_params.json"))

    @property
    def reference_cell_path(self) -> Path:
        return self.resolve_path(self.get_setting("reference_cell_path", "reference_cell.json"))

    @property
    def artifact_dir(self) -> Path:
        configured = self.get_setting("artifact_dir")
        path = Path(configured).expanduser() if configured else self.data_dir / "artifacts"
        path.mkdir(parents=True, exist_ok=True)
        return path

    @property
    def output_dir(self) -> Path:
        configured = self.get_setting("output_dir")
        path = Path(configured).expanduser() if configured else self.data_dir / "outputs"
        path.mkdir(parents=True, exist_ok=True)
        return path

    def artifact_path(self, name: str) -> Path:
        filename, _ = ARTIFACTS[name]
        return self.artifact_dir / filename

    def require_artifact(self, name: str) -> Path:
        """返回已存在的产物路径，不存在时抛出 MissingArtifactError"""
        path = self.artifact_path(name)
        if not path.exists():
            _, producer = ARTIFACTS[name]
            self.logger.error(f"缺少产物 {path}")
            raise MissingArtifactError(str(path), producer)
        return path

    def has_artifact(self, name: str) -> bool:
        return self.artifact_path(name).exists()
