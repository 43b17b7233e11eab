"""
前馈神经网络

承载 h_V、h_T 和剩余放电时间预测网络：推理、反向传播、Adam 训练、二进制序列化。
"""

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.errors import DimensionError, NetFormatError, NetVersionError, ParameterError, TrainingError

logger = logging.getLogger(__name__)

ACTIVATION_CODES = {"identity": 0, "tanh": 1, "relu": 2}
ACTIVATION_NAMES = {code: name for name, code in ACTIVATION_CODES.items()}

NET_MAGIC = b"EVTOLNET"
NET_VERSION = 1


def _readonly(values, shape=None) -> np.ndarray:
    array = np.array(values, dtype=np.float64)
    if shape is not None:
        array = array.reshape(shape)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class Layer:
    weights: np.ndarray
    biases: np.ndarray
    activation: str = "tanh"

    def __post_init__(self):
        weights = _readonly(self.weights)
        biases = _readonly(self.biases)
        if weights.ndim != 2 or biases.shape != (weights.shape[0],):
            raise DimensionError(f"层参数形状不匹配: W{weights.shape}, b{biases.shape}")
        if self.activation not in ACTIVATION_CODES:
            raise ParameterError(f"未知激活函数: {self.activation}")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "biases", biases)

    @property
    def fan_in(self) -> int:
        return self.weights.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class NeuralNet:
    """带输入/输出仿射归一化的多层感知机"""

    layers: Tuple[Layer, ...]
    input_mean: np.ndarray
    input_scale: np.ndarray
    output_mean: np.ndarray
    output_scale: np.ndarray
    trained: bool = False

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise DimensionError("网络至少需要一层")
        for prev, nxt in zip(layers, layers[1:]):
            if nxt.fan_in != prev.fan_out:
                raise DimensionError(f"相邻层维度不兼容: {prev.fan_out} -> {nxt.fan_in}")
        if layers[-1].activation != "identity":
            raise ParameterError("输出层激活必须为 identity")
        object.__setattr__(self, "layers", layers)

        for name, width in (("input_mean", layers[0].fan_in), ("input_scale", layers[0].fan_in),
                            ("output_mean", layers[-1].fan_out), ("output_scale", layers[-1].fan_out)):
            values = _readonly(getattr(self, name))
            if values.shape != (width,):
                raise DimensionError(f"{name} 长度应为 {width}，实际为 {values.shape}")
            object.__setattr__(self, name, values)
        if np.any(self.input_scale <= 0.0) or np.any(self.output_scale <= 0.0):
            raise ParameterError("归一化尺度必须为正")

    @property
    def input_width(self) -> int:
        return self.layers[0].fan_in

    @property
    def output_width(self) -> int:
        return self.layers[-1].fan_out

    @property
    def sizes(self) -> List[int]:
        return [self.input_width] + [layer.fan_out for layer in self.layers]

    def with_layers(self, layers: Sequence[Layer], trained: Optional[bool] = None) -> "NeuralNet":
        return NeuralNet(tuple(layers), self.input_mean, self.input_scale,
                         self.output_mean, self.output_scale,
                         self.trained if trained is None else trained)

    def with_normalization(self, input_mean, input_scale, output_mean, output_scale) -> "NeuralNet":
        return NeuralNet(self.layers, input_mean, input_scale, output_mean, output_scale, self.trained)

    def parameter_vector(self) -> np.ndarray:
        parts = []
        for layer in self.layers:
            parts.append(layer.weights.ravel())
            parts.append(layer.biases)
        return np.concatenate(parts)

    def with_parameter_vector(self, vector: np.ndarray) -> "NeuralNet":
        vector = np.asarray(vector, dtype=np.float64)
        layers = []
        offset = 0
        for layer in self.layers:
            n_w = layer.weights.size
            n_b = layer.biases.size
            weights = vector[offset:offset + n_w].reshape(layer.weights.shape)
            offset += n_w
            biases = vector[offset:offset + n_b]
            offset += n_b
            layers.append(Layer(weights, biases, layer.activation))
        if offset != vector.size:
            raise DimensionError(f"参数向量长度应为 {offset}，实际为 {vector.size}")
        return self.with_layers(layers)


def init_net(sizes: Sequence[int], hidden_activation: str = "tanh", seed: int = 0) -> NeuralNet:
    """Glorot 均匀初始化，偏置为零，归一化为恒等"""
    if len(sizes) < 2 or any(int(s) <= 0 for s in sizes):
        raise ParameterError(f"网络结构非法: {sizes}")
    rng = np.random.default_rng(seed)
    layers = []
    n_layers = len(sizes) - 1
    for k in range(n_layers):
        fan_in, fan_out = int(sizes[k]), int(sizes[k + 1])
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        activation = "identity" if k == n_layers - 1 else hidden_activation
        layers.append(Layer(weights, np.zeros(fan_out), activation))
    n_in, n_out = int(sizes[0]), int(sizes[-1])
    return NeuralNet(tuple(layers), np.zeros(n_in), np.ones(n_in), np.zeros(n_out), np.ones(n_out))


# ---------------------------------------------------------------------------
# 推理与反向传播
# ---------------------------------------------------------------------------

def _activate(z: np.ndarray, name: str) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _activation_slope(z: np.ndarray, a: np.ndarray, name: str) -> np.ndarray:
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return np.where(z > 0.0, 1.0, 0.0)
    return np.ones_like(z)


def _forward_normalized(layers: Sequence[Layer], xn: np.ndarray):
    """在归一化空间前向传播，返回输出以及反向传播需要的中间量"""
    activations = [xn]
    pre_activations = []
    a = xn
    for layer in layers:
        z = a @ layer.weights.T + layer.biases
        a = _activate(z, layer.activation)
        pre_activations.append(z)
        activations.append(a)
    return a, activations, pre_activations


def _check_width(net: NeuralNet, x: np.ndarray) -> None:
    if x.shape[-1] != net.input_width:
        raise DimensionError(f"输入宽度应为 {net.input_width}，实际为 {x.shape[-1]}")


def forward(net: NeuralNet, x: Union[Sequence[float], np.ndarray]) -> np.ndarray:
    """前向推理，接受单个样本 (width,) 或批量 (N, width)，输出已反归一化"""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    _check_width(net, batch)
    xn = (batch - net.input_mean) / net.input_scale
    yn, _, _ = _forward_normalized(net.layers, xn)
    y = yn * net.output_scale + net.output_mean
    return y[0] if single else y


def _normalized_targets(net: NeuralNet, X: np.ndarray, Y: np.ndarray):
    xn = (X - net.input_mean) / net.input_scale
    yn = (Y - net.output_mean) / net.output_scale
    return xn, yn


def loss(net: NeuralNet, X: np.ndarray, Y: np.ndarray) -> float:
    """归一化输出空间内的均方误差"""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    xn, yn = _normalized_targets(net, X, Y)
    pred, _, _ = _forward_normalized(net.layers, xn)
    return float(np.mean((pred - yn) ** 2))


def loss_and_gradients(net: NeuralNet, X: np.ndarray, Y: np.ndarray
                       ) -> Tuple[float, List[Tuple[np.ndarray, np.ndarray]]]:
    """均方误差及其对每层 (W, b) 的梯度"""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    _check_width(net, X)
    xn, yn = _normalized_targets(net, X, Y)
    pred, activations, pre_activations = _forward_normalized(net.layers, xn)
    diff = pred - yn
    value = float(np.mean(diff ** 2))

    grads: List[Tuple[np.ndarray, np.ndarray]] = []
    delta = 2.0 * diff / diff.size
    for k in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[k]
        dz = delta * _activation_slope(pre_activations[k], activations[k + 1], layer.activation)
        grads.append((dz.T @ activations[k], dz.sum(axis=0)))
        delta = dz @ layer.weights
    grads.reverse()
    return value, grads


def lipschitz_bound(net: NeuralNet) -> float:
    """权重算子范数之积乘以归一化尺度比；三种激活的斜率上界都是 1"""
    bound = float(np.max(net.output_scale) / np.min(net.input_scale))
    for layer in net.layers:
        bound *= float(np.linalg.norm(layer.weights, 2))
    return bound


# ---------------------------------------------------------------------------
# 训练
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 200
    seed: int = 0
    validation_fraction: float = 0.2
    early_stop_patience: int = 30
    # 每轮学习率乘以该系数
    lr_decay: float = 1.0

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "epochs", "early_stop_patience"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"训练参数 {name} 必须为正: {getattr(self, name)}")
        if self.seed < 0:
            raise ParameterError(f"随机种子不能为负: {self.seed}")
        if not 0.0 < self.validation_fraction <= 0.5:
            raise ParameterError(f"验证集比例必须在 (0, 0.5] 内: {self.validation_fraction}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ParameterError(f"学习率衰减必须在 (0, 1] 内: {self.lr_decay}")

    @classmethod
    def from_dict(cls, data: Dict) -> "TrainConfig":
        known = {k: data[k] for k in cls.__dataclass_fields__ if k in data}
        return cls(**known)


def normalization_stats(values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """逐特征均值和标准差，标准差为零时取 1"""
    mean = values.mean(axis=0)
    std = values.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    return mean, std


def _split(n: int, fraction: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(n)
    if n < 2:
        return order, order[:0]
    n_val = min(max(1, int(round(n * fraction))), n - 1)
    return order[n_val:], order[:n_val]


def train_arrays(net: NeuralNet, X: np.ndarray, Y: np.ndarray,
                 cfg: TrainConfig) -> Tuple[NeuralNet, List[Dict[str, float]]]:
    """小批量 Adam 训练，返回验证损失最好的快照和损失历史"""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.size == 0 or len(X) == 0:
        raise TrainingError("训练数据集为空")
    X = X.reshape(len(X), -1)
    Y = Y.reshape(len(Y), -1)
    if len(X) != len(Y):
        raise DimensionError(f"输入与目标样本数不一致: {len(X)} vs {len(Y)}")
    _check_width(net, X)
    if Y.shape[1] != net.output_width:
        raise DimensionError(f"目标宽度应为 {net.output_width}，实际为 {Y.shape[1]}")

    rng = np.random.default_rng(cfg.seed)
    train_idx, val_idx = _split(len(X), cfg.validation_fraction, rng)
    x_mean, x_std = normalization_stats(X[train_idx])
    y_mean, y_std = normalization_stats(Y[train_idx])
    net = net.with_normalization(x_mean, x_std, y_mean, y_std)
    X_val, Y_val = (X[val_idx], Y[val_idx]) if len(val_idx) else (X[train_idx], Y[train_idx])

    weights = [np.array(layer.weights) for layer in net.layers]
    biases = [np.array(layer.biases) for layer in net.layers]
    m_w = [np.zeros_like(w) for w in weights]
    v_w = [np.zeros_like(w) for w in weights]
    m_b = [np.zeros_like(b) for b in biases]
    v_b = [np.zeros_like(b) for b in biases]
    beta1, beta2, eps = 0.9, 0.999, 1e-8

    def snapshot() -> NeuralNet:
        layers = [Layer(w, b, layer.activation) for w, b, layer in zip(weights, biases, net.layers)]
        return net.with_layers(layers, trained=True)

    history: List[Dict[str, float]] = []
    best_net = snapshot()
    best_val = loss(best_net, X_val, Y_val)
    stale = 0
    step = 0

    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate * cfg.lr_decay ** epoch
        order = rng.permutation(train_idx)
        current = snapshot()
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            value, grads = loss_and_gradients(current, X[batch], Y[batch])
            if not math.isfinite(value):
                raise TrainingError(
                    f"损失出现 NaN/Inf: epoch={epoch}, batch_start={start}, lr={lr:.3e}, "
                    f"最近训练损失={history[-1]['train_loss'] if history else float('nan')}")
            step += 1
            correction1 = 1.0 - beta1 ** step
            correction2 = 1.0 - beta2 ** step
            for k, (g_w, g_b) in enumerate(grads):
                m_w[k] = beta1 * m_w[k] + (1.0 - beta1) * g_w
                v_w[k] = beta2 * v_w[k] + (1.0 - beta2) * g_w * g_w
                m_b[k] = beta1 * m_b[k] + (1.0 - beta1) * g_b
                v_b[k] = beta2 * v_b[k] + (1.0 - beta2) * g_b * g_b
                weights[k] -= lr * (m_w[k] / correction1) / (np.sqrt(v_w[k] / correction2) + eps)
                biases[k] -= lr * (m_b[k] / correction1) / (np.sqrt(v_b[k] / correction2) + eps)
            current = snapshot()

        train_loss = loss(current, X[train_idx], Y[train_idx])
        val_loss = loss(current, X_val, Y_val)
        if not math.isfinite(train_loss):
            raise TrainingError(f"第 {epoch} 轮训练损失非有限值，学习率 {lr:.3e} 可能过大")
        history.append({"epoch": epoch, "train_loss": train_loss,
                        "val_loss": val_loss, "learning_rate": lr})
        if epoch % 25 == 0:
            logger.debug(f"epoch {epoch}: train={train_loss:.3e} val={val_loss:.3e}")

        if val_loss < best_val:
            best_val = val_loss
            best_net = current
            stale = 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                logger.info(f"验证损失 {stale} 轮未改善，提前停止于第 {epoch} 轮")
                break

    logger.info(f"训练完成: 样本 {len(X)}，最佳验证损失 {best_val:.3e}")
    return best_net, history


def train(net: NeuralNet, dataset: Sequence[Tuple[Sequence[float], Sequence[float]]],
          cfg: TrainConfig) -> Tuple[NeuralNet, List[Dict[str, float]]]:
    """以 (输入, 目标) 对列表训练"""
    if len(dataset) == 0:
        raise TrainingError("训练数据集为空")
    X = np.array([np.atleast_1d(np.asarray(x, dtype=np.float64)) for x, _ in dataset])
    Y = np.array([np.atleast_1d(np.asarray(y, dtype=np.float64)) for _, y in dataset])
    return train_arrays(net, X, Y, cfg)


# ---------------------------------------------------------------------------
# 序列化
# ---------------------------------------------------------------------------

def _pack_floats(values: np.ndarray) -> bytes:
    return np.ascontiguousarray(values, dtype="<f8").tobytes()


def dumps(net: NeuralNet) -> bytes:
    parts = [NET_MAGIC, struct.pack("<H", NET_VERSION),
             struct.pack("<II", len(net.layers), net.input_width)]
    for layer in net.layers:
        parts.append(struct.pack("<IIB", layer.fan_out, layer.fan_in, ACTIVATION_CODES[layer.activation]))
        parts.append(_pack_floats(layer.weights))
        parts.append(_pack_floats(layer.biases))
    for values in (net.input_mean, net.input_scale, net.output_mean, net.output_scale):
        parts.append(_pack_floats(values))
    parts.append(struct.pack("<B", 1 if net.trained else 0))
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise NetFormatError(
                f"网络文件被截断: 需要 {n} 字节，偏移 {self.offset}，总长 {len(self.data)}")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)


def loads(data: bytes) -> NeuralNet:
    reader = _Reader(data)
    if reader.take(len(NET_MAGIC)) != NET_MAGIC:
        raise NetFormatError("不是网络文件：魔数不匹配")
    (version,) = reader.unpack("<H")
    if version != NET_VERSION:
        raise NetVersionError(f"网络文件版本 {version} 与当前版本 {NET_VERSION} 不匹配")
    n_layers, width = reader.unpack("<II")
    if n_layers == 0:
        raise NetFormatError("网络文件层数为 0")
    layers = []
    for _ in range(n_layers):
        fan_out, fan_in, code = reader.unpack("<IIB")
        if code not in ACTIVATION_NAMES:
            raise NetFormatError(f"未知激活编码: {code}")
        weights = reader.floats(fan_out * fan_in).reshape(fan_out, fan_in)
        biases = reader.floats(fan_out)
        layers.append(Layer(weights, biases, ACTIVATION_NAMES[code]))
    n_out = layers[-1].fan_out
    input_mean = reader.floats(width)
    input_scale = reader.floats(width)
    output_mean = reader.floats(n_out)
    output_scale = reader.floats(n_out)
    (trained,) = reader.unpack("<B")
    if reader.offset != len(data):
        raise NetFormatError(f"网络文件末尾有 {len(data) - reader.offset} 字节多余数据")
    try:
        return NeuralNet(tuple(layers), input_mean, input_scale, output_mean, output_scale, bool(trained))
    except (DimensionError, ParameterError) as e:
        raise NetFormatError(f"网络文件内容不一致: {e}") from e


def save(net: NeuralNet, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(net))
    logger.info(f"网络已保存: {path} (结构 {net.sizes})")


def load(path: Union[str, Path]) -> NeuralNet:
    path = Path(path)
    try:
        data = path.read_bytes()
    except IOError as e:
        raise NetFormatError(f"读取网络文件失败 {path}: {e}") from e
    return loads(data)
