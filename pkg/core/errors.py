"""
异常定义

所有库代码只抛出这里定义的异常，由命令行层统一转换为退出码。
"""


class BatteryModelError(Exception):
    """电池功率预测引擎的基础异常"""


class ParameterError(BatteryModelError):
    """参数或配置取值非法"""


class PropagationError(BatteryModelError):
    """状态传播失败（负步长、非有限输入或状态）"""


class UntrainedNetError(BatteryModelError):
    """神经网络尚未训练"""


class NetFormatError(BatteryModelError):
    """网络文件损坏或格式错误"""


class NetVersionError(NetFormatError):
    """网络文件版本不匹配"""


class DimensionError(BatteryModelError):
    """网络输入维度不匹配"""


class TrainingError(BatteryModelError):
    """训练失败（空数据集、损失为 NaN 等）"""


class RdtCapExceeded(BatteryModelError):
    """剩余放电时间超过仿真上限"""

    def __init__(self, cap: float):
        super().__init__(f"cap exceeded: 在 {cap:.0f} s 内未到达 V_min")
        self.cap = cap


class ReferenceStepError(BatteryModelError):
    """参考电池积分步长过大"""


class MissingArtifactError(BatteryModelError):
    """缺少前置产物，需要先运行对应的子命令"""

    def __init__(self, artifact: str, producer: str):
        super().__init__(f"缺少产物 {artifact}，请先运行子命令: {producer}")
        self.artifact = artifact
        self.producer = producer
