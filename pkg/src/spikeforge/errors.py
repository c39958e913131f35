"""
SpikeForge 异常定义
所有异常同时继承对应的内置异常，调用方既可以按领域捕获，也可以按内置类型捕获
"""

from typing import Iterable, Optional


class SpikeForgeError(Exception):
    """SpikeForge 基础异常"""


class DimensionError(SpikeForgeError, ValueError):
    """张量形状或长度不匹配"""


class NumericError(SpikeForgeError, ArithmeticError):
    """出现非有限数值（NaN / Inf）"""

    def __init__(self, message: str, layer: Optional[str] = None):
        self.layer = layer
        if layer is not None:
            message = f"{message} (层: {layer})"
        super().__init__(message)


class SchemaError(SpikeForgeError, ValueError):
    """文件解析失败，附带出错字段路径"""

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        if field:
            message = f"{message} (字段: {field})"
        super().__init__(message)


class NetworkValidationError(SpikeForgeError, ValueError):
    """网络结构不满足约束"""


class NonlinearityError(SpikeForgeError, ValueError):
    """声明为线性的层未通过线性探测"""

    def __init__(self, layer: str):
        self.layer = layer
        super().__init__(f"层 {layer} 不是线性映射，网络级等价定理不适用")


class CalibrationError(SpikeForgeError, ValueError):
    """校准输入无效"""


class ConversionError(SpikeForgeError, ValueError):
    """转换所需的阈值或配置缺失"""

    def __init__(self, message: str, slots: Iterable[str] = ()):
        self.slots = list(slots)
        super().__init__(message)


class TuningError(SpikeForgeError, RuntimeError):
    """λ 搜索没有得到任何有限分数"""


class UndefinedRatioError(SpikeForgeError, ZeroDivisionError):
    """ANN 乘加次数为零时能耗比无定义"""


class ConfigError(SpikeForgeError, ValueError):
    """配置或命令行参数无效，附带参数名"""

    def __init__(self, message: str, flag: Optional[str] = None):
        self.flag = flag
        super().__init__(message)


class VerificationFailed(SpikeForgeError):
    """定理校验存在失败用例"""

    def __init__(self, message: str, seed: int, case_id: int, kind: str):
        self.seed = seed
        self.case_id = case_id
        self.kind = kind
        super().__init__(message)
