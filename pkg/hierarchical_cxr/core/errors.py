"""
层次化胸片多标签系统 - 异常定义

每个异常类带有 exit_code，命令行入口据此返回不同的退出码。
"""

from typing import Optional


class HierarchyError(Exception):
    """系统内所有可预期错误的基类"""

    exit_code = 1

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class TaxonomyError(HierarchyError):
    """分类树解析或校验失败"""

    exit_code = 2

    def __init__(self, message: str, node_id: Optional[str] = None, line: Optional[int] = None):
        location = []
        if node_id is not None:
            location.append(f"id={node_id!r}")
        if line is not None:
            location.append(f"line {line}")
        if location:
            message = f"{message} ({', '.join(location)})"
        super().__init__(message)
        self.node_id = node_id
        self.line = line


class LabelError(HierarchyError):
    """标签集中出现分类树之外的节点"""

    exit_code = 2

    def __init__(self, message: str, node_id: Optional[str] = None, row: Optional[int] = None):
        if row is not None:
            message = f"{message} (row {row})"
        super().__init__(message)
        self.node_id = node_id
        self.row = row


class ManifestError(HierarchyError):
    """清单文件格式或内容错误"""

    exit_code = 2


class ConfigError(HierarchyError):
    """配置文件或配置值错误"""

    exit_code = 2


class ImagingError(HierarchyError):
    """图像数据不合法"""

    exit_code = 2

    def __init__(self, message: str, image_id: Optional[str] = None):
        super().__init__(message)
        self.image_id = image_id


class ShapeMismatchError(HierarchyError):
    """矩阵维度与分类树不一致"""

    exit_code = 2


class ChecksumMismatchError(HierarchyError):
    """模型或预测文件与当前分类树不匹配"""

    exit_code = 3


class TrainingError(HierarchyError):
    """训练无法进行（空训练集、损失为 NaN 等）"""

    exit_code = 4


class PredictionError(HierarchyError):
    """推理阶段预处理失败"""

    exit_code = 5

    def __init__(self, message: str, image_id: Optional[str] = None):
        if image_id is not None:
            message = f"{message} (image_id={image_id})"
        super().__init__(message)
        self.image_id = image_id


class ExplainError(HierarchyError):
    """GradCAM 无法计算"""

    exit_code = 6


class UndefinedAUCError(ValueError):
    """标签只有一个类别时 AUC 无定义"""
