"""
层次化胸片多标签系统 - 配置模型

配置文件为 JSON，结构与 config/default.json 一致，读入后由 pydantic 校验。
"""

import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from hierarchical_cxr.core.errors import ConfigError


class SplitSpec(BaseModel):
    """按患者划分训练/验证/测试集的比例与随机种子"""

    model_config = ConfigDict(extra="forbid")

    fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    @field_validator("fractions")
    @classmethod
    def _check_fractions(cls, value):
        if any(f < 0 for f in value):
            raise ValueError("划分比例不能为负数")
        if abs(sum(value) - 1.0) > 1e-9:
            raise ValueError(f"划分比例之和必须为 1，当前为 {sum(value)}")
        return value


class ImagingConfig(BaseModel):
    """图像预处理参数"""

    model_config = ConfigDict(extra="forbid")

    size: int = Field(default=299, ge=1)
    # "std" 为默认；"variance" 按字面意义除以方差
    normalization: Literal["std", "variance"] = "std"
    epsilon: float = Field(default=1e-8, gt=0)
    cache_dir: Optional[str] = None


class SynthConfig(BaseModel):
    """合成数据集生成参数"""

    model_config = ConfigDict(extra="forbid")

    n_images: int = Field(default=2000, ge=1)
    image_size: int = Field(default=299, ge=32)
    leaf_probability: Optional[float] = Field(default=None, gt=0, le=1)
    normal_every: int = Field(default=10, ge=0)
    images_per_patient: int = Field(default=2, ge=1)
    monochrome1_fraction: float = Field(default=0.0, ge=0, le=1)


class ModelConfig(BaseModel):
    """分类网络结构：主干网络 + 两层全连接头"""

    model_config = ConfigDict(extra="forbid")

    backbone: Literal["toy-cnn", "external"] = "toy-cnn"
    external_backbone: Optional[str] = None
    head_units: int = Field(default=512, ge=1)
    head_layers: int = Field(default=2, ge=0)
    dropout: float = 0.2
    num_outputs: Optional[int] = Field(default=None, ge=1)

    @field_validator("dropout")
    @classmethod
    def _check_dropout(cls, value):
        if not 0.0 <= value < 1.0:
            raise ValueError("dropout 必须位于 [0, 1)")
        return value

    @model_validator(mode="after")
    def _check_external(self):
        if self.backbone == "external" and not self.external_backbone:
            raise ValueError("backbone=external 时必须提供 external_backbone（module:callable）")
        return self


class TrainConfig(BaseModel):
    """训练超参数"""

    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(default=50, ge=1)
    lr_start: float = 1e-3
    lr_end: float = 1e-6
    batch_size: int = Field(default=32, ge=1)
    seed: int = 0
    selection_metric: Literal["auc", "exact_match", "loss"] = "auc"
    num_threads: Optional[int] = Field(default=None, ge=1)
    deterministic: bool = True

    @model_validator(mode="after")
    def _check_lr(self):
        if not (self.lr_start >= self.lr_end > 0):
            raise ValueError("学习率必须满足 lr_start >= lr_end > 0")
        return self


class SubsetSpec(BaseModel):
    """子集评估：在 filter_node 阳性的图像上评估 target_node"""

    model_config = ConfigDict(extra="forbid")

    filter_node: str
    target_node: str


class EvaluationConfig(BaseModel):
    """评估参数"""

    model_config = ConfigDict(extra="forbid")

    n_boot: int = Field(default=2000, ge=100)
    ci_level: float = Field(default=0.95, gt=0, lt=1)
    threshold: float = Field(default=0.5, gt=0, lt=1)
    subsets: List[SubsetSpec] = Field(default_factory=list)
    roc_nodes: List[str] = Field(default_factory=list)
    roc_points: bool = False


class ExplainConfig(BaseModel):
    """GradCAM 参数"""

    model_config = ConfigDict(extra="forbid")

    target_layer: Optional[str] = None
    nodes: List[str] = Field(default_factory=list)
    max_images: int = Field(default=16, ge=1)
    alpha: float = Field(default=0.4, ge=0, le=1)


class RunConfig(BaseModel):
    """一次命令行运行的完整配置"""

    model_config = ConfigDict(extra="forbid")

    taxonomy_path: Optional[str] = None
    manifest_path: Optional[str] = None
    output_dir: str = "results"
    seed: int = 0
    include_special: bool = True
    exclude_filter: bool = False
    imaging: ImagingConfig = Field(default_factory=ImagingConfig)
    split: SplitSpec = Field(default_factory=SplitSpec)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    explain: ExplainConfig = Field(default_factory=ExplainConfig)


def build_config(data: Dict[str, Any], model_cls=RunConfig):
    """
    由字典构造配置模型，校验失败时统一抛出 ConfigError

    Args:
        data: 配置字典
        model_cls: 目标 pydantic 模型类

    Returns:
        配置模型实例
    """
    try:
        return model_cls.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"配置校验失败: {e}") from e


def load_config(config_path: Union[str, Path]) -> RunConfig:
    """
    加载 JSON 配置文件

    Args:
        config_path: 配置文件路径

    Returns:
        RunConfig
    """
    path = Path(config_path)
    if not path.exists():
        raise ConfigError(f"配置文件不存在: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"配置文件不是合法的 JSON: {path}: {e}") from e
    return build_config(data)

