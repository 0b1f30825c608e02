"""
层次化胸片多标签系统 - 分类网络

主干网络 -> 全局平均池化 -> [全连接 + ReLU + Dropout] × head_layers -> 全连接 -> sigmoid。
输出长度等于分类树的节点数，列顺序为规范索引。
"""

import importlib
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from hierarchical_cxr.core.config import ModelConfig, TrainConfig
from hierarchical_cxr.core.errors import ChecksumMismatchError, ConfigError, ShapeMismatchError
from hierarchical_cxr.core.taxonomy import Taxonomy

logger = logging.getLogger(__name__)

BCE_EPSILON = 1e-7


class ToyBackbone(nn.Module):
    """
    适合 CPU 的小型卷积主干

    四个带步长的卷积块（16/32/64/64 通道，整体下采样 16 倍），输入为单通道
    任意尺寸，299×299 输入得到 19×19 的特征图。卷积层参数共 60,480 个，
    加上 BatchNorm 共 60,832 个。最后一个卷积层命名为 last_conv，GradCAM
    默认以它为目标层。
    """

    out_channels = 64

    def __init__(self, in_channels: int = 1):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, 16, kernel_size=5, stride=2, padding=2),
            nn.BatchNorm2d(16),
            nn.ReLU(),
            nn.Conv2d(16, 32, kernel_size=3, stride=2, padding=1),
            nn.BatchNorm2d(32),
            nn.ReLU(),
            nn.Conv2d(32, 64, kernel_size=3, stride=2, padding=1),
            nn.BatchNorm2d(64),
            nn.ReLU(),
        )
        self.last_conv = nn.Conv2d(64, self.out_channels, kernel_size=3, stride=2, padding=1)
        self.last_norm = nn.BatchNorm2d(self.out_channels)
        self.last_act = nn.ReLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.last_act(self.last_norm(self.last_conv(self.features(x))))


def load_external_backbone(reference: str) -> nn.Module:
    """
    按 "module:callable" 加载外部主干网络

    Args:
        reference: 例如 "my_backbones:resnet_gray"

    Returns:
        带 out_channels 属性的 nn.Module
    """
    module_name, _, attr = reference.partition(":")
    if not module_name or not attr:
        raise ConfigError(f"external_backbone 格式应为 module:callable，当前为 {reference!r}")
    try:
        factory = getattr(importlib.import_module(module_name), attr)
    except (ImportError, AttributeError) as e:
        raise ConfigError(f"无法加载外部主干网络 {reference}: {e}") from e
    backbone = factory()
    if not isinstance(backbone, nn.Module) or not hasattr(backbone, "out_channels"):
        raise ConfigError(f"外部主干网络 {reference} 必须返回带 out_channels 属性的 nn.Module")
    return backbone


class HierarchicalClassifier(nn.Module):
    """主干网络加全连接分类头；forward 返回 sigmoid 概率，logits 返回 sigmoid 之前的值"""

    def __init__(
        self,
        backbone: nn.Module,
        num_outputs: int,
        head_units: int = 512,
        head_layers: int = 2,
        dropout: float = 0.2,
    ):
        super().__init__()
        if num_outputs < 1:
            raise ConfigError(f"num_outputs 必须 ≥ 1，当前为 {num_outputs}")
        self.backbone = backbone
        self.num_outputs = num_outputs
        self.pool = nn.AdaptiveAvgPool2d(1)

        layers = []
        width = backbone.out_channels
        # 每个隐藏全连接层后各接一个 dropout
        for _ in range(head_layers):
            layers += [nn.Linear(width, head_units), nn.ReLU(), nn.Dropout(dropout)]
            width = head_units
        self.head = nn.Sequential(*layers)
        self.classifier = nn.Linear(width, num_outputs)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        features = self.pool(self.backbone(x)).flatten(1)
        return self.classifier(self.head(features))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(x))


BACKBONES = {
    "toy-cnn": ToyBackbone,
}


def build_model(cfg: ModelConfig, num_outputs: Optional[int] = None) -> HierarchicalClassifier:
    """
    根据配置构造分类网络

    Args:
        cfg: 网络结构配置
        num_outputs: 输出长度；为 None 时使用 cfg.num_outputs

    Returns:
        HierarchicalClassifier
    """
    outputs = num_outputs if num_outputs is not None else cfg.num_outputs
    if outputs is None:
        raise ConfigError("未指定 num_outputs（应等于分类树节点数）")
    if cfg.backbone == "external":
        backbone = load_external_backbone(cfg.external_backbone or "")
    elif cfg.backbone in BACKBONES:
        backbone = BACKBONES[cfg.backbone]()
    else:
        raise ConfigError(f"未知的主干网络: {cfg.backbone}")

    model = HierarchicalClassifier(
        backbone,
        num_outputs=outputs,
        head_units=cfg.head_units,
        head_layers=cfg.head_layers,
        dropout=cfg.dropout,
    )
    n_params = sum(p.numel() for p in model.parameters())
    logger.info(f"已构造模型: 主干 {cfg.backbone}, 输出 {outputs}, 参数 {n_params}")
    return model


# ----------------------------------------------------------------------
# 损失与学习率
# ----------------------------------------------------------------------

def _as_tensor(value) -> torch.Tensor:
    if isinstance(value, torch.Tensor):
        return value
    return torch.as_tensor(np.asarray(value, dtype=np.float64))


def bce_loss(pred, target, eps: float = BCE_EPSILON) -> torch.Tensor:
    """
    逐维二元交叉熵的均值

    Args:
        pred: sigmoid 输出，形状 (N,) 或 (B, N)
        target: 与 pred 同形状的 0/1 目标
        eps: 预测值裁剪到 [eps, 1 - eps]

    Returns:
        标量张量
    """
    pred = _as_tensor(pred)
    target = _as_tensor(target).to(pred.dtype)
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"预测形状 {tuple(pred.shape)} 与目标形状 {tuple(target.shape)} 不一致")
    p = pred.clamp(eps, 1.0 - eps)
    return -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p)).mean()


def bce_grad(pred, target, eps: float = BCE_EPSILON) -> np.ndarray:
    """bce_loss 对预测值的解析梯度；被裁剪的位置梯度为 0"""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"预测形状 {pred.shape} 与目标形状 {target.shape} 不一致")
    grad = (-(target / pred) + (1.0 - target) / (1.0 - pred)) / pred.size
    inside = (pred > eps) & (pred < 1.0 - eps)
    return np.where(inside, grad, 0.0)


def lr_at(epoch: int, tc: TrainConfig) -> float:
    """
    对数线性学习率：lr_start · (lr_end / lr_start) ^ (epoch / (epochs - 1))

    Args:
        epoch: 从 0 开始的轮次
        tc: 训练配置

    Returns:
        学习率；首轮与末轮精确等于两个端点
    """
    if not 0 <= epoch < tc.epochs:
        raise ValueError(f"epoch {epoch} 超出范围 [0, {tc.epochs})")
    if epoch == 0 or tc.epochs == 1:
        return tc.lr_start
    if epoch == tc.epochs - 1:
        return tc.lr_end
    return tc.lr_start * (tc.lr_end / tc.lr_start) ** (epoch / (tc.epochs - 1))


# ----------------------------------------------------------------------
# 检查点
# ----------------------------------------------------------------------

def save_checkpoint(
    model: HierarchicalClassifier,
    cfg: ModelConfig,
    taxonomy: Taxonomy,
    path: Union[str, Path],
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """
    保存权重、网络配置与分类树校验和

    Args:
        model: 模型
        cfg: 构造模型时使用的配置
        taxonomy: 训练所用分类树
        path: 输出路径
        extra: 额外写入的元数据（如最佳轮次）

    Returns:
        检查点路径
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "state_dict": model.state_dict(),
        "model_config": cfg.model_dump(),
        "num_outputs": model.num_outputs,
        "taxonomy_checksum": taxonomy.checksum(),
        "node_ids": taxonomy.node_ids,
        "extra": dict(extra or {}),
    }
    torch.save(payload, path)
    logger.info(f"检查点已保存: {path}")
    return path


def load_checkpoint(path: Union[str, Path], taxonomy: Taxonomy) -> Tuple[HierarchicalClassifier, Dict[str, Any]]:
    """
    加载检查点并核对分类树

    Args:
        path: 检查点路径
        taxonomy: 当前加载的分类树

    Returns:
        (处于 eval 模式的模型, 检查点元数据)
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"检查点不存在: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload["taxonomy_checksum"] != taxonomy.checksum():
        raise ChecksumMismatchError(
            f"检查点 {path} 的分类树校验和与当前分类树不一致，拒绝加载"
            f"（检查点 {len(payload['node_ids'])} 个节点，当前 {len(taxonomy)} 个）"
        )
    cfg = ModelConfig.model_validate(payload["model_config"])
    model = build_model(cfg, num_outputs=payload["num_outputs"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
