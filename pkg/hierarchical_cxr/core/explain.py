"""
层次化胸片多标签系统 - GradCAM 热力图

通道权重取 sigmoid 之前的 logit 对目标层特征图梯度的空间均值；
热力图 = ReLU(Σ 权重 × 特征图)，双线性放大到输入尺寸后按最大值归一化。
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from hierarchical_cxr.core.errors import ExplainError
from hierarchical_cxr.core.model import HierarchicalClassifier
from hierarchical_cxr.core.taxonomy import Taxonomy

logger = logging.getLogger(__name__)


@dataclass
class Heatmap:
    """取值 [0, 1] 的二维热力图；原始图不全为零时最大值为 1"""

    values: np.ndarray
    node: str
    image_id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ExplainError(f"热力图必须是二维数组，当前形状 {self.values.shape}")
        if self.values.size and (self.values.min() < 0.0 or self.values.max() > 1.0):
            raise ExplainError("热力图取值必须位于 [0, 1]")

    @property
    def is_zero(self) -> bool:
        return not np.any(self.values)


def _as_input(model_input: Union[np.ndarray, torch.Tensor]) -> torch.Tensor:
    x = model_input if isinstance(model_input, torch.Tensor) else torch.from_numpy(np.asarray(model_input))
    x = x.float()
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[0] != 1:
        raise ExplainError(f"GradCAM 一次只处理一张图像，输入形状 {tuple(x.shape)}")
    return x


def find_layer(model: nn.Module, name: Optional[str] = None) -> Tuple[str, nn.Module]:
    """
    定位目标层

    Args:
        model: 分类网络
        name: named_modules 中的层名；为 None 时取最后一个 Conv2d

    Returns:
        (层名, 层)
    """
    modules = dict(model.named_modules())
    if name is not None:
        if name not in modules:
            raise ExplainError(f"模型中没有名为 {name!r} 的层")
        return name, modules[name]
    convs = [(n, m) for n, m in modules.items() if isinstance(m, nn.Conv2d)]
    if not convs:
        raise ExplainError("模型没有卷积层，无法计算 GradCAM")
    return convs[-1]


class GradCAM:
    """绑定到一个模型与目标层的 GradCAM 计算器；同一实例一次只做一次梯度计算"""

    def __init__(self, model: HierarchicalClassifier, target_layer: Optional[str] = None):
        if not hasattr(model, "logits"):
            raise ExplainError("模型必须提供 logits()（sigmoid 之前的输出）")
        self.model = model
        self.layer_name, self.layer = find_layer(model, target_layer)
        self.logger = logging.getLogger(f"GradCAM.{self.layer_name}")

    def __call__(
        self,
        model_input: Union[np.ndarray, torch.Tensor],
        node_index: int,
        node_id: Optional[str] = None,
        image_id: str = "",
    ) -> Heatmap:
        """
        计算一个输出节点的热力图

        Args:
            model_input: 预处理后的图像（H×W、1×H×W 或 1×1×H×W）
            node_index: 输出向量中的位置
            node_id: 写入 Heatmap 的节点 id
            image_id: 写入 Heatmap 的图像 id

        Returns:
            与输入同尺寸的 Heatmap
        """
        if not 0 <= node_index < self.model.num_outputs:
            raise ExplainError(f"节点索引 {node_index} 超出输出范围 [0, {self.model.num_outputs})")
        x = _as_input(model_input).requires_grad_(True)

        captured = {}

        def hook(module, inputs, output):
            captured["activation"] = output

        handle = self.layer.register_forward_hook(hook)
        was_training = self.model.training
        self.model.eval()
        try:
            with torch.enable_grad():
                logit = self.model.logits(x)[0, node_index]
                activation = captured.get("activation")
                if activation is None or activation.ndim != 4:
                    raise ExplainError(f"目标层 {self.layer_name} 没有产生卷积特征图")
                (gradient,) = torch.autograd.grad(logit, activation)
        finally:
            handle.remove()
            self.model.train(was_training)

        weights = gradient.mean(dim=(2, 3), keepdim=True)
        cam = F.relu((weights * activation).sum(dim=1, keepdim=True)).detach()
        cam = F.interpolate(cam, size=x.shape[-2:], mode="bilinear", align_corners=False)[0, 0].double()
        peak = float(cam.max())
        values = (cam / peak).clamp(0.0, 1.0).numpy() if peak > 0 else np.zeros(tuple(cam.shape))
        if peak <= 0:
            self.logger.debug(f"节点 {node_id or node_index} 的原始热力图全为零")
        return Heatmap(values=values, node=node_id if node_id is not None else str(node_index), image_id=image_id)


def gradcam(
    model: HierarchicalClassifier,
    model_input: Union[np.ndarray, torch.Tensor],
    node: Union[str, int],
    taxonomy: Optional[Taxonomy] = None,
    target_layer: Optional[str] = None,
    image_id: str = "",
) -> Heatmap:
    """
    计算单个节点的 GradCAM 热力图

    Args:
        model: 分类网络
        model_input: 预处理后的图像
        node: 节点 id（需要 taxonomy）或输出位置
        taxonomy: 分类树
        target_layer: 目标层名，默认最后一个卷积层
        image_id: 图像 id

    Returns:
        Heatmap
    """
    if isinstance(node, str):
        if taxonomy is None or node not in taxonomy:
            raise ExplainError(f"未知节点: {node!r}")
        index, node_id = taxonomy.index_of(node), node
    else:
        index, node_id = int(node), None
    return GradCAM(model, target_layer)(model_input, index, node_id=node_id, image_id=image_id)


def box_contrast(
    heatmap: Heatmap,
    box: Sequence[float],
    image_size: Optional[int] = None,
    offset: Tuple[float, float] = (0.0, 0.0),
) -> Tuple[float, float]:
    """
    边框内外的热力图均值

    Args:
        heatmap: 热力图
        box: (x, y, w, h)，以原始图像像素为单位
        image_size: 裁剪后的正方形边长；与热力图尺寸不同时按比例缩放边框
        offset: 裁剪窗口左上角 (left, top)，缩放前先从边框坐标中减去

    Returns:
        (框内均值, 框外均值)
    """
    height, width = heatmap.values.shape
    scale = width / image_size if image_size else 1.0
    left, top = offset
    x, y, w, h = float(box[0]) - left, float(box[1]) - top, float(box[2]), float(box[3])
    x, y, w, h = x * scale, y * scale, w * scale, h * scale
    x0, y0 = max(int(np.floor(x)), 0), max(int(np.floor(y)), 0)
    x1, y1 = min(int(np.ceil(x + w)), width), min(int(np.ceil(y + h)), height)
    if x1 <= x0 or y1 <= y0:
        raise ExplainError(f"边框 {tuple(box)} 不在热力图范围内")
    mask = np.zeros((height, width), dtype=bool)
    mask[y0:y1, x0:x1] = True
    inside = float(heatmap.values[mask].mean())
    outside = float(heatmap.values[~mask].mean()) if (~mask).any() else 0.0
    return inside, outside
