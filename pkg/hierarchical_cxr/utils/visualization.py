"""
层次化胸片多标签系统 - 可视化工具
"""

import os
from pathlib import Path
from typing import TYPE_CHECKING, Dict, Optional, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import networkx as nx
import numpy as np
import pandas as pd
from PIL import Image
from pyvis.network import Network

if TYPE_CHECKING:
    from hierarchical_cxr.core.explain import Heatmap
    from hierarchical_cxr.core.metrics import ROCResult
    from hierarchical_cxr.core.taxonomy import Taxonomy

# 每棵树一种颜色和形状
TREE_STYLES = {
    "findings": ("#3357FF", "dot"),
    "diagnoses": ("#FF5733", "dot"),
    "localizations": ("#33A852", "dot"),
    "special": ("#AAAAAA", "diamond"),
}


def visualize_taxonomy(
    taxonomy: "Taxonomy",
    output_file: str = "taxonomy.html",
    width: str = "1000px",
    height: str = "800px",
    bgcolor: str = "#ffffff",
    font_color: str = "#000000",
) -> str:
    """
    用 pyvis 输出分类树的交互式 HTML 图

    Args:
        taxonomy: 分类树
        output_file: 输出文件路径
        width: 可视化宽度
        height: 可视化高度
        bgcolor: 背景颜色
        font_color: 字体颜色

    Returns:
        输出文件路径
    """
    G = nx.DiGraph()
    for node_id in taxonomy.node_ids:
        node = taxonomy.node(node_id)
        color, shape = TREE_STYLES.get(node.tree, TREE_STYLES["special"])
        G.add_node(
            node_id,
            label=node.display_name,
            title=f"{node.display_name}\nid: {node_id}\n索引: {taxonomy.index_of(node_id)}\n树: {node.tree}",
            group=node.tree,
            color=color,
            shape="square" if node.parent is None and not node.special else shape,
        )
    for parent, child in taxonomy.edges():
        G.add_edge(parent, child, arrows="to")

    net = Network(height=height, width=width, directed=True, bgcolor=bgcolor, font_color=font_color)
    net.barnes_hut(gravity=-8000, central_gravity=0.3, spring_length=120, spring_strength=0.01, damping=0.09)
    net.from_nx(G)

    os.makedirs(os.path.dirname(os.path.abspath(output_file)), exist_ok=True)
    net.save_graph(output_file)
    return output_file


def plot_roc_curves(
    results: Dict[str, "ROCResult"],
    output_file: Union[str, Path],
    bands: Optional[Dict[str, Tuple[np.ndarray, np.ndarray, np.ndarray]]] = None,
    names: Optional[Dict[str, str]] = None,
    title: str = "ROC",
) -> Path:
    """
    绘制多个节点的 ROC 曲线，可带 bootstrap 置信带

    Args:
        results: 节点 id -> ROCResult（未定义的结果被跳过）
        output_file: 输出 PNG 路径
        bands: 节点 id -> (FPR 网格, TPR 下界, TPR 上界)
        names: 节点 id -> 图例名称
        title: 图标题

    Returns:
        输出文件路径
    """
    output_file = Path(output_file)
    output_file.parent.mkdir(parents=True, exist_ok=True)
    bands = bands or {}
    names = names or {}

    fig, ax = plt.subplots(figsize=(6, 6))
    for node_id, result in results.items():
        if not result.defined:
            continue
        points = np.asarray(result.points)
        label = f"{names.get(node_id, node_id)} {result.auc:.3f} ({result.ci_low:.3f}-{result.ci_high:.3f})"
        (line,) = ax.plot(points[:, 0], points[:, 1], label=label)
        if node_id in bands:
            grid, low, high = bands[node_id]
            ax.fill_between(grid, low, high, color=line.get_color(), alpha=0.2, linewidth=0)
    ax.plot([0, 1], [0, 1], linestyle="--", color="#888888", linewidth=1)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("1 - Specificity")
    ax.set_ylabel("Sensitivity")
    ax.set_title(title)
    ax.legend(loc="lower right", fontsize="small")
    fig.tight_layout()
    fig.savefig(output_file, dpi=120)
    plt.close(fig)
    return output_file


def plot_training_history(history: pd.DataFrame, output_file: Union[str, Path]) -> Path:
    """训练/验证损失与验证 AUC 随轮次的变化"""
    output_file = Path(output_file)
    output_file.parent.mkdir(parents=True, exist_ok=True)
    fig, (ax_loss, ax_auc) = plt.subplots(1, 2, figsize=(10, 4))
    epochs = history["epoch"] + 1
    ax_loss.plot(epochs, history["train_loss"], label="train")
    ax_loss.plot(epochs, history["val_loss"], label="val")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("BCE")
    ax_loss.legend()
    ax_auc.plot(epochs, history["val_auc"], color="#FF5733")
    ax_auc.set_xlabel("epoch")
    ax_auc.set_ylabel("val mean AUC")
    best = history.attrs.get("best_epoch")
    if best is not None:
        ax_auc.axvline(best + 1, linestyle="--", color="#888888")
    fig.tight_layout()
    fig.savefig(output_file, dpi=120)
    plt.close(fig)
    return output_file


def _to_uint8(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    low, high = float(arr.min()), float(arr.max())
    if high <= low:
        return np.zeros(arr.shape, dtype=np.uint8)
    return np.rint((arr - low) / (high - low) * 255).astype(np.uint8)


def save_heatmap(
    heatmap: "Heatmap",
    model_input: np.ndarray,
    output_dir: Union[str, Path],
    alpha: float = 0.4,
    cmap: str = "jet",
) -> Tuple[Path, Path]:
    """
    写出灰度热力图与叠加图

    Args:
        heatmap: 热力图
        model_input: 预处理后的图像（与热力图同尺寸）
        output_dir: 输出目录
        alpha: 叠加时热力图的不透明度
        cmap: matplotlib 颜色表

    Returns:
        (<image_id>__<node_id>.png, <image_id>__<node_id>__overlay.png)
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{heatmap.image_id}__{heatmap.node}"

    gray_path = output_dir / f"{stem}.png"
    Image.fromarray(np.rint(heatmap.values * 255).astype(np.uint8)).save(gray_path)

    base = _to_uint8(np.asarray(model_input).squeeze())
    if base.shape != heatmap.values.shape:
        base = np.asarray(Image.fromarray(base).resize(heatmap.values.shape[::-1], Image.BILINEAR))
    colored = matplotlib.colormaps[cmap](heatmap.values)[..., :3]
    rgb = np.repeat(base[..., None] / 255.0, 3, axis=2)
    blended = (1.0 - alpha) * rgb + alpha * colored
    overlay_path = output_dir / f"{stem}__overlay.png"
    Image.fromarray(np.rint(blended * 255).astype(np.uint8)).save(overlay_path)
    return gray_path, overlay_path
