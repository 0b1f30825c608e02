"""
层次化胸片多标签系统 - 标签传播模块

训练语义：报告中的节点及其全部祖先置 1（祖先闭包）。
评估语义：某节点的阳性图像是报告中含有该节点或其任一后代的图像；
其余图像一律为阴性，包括只含兄弟节点的图像（例如只有网状间质改变的
图像在评估磨玻璃影时记为 0）。
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
import pandas as pd

from hierarchical_cxr.core.errors import LabelError, ShapeMismatchError
from hierarchical_cxr.core.taxonomy import Taxonomy

logger = logging.getLogger(__name__)

LabelSet = FrozenSet[str]


def check_labels(t: Taxonomy, labels: Iterable[str], row: Optional[int] = None) -> LabelSet:
    """确认标签集中的节点全部存在于分类树中"""
    label_set = frozenset(labels)
    unknown = sorted(label for label in label_set if label not in t)
    if unknown:
        raise LabelError(f"未知的标签节点: {', '.join(unknown)}", node_id=unknown[0], row=row)
    return label_set


def propagate(t: Taxonomy, labels: Iterable[str]) -> np.ndarray:
    """
    把报告标签转换为祖先闭包的目标向量

    Args:
        t: 分类树
        labels: 报告中提取的节点 id

    Returns:
        长度为 N 的 uint8 向量，按规范索引排列
    """
    label_set = check_labels(t, labels)
    bits = np.zeros(len(t), dtype=np.uint8)
    for label in label_set:
        bits[t.index_of(label)] = 1
        # 特殊标签没有祖先，只置自身
        for ancestor in t.ancestors(label):
            bits[t.index_of(ancestor)] = 1
    return bits


def positive_nodes(t: Taxonomy, bits: Sequence[int]) -> Set[str]:
    """目标向量中为 1 的节点集合"""
    bits = np.asarray(bits)
    if bits.shape != (len(t),):
        raise ShapeMismatchError(f"目标向量长度 {bits.shape} 与节点数 {len(t)} 不一致")
    return {t.id_of(int(i)) for i in np.flatnonzero(bits)}


def evaluation_positive(t: Taxonomy, target_node: str, labels: Iterable[str]) -> bool:
    """
    评估语义下图像对 target_node 是否为阳性

    Args:
        t: 分类树
        target_node: 被评估的节点
        labels: 图像的参考标签

    Returns:
        标签集与 {target_node} ∪ descendants(target_node) 有交集时为 True
    """
    closure = t.descendants(target_node) | {target_node}
    return not closure.isdisjoint(check_labels(t, labels))


def target_matrix(t: Taxonomy, label_sets: Sequence[Iterable[str]]) -> np.ndarray:
    """逐行 propagate，得到 M×N 的 uint8 矩阵"""
    matrix = np.zeros((len(label_sets), len(t)), dtype=np.uint8)
    for row, labels in enumerate(label_sets):
        try:
            matrix[row] = propagate(t, labels)
        except LabelError as e:
            raise LabelError(e.message, node_id=e.node_id, row=row) from e
    return matrix


def evaluation_matrix(t: Taxonomy, label_sets: Sequence[Iterable[str]]) -> np.ndarray:
    """
    全部节点的评估阳性矩阵

    Args:
        t: 分类树
        label_sets: 每张图像的参考标签

    Returns:
        M×N 布尔矩阵，[m, v] 为 evaluation_positive(t, v, label_sets[m])
    """
    closures = [t.descendants(node_id) | {node_id} for node_id in t.node_ids]
    matrix = np.zeros((len(label_sets), len(t)), dtype=bool)
    for row, labels in enumerate(label_sets):
        label_set = check_labels(t, labels, row=row)
        for col, closure in enumerate(closures):
            matrix[row, col] = not closure.isdisjoint(label_set)
    return matrix


@dataclass
class ConsistencyReport:
    """预测结果的层次一致性统计：子节点过阈值而父节点未过阈值"""

    threshold: float
    n_images: int
    per_edge: Dict[Tuple[str, str], float] = field(default_factory=dict)
    violations: int = 0
    pairs: int = 0

    @property
    def violation_rate(self) -> float:
        return self.violations / self.pairs if self.pairs else 0.0

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {"parent": parent, "child": child, "violation_rate": rate}
            for (parent, child), rate in self.per_edge.items()
        ]
        return pd.DataFrame(rows, columns=["parent", "child", "violation_rate"])


def consistency_report(t: Taxonomy, scores: np.ndarray, threshold: float = 0.5) -> ConsistencyReport:
    """
    统计 (图像, 边) 对中 child ≥ threshold 且 parent < threshold 的比例

    Args:
        t: 分类树
        scores: M×N 预测分数矩阵，列顺序为规范索引
        threshold: 阈值，取值 (0, 1)

    Returns:
        ConsistencyReport
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"阈值必须位于 (0, 1)，当前为 {threshold}")
    scores = np.asarray(scores, dtype=float)
    if scores.ndim != 2 or scores.shape[1] != len(t):
        raise ShapeMismatchError(f"分数矩阵形状 {scores.shape} 与节点数 {len(t)} 不一致")

    edges = t.edges()
    report = ConsistencyReport(threshold=threshold, n_images=scores.shape[0])
    above = scores >= threshold
    for parent, child in edges:
        p, c = t.index_of(parent), t.index_of(child)
        count = int(np.count_nonzero(above[:, c] & ~above[:, p]))
        report.violations += count
        report.pairs += scores.shape[0]
        report.per_edge[(parent, child)] = count / scores.shape[0] if scores.shape[0] else 0.0
    logger.info(f"层次一致性: 阈值 {threshold}, 违例率 {report.violation_rate:.6f} ({report.violations}/{report.pairs})")
    return report


def write_targets_csv(
    t: Taxonomy,
    image_ids: Sequence[str],
    matrix: np.ndarray,
    output_path: Union[str, Path],
) -> Path:
    """目标矩阵写为 CSV：image_id 加 N 个 0/1 列"""
    if matrix.shape != (len(image_ids), len(t)):
        raise ShapeMismatchError(f"目标矩阵形状 {matrix.shape} 与 ({len(image_ids)}, {len(t)}) 不一致")
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(matrix.astype(np.uint8), columns=t.node_ids)
    frame.insert(0, "image_id", list(image_ids))
    frame.to_csv(output_path, index=False)
    return output_path


def positive_counts(t: Taxonomy, matrix: np.ndarray) -> List[Tuple[str, int]]:
    """每个节点的阳性数（列和）"""
    sums = np.asarray(matrix).sum(axis=0)
    return [(node_id, int(sums[i])) for i, node_id in enumerate(t.node_ids)]
