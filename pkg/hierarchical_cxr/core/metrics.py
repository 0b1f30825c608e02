"""
层次化胸片多标签系统 - 评估指标

ROC/AUC（Mann–Whitney 统计量，平局计 0.5）、分层 bootstrap 置信区间、
逐节点一对多评估报告与子集评估。
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import rankdata
from sklearn import metrics as sk_metrics
from tqdm import tqdm

from hierarchical_cxr.core.errors import ChecksumMismatchError, ShapeMismatchError, UndefinedAUCError
from hierarchical_cxr.core.labels import evaluation_matrix
from hierarchical_cxr.core.taxonomy import Taxonomy

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["node_id", "name", "support_pos", "support_neg", "auc", "ci_low", "ci_high"]


def _split_classes(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ShapeMismatchError(f"分数形状 {scores.shape} 与标签形状 {labels.shape} 不一致")
    positive = labels.astype(bool)
    pos, neg = scores[positive], scores[~positive]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedAUCError(f"AUC 未定义: 阳性 {pos.size} 例, 阴性 {neg.size} 例")
    return pos, neg


def _rank_auc(pos: np.ndarray, neg: np.ndarray) -> float:
    ranks = rankdata(np.concatenate([pos, neg]))
    n_pos, n_neg = pos.size, neg.size
    return float((ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """
    Mann–Whitney 形式的 AUC

    Args:
        scores: 预测分数
        labels: 0/1 标签

    Returns:
        阳性分数高于阴性分数的 (阳, 阴) 对所占比例，平局计 0.5
    """
    pos, neg = _split_classes(scores, labels)
    return _rank_auc(pos, neg)


def roc_points(scores: Sequence[float], labels: Sequence[int]) -> List[Tuple[float, float]]:
    """
    阈值扫描得到的 ROC 折线

    Args:
        scores: 预测分数
        labels: 0/1 标签

    Returns:
        从 (0, 0) 到 (1, 1) 的 (FPR, TPR) 点列，每个不同的分数值一个点
    """
    pos, neg = _split_classes(scores, labels)
    y_true = np.concatenate([np.ones(pos.size, dtype=np.int64), np.zeros(neg.size, dtype=np.int64)])
    fpr, tpr, _ = sk_metrics.roc_curve(y_true, np.concatenate([pos, neg]), drop_intermediate=False)
    return list(zip(fpr.tolist(), tpr.tolist()))


def trapezoid_area(points: Sequence[Tuple[float, float]]) -> float:
    """折线下的梯形面积"""
    xy = np.asarray(points, dtype=np.float64)
    return float(sk_metrics.auc(xy[:, 0], xy[:, 1]))


def _bootstrap_aucs(pos: np.ndarray, neg: np.ndarray, n_boot: int, seed: int) -> np.ndarray:
    """分层重采样：每次先抽阳性、再抽阴性，各自有放回、样本量不变"""
    rng = np.random.default_rng(seed)
    values = np.empty(n_boot, dtype=np.float64)
    for b in range(n_boot):
        pos_b = pos[rng.integers(0, pos.size, size=pos.size)]
        neg_b = neg[rng.integers(0, neg.size, size=neg.size)]
        values[b] = _rank_auc(pos_b, neg_b)
    return values


def auc_ci(
    scores: Sequence[float],
    labels: Sequence[int],
    n_boot: int = 2000,
    seed: int = 0,
    level: float = 0.95,
) -> Tuple[float, float]:
    """
    分层百分位 bootstrap 置信区间

    区间取 bootstrap 分布的 (1-level)/2 与 (1+level)/2 分位数（线性插值），
    再扩展到包含点估计。

    Args:
        scores: 预测分数
        labels: 0/1 标签
        n_boot: 重采样次数，≥ 100
        seed: 随机种子
        level: 置信水平

    Returns:
        (下限, 上限)
    """
    if n_boot < 100:
        raise ValueError(f"n_boot 必须 ≥ 100，当前为 {n_boot}")
    pos, neg = _split_classes(scores, labels)
    point = _rank_auc(pos, neg)
    values = _bootstrap_aucs(pos, neg, n_boot, seed)
    alpha = (1.0 - level) / 2.0
    low, high = np.percentile(values, [100 * alpha, 100 * (1 - alpha)])
    return min(float(low), point), max(float(high), point)


def roc_confidence_band(
    scores: Sequence[float],
    labels: Sequence[int],
    n_boot: int = 2000,
    seed: int = 0,
    level: float = 0.95,
    grid_size: int = 101,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    ROC 曲线的 bootstrap 置信带

    Args:
        scores: 预测分数
        labels: 0/1 标签
        n_boot: 重采样次数
        seed: 随机种子
        level: 置信水平
        grid_size: FPR 网格点数

    Returns:
        (FPR 网格, TPR 下界, TPR 上界)
    """
    pos, neg = _split_classes(scores, labels)
    grid = np.linspace(0.0, 1.0, grid_size)
    rng = np.random.default_rng(seed)
    curves = np.empty((n_boot, grid_size), dtype=np.float64)
    for b in range(n_boot):
        pos_b = pos[rng.integers(0, pos.size, size=pos.size)]
        neg_b = neg[rng.integers(0, neg.size, size=neg.size)]
        points = np.array(roc_points(
            np.concatenate([pos_b, neg_b]),
            np.concatenate([np.ones(pos.size), np.zeros(neg.size)]),
        ))
        # FPR 不超过网格值的最后一个点，其 TPR 最大
        idx = np.searchsorted(points[:, 0], grid, side="right") - 1
        curves[b] = points[idx, 1]
    alpha = (1.0 - level) / 2.0
    low = np.percentile(curves, 100 * alpha, axis=0)
    high = np.percentile(curves, 100 * (1 - alpha), axis=0)
    return grid, low, high


def threshold_summary(scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> Dict[str, float]:
    """阈值下的混淆矩阵、灵敏度与特异度（无法定义时为 NaN）"""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    predicted = scores >= threshold
    tp = int(np.count_nonzero(predicted & labels))
    fp = int(np.count_nonzero(predicted & ~labels))
    tn = int(np.count_nonzero(~predicted & ~labels))
    fn = int(np.count_nonzero(~predicted & labels))
    return {
        "threshold": threshold,
        "tp": tp,
        "fp": fp,
        "tn": tn,
        "fn": fn,
        "sensitivity": tp / (tp + fn) if tp + fn else float("nan"),
        "specificity": tn / (tn + fp) if tn + fp else float("nan"),
    }


@dataclass
class ROCResult:
    """单个节点（或子集）的 ROC 评估结果；defined=False 表示类别退化"""

    points: List[Tuple[float, float]]
    auc: Optional[float]
    ci_low: Optional[float]
    ci_high: Optional[float]
    support_pos: int
    support_neg: int
    defined: bool = True


def roc_result(
    scores: Sequence[float],
    labels: Sequence[int],
    n_boot: int = 2000,
    seed: int = 0,
    level: float = 0.95,
    with_ci: bool = True,
) -> ROCResult:
    """
    计算 ROC 点列、AUC 与置信区间

    Args:
        scores: 预测分数
        labels: 0/1 标签
        n_boot: 重采样次数
        seed: 随机种子
        level: 置信水平
        with_ci: 为 False 时跳过 bootstrap

    Returns:
        ROCResult；只有单一类别时返回 defined=False 的结果，不抛出异常
    """
    labels_arr = np.asarray(labels).astype(bool)
    n_pos = int(labels_arr.sum())
    n_neg = int(labels_arr.size - n_pos)
    try:
        value = auc(scores, labels_arr)
    except UndefinedAUCError:
        return ROCResult([], None, None, None, n_pos, n_neg, defined=False)
    low, high = auc_ci(scores, labels_arr, n_boot=n_boot, seed=seed, level=level) if with_ci else (value, value)
    return ROCResult(roc_points(scores, labels_arr), value, low, high, n_pos, n_neg)


def mean_auc(scores: np.ndarray, targets: np.ndarray) -> Tuple[float, int]:
    """
    逐列 AUC 的均值

    Args:
        scores: M×N 分数矩阵
        targets: M×N 0/1 矩阵

    Returns:
        (已定义列的 AUC 均值, 已定义列数)；没有已定义列时均值为 NaN
    """
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets)
    if scores.shape != targets.shape:
        raise ShapeMismatchError(f"分数形状 {scores.shape} 与目标形状 {targets.shape} 不一致")
    values = []
    for col in range(scores.shape[1] if scores.ndim == 2 else 0):
        try:
            values.append(auc(scores[:, col], targets[:, col]))
        except UndefinedAUCError:
            continue
    return (float(np.mean(values)) if values else float("nan")), len(values)


@dataclass
class EvaluationReport:
    """逐节点评估报告；平均 AUC 只统计同时存在阳性与阴性的节点"""

    per_node: Dict[str, ROCResult]
    names: Dict[str, str] = field(default_factory=dict)
    avg_auc: float = float("nan")
    avg_auc_std: float = float("nan")
    n_defined: int = 0

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for node_id, result in self.per_node.items():
            rows.append({
                "node_id": node_id,
                "name": self.names.get(node_id, node_id),
                "support_pos": result.support_pos,
                "support_neg": result.support_neg,
                "auc": result.auc,
                "ci_low": result.ci_low,
                "ci_high": result.ci_high,
            })
        return pd.DataFrame(rows, columns=REPORT_COLUMNS)

    def summary_line(self) -> str:
        return (
            f"# avg_auc={self.avg_auc:.6f} std={self.avg_auc_std:.6f} "
            f"n_defined={self.n_defined} n_nodes={len(self.per_node)}"
        )

    def to_csv(self, output_path: Union[str, Path]) -> Path:
        """写出报告 CSV，末尾追加一行以 # 开头的汇总"""
        output_path = Path(output_path)
        output_path.parent.mkdir(parents=True, exist_ok=True)
        text = self.to_frame().to_csv(index=False, float_format="%.6f", lineterminator="\n")
        output_path.write_text(text + self.summary_line() + "\n", encoding="utf-8")
        return output_path


def _aligned_rows(predictions, records) -> List:
    by_id = {r.image_id: r for r in records}
    missing = [i for i in predictions.image_ids if i not in by_id]
    if missing:
        raise ShapeMismatchError(f"预测中有 {len(missing)} 张图像不在清单中，例如 {missing[0]!r}")
    return [by_id[i] for i in predictions.image_ids]


def _check_columns(taxonomy: Taxonomy, predictions):
    if list(predictions.node_ids) != taxonomy.node_ids:
        raise ChecksumMismatchError(
            f"预测矩阵的列（{len(predictions.node_ids)} 个）与分类树规范索引（{len(taxonomy)} 个节点）不一致"
        )


def per_label_report(
    taxonomy: Taxonomy,
    predictions,
    records: Sequence,
    n_boot: int = 2000,
    seed: int = 0,
    level: float = 0.95,
    progress: bool = True,
) -> EvaluationReport:
    """
    逐节点一对多评估

    节点 v 的阳性图像为参考标签含 v 或其后代的图像。第 k 个节点的 bootstrap
    种子为 seed + k，因此单个节点的结果与其他节点无关。

    Args:
        taxonomy: 分类树
        predictions: PredictionMatrix，列顺序必须与规范索引一致
        records: 带参考标签的清单记录
        n_boot: 重采样次数
        seed: 随机种子
        level: 置信水平
        progress: 是否显示进度条

    Returns:
        EvaluationReport
    """
    _check_columns(taxonomy, predictions)
    rows = _aligned_rows(predictions, records)
    positives = evaluation_matrix(taxonomy, [r.labels for r in rows])
    scores = np.asarray(predictions.values, dtype=np.float64)

    per_node: Dict[str, ROCResult] = {}
    iterator = tqdm(list(enumerate(taxonomy.node_ids)), desc="逐节点评估", disable=not progress)
    for k, node_id in iterator:
        per_node[node_id] = roc_result(scores[:, k], positives[:, k], n_boot=n_boot, seed=seed + k, level=level)

    defined = [r.auc for r in per_node.values() if r.defined]
    report = EvaluationReport(
        per_node=per_node,
        names={n: taxonomy.node(n).display_name for n in taxonomy.node_ids},
        avg_auc=float(np.mean(defined)) if defined else float("nan"),
        avg_auc_std=float(np.std(defined)) if defined else float("nan"),
        n_defined=len(defined),
    )
    skipped = len(per_node) - len(defined)
    logger.info(f"平均 AUC {report.avg_auc:.4f} ({report.avg_auc_std:.4f})，统计 {len(defined)} 个节点，{skipped} 个节点类别退化")
    return report


def subset_eval(
    taxonomy: Taxonomy,
    predictions,
    records: Sequence,
    filter_node: str,
    target_node: str,
    n_boot: int = 2000,
    seed: int = 0,
    level: float = 0.95,
) -> ROCResult:
    """
    在 filter_node 阳性的图像子集上评估 target_node

    Args:
        taxonomy: 分类树
        predictions: PredictionMatrix
        records: 清单记录
        filter_node: 用于筛选子集的节点（如 pneumonia）
        target_node: 被评估的节点（如 covid-19）
        n_boot: 重采样次数
        seed: 随机种子
        level: 置信水平

    Returns:
        ROCResult；子集类别退化时 defined=False
    """
    _check_columns(taxonomy, predictions)
    f_idx, t_idx = taxonomy.index_of(filter_node), taxonomy.index_of(target_node)
    rows = _aligned_rows(predictions, records)
    positives = evaluation_matrix(taxonomy, [r.labels for r in rows])
    mask = positives[:, f_idx]
    scores = np.asarray(predictions.values, dtype=np.float64)[mask, t_idx]
    result = roc_result(scores, positives[mask, t_idx], n_boot=n_boot, seed=seed, level=level)
    if result.defined:
        logger.info(f"子集评估 {filter_node} -> {target_node}: {int(mask.sum())} 张图像, AUC {result.auc:.4f}")
    else:
        logger.warning(f"子集评估 {filter_node} -> {target_node}: 子集 {int(mask.sum())} 张图像类别退化，AUC 未定义")
    return result
