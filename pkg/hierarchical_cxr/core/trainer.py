"""
层次化胸片多标签系统 - 训练与预测

Trainer 负责 Adam 优化、逐轮学习率、验证集评估与最佳检查点选择；
predict 输出按清单顺序排列的 PredictionMatrix。
"""

import copy
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from hierarchical_cxr.core.config import ImagingConfig, TrainConfig
from hierarchical_cxr.core.dataset import ImageRecord
from hierarchical_cxr.core.errors import (
    ChecksumMismatchError,
    ImagingError,
    PredictionError,
    ShapeMismatchError,
    TrainingError,
)
from hierarchical_cxr.core.imaging import PreprocessCache, RawImage, load_raw_image, preprocess
from hierarchical_cxr.core.labels import target_matrix
from hierarchical_cxr.core.metrics import mean_auc
from hierarchical_cxr.core.model import HierarchicalClassifier, bce_loss, lr_at
from hierarchical_cxr.core.taxonomy import Taxonomy

logger = logging.getLogger(__name__)

WORKERS_ENV = "HCXR_WORKERS"
HISTORY_COLUMNS = ["epoch", "lr", "train_loss", "val_loss", "val_auc", "val_exact_match", "val_metric"]
LOWER_IS_BETTER = ("loss", "train_loss")
# 预测分数限制在 [SCORE_EPS, 1 - SCORE_EPS]，写成 6 位小数后仍严格位于 (0, 1)
SCORE_EPS = 1e-6


# ----------------------------------------------------------------------
# 图像来源
# ----------------------------------------------------------------------

class ImageSource:
    """把清单记录变成预处理后的 size×size 数组"""

    def __init__(self, imaging: Optional[ImagingConfig] = None):
        self.imaging = imaging or ImagingConfig()
        self.cache = None
        if self.imaging.cache_dir:
            self.cache = PreprocessCache.for_settings(
                self.imaging.cache_dir, self.imaging.size, self.imaging.normalization, self.imaging.epsilon
            )

    def raw(self, record: ImageRecord) -> RawImage:
        raise NotImplementedError

    def load(self, record: ImageRecord) -> np.ndarray:
        def compute() -> np.ndarray:
            return preprocess(
                self.raw(record),
                size=self.imaging.size,
                mode=self.imaging.normalization,
                eps=self.imaging.epsilon,
            )

        try:
            if self.cache is not None:
                return self.cache.get_or_compute(record.image_id, compute)
            return compute()
        except ImagingError as e:
            raise ImagingError(f"预处理失败 {record.image_id}: {e.message}", image_id=record.image_id) from e


class FileImageSource(ImageSource):
    """从清单中的文件路径读取"""

    def raw(self, record: ImageRecord) -> RawImage:
        return load_raw_image(record.path, photometric=record.photometric)


class MemoryImageSource(ImageSource):
    """从内存中的 RawImage 字典读取（合成数据）"""

    def __init__(self, images: Dict[str, RawImage], imaging: Optional[ImagingConfig] = None):
        super().__init__(imaging)
        self.images = images

    def raw(self, record: ImageRecord) -> RawImage:
        if record.image_id not in self.images:
            raise ImagingError(f"内存中没有图像 {record.image_id}")
        return self.images[record.image_id]


class RecordDataset(Dataset):
    """torch Dataset：返回 (1×H×W 图像, 目标向量, 行号)"""

    def __init__(self, records: Sequence[ImageRecord], source: ImageSource, targets: Optional[np.ndarray] = None):
        self.records = list(records)
        self.source = source
        self.targets = targets

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, index: int):
        image = torch.from_numpy(self.source.load(self.records[index]).astype(np.float32))[None]
        if self.targets is None:
            target = torch.zeros(0)
        else:
            target = torch.from_numpy(self.targets[index].astype(np.float32))
        return image, target, index


def worker_count() -> int:
    """DataLoader 工作进程数，取自环境变量 HCXR_WORKERS（默认 0）"""
    value = os.environ.get(WORKERS_ENV, "0")
    try:
        return max(0, int(value))
    except ValueError:
        logger.warning(f"{WORKERS_ENV}={value!r} 不是整数，使用 0")
        return 0


def _loader(dataset: Dataset, batch_size: int, shuffle: bool, seed: int) -> DataLoader:
    generator = torch.Generator()
    generator.manual_seed(seed)
    return DataLoader(
        dataset,
        batch_size=batch_size,
        shuffle=shuffle,
        num_workers=worker_count(),
        generator=generator,
    )


# ----------------------------------------------------------------------
# 预测矩阵
# ----------------------------------------------------------------------

@dataclass
class PredictionMatrix:
    """M×N 预测分数，行按清单顺序，列按规范索引"""

    image_ids: List[str]
    node_ids: List[str]
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(len(self.image_ids), len(self.node_ids))
        if self.values.size and (self.values.min() < 0.0 or self.values.max() > 1.0):
            raise ShapeMismatchError("预测值必须位于 [0, 1]")

    def __len__(self) -> int:
        return len(self.image_ids)

    def column(self, node_id: str) -> np.ndarray:
        return self.values[:, self.node_ids.index(node_id)]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.values, columns=self.node_ids)
        frame.insert(0, "image_id", self.image_ids)
        return frame

    def to_csv(self, output_path: Union[str, Path]) -> Path:
        output_path = Path(output_path)
        output_path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(output_path, index=False, float_format="%.6f", lineterminator="\n")
        return output_path

    @classmethod
    def from_csv(cls, path: Union[str, Path], taxonomy: Optional[Taxonomy] = None) -> "PredictionMatrix":
        """
        读取预测 CSV

        Args:
            path: CSV 路径
            taxonomy: 给出时校验列顺序与规范索引一致

        Returns:
            PredictionMatrix
        """
        frame = pd.read_csv(path, dtype={"image_id": str})
        if "image_id" not in frame.columns:
            raise ShapeMismatchError(f"预测文件缺少 image_id 列: {path}")
        node_ids = [c for c in frame.columns if c != "image_id"]
        if taxonomy is not None and node_ids != taxonomy.node_ids:
            raise ChecksumMismatchError(f"预测文件 {path} 的列与当前分类树的规范索引不一致")
        return cls(frame["image_id"].tolist(), node_ids, frame[node_ids].to_numpy(dtype=np.float64))


# ----------------------------------------------------------------------
# 训练
# ----------------------------------------------------------------------

def exact_match(scores: np.ndarray, targets: np.ndarray, threshold: float = 0.5) -> float:
    """阈值化后整行完全一致的图像比例"""
    if len(scores) == 0:
        return float("nan")
    return float(np.mean(np.all((scores >= threshold) == targets.astype(bool), axis=1)))


class Trainer:
    """逐轮训练并按验证指标选择最佳检查点"""

    def __init__(
        self,
        model: HierarchicalClassifier,
        taxonomy: Taxonomy,
        tc: TrainConfig,
        source: ImageSource,
        progress: bool = True,
    ):
        self.model = model
        self.taxonomy = taxonomy
        self.tc = tc
        self.source = source
        self.progress = progress
        self.logger = logging.getLogger("Trainer")

        if model.num_outputs != len(taxonomy):
            raise ShapeMismatchError(f"模型输出长度 {model.num_outputs} 与分类树节点数 {len(taxonomy)} 不一致")

    def _setup_determinism(self):
        torch.manual_seed(self.tc.seed)
        if self.tc.num_threads:
            torch.set_num_threads(self.tc.num_threads)
        if self.tc.deterministic:
            torch.use_deterministic_algorithms(True, warn_only=True)

    @staticmethod
    def _is_better(metric: str, value: float, best: Optional[float]) -> bool:
        """auc / exact_match 越大越好，loss / train_loss 越小越好；NaN 只在第一轮被选中"""
        if best is None:
            return True
        if np.isnan(value):
            return False
        if np.isnan(best):
            return True
        if metric in LOWER_IS_BETTER:
            return value < best
        return value > best

    def _run_epoch(self, loader: DataLoader, records: Sequence[ImageRecord], optimizer, epoch: int) -> float:
        self.model.train()
        total, count = 0.0, 0
        batches = tqdm(loader, desc=f"epoch {epoch + 1}/{self.tc.epochs}", leave=False, disable=not self.progress)
        for batch_index, (images, targets, rows) in enumerate(batches):
            optimizer.zero_grad()
            loss = bce_loss(self.model(images), targets)
            if not torch.isfinite(loss):
                ids = [records[int(i)].image_id for i in rows]
                raise TrainingError(
                    f"第 {epoch + 1} 轮第 {batch_index} 个批次损失为 {loss.item()}，图像: {', '.join(ids)}"
                )
            loss.backward()
            optimizer.step()
            total += loss.item() * len(rows)
            count += len(rows)
        return total / count

    def _validate(self, records: Sequence[ImageRecord], targets: np.ndarray) -> Tuple[float, float, float]:
        if not records:
            return float("nan"), float("nan"), float("nan")
        scores = predict(self.model, records, self.source, self.taxonomy.node_ids, self.tc.batch_size, progress=False).values
        loss = float(bce_loss(scores, targets))
        value, _ = mean_auc(scores, targets)
        return loss, value, exact_match(scores, targets)

    def fit(
        self,
        train_records: Sequence[ImageRecord],
        val_records: Sequence[ImageRecord],
    ) -> Tuple[HierarchicalClassifier, pd.DataFrame]:
        """
        训练模型

        Args:
            train_records: 训练集记录
            val_records: 验证集记录（与训练集按患者不相交）

        Returns:
            (载入最佳权重的模型, 逐轮历史 DataFrame)；最佳轮次见 history.attrs["best_epoch"]
        """
        if not train_records:
            raise TrainingError("训练集为空")
        overlap = {r.patient_id for r in train_records} & {r.patient_id for r in val_records}
        if overlap:
            self.logger.warning(f"训练集与验证集共享 {len(overlap)} 位患者")

        self._setup_determinism()
        train_targets = target_matrix(self.taxonomy, [r.labels for r in train_records])
        val_targets = target_matrix(self.taxonomy, [r.labels for r in val_records])
        loader = _loader(RecordDataset(train_records, self.source, train_targets), self.tc.batch_size, True, self.tc.seed)

        # 没有验证集时按训练损失选择
        metric = self.tc.selection_metric if val_records else "train_loss"
        if not val_records:
            self.logger.warning("验证集为空，按训练损失选择检查点")

        optimizer = torch.optim.Adam(self.model.parameters(), lr=lr_at(0, self.tc))
        rows = []
        best_value: Optional[float] = None
        best_state = None
        best_epoch = 0

        epochs = tqdm(range(self.tc.epochs), desc="训练", disable=not self.progress)
        for epoch in epochs:
            lr = lr_at(epoch, self.tc)
            for group in optimizer.param_groups:
                group["lr"] = lr
            train_loss = self._run_epoch(loader, train_records, optimizer, epoch)
            val_loss, val_auc, val_exact = self._validate(val_records, val_targets)

            value = {
                "auc": val_auc,
                "exact_match": val_exact,
                "loss": val_loss,
                "train_loss": train_loss,
            }[metric]
            rows.append({
                "epoch": epoch,
                "lr": lr,
                "train_loss": train_loss,
                "val_loss": val_loss,
                "val_auc": val_auc,
                "val_exact_match": val_exact,
                "val_metric": value,
            })
            if self._is_better(metric, value, best_value):
                best_value, best_epoch = value, epoch
                best_state = copy.deepcopy(self.model.state_dict())
            self.logger.info(
                f"epoch {epoch + 1}/{self.tc.epochs} lr={lr:.2e} train_loss={train_loss:.5f} "
                f"val_loss={val_loss:.5f} val_auc={val_auc:.4f}"
            )

        self.model.load_state_dict(best_state)
        self.model.eval()
        history = pd.DataFrame(rows, columns=HISTORY_COLUMNS)
        history.attrs["best_epoch"] = best_epoch
        history.attrs["selection_metric"] = metric
        self.logger.info(f"选择第 {best_epoch + 1} 轮的检查点（指标 {metric}）")
        return self.model, history


def train(
    model: HierarchicalClassifier,
    train_records: Sequence[ImageRecord],
    val_records: Sequence[ImageRecord],
    tc: TrainConfig,
    taxonomy: Taxonomy,
    source: ImageSource,
    progress: bool = True,
) -> Tuple[HierarchicalClassifier, pd.DataFrame]:
    """Trainer(...).fit 的函数形式"""
    return Trainer(model, taxonomy, tc, source, progress=progress).fit(train_records, val_records)


# ----------------------------------------------------------------------
# 预测
# ----------------------------------------------------------------------

@torch.no_grad()
def predict(
    model: HierarchicalClassifier,
    records: Sequence[ImageRecord],
    source: ImageSource,
    node_ids: Sequence[str],
    batch_size: int = 32,
    progress: bool = True,
) -> PredictionMatrix:
    """
    对记录逐批预测（eval 模式，dropout 关闭）

    Args:
        model: 分类网络
        records: 清单记录
        source: 图像来源
        node_ids: 列名（规范索引顺序）
        batch_size: 批大小，不影响结果
        progress: 是否显示进度条

    Returns:
        PredictionMatrix，行顺序与 records 一致；logit 饱和时截断到 [SCORE_EPS, 1 - SCORE_EPS]
    """
    node_ids = list(node_ids)
    if model.num_outputs != len(node_ids):
        raise ShapeMismatchError(f"模型输出长度 {model.num_outputs} 与列数 {len(node_ids)} 不一致")
    records = list(records)
    if not records:
        return PredictionMatrix([], node_ids, np.zeros((0, len(node_ids))))

    was_training = model.training
    model.eval()
    values = np.zeros((len(records), len(node_ids)), dtype=np.float64)
    loader = DataLoader(RecordDataset(records, source), batch_size=batch_size, shuffle=False, num_workers=worker_count())
    try:
        for images, _, rows in tqdm(loader, desc="预测", disable=not progress):
            logits = model.logits(images).double()
            values[rows.numpy()] = np.clip(torch.sigmoid(logits).numpy(), SCORE_EPS, 1.0 - SCORE_EPS)
    except ImagingError as e:
        raise PredictionError(e.message, image_id=e.image_id) from e
    finally:
        model.train(was_training)
    return PredictionMatrix([r.image_id for r in records], node_ids, values)
