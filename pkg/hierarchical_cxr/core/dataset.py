"""
层次化胸片多标签系统 - 数据集模块

包括清单（manifest）数据模型、按患者划分数据集，以及用于桌面规模验证的
合成数据集生成器：每个叶节点绑定一种可见的图形（glyph），随机放置在带
噪声的背景上。
"""

import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from PIL import Image, ImageDraw
from tqdm import tqdm

from hierarchical_cxr.core.config import SplitSpec
from hierarchical_cxr.core.errors import LabelError, ManifestError
from hierarchical_cxr.core.imaging import MONOCHROME1, MONOCHROME2, PHOTOMETRICS, RawImage
from hierarchical_cxr.core.labels import check_labels
from hierarchical_cxr.core.taxonomy import Taxonomy

logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = ["image_id", "patient_id", "path", "projection", "photometric", "labels", "split"]
BOX_COLUMNS = ["image_id", "node_id", "x", "y", "w", "h"]
PROJECTIONS = ("PA", "AP", "AP-supine", "decubitus", "lordotic", "standing")
SPLITS = ("train", "val", "test")
LABEL_SEPARATOR = "|"


@dataclass(frozen=True)
class ImageRecord:
    """清单中的一行"""

    image_id: str
    patient_id: str
    path: Path
    projection: str = "PA"
    photometric: str = MONOCHROME2
    labels: FrozenSet[str] = frozenset()
    split: Optional[str] = None


# ----------------------------------------------------------------------
# 清单读写
# ----------------------------------------------------------------------

def load_manifest(
    source: Union[str, Path],
    taxonomy: Taxonomy,
    exclude_filter: bool = False,
) -> List[ImageRecord]:
    """
    读取并校验清单 CSV

    Args:
        source: 清单文件路径
        taxonomy: 用于解析标签的分类树
        exclude_filter: 为 True 时丢弃带有特殊标签 exclude 的图像

    Returns:
        ImageRecord 列表，相对路径按清单所在目录解析
    """
    source = Path(source)
    if not source.exists():
        raise ManifestError(f"清单文件不存在: {source}")
    frame = pd.read_csv(source, dtype=str, keep_default_na=False)

    missing = [c for c in MANIFEST_COLUMNS if c not in frame.columns and c != "split"]
    if missing:
        raise ManifestError(f"清单缺少必需列: {', '.join(missing)}")
    if "split" not in frame.columns:
        frame["split"] = ""

    base_dir = source.parent
    records: List[ImageRecord] = []
    seen: Dict[str, int] = {}
    for row, item in enumerate(frame.to_dict("records"), start=1):
        image_id = item["image_id"].strip()
        if not image_id:
            raise ManifestError(f"第 {row} 行 image_id 为空")
        if image_id in seen:
            raise ManifestError(f"重复的 image_id {image_id!r}：第 {seen[image_id]} 行与第 {row} 行")
        seen[image_id] = row

        projection = item["projection"].strip() or "PA"
        if projection not in PROJECTIONS:
            raise ManifestError(f"第 {row} 行投照方式未知: {projection!r}")
        photometric = item["photometric"].strip().upper() or MONOCHROME2
        if photometric not in PHOTOMETRICS:
            raise ManifestError(f"第 {row} 行光度解释未知: {photometric!r}")
        split = item["split"].strip() or None
        if split is not None and split not in SPLITS:
            raise ManifestError(f"第 {row} 行 split 未知: {split!r}")

        raw_labels = [x.strip() for x in item["labels"].split(LABEL_SEPARATOR) if x.strip()]
        try:
            labels = check_labels(taxonomy, raw_labels, row=row)
        except LabelError as e:
            raise ManifestError(f"清单第 {row} 行 ({image_id}) 含未知标签 {e.node_id!r}") from e

        path = Path(item["path"])
        if not path.is_absolute():
            path = base_dir / path
        records.append(ImageRecord(
            image_id=image_id,
            patient_id=item["patient_id"].strip(),
            path=path,
            projection=projection,
            photometric=photometric,
            labels=labels,
            split=split,
        ))

    if exclude_filter:
        kept = [r for r in records if "exclude" not in r.labels]
        logger.info(f"exclude 过滤: 去除 {len(records) - len(kept)} 张图像")
        records = kept
    logger.info(f"已加载清单 {source}: {len(records)} 条记录")
    return records


def save_manifest(records: Sequence[ImageRecord], output_path: Union[str, Path]) -> Path:
    """写出清单 CSV；路径尽量写成相对于清单目录的形式"""
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    base_dir = output_path.parent.resolve()
    rows = []
    for r in records:
        try:
            path = os.path.relpath(Path(r.path).resolve(), base_dir)
        except ValueError:
            path = str(r.path)
        rows.append({
            "image_id": r.image_id,
            "patient_id": r.patient_id,
            "path": Path(path).as_posix(),
            "projection": r.projection,
            "photometric": r.photometric,
            "labels": LABEL_SEPARATOR.join(sorted(r.labels)),
            "split": r.split or "",
        })
    pd.DataFrame(rows, columns=MANIFEST_COLUMNS).to_csv(output_path, index=False)
    return output_path


def records_by_split(records: Sequence[ImageRecord], split: Optional[str]) -> List[ImageRecord]:
    if split is None:
        return list(records)
    return [r for r in records if r.split == split]


# ----------------------------------------------------------------------
# 按患者划分
# ----------------------------------------------------------------------

def patient_split(
    records: Sequence[ImageRecord],
    spec: SplitSpec,
    strict: bool = True,
) -> List[ImageRecord]:
    """
    按患者划分训练/验证/测试集

    患者 id 按首次出现顺序排列后用种子打乱；先给每个非零比例的划分各分配
    一位患者，再依次把患者放入当前缺口（目标图像数 - 已分配数）最大的划分。

    Args:
        records: 清单记录
        spec: 划分比例与随机种子
        strict: 患者数少于非零划分数时是否报错；为 False 时照常贪心分配

    Returns:
        设置了 split 的新记录列表（输入不被修改），顺序与输入一致
    """
    if not records:
        return []
    groups: Dict[str, int] = {}
    for r in records:
        groups[r.patient_id] = groups.get(r.patient_id, 0) + 1
    patients = list(groups)

    active = [k for k, f in enumerate(spec.fractions) if f > 0]
    if len(patients) < len(active):
        if strict:
            raise ManifestError(f"患者数 {len(patients)} 少于非零划分数 {len(active)}，无法按患者划分")
        logger.warning(f"患者数 {len(patients)} 少于非零划分数 {len(active)}，部分划分将为空")

    rng = np.random.default_rng(spec.seed)
    order = [patients[i] for i in rng.permutation(len(patients))]

    total = len(records)
    targets = np.array([f * total for f in spec.fractions], dtype=float)
    assigned = np.zeros(3, dtype=float)
    assignment: Dict[str, str] = {}

    queue = list(order)
    for k in active:
        if not queue:
            break
        patient = queue.pop(0)
        assignment[patient] = SPLITS[k]
        assigned[k] += groups[patient]

    for patient in queue:
        deficits = np.where(np.array(spec.fractions) > 0, targets - assigned, -np.inf)
        k = int(np.argmax(deficits))
        assignment[patient] = SPLITS[k]
        assigned[k] += groups[patient]

    result = [replace(r, split=assignment[r.patient_id]) for r in records]
    counts = {s: sum(1 for r in result if r.split == s) for s in SPLITS}
    logger.info(f"按患者划分完成: {counts}")
    return result


# ----------------------------------------------------------------------
# 合成数据集
# ----------------------------------------------------------------------

GLYPH_KINDS = ("blob", "grid", "wedge", "bar", "ring", "cross", "triangle", "checker", "diamond", "stripes")
GRID_CELLS = 3
MIN_CELL = 4


@dataclass
class SyntheticDataset:
    """合成数据集：清单记录、原始图像与 glyph 边框"""

    records: List[ImageRecord]
    images: Dict[str, RawImage]
    boxes: pd.DataFrame
    glyphs: Dict[str, Tuple[str, bool]] = field(default_factory=dict)


def glyph_binding(leaves: Sequence[str], seed: int) -> Dict[str, Tuple[str, bool]]:
    """
    叶节点到 glyph 的确定性绑定

    glyph 目录 (形状 × 明/暗) 按种子打乱后，第 k 个叶节点取第 k 个条目。

    Args:
        leaves: 叶节点 id（规范顺序）
        seed: 随机种子

    Returns:
        叶节点 -> (形状, 是否为暗色)
    """
    catalog = [(kind, dark) for dark in (False, True) for kind in GLYPH_KINDS]
    if len(leaves) > len(catalog):
        raise ManifestError(f"叶节点数 {len(leaves)} 超过可区分的 glyph 数 {len(catalog)}")
    # 前 len(GLYPH_KINDS) 个位置只用亮色，避免少量叶节点时出现同形状不同明暗
    bright = np.random.default_rng(seed).permutation(len(GLYPH_KINDS))
    dark = np.random.default_rng(seed + 1).permutation(len(GLYPH_KINDS)) + len(GLYPH_KINDS)
    order = list(bright) + list(dark)
    return {leaf: catalog[order[k]] for k, leaf in enumerate(leaves)}


def _draw_glyph(draw: ImageDraw.ImageDraw, kind: str, box: Tuple[int, int, int, int], value: int):
    x, y, w, h = box
    x2, y2 = x + w - 1, y + h - 1
    cx, cy = x + w // 2, y + h // 2
    stroke = max(2, min(w, h) // 8)
    if kind == "blob":
        draw.ellipse([x, y, x2, y2], fill=value)
    elif kind == "grid":
        step = max(4, min(w, h) // 5)
        for gx in range(x, x2 + 1, step):
            draw.line([gx, y, gx, y2], fill=value, width=2)
        for gy in range(y, y2 + 1, step):
            draw.line([x, gy, x2, gy], fill=value, width=2)
    elif kind == "wedge":
        draw.pieslice([x, y, x2, y2], start=200, end=340, fill=value)
        draw.pieslice([x, y, x2, y2], start=20, end=160, fill=value)
    elif kind == "bar":
        draw.rectangle([x, cy - stroke, x2, cy + stroke], fill=value)
        draw.rectangle([x, y, x + stroke, y2], fill=value)
    elif kind == "ring":
        draw.ellipse([x, y, x2, y2], outline=value, width=stroke)
    elif kind == "cross":
        draw.line([x, y, x2, y2], fill=value, width=stroke)
        draw.line([x, y2, x2, y], fill=value, width=stroke)
    elif kind == "triangle":
        draw.polygon([(cx, y), (x2, y2), (x, y2)], fill=value)
    elif kind == "checker":
        step = max(4, min(w, h) // 4)
        for i, gy in enumerate(range(y, y2 + 1, step)):
            for j, gx in enumerate(range(x, x2 + 1, step)):
                if (i + j) % 2 == 0:
                    draw.rectangle([gx, gy, min(gx + step - 1, x2), min(gy + step - 1, y2)], fill=value)
    elif kind == "diamond":
        draw.polygon([(cx, y), (x2, cy), (cx, y2), (x, cy)], fill=value)
    elif kind == "stripes":
        step = max(4, min(w, h) // 6)
        for k, gy in enumerate(range(y, y2 + 1, step)):
            if k % 2 == 0:
                draw.rectangle([x, gy, x2, min(gy + step // 2, y2)], fill=value)
    else:
        raise ValueError(f"未知的 glyph: {kind}")


def _default_leaf_probability(n_leaves: int) -> float:
    return float(np.clip(2.0 / n_leaves, 0.1, 0.5))


def _render_image(
    index: int,
    seed: int,
    leaves: Sequence[str],
    binding: Dict[str, Tuple[str, bool]],
    image_size: int,
    leaf_probability: float,
    normal: bool,
) -> Tuple[np.ndarray, List[Tuple[str, Tuple[int, int, int, int]]]]:
    """生成一张图像；每张图像使用由 (seed, index) 派生的独立随机数发生器"""
    rng = np.random.default_rng([seed, index])

    # 平滑渐变背景
    yy, xx = np.mgrid[0:image_size, 0:image_size] / max(image_size - 1, 1)
    base = 70 + 25 * rng.random() * xx + 25 * rng.random() * (1 - yy)
    canvas = Image.fromarray(np.clip(base, 0, 255).astype(np.uint8))
    draw = ImageDraw.Draw(canvas)

    chosen: List[str] = []
    if not normal:
        chosen = [leaf for leaf in leaves if rng.random() < leaf_probability]
        if not chosen:
            chosen = [leaves[int(rng.integers(len(leaves)))]]
        if len(chosen) > GRID_CELLS * GRID_CELLS:
            picked = rng.choice(len(chosen), size=GRID_CELLS * GRID_CELLS, replace=False)
            chosen = [chosen[i] for i in sorted(picked)]

    cell = image_size // GRID_CELLS
    cells = rng.permutation(GRID_CELLS * GRID_CELLS)[:len(chosen)]
    placed = []
    for leaf, cell_index in zip(chosen, cells):
        kind, dark = binding[leaf]
        row, col = divmod(int(cell_index), GRID_CELLS)
        side = int(rng.integers(int(cell * 0.55), int(cell * 0.9) + 1))
        w = h = min(max(side, 8), cell)
        x = col * cell + int(rng.integers(0, cell - w + 1))
        y = row * cell + int(rng.integers(0, cell - h + 1))
        value = 20 if dark else 220
        _draw_glyph(draw, kind, (x, y, w, h), value)
        placed.append((leaf, (x, y, w, h)))

    pixels = np.asarray(canvas, dtype=np.float64)
    pixels += rng.normal(0.0, 8.0, size=pixels.shape)
    return np.clip(np.rint(pixels), 0, 255).astype(np.uint8), placed


def generate_synthetic(
    taxonomy: Taxonomy,
    n_images: int,
    image_size: int = 299,
    seed: int = 0,
    leaf_probability: Optional[float] = None,
    normal_every: int = 10,
    images_per_patient: int = 2,
    monochrome1_fraction: float = 0.0,
) -> SyntheticDataset:
    """
    生成合成胸片数据集

    每个叶节点绑定一种 glyph；索引满足 index % normal_every == normal_every - 1
    的图像为正常图像（若分类树声明了特殊标签 normal 则打上该标签），其余
    图像以 leaf_probability 独立地包含每个叶节点，一个都没抽中时均匀选一个。
    glyph 放在 3×3 网格的不同格子里，边框互不重叠且完全位于图像内。

    Args:
        taxonomy: 分类树
        n_images: 图像数量
        image_size: 图像边长
        seed: 随机种子
        leaf_probability: 每个叶节点出现的概率，默认 clip(2 / 叶节点数, 0.1, 0.5)
        normal_every: 正常图像的间隔，0 表示不生成正常图像
        images_per_patient: 每位合成患者的图像数
        monochrome1_fraction: 以 MONOCHROME1（反相）存储的图像比例

    Returns:
        SyntheticDataset
    """
    if n_images < 1:
        raise ValueError("n_images 必须 ≥ 1")
    leaves = taxonomy.leaves()
    if not leaves:
        raise ManifestError("分类树没有叶节点，无法生成合成数据")
    if image_size // GRID_CELLS < MIN_CELL:
        raise ManifestError(f"image_size 过小: {image_size}，至少需要 {GRID_CELLS * MIN_CELL}")
    probability = leaf_probability if leaf_probability is not None else _default_leaf_probability(len(leaves))
    binding = glyph_binding(leaves, seed)
    normal_label = frozenset({"normal"}) if "normal" in taxonomy and taxonomy.node("normal").special else frozenset()
    logger.info(f"生成合成数据: {n_images} 张, {len(leaves)} 个叶节点, 叶节点概率 {probability:.3f}")

    records: List[ImageRecord] = []
    images: Dict[str, RawImage] = {}
    box_rows = []
    for index in tqdm(range(n_images), desc="合成图像", disable=not logger.isEnabledFor(logging.INFO)):
        normal = normal_every > 0 and index % normal_every == normal_every - 1
        pixels, placed = _render_image(index, seed, leaves, binding, image_size, probability, normal)

        image_id = f"synth-{index:06d}"
        flip = np.random.default_rng([seed, index, 1]).random() < monochrome1_fraction
        photometric = MONOCHROME1 if flip else MONOCHROME2
        if flip:
            pixels = (255 - pixels).astype(np.uint8)
        images[image_id] = RawImage(pixels=pixels, photometric=photometric, bit_depth=8)

        labels = frozenset(leaf for leaf, _ in placed) or normal_label
        records.append(ImageRecord(
            image_id=image_id,
            patient_id=f"synth-p{index // images_per_patient:05d}",
            path=Path("images") / f"{image_id}.png",
            projection="PA",
            photometric=photometric,
            labels=labels,
        ))
        for leaf, (x, y, w, h) in placed:
            box_rows.append({"image_id": image_id, "node_id": leaf, "x": x, "y": y, "w": w, "h": h})

    boxes = pd.DataFrame(box_rows, columns=BOX_COLUMNS)
    return SyntheticDataset(records=records, images=images, boxes=boxes, glyphs=binding)


def write_synthetic(dataset: SyntheticDataset, output_dir: Union[str, Path]) -> Dict[str, Path]:
    """
    把合成数据集写到磁盘

    Args:
        dataset: generate_synthetic 的结果
        output_dir: 输出目录

    Returns:
        {"manifest": ..., "boxes": ..., "images": ...}
    """
    output_dir = Path(output_dir)
    image_dir = output_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)

    records = []
    for record in dataset.records:
        path = image_dir / f"{record.image_id}.png"
        Image.fromarray(dataset.images[record.image_id].pixels.astype(np.uint8)).save(path)
        records.append(replace(record, path=path))

    manifest_path = save_manifest(records, output_dir / "manifest.csv")
    boxes_path = output_dir / "boxes.csv"
    dataset.boxes.to_csv(boxes_path, index=False)
    logger.info(f"合成数据已写入 {output_dir}")
    return {"manifest": manifest_path, "boxes": boxes_path, "images": image_dir}


def load_boxes(path: Union[str, Path]) -> pd.DataFrame:
    """读取 boxes.csv"""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"边框文件不存在: {path}")
    boxes = pd.read_csv(path, dtype={"image_id": str, "node_id": str})
    missing = [c for c in BOX_COLUMNS if c not in boxes.columns]
    if missing:
        raise ManifestError(f"边框文件缺少列: {', '.join(missing)}")
    return boxes
