"""
层次化胸片多标签系统 - 图像预处理模块

流程：MONOCHROME1 反相 -> 居中正方形裁剪 -> 双线性缩放到 299×299 -> 单图标准化。
全部为纯函数，相同输入得到逐位相同的输出。
"""

import hashlib
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from hierarchical_cxr.core.errors import ImagingError

logger = logging.getLogger(__name__)

MONOCHROME1 = "MONOCHROME1"
MONOCHROME2 = "MONOCHROME2"
PHOTOMETRICS = (MONOCHROME1, MONOCHROME2)
MODEL_SIZE = 299
EPSILON = 1e-8


@dataclass(frozen=True)
class RawImage:
    """原始灰度胸片"""

    pixels: np.ndarray
    photometric: str = MONOCHROME2
    bit_depth: int = 8

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        if pixels.ndim != 2 or pixels.shape[0] < 1 or pixels.shape[1] < 1:
            raise ImagingError(f"图像必须是非空二维数组，当前形状 {pixels.shape}")
        if self.photometric not in PHOTOMETRICS:
            raise ImagingError(f"未知的光度解释: {self.photometric}")
        if self.bit_depth < 1:
            raise ImagingError(f"位深不合法: {self.bit_depth}")
        if pixels.min() < 0 or pixels.max() > self.max_value:
            raise ImagingError(f"像素值超出 {self.bit_depth} 位范围 [0, {self.max_value}]")
        object.__setattr__(self, "pixels", pixels)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def max_value(self) -> int:
        return 2 ** self.bit_depth - 1


def invert_if_needed(img: RawImage) -> RawImage:
    """MONOCHROME1 图像做 p -> max - p 反相并改为 MONOCHROME2，其他原样返回"""
    if img.photometric != MONOCHROME1:
        return img
    return replace(img, pixels=img.max_value - img.pixels, photometric=MONOCHROME2)


def crop_window(height: int, width: int) -> Tuple[int, int, int]:
    """居中正方形裁剪窗口 (top, left, side)，长边方向的偏移为 floor((dim - side) / 2)"""
    side = min(width, height)
    return (height - side) // 2, (width - side) // 2, side


def center_square_crop(img: RawImage) -> RawImage:
    """
    以最短边为边长居中裁剪正方形区域

    Args:
        img: 原始图像

    Returns:
        s×s 图像，窗口见 crop_window
    """
    top, left, side = crop_window(img.height, img.width)
    return replace(img, pixels=img.pixels[top:top + side, left:left + side])


def resize_to_model(img: Union[RawImage, np.ndarray], size: int = MODEL_SIZE) -> np.ndarray:
    """
    双线性插值缩放到 size×size

    缩小时启用抗混叠；插值权重非负，因此输出不超出输入的最小/最大值。

    Args:
        img: 正方形图像（center_square_crop 的输出）
        size: 目标边长

    Returns:
        float64 二维数组
    """
    pixels = img.pixels if isinstance(img, RawImage) else np.asarray(img)
    if pixels.ndim != 2 or pixels.shape[0] != pixels.shape[1]:
        raise ImagingError(f"缩放前图像必须为正方形，当前形状 {pixels.shape}")
    pixels = pixels.astype(np.float64)
    if pixels.shape[0] == size:
        return pixels.copy()
    tensor = torch.from_numpy(pixels)[None, None]
    resized = F.interpolate(
        tensor,
        size=(size, size),
        mode="bilinear",
        align_corners=False,
        antialias=pixels.shape[0] > size,
    )
    out = resized[0, 0].numpy()
    # 抗混叠核在边界处的舍入误差可能略微越界
    return np.clip(out, pixels.min(), pixels.max())


def normalize(arr: np.ndarray, mode: str = "std", eps: float = EPSILON) -> np.ndarray:
    """
    单图标准化：减均值后除以标准差（mode="variance" 时除以方差）

    Args:
        arr: 二维数组
        mode: "std" 或 "variance"
        eps: 常数图像保护阈值

    Returns:
        标准化后的 float64 数组；常数图像返回全零
    """
    arr = np.asarray(arr, dtype=np.float64)
    std = float(arr.std())
    if std <= eps:
        return np.zeros_like(arr)
    if mode == "std":
        scale = std
    elif mode == "variance":
        scale = max(std * std, eps)
    else:
        raise ImagingError(f"未知的标准化方式: {mode}")
    return (arr - arr.mean()) / scale


def preprocess(img: RawImage, size: int = MODEL_SIZE, mode: str = "std", eps: float = EPSILON) -> np.ndarray:
    """反相 -> 裁剪 -> 缩放 -> 标准化"""
    return normalize(resize_to_model(center_square_crop(invert_if_needed(img)), size), mode=mode, eps=eps)


def load_raw_image(path: Union[str, Path], photometric: str = MONOCHROME2) -> RawImage:
    """
    读取灰度栅格图像

    Args:
        path: PNG/TIFF 等无损格式文件
        photometric: 清单中记录的光度解释

    Returns:
        RawImage，8 位 "L" 图像位深为 8，16 位图像位深为 16
    """
    path = Path(path)
    if not path.exists():
        raise ImagingError(f"图像文件不存在: {path}")
    with Image.open(path) as im:
        if im.mode in ("L", "P", "RGB", "RGBA"):
            pixels = np.asarray(im.convert("L"), dtype=np.uint16)
            bit_depth = 8
        elif im.mode in ("I;16", "I;16B", "I;16L", "I"):
            pixels = np.asarray(im, dtype=np.int64)
            bit_depth = 16
        else:
            raise ImagingError(f"不支持的图像模式 {im.mode}: {path}")
    return RawImage(pixels=pixels, photometric=photometric, bit_depth=bit_depth)


class PreprocessCache:
    """
    按 image_id 缓存预处理结果的 .npy 目录

    文件名为清洗后的 id 加原始 id 的 sha1 前缀，不同 id 不会共用文件；
    预处理参数不同的结果放在以参数命名的子目录中。
    """

    def __init__(
        self,
        cache_dir: Union[str, Path],
        settings: Optional[str] = None,
        shape: Optional[Tuple[int, ...]] = None,
    ):
        self.cache_dir = Path(cache_dir) / settings if settings else Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.shape = tuple(shape) if shape is not None else None
        self.hits = 0
        self.misses = 0

    @classmethod
    def for_settings(cls, cache_dir: Union[str, Path], size: int, mode: str, eps: float) -> "PreprocessCache":
        return cls(cache_dir, settings=f"{size}-{mode}-eps{eps:g}", shape=(size, size))

    def path_for(self, image_id: str) -> Path:
        safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in image_id)
        digest = hashlib.sha1(image_id.encode("utf-8")).hexdigest()[:10]
        return self.cache_dir / f"{safe}-{digest}.npy"

    def get_or_compute(self, image_id: str, compute: Callable[[], np.ndarray]) -> np.ndarray:
        """
        读取缓存，不存在或形状不符时计算并写入

        Args:
            image_id: 图像标识
            compute: 计算预处理结果的函数

        Returns:
            预处理后的数组
        """
        path = self.path_for(image_id)
        if path.exists():
            arr = np.load(path)
            if self.shape is None or arr.shape == self.shape:
                self.hits += 1
                return arr
            logger.warning(f"缓存形状不符，重新计算: {path.name} {arr.shape} != {self.shape}")
        self.misses += 1
        arr = compute()
        np.save(path, arr)
        return arr
