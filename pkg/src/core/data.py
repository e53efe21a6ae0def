"""
多模态数据模块

读取/写入已配准的波段栈与标签栅格，提取反射填充的 9×9 patch，
按训练像素统计做逐波段标准化，分层划分训练/测试集，并生成合成多模态场景。
"""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    BoundsError,
    CoRegistrationError,
    ConfigError,
    CorruptFileError,
    DataError,
    FormatError,
    StratificationError,
)
from src.utils.rng import STREAM_SCENE, STREAM_SPLIT, make_rng

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-8

BAND_HEADER = {"dtype": "f32le", "layout": "band-major"}
LABEL_HEADER = {"dtype": "u16le", "layout": "row-major"}


@dataclass
class BandStack:
    """波段栈，values 形状为 (bands, height, width)"""

    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 3:
            raise FormatError(f"波段栈应为 (bands, height, width): {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise DataError("波段栈包含非有限值")

    @property
    def bands(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def as_hwc(self) -> np.ndarray:
        """转为 (height, width, bands)"""
        return np.ascontiguousarray(np.moveaxis(self.values, 0, -1))


@dataclass
class LabelRaster:
    """标签栅格，0 表示未标注，1..C 为类别"""

    labels: np.ndarray

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max())


@dataclass
class BandStats:
    """逐波段均值/标准差（仅由训练像素计算）"""

    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> Dict[str, List[float]]:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, data: Dict[str, List[float]]) -> "BandStats":
        return cls(np.asarray(data["mean"], dtype=np.float64), np.asarray(data["std"], dtype=np.float64))


@dataclass
class PatchDataset:
    """带标签的 patch 样本，patches 形状为 (N, w, w, B)，labels 为 1..C"""

    patches: np.ndarray
    labels: np.ndarray
    stats: Optional[BandStats] = None
    coords: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, index: np.ndarray) -> "PatchDataset":
        coords = self.coords[index] if self.coords is not None else None
        return replace(self, patches=self.patches[index], labels=self.labels[index], coords=coords)


# ---------------------------------------------------------------------------
# 文件读写
# ---------------------------------------------------------------------------

def _read_header(header_path: Path, expected: Dict[str, str]) -> Dict:
    with open(header_path, "r", encoding="utf-8") as f:
        header = json.load(f)
    for key, value in expected.items():
        if header.get(key) != value:
            raise FormatError(f"{header_path}: 不支持的 {key}={header.get(key)!r}，应为 {value!r}")
    for key in ("height", "width"):
        if not isinstance(header.get(key), int) or header[key] <= 0:
            raise FormatError(f"{header_path}: 缺少合法的 {key}")
    return header


def _read_payload(data_path: Path, dtype: str, count: int) -> np.ndarray:
    raw = Path(data_path).read_bytes()
    expected = count * np.dtype(dtype).itemsize
    if len(raw) != expected:
        raise CorruptFileError(f"{data_path}: 期望 {expected} 字节，实际 {len(raw)} 字节")
    return np.frombuffer(raw, dtype=dtype)


def _write_pair(stem: Path, header: Dict, payload: bytes) -> Tuple[Path, Path]:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    header_path, data_path = stem.with_suffix(".json"), stem.with_suffix(".bin")
    with open(header_path, "w", encoding="utf-8") as f:
        json.dump(header, f, sort_keys=True)
    data_path.write_bytes(payload)
    return header_path, data_path


def load_band_stack(header_path, data_path) -> BandStack:
    """读取 JSON 头 + 小端 float32 负载（与主机字节序无关）"""
    header = _read_header(Path(header_path), BAND_HEADER)
    bands = header.get("bands")
    if not isinstance(bands, int) or bands <= 0:
        raise FormatError(f"{header_path}: 缺少合法的 bands")
    count = header["height"] * header["width"] * bands
    values = _read_payload(Path(data_path), "<f4", count)
    return BandStack(values.astype(np.float32).reshape(bands, header["height"], header["width"]))


def write_band_stack(stack: BandStack, stem) -> Tuple[Path, Path]:
    header = {"height": stack.height, "width": stack.width, "bands": stack.bands, **BAND_HEADER}
    return _write_pair(Path(stem), header, stack.values.astype("<f4").tobytes())


def load_label_raster(header_path, data_path) -> LabelRaster:
    header = _read_header(Path(header_path), LABEL_HEADER)
    values = _read_payload(Path(data_path), "<u2", header["height"] * header["width"])
    return LabelRaster(values.astype(np.uint16).reshape(header["height"], header["width"]))


def write_label_raster(raster: LabelRaster, stem) -> Tuple[Path, Path]:
    header = {"height": raster.height, "width": raster.width, **LABEL_HEADER}
    return _write_pair(Path(stem), header, raster.labels.astype("<u2").tobytes())


def load_stack_stem(stem) -> BandStack:
    stem = Path(stem)
    return load_band_stack(stem.with_suffix(".json"), stem.with_suffix(".bin"))


def load_label_stem(stem) -> LabelRaster:
    stem = Path(stem)
    return load_label_raster(stem.with_suffix(".json"), stem.with_suffix(".bin"))


# ---------------------------------------------------------------------------
# 场景目录
# ---------------------------------------------------------------------------

@dataclass
class Scene:
    """场景目录内容：各模态波段栈 + 标签（可选独立测试标签；仅预测时标签可缺省）"""

    stacks: List[BandStack]
    labels: Optional[LabelRaster]
    class_names: List[str]
    test_labels: Optional[LabelRaster] = None
    modality_names: List[str] = field(default_factory=list)


def _read_scene_index(index_path: Path, require_labels: bool) -> Dict:
    try:
        with open(index_path, "r", encoding="utf-8") as f:
            index = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"{index_path}: JSON 解析失败: {e}") from None
    if not isinstance(index, dict):
        raise FormatError(f"{index_path}: 顶层必须是对象")
    modalities = index.get("modalities")
    if not isinstance(modalities, list) or not modalities:
        raise FormatError(f"{index_path}: 缺少非空的 modalities 列表")
    if require_labels and not index.get("labels"):
        raise FormatError(f"{index_path}: 缺少 labels 字段")
    return index


def load_scene(directory, require_labels: bool = True) -> Scene:
    """
    按 scene.json 描述读取场景目录

    Args:
        directory: 场景目录
        require_labels: 为 False 时允许没有标签栅格（逐像素预测只需要波段栈）

    Raises:
        FormatError: scene.json 缺失、无法解析或缺少必需字段
    """
    directory = Path(directory)
    index_path = directory / "scene.json"
    if not index_path.is_file():
        raise FormatError(f"场景目录缺少 scene.json: {directory}")
    index = _read_scene_index(index_path, require_labels)
    stacks = [load_stack_stem(directory / stem) for stem in index["modalities"]]
    labels = load_label_stem(directory / index["labels"]) if index.get("labels") else None
    test_labels = load_label_stem(directory / index["test_labels"]) if index.get("test_labels") else None
    names = index.get("class_names") or (
        [f"class_{i}" for i in range(1, labels.num_classes + 1)] if labels is not None else []
    )
    for raster in filter(None, (labels, test_labels)):
        if (raster.height, raster.width) != (stacks[0].height, stacks[0].width):
            raise CoRegistrationError(
                f"标签尺寸 {raster.height}×{raster.width} 与波段栈 {stacks[0].height}×{stacks[0].width} 不一致"
            )
        if raster.num_classes > len(names):
            raise DataError(f"标签最大值 {raster.num_classes} 超过类别数 {len(names)}")
    return Scene(stacks, labels, list(names), test_labels, list(index["modalities"]))


def write_scene(scene: Scene, directory) -> List[Path]:
    """写出场景目录，返回全部写出的文件"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = scene.modality_names or [f"modality_{i}" for i in range(len(scene.stacks))]
    written: List[Path] = []
    for name, stack in zip(names, scene.stacks):
        written.extend(write_band_stack(stack, directory / name))
    index = {"modalities": names, "class_names": scene.class_names}
    if scene.labels is not None:
        written.extend(write_label_raster(scene.labels, directory / "labels"))
        index["labels"] = "labels"
    if scene.test_labels is not None:
        written.extend(write_label_raster(scene.test_labels, directory / "test_labels"))
        index["test_labels"] = "test_labels"
    index_path = directory / "scene.json"
    with open(index_path, "w", encoding="utf-8") as f:
        json.dump(index, f, indent=2, sort_keys=True, ensure_ascii=False)
    written.append(index_path)
    return written


# ---------------------------------------------------------------------------
# 模态拼接与 patch 提取
# ---------------------------------------------------------------------------

def concat_modalities(stacks: Sequence[BandStack]) -> BandStack:
    """按参数顺序拼接波段，B_total = Σ bands"""
    if not stacks:
        raise DataError("至少需要一个波段栈")
    extents = {(s.height, s.width) for s in stacks}
    if len(extents) != 1:
        raise CoRegistrationError(f"模态尺寸不一致，无法拼接: {sorted(extents)}")
    return BandStack(np.concatenate([s.values for s in stacks], axis=0))


def reflect_index(i: int, n: int) -> int:
    """反射（不重复边缘像素）下标映射"""
    if n == 1:
        return 0
    period = 2 * (n - 1)
    i = abs(i) % period
    return period - i if i >= n else i


def pad_reflect(image: np.ndarray, margin: int) -> np.ndarray:
    """对 (h, w, B) 图像做空间反射填充"""
    rows = [reflect_index(i, image.shape[0]) for i in range(-margin, image.shape[0] + margin)]
    cols = [reflect_index(j, image.shape[1]) for j in range(-margin, image.shape[1] + margin)]
    return image[np.ix_(rows, cols)]


def extract_patch(image: np.ndarray, row: int, col: int, window: int = 9) -> np.ndarray:
    """
    以 (row, col) 为中心提取 window×window×B 窗口，越界部分反射填充

    Args:
        image: (h, w, B) 图像
        row, col: 中心像素
        window: 奇数窗口尺寸

    Returns:
        (window, window, B) 数组
    """
    h, w = image.shape[:2]
    if not (0 <= row < h and 0 <= col < w):
        raise BoundsError(f"中心 ({row}, {col}) 超出栅格 {h}×{w}")
    if window % 2 == 0:
        raise ConfigError(f"窗口尺寸必须为奇数: {window}")
    m = window // 2
    rows = [reflect_index(i, h) for i in range(row - m, row + m + 1)]
    cols = [reflect_index(j, w) for j in range(col - m, col + m + 1)]
    return image[np.ix_(rows, cols)]


def extract_patches(image: np.ndarray, rows: np.ndarray, cols: np.ndarray, window: int = 9) -> np.ndarray:
    """批量提取 patch，返回 (N, window, window, B)"""
    h, w = image.shape[:2]
    rows, cols = np.asarray(rows), np.asarray(cols)
    if rows.size and (rows.min() < 0 or rows.max() >= h or cols.min() < 0 or cols.max() >= w):
        raise BoundsError(f"存在超出栅格 {h}×{w} 的中心像素")
    m = window // 2
    padded = pad_reflect(image, m)
    offsets = np.arange(window)
    r_idx = rows[:, None] + offsets[None, :]
    c_idx = cols[:, None] + offsets[None, :]
    return padded[r_idx[:, :, None], c_idx[:, None, :]]


# ---------------------------------------------------------------------------
# 标准化
# ---------------------------------------------------------------------------

def band_stats(dataset: PatchDataset) -> BandStats:
    """由 patch 中心像素（即训练像素）计算逐波段统计"""
    if len(dataset) < 2:
        raise DataError(f"计算统计量至少需要 2 个训练像素，当前 {len(dataset)}")
    m = dataset.patches.shape[1] // 2
    centers = dataset.patches[:, m, m, :].astype(np.float64)
    return BandStats(centers.mean(axis=0), np.maximum(centers.std(axis=0), STD_FLOOR))


def normalize(dataset: PatchDataset, stats: Optional[BandStats] = None) -> PatchDataset:
    """
    逐波段 z-score 标准化

    Args:
        dataset: 待标准化的数据集
        stats: 训练集统计量；为 None 时由 dataset 自身计算（仅用于训练集）

    Returns:
        新数据集，附带所用统计量
    """
    stats = stats or band_stats(dataset)
    dtype = dataset.patches.dtype
    normed = (dataset.patches.astype(np.float64) - stats.mean) / stats.std
    return replace(dataset, patches=normed.astype(dtype), stats=stats)


def normalize_image(image: np.ndarray, stats: BandStats) -> np.ndarray:
    return ((image.astype(np.float64) - stats.mean) / stats.std).astype(image.dtype)


def build_dataset(image: np.ndarray, labels: LabelRaster, mask: np.ndarray, window: int = 9) -> PatchDataset:
    """按掩膜选出像素（行优先顺序）构造未标准化的 patch 数据集"""
    rows, cols = np.nonzero(mask & (labels.labels > 0))
    patches = extract_patches(image, rows, cols, window)
    return PatchDataset(patches, labels.labels[rows, cols].astype(np.int64), None, np.stack([rows, cols], axis=1))


# ---------------------------------------------------------------------------
# 划分
# ---------------------------------------------------------------------------

def split(labels: LabelRaster, fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    分层划分训练/测试掩膜

    每个类别独立随机抽取 round(fraction·n) 个像素（至少 1 个、至多 n−1 个）作训练，
    其余作测试；未标注像素两者都不属于。

    Raises:
        StratificationError: 某类别标注像素少于 2 个
    """
    if not 0 < fraction < 1:
        raise ConfigError(f"训练比例必须在 (0, 1) 内: {fraction}")
    flat = labels.labels.reshape(-1)
    classes = [int(c) for c in np.unique(flat) if c > 0]
    sparse = [c for c in classes if np.count_nonzero(flat == c) < 2]
    if sparse:
        raise StratificationError(sparse)
    rng = make_rng(seed, STREAM_SPLIT)
    train = np.zeros(flat.shape, dtype=bool)
    for c in classes:
        idx = np.flatnonzero(flat == c)
        n_train = min(max(int(round(fraction * idx.size)), 1), idx.size - 1)
        train[rng.permutation(idx)[:n_train]] = True
    test = (flat > 0) & ~train
    shape = labels.labels.shape
    return train.reshape(shape), test.reshape(shape)


# ---------------------------------------------------------------------------
# 合成场景
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneProfile:
    """与基准数据集模态结构、类别表一致的合成场景预设"""

    modality_names: Tuple[str, ...]
    modality_bands: Tuple[int, ...]
    class_names: Tuple[str, ...]


SCENE_PROFILES: Dict[str, SceneProfile] = {
    "augsburg": SceneProfile(
        ("hs", "sar", "dsm"), (180, 4, 1),
        ("Forest", "Residential", "Industrial", "Low Plants", "Allotment", "Commercial", "Water"),
    ),
    "berlin": SceneProfile(
        ("hs", "sar"), (244, 2),
        ("Forest", "Residential", "Industrial", "Low Plants", "Soil", "Allotment", "Commercial", "Water"),
    ),
    "houston": SceneProfile(
        ("hs", "ms"), (144, 8),
        ("Healthy Grass", "Stressed Grass", "Synthetic Grass", "Tree", "Soil", "Water", "Residential",
         "Commercial", "Road", "Highway", "Railway", "Parking Lot1", "Parking Lot2", "Tennis Court",
         "Running Track"),
    ),
}


@dataclass(frozen=True)
class SceneConfig:
    """合成场景参数"""

    num_classes: int = 6
    height: int = 96
    width: int = 96
    modality_bands: Tuple[int, ...] = (8, 4, 1)
    noise: float = 0.1
    seed: int = 0
    sites_per_class: int = 3
    min_separation: float = 1.0
    class_names: Tuple[str, ...] = ()
    modality_names: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"合成场景至少需要 2 个类别: {self.num_classes}")
        if self.height < 32 or self.width < 32:
            raise ConfigError(f"合成场景尺寸至少 32×32: {self.height}×{self.width}")
        if not self.modality_bands or min(self.modality_bands) < 1:
            raise ConfigError(f"各模态波段数必须为正: {self.modality_bands}")
        if self.noise < 0:
            raise ConfigError(f"噪声水平不能为负: {self.noise}")
        if self.class_names and len(self.class_names) != self.num_classes:
            raise ConfigError("类别名数量与类别数不一致")

    @classmethod
    def from_profile(cls, name: str, **overrides) -> "SceneConfig":
        try:
            profile = SCENE_PROFILES[name]
        except KeyError:
            raise ConfigError(f"未知场景预设: {name}，可选: {', '.join(SCENE_PROFILES)}") from None
        return cls(
            num_classes=len(profile.class_names),
            modality_bands=profile.modality_bands,
            class_names=profile.class_names,
            modality_names=profile.modality_names,
            **overrides,
        )


@dataclass
class SyntheticScene:
    """合成场景及其生成真值"""

    stacks: List[BandStack]
    labels: LabelRaster
    signatures: np.ndarray
    sites: np.ndarray
    site_classes: np.ndarray
    class_names: List[str]
    modality_names: List[str]

    def to_scene(self) -> Scene:
        return Scene(self.stacks, self.labels, self.class_names, None, self.modality_names)


def _draw_signatures(rng: np.random.Generator, classes: int, bands: int, separation: float) -> np.ndarray:
    """逐类别抽取光谱特征均值向量，保证两两距离不小于 separation"""
    for _ in range(1000):
        signatures = rng.normal(0.0, 1.0, size=(classes, bands))
        diff = signatures[:, None, :] - signatures[None, :, :]
        dist = np.sqrt((diff ** 2).sum(axis=-1))
        if dist[np.triu_indices(classes, k=1)].min() >= separation:
            return signatures
    # 维度太低时退化为沿第一波段等距排列
    signatures = rng.normal(0.0, 0.1, size=(classes, bands))
    signatures[:, 0] = separation * np.arange(classes)
    return signatures


def synth_scene(config: SceneConfig) -> SyntheticScene:
    """
    生成 Voronoi 分区的合成多模态场景

    每个类别至少拥有一个 Voronoi 种子点；同类像素共享同一光谱特征均值，
    叠加标准差为 noise 的高斯噪声；同一种子结果逐位一致。
    """
    rng = make_rng(config.seed, STREAM_SCENE)
    total_bands = sum(config.modality_bands)
    signatures = _draw_signatures(rng, config.num_classes, total_bands, config.min_separation)

    n_sites = config.num_classes * config.sites_per_class
    sites = np.stack([
        rng.uniform(0, config.height, size=n_sites),
        rng.uniform(0, config.width, size=n_sites),
    ], axis=1)
    site_classes = (np.arange(n_sites) % config.num_classes) + 1

    rr, cc = np.meshgrid(np.arange(config.height) + 0.5, np.arange(config.width) + 0.5, indexing="ij")
    d2 = (rr[..., None] - sites[:, 0]) ** 2 + (cc[..., None] - sites[:, 1]) ** 2
    labels = site_classes[d2.argmin(axis=-1)].astype(np.uint16)

    image = signatures[labels.astype(np.int64) - 1]
    if config.noise > 0:
        image = image + rng.normal(0.0, config.noise, size=image.shape)
    values = np.moveaxis(image, -1, 0).astype(np.float32)

    stacks, start = [], 0
    for bands in config.modality_bands:
        stacks.append(BandStack(np.ascontiguousarray(values[start:start + bands])))
        start += bands

    class_names = list(config.class_names) or [f"class_{i}" for i in range(1, config.num_classes + 1)]
    modality_names = list(config.modality_names) or [f"modality_{i}" for i in range(len(stacks))]
    logger.info("合成场景: %d×%d, %d 类, 波段 %s, 噪声 %.3f",
                config.height, config.width, config.num_classes, config.modality_bands, config.noise)
    return SyntheticScene(stacks, LabelRaster(labels), signatures, sites, site_classes, class_names, modality_names)
