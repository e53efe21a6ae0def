"""
命令实现

每个 cmd_* 接收 argparse 解析结果，返回进程退出码；领域错误以 SguMlpError
向上抛出，由 main 映射为退出码。
"""

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from src.cli.maps import write_ppm
from src.core.checkpoint import load_checkpoint
from src.core.config import RunSettings, resolve_settings
from src.core.data import (
    BandStats,
    LabelRaster,
    PatchDataset,
    Scene,
    SceneConfig,
    band_stats,
    build_dataset,
    concat_modalities,
    extract_patches,
    load_scene,
    normalize,
    normalize_image,
    split,
    synth_scene,
    write_label_raster,
    write_scene,
)
from src.core.errors import (
    CheckpointError,
    DimensionError,
    FormatError,
    SguMlpError,
    UsageError,
    VerificationError,
)
from src.core.layers import (
    ABLATION_HEADERS,
    CLI_VARIANTS,
    ModelConfig,
    Variant,
    parameter_count,
    parse_variant,
    predict_labels,
)
from src.core.metrics import (
    ROW_LABELS_TAIL,
    format_key_values,
    format_table,
    render_report,
    report_rows,
)
from src.core.training import evaluate, grad_check, toy_config, train
from src.utils.path_utils import ensure_dir, resolve_path

logger = logging.getLogger(__name__)

EVAL_BATCH = 256
PREDICT_ROWS = 16

# 命令行参数名 -> RunSettings 字段
SETTING_FLAGS = (
    "variant", "seed", "epochs", "batch_size", "lr", "optimizer", "dtype", "workers",
    "train_fraction", "hidden_dim", "mixer_ffn_dim", "num_blocks", "token_segment",
    "patch_window", "dwc_kernels", "sgu_scope", "log_level",
)


# ---------------------------------------------------------------------------
# 运行清单
# ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    """随每次输出一同写出的运行记录"""

    command: str
    settings: Dict[str, Any]
    seed: int
    inputs: List[str] = field(default_factory=list)
    outputs: List[str] = field(default_factory=list)
    wall_clock_seconds: float = 0.0
    digests: Dict[str, str] = field(default_factory=dict)

    def finish(self, outputs: List[Path], started: float) -> "RunManifest":
        self.wall_clock_seconds = round(time.perf_counter() - started, 3)
        self.outputs = [str(p) for p in outputs]
        self.digests = {str(p): sha256_file(p) for p in outputs}
        return self

    def write(self, path) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(asdict(self), f, indent=2, ensure_ascii=False)
        return path


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def settings_from_args(args) -> RunSettings:
    overrides = {name: getattr(args, name, None) for name in SETTING_FLAGS}
    return resolve_settings(config_file=getattr(args, "config", None), overrides=overrides)


def input_dir(path_str: str, flag: str = "--data") -> Path:
    """输入目录必须已存在"""
    path = resolve_path(path_str)
    if not path.is_dir():
        raise UsageError(f"{flag} 目录不存在: {path}")
    return path


def output_dir(path_str: str) -> Path:
    """检查输出位置可用（不创建；输入全部读入后再由 ensure_dir 创建）"""
    path = resolve_path(path_str)
    if path.exists() and not path.is_dir():
        raise UsageError(f"--out 已存在且不是目录: {path}")
    return path


# ---------------------------------------------------------------------------
# 数据准备
# ---------------------------------------------------------------------------

@dataclass
class PreparedData:
    """标准化后的训练/测试集与复现它们所需的信息"""

    image: np.ndarray
    train: PatchDataset
    test: PatchDataset
    stats: BandStats
    split_info: Dict[str, Any]


def _split_masks(scene: Scene, fraction: float, seed: int) -> Tuple[LabelRaster, np.ndarray, LabelRaster, np.ndarray, Dict]:
    if scene.test_labels is not None:
        info = {"protocol": "dual_raster"}
        return (scene.labels, scene.labels.labels > 0, scene.test_labels, scene.test_labels.labels > 0, info)
    train_mask, test_mask = split(scene.labels, fraction, seed)
    info = {"protocol": "stratified", "train_fraction": fraction, "seed": seed}
    return scene.labels, train_mask, scene.labels, test_mask, info


def prepare_data(scene: Scene, fraction: float, seed: int, window: int, stats: Optional[BandStats] = None) -> PreparedData:
    """
    拼接模态、划分、提取 patch 并按训练像素统计量标准化

    给定 stats 时直接复用（评估时使用训练期保存的统计量）。
    """
    image = concat_modalities(scene.stacks).as_hwc()
    train_raster, train_mask, test_raster, test_mask, info = _split_masks(scene, fraction, seed)
    raw_train = build_dataset(image, train_raster, train_mask, window)
    stats = stats or band_stats(raw_train)
    train_ds = normalize(raw_train, stats)
    test_ds = normalize(build_dataset(image, test_raster, test_mask, window), stats)
    logger.info("数据准备完成: 训练 %d, 测试 %d, 波段 %d", len(train_ds), len(test_ds), image.shape[-1])
    return PreparedData(image, train_ds, test_ds, stats, info)


def _write_model_json(path: Path, config: ModelConfig, data: PreparedData, class_names: List[str]) -> Path:
    payload = {
        "config": config.to_dict(),
        "band_stats": data.stats.to_dict(),
        "class_names": list(class_names),
        "split": data.split_info,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True, ensure_ascii=False)
    return path


def _read_model_json(path: Path) -> Dict[str, Any]:
    if not path.is_file():
        raise FormatError(f"模型描述文件不存在: {path}")
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    missing = {"config", "band_stats", "class_names", "split"} - set(payload)
    if missing:
        raise FormatError(f"{path}: 缺少字段 {sorted(missing)}")
    return payload


def _load_model(args) -> Tuple[Dict[str, Any], ModelConfig, Path]:
    checkpoint = resolve_path(args.checkpoint)
    if not checkpoint.is_file():
        raise CheckpointError(f"检查点不存在: {checkpoint}")
    model_path = resolve_path(args.model) if args.model else checkpoint.with_name("model.json")
    payload = _read_model_json(model_path)
    return payload, ModelConfig.from_dict(payload["config"]), checkpoint


# ---------------------------------------------------------------------------
# train / eval
# ---------------------------------------------------------------------------

def _write_loss_curve(path: Path, losses: List[float], steps_per_epoch: int) -> Path:
    steps = np.arange(len(losses))
    frame = pd.DataFrame({"step": steps + 1, "epoch": steps // steps_per_epoch + 1, "loss": losses})
    frame.to_csv(path, index=False, float_format="%.10g")
    return path


def train_and_report(
    scene: Scene, settings: RunSettings, out_dir: Path
) -> Tuple[Dict[str, float], str, List[Path]]:
    """
    训练一个变体并在测试集上评估

    测试报告由重新读入的检查点计算，保证与随后的 eval 结果逐字节一致。

    Returns:
        (指标字典, 渲染好的表格, 写出的文件)
    """
    data = prepare_data(scene, settings.train_fraction, settings.seed, settings.patch_window)
    config = settings.model_config_for(data.image.shape[-1], len(scene.class_names))
    hyper = settings.train_hyper()
    logger.info("模型 %s: E=%d, 参数量 %d", config.variant.value, config.token_count, parameter_count(config))

    checkpoint_path = out_dir / "checkpoint.sguw"
    run = train(data.train, config, hyper, settings.seed, checkpoint_path)
    params = load_checkpoint(checkpoint_path, config)
    cm = evaluate(params, config, data.test, EVAL_BATCH, settings.workers)
    report = render_report(cm, scene.class_names, ABLATION_HEADERS[config.variant])

    report_path = out_dir / "report.txt"
    report_path.write_text(report.key_values, encoding="utf-8")
    steps_per_epoch = -(-len(data.train) // hyper.batch_size)
    outputs = [
        checkpoint_path,
        _write_model_json(out_dir / "model.json", config, data, scene.class_names),
        report_path,
        _write_loss_curve(out_dir / "loss_curve.csv", run.loss_curve, steps_per_epoch),
    ]
    return report.values, report.table, outputs


def cmd_train(args) -> int:
    started = time.perf_counter()
    settings = settings_from_args(args)
    data_dir = input_dir(args.data)
    out_dir = output_dir(args.out)
    scene = load_scene(data_dir)
    out_dir = ensure_dir(out_dir)
    _, table, outputs = train_and_report(scene, settings, out_dir)
    print(table, end="")
    manifest = RunManifest("train", settings.model_dump(mode="json"), settings.seed, [str(data_dir)])
    manifest.finish(outputs, started).write(out_dir / "manifest.json")
    logger.info("训练完成，输出目录: %s", out_dir)
    return 0


def cmd_eval(args) -> int:
    started = time.perf_counter()
    data_dir = input_dir(args.data)
    if args.out:
        output_dir(args.out)
    payload, config, checkpoint = _load_model(args)
    params = load_checkpoint(checkpoint, config)
    scene = load_scene(data_dir)
    split_info = payload["split"]
    data = prepare_data(
        scene,
        split_info.get("train_fraction", 0.5),
        split_info.get("seed", 0),
        config.patch_window,
        BandStats.from_dict(payload["band_stats"]),
    )
    if args.split == "train":
        dataset = data.train
    elif args.split == "test":
        dataset = data.test
    else:
        dataset = PatchDataset(
            np.concatenate([data.train.patches, data.test.patches]),
            np.concatenate([data.train.labels, data.test.labels]),
            data.stats,
        )
    cm = evaluate(params, config, dataset, EVAL_BATCH, args.workers or 1)
    class_names = payload["class_names"]
    report = render_report(cm, class_names, ABLATION_HEADERS[config.variant])
    print(report.table, end="")
    if args.out:
        out_dir = ensure_dir(args.out)
        report_path = out_dir / "report.txt"
        report_path.write_text(report.key_values, encoding="utf-8")
        manifest = RunManifest("eval", {"split": args.split, "config": config.to_dict()}, split_info.get("seed", 0),
                               [str(checkpoint), str(data_dir)])
        manifest.finish([report_path], started).write(out_dir / "manifest.json")
    else:
        print(report.key_values, end="")
    return 0


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------

def predict_map(params, config: ModelConfig, image: np.ndarray, batch_size: int = EVAL_BATCH) -> np.ndarray:
    """对每个像素（反射填充的 patch）分类，返回 [h, w] 标签"""
    height, width = image.shape[:2]
    labels = np.empty((height, width), dtype=np.uint16)
    for top in range(0, height, PREDICT_ROWS):
        rr, cc = np.meshgrid(np.arange(top, min(top + PREDICT_ROWS, height)), np.arange(width), indexing="ij")
        patches = extract_patches(image, rr.reshape(-1), cc.reshape(-1), config.patch_window)
        labels[rr, cc] = predict_labels(params, config, patches, batch_size).reshape(rr.shape)
    return labels


def cmd_predict(args) -> int:
    started = time.perf_counter()
    data_dir = input_dir(args.data)
    out_dir = output_dir(args.out)
    payload, config, checkpoint = _load_model(args)
    params = load_checkpoint(checkpoint, config)
    scene = load_scene(data_dir, require_labels=False)
    image = concat_modalities(scene.stacks).as_hwc()
    if image.shape[-1] != config.bands:
        raise DimensionError(f"输入波段数 {image.shape[-1]} 与检查点的 {config.bands} 不一致")
    image = normalize_image(image, BandStats.from_dict(payload["band_stats"])).astype(np.float32)
    labels = predict_map(params, config, image)

    out_dir = ensure_dir(out_dir)
    outputs = list(write_label_raster(LabelRaster(labels), out_dir / "prediction"))
    outputs.append(write_ppm(labels, out_dir / "prediction.ppm"))
    reference = scene.labels.labels if scene.labels is not None else np.zeros_like(labels)
    labeled = reference > 0
    if labeled.any():
        logger.info("已标注像素一致率: %.4f", float((labels[labeled] == reference[labeled]).mean()))
    manifest = RunManifest("predict", {"config": config.to_dict()}, 0, [str(checkpoint), str(data_dir)])
    manifest.finish(outputs, started).write(out_dir / "manifest.json")
    logger.info("分类图已写出: %s", out_dir)
    return 0


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

def _parse_seeds(text: str) -> List[int]:
    try:
        seeds = [int(part) for part in str(text).split(",") if part.strip()]
    except ValueError:
        raise FormatError(f"种子列表格式错误: {text}") from None
    if not seeds:
        raise FormatError("种子列表为空")
    return seeds


def ablation_table(frame: pd.DataFrame, class_names: List[str]) -> Tuple[str, Dict[str, Dict[str, float]]]:
    """按变体对各种子的指标求平均，返回表格与平均值"""
    means: Dict[str, Dict[str, float]] = {}
    if not frame.empty:
        grouped = frame.drop(columns=["seed"]).groupby("variant", sort=False).mean()
        means = {variant: row.to_dict() for variant, row in grouped.iterrows()}
    columns = {}
    for variant in CLI_VARIANTS.values():
        values = means.get(variant.value)
        column = report_rows(values, class_names) if values else [None] * (len(class_names) + 3)
        columns[ABLATION_HEADERS[variant]] = column
    return format_table(list(class_names) + ROW_LABELS_TAIL, columns), means


def ablation_gains(means: Dict[str, Dict[str, float]]) -> Dict[str, float]:
    """各变体相对纯 MLP 的 OA/AA/κ 提升（×100）"""
    base = means.get(Variant.MLP.value)
    gains: Dict[str, float] = {}
    if base is None:
        return gains
    for variant in CLI_VARIANTS.values():
        if variant is Variant.MLP or variant.value not in means:
            continue
        for metric in ("oa", "aa", "kappa"):
            gains[f"{variant.value}.{metric}"] = (means[variant.value][metric] - base[metric]) * 100
    return gains


def cmd_ablate(args) -> int:
    started = time.perf_counter()
    base_settings = settings_from_args(args)
    seeds = _parse_seeds(args.seeds)
    data_dir = input_dir(args.data)
    out_dir = output_dir(args.out)
    scene = load_scene(data_dir)
    out_dir = ensure_dir(out_dir)

    records: List[Dict[str, Any]] = []
    outputs: List[Path] = []
    failures: List[int] = []
    for variant in CLI_VARIANTS.values():
        try:
            for seed in seeds:
                settings = base_settings.model_copy(update={"variant": variant.value, "seed": seed})
                run_dir = ensure_dir(out_dir / variant.value / f"seed_{seed}")
                values, _, written = train_and_report(scene, settings, run_dir)
                records.append({"variant": variant.value, "seed": seed, **values})
                outputs.extend(written)
        except (SguMlpError, OSError) as e:
            logger.error("变体 %s 失败: %s", variant.value, e)
            failures.append(getattr(e, "exit_code", 2))
            records = [r for r in records if r["variant"] != variant.value]

    frame = pd.DataFrame.from_records(records)
    table, means = ablation_table(frame, scene.class_names)
    print(table, end="")
    table_path = out_dir / "ablation.txt"
    table_path.write_text(table, encoding="utf-8")
    csv_path = out_dir / "ablation.csv"
    frame.to_csv(csv_path, index=False, float_format="%.10g")
    gains_path = out_dir / "ablation_gains.txt"
    gains_path.write_text(format_key_values(ablation_gains(means)), encoding="utf-8")
    outputs.extend([table_path, csv_path, gains_path])

    settings_echo = {**base_settings.model_dump(mode="json"), "seeds": seeds}
    manifest = RunManifest("ablate", settings_echo, seeds[0], [str(data_dir)])
    manifest.finish(outputs, started).write(out_dir / "manifest.json")
    if failures:
        return failures[0]
    return 0


# ---------------------------------------------------------------------------
# synth / gradcheck
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    started = time.perf_counter()
    overrides = {"noise": args.noise, "seed": args.seed, "height": args.height, "width": args.width}
    overrides = {key: value for key, value in overrides.items() if value is not None}
    if args.profile:
        config = SceneConfig.from_profile(args.profile, **overrides)
    else:
        if args.classes is not None:
            overrides["num_classes"] = args.classes
        if args.bands:
            overrides["modality_bands"] = tuple(int(b) for b in args.bands.split(","))
        config = SceneConfig(**overrides)
    synthetic = synth_scene(config)
    scene = synthetic.to_scene()
    if args.holdout:
        train_mask, test_mask = split(scene.labels, 1.0 - args.holdout, config.seed)
        full = scene.labels.labels
        scene.labels = LabelRaster(np.where(train_mask, full, 0).astype(np.uint16))
        scene.test_labels = LabelRaster(np.where(test_mask, full, 0).astype(np.uint16))

    out_dir = ensure_dir(output_dir(args.out))
    outputs = write_scene(scene, out_dir)
    settings_echo = {key: (list(v) if isinstance(v, tuple) else v) for key, v in asdict(config).items()}
    settings_echo["holdout"] = args.holdout
    manifest = RunManifest("synth", settings_echo, config.seed)
    manifest.finish(outputs, started).write(out_dir / "manifest.json")
    logger.info("合成场景已写出: %s", out_dir)
    return 0


def cmd_gradcheck(args) -> int:
    variants = [parse_variant(args.variant)] if args.variant else list(CLI_VARIANTS.values())
    worst: Optional[Tuple[str, float]] = None
    for variant in variants:
        report = grad_check(toy_config(variant, args.blocks), args.seed)
        print(report.format())
        if not report.passed:
            name, err = report.worst()
            if worst is None or err > worst[1]:
                worst = (f"{variant.value}:{name}", err)
    if worst is not None:
        raise VerificationError(*worst)
    return 0
