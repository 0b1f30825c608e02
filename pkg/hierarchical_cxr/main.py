"""
层次化胸片多标签系统 - 主程序入口

子命令: taxonomy validate|show|index, propagate, synth, split, train, predict, evaluate, explain
退出码: 0 成功; 1 未预期错误; 2 输入不合法; 3 分类树校验和不匹配; 4 训练失败;
        5 预测失败; 6 GradCAM 失败
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd
import torch

from hierarchical_cxr.core.config import RunConfig, load_config
from hierarchical_cxr.core.dataset import (
    SPLITS,
    generate_synthetic,
    load_boxes,
    load_manifest,
    patient_split,
    records_by_split,
    save_manifest,
    write_synthetic,
)
from hierarchical_cxr.core.errors import ConfigError, HierarchyError
from hierarchical_cxr.core.explain import GradCAM, box_contrast
from hierarchical_cxr.core.imaging import crop_window
from hierarchical_cxr.core.labels import consistency_report, evaluation_matrix, positive_counts, target_matrix, write_targets_csv
from hierarchical_cxr.core.metrics import per_label_report, roc_confidence_band, subset_eval, threshold_summary
from hierarchical_cxr.core.model import build_model, load_checkpoint, save_checkpoint
from hierarchical_cxr.core.taxonomy import parse_taxonomy
from hierarchical_cxr.core.trainer import FileImageSource, PredictionMatrix, predict, train
from hierarchical_cxr.utils.visualization import plot_roc_curves, plot_training_history, save_heatmap

logger = logging.getLogger("hierarchical_cxr")


# 配置日志
def setup_logging(log_level=logging.INFO, log_file=None):
    """设置日志配置"""
    log_format = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

    handlers = []

    console_handler = logging.StreamHandler()
    console_handler.setFormatter(logging.Formatter(log_format))
    handlers.append(console_handler)

    if log_file:
        os.makedirs(os.path.dirname(os.path.abspath(log_file)), exist_ok=True)
        file_handler = logging.FileHandler(log_file, encoding="utf-8")
        file_handler.setFormatter(logging.Formatter(log_format))
        handlers.append(file_handler)

    logging.basicConfig(level=log_level, format=log_format, handlers=handlers, force=True)


def _progress() -> bool:
    return logging.getLogger().isEnabledFor(logging.INFO)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """
    读取配置文件并应用命令行覆盖

    Args:
        args: 解析后的命令行参数

    Returns:
        RunConfig；--seed 同时覆盖训练与划分的种子
    """
    cfg = load_config(args.config) if args.config else RunConfig()
    updates = {}
    if args.taxonomy:
        updates["taxonomy_path"] = args.taxonomy
    if args.manifest:
        updates["manifest_path"] = args.manifest
    if args.out:
        updates["output_dir"] = args.out
    if args.seed is not None:
        updates["seed"] = args.seed
        updates["train"] = cfg.train.model_copy(update={"seed": args.seed})
        updates["split"] = cfg.split.model_copy(update={"seed": args.seed})
    return cfg.model_copy(update=updates)


def _require_path(value: Optional[str], what: str) -> Path:
    if not value:
        raise ConfigError(f"未指定{what}")
    path = Path(value)
    if not path.exists():
        raise ConfigError(f"{what}不存在: {path}")
    return path


def _output_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_taxonomy(cfg: RunConfig):
    return parse_taxonomy(_require_path(cfg.taxonomy_path, "分类树文件"), include_special=cfg.include_special)


def _load_records(cfg: RunConfig, taxonomy):
    return load_manifest(_require_path(cfg.manifest_path, "清单文件"), taxonomy, exclude_filter=cfg.exclude_filter)


# ----------------------------------------------------------------------
# 子命令
# ----------------------------------------------------------------------

def cmd_taxonomy(args: argparse.Namespace, cfg: RunConfig) -> int:
    path = args.path or cfg.taxonomy_path
    taxonomy = parse_taxonomy(_require_path(path, "分类树文件"), include_special=cfg.include_special)
    if args.action == "validate":
        print(f"OK, {len(taxonomy)} nodes")
    elif args.action == "show":
        print(taxonomy.render_tree())
        if args.html:
            logger.info(f"分类树图已保存到 {taxonomy.visualize(args.html)}")
    else:
        for node_id in taxonomy.node_ids:
            node = taxonomy.node(node_id)
            print(f"{taxonomy.index_of(node_id)}\t{node_id}\t{node.tree}\t{node.display_name}")
    return 0


def cmd_propagate(args: argparse.Namespace, cfg: RunConfig) -> int:
    taxonomy = _load_taxonomy(cfg)
    records = _load_records(cfg, taxonomy)
    matrix = target_matrix(taxonomy, [r.labels for r in records])
    path = write_targets_csv(taxonomy, [r.image_id for r in records], matrix, _output_dir(cfg) / "targets.csv")
    for node_id, count in positive_counts(taxonomy, matrix):
        print(f"{node_id}\t{count}")
    logger.info(f"目标矩阵已写入 {path}")
    return 0


def cmd_synth(args: argparse.Namespace, cfg: RunConfig) -> int:
    taxonomy = _load_taxonomy(cfg)
    sc = cfg.synth
    dataset = generate_synthetic(
        taxonomy,
        n_images=args.n_images or sc.n_images,
        image_size=sc.image_size,
        seed=cfg.seed,
        leaf_probability=sc.leaf_probability,
        normal_every=sc.normal_every,
        images_per_patient=sc.images_per_patient,
        monochrome1_fraction=sc.monochrome1_fraction,
    )
    dataset.records = patient_split(dataset.records, cfg.split)
    paths = write_synthetic(dataset, _output_dir(cfg))
    logger.info(f"合成清单: {paths['manifest']}，边框: {paths['boxes']}")
    return 0


def cmd_split(args: argparse.Namespace, cfg: RunConfig) -> int:
    taxonomy = _load_taxonomy(cfg)
    records = patient_split(_load_records(cfg, taxonomy), cfg.split, strict=not args.lenient)
    path = save_manifest(records, _output_dir(cfg) / "manifest_split.csv")
    for split in SPLITS:
        print(f"{split}\t{len(records_by_split(records, split))}")
    logger.info(f"已写入 {path}")
    return 0


def _ensure_split(records, cfg: RunConfig):
    if all(r.split is None for r in records):
        logger.info("清单未指定 split，按患者重新划分")
        return patient_split(records, cfg.split)
    return records


def cmd_train(args: argparse.Namespace, cfg: RunConfig) -> int:
    taxonomy = _load_taxonomy(cfg)
    records = _ensure_split(_load_records(cfg, taxonomy), cfg)
    out = _output_dir(cfg)

    torch.manual_seed(cfg.train.seed)
    model = build_model(cfg.model, num_outputs=len(taxonomy))
    model, history = train(
        model,
        records_by_split(records, "train"),
        records_by_split(records, "val"),
        cfg.train,
        taxonomy,
        FileImageSource(cfg.imaging),
        progress=_progress(),
    )
    save_checkpoint(model, cfg.model, taxonomy, out / "checkpoint.pt", extra={"best_epoch": history.attrs["best_epoch"]})
    history.to_csv(out / "history.csv", index=False, float_format="%.6f", lineterminator="\n")
    plot_training_history(history, out / "history.png")
    logger.info(f"训练完成，最佳轮次 {history.attrs['best_epoch'] + 1}")
    return 0


def _select(records, split: str):
    return list(records) if split == "all" else records_by_split(records, split)


def cmd_predict(args: argparse.Namespace, cfg: RunConfig) -> int:
    taxonomy = _load_taxonomy(cfg)
    model, _ = load_checkpoint(_require_path(args.checkpoint, "检查点"), taxonomy)
    records = _select(_load_records(cfg, taxonomy), args.split)
    matrix = predict(model, records, FileImageSource(cfg.imaging), taxonomy.node_ids, cfg.train.batch_size, progress=_progress())
    path = matrix.to_csv(_output_dir(cfg) / "predictions.csv")
    logger.info(f"预测矩阵 {len(matrix)}×{len(taxonomy)} 已写入 {path}")
    return 0


def cmd_evaluate(args: argparse.Namespace, cfg: RunConfig) -> int:
    taxonomy = _load_taxonomy(cfg)
    records = _load_records(cfg, taxonomy)
    predictions = PredictionMatrix.from_csv(_require_path(args.predictions, "预测文件"), taxonomy)
    ec = cfg.evaluation
    out = _output_dir(cfg)

    report = per_label_report(taxonomy, predictions, records, n_boot=ec.n_boot, seed=cfg.seed, level=ec.ci_level, progress=_progress())
    report.to_csv(out / "report.csv")
    print(f"avg AUC {report.avg_auc:.3f} ({report.avg_auc_std:.3f}) over {report.n_defined} nodes")

    consistency = consistency_report(taxonomy, predictions.values, threshold=ec.threshold)
    consistency.to_frame().to_csv(out / "consistency.csv", index=False, float_format="%.6f", lineterminator="\n")

    by_id = {r.image_id: r for r in records}
    positives = evaluation_matrix(taxonomy, [by_id[i].labels for i in predictions.image_ids])
    thresholds = []
    for k, node_id in enumerate(taxonomy.node_ids):
        thresholds.append({"node_id": node_id, **threshold_summary(predictions.values[:, k], positives[:, k], ec.threshold)})
    pd.DataFrame(thresholds).to_csv(out / "thresholds.csv", index=False, float_format="%.6f", lineterminator="\n")

    if ec.subsets:
        rows = []
        for spec in ec.subsets:
            result = subset_eval(taxonomy, predictions, records, spec.filter_node, spec.target_node, n_boot=ec.n_boot, seed=cfg.seed, level=ec.ci_level)
            rows.append({
                "filter_node": spec.filter_node,
                "target_node": spec.target_node,
                "support_pos": result.support_pos,
                "support_neg": result.support_neg,
                "auc": result.auc,
                "ci_low": result.ci_low,
                "ci_high": result.ci_high,
            })
        pd.DataFrame(rows).to_csv(out / "subsets.csv", index=False, float_format="%.6f", lineterminator="\n")

    roc_nodes = ec.roc_nodes or taxonomy.leaves()
    curves = {n: report.per_node[n] for n in roc_nodes if n in report.per_node and report.per_node[n].defined}
    bands = {}
    if ec.roc_points:
        (out / "roc").mkdir(exist_ok=True)
    for node_id in curves:
        k = taxonomy.index_of(node_id)
        bands[node_id] = roc_confidence_band(predictions.values[:, k], positives[:, k], n_boot=ec.n_boot, seed=cfg.seed + k, level=ec.ci_level)
        if ec.roc_points:
            points = pd.DataFrame(curves[node_id].points, columns=["fpr", "tpr"])
            points.to_csv(out / "roc" / f"{node_id}.csv", index=False, float_format="%.6f", lineterminator="\n")
    plot_roc_curves(curves, out / "roc.png", bands=bands, names=report.names)
    return 0


def cmd_explain(args: argparse.Namespace, cfg: RunConfig) -> int:
    taxonomy = _load_taxonomy(cfg)
    model, _ = load_checkpoint(_require_path(args.checkpoint, "检查点"), taxonomy)
    records = _select(_load_records(cfg, taxonomy), args.split)[: cfg.explain.max_images]
    source = FileImageSource(cfg.imaging)
    cam = GradCAM(model, cfg.explain.target_layer)
    out = _output_dir(cfg) / "heatmaps"
    boxes = load_boxes(args.boxes) if args.boxes else None
    leaves = set(taxonomy.leaves())

    rows = []
    for record in records:
        nodes = list(args.nodes or cfg.explain.nodes) or sorted(record.labels & leaves, key=taxonomy.index_of)
        model_input = source.load(record)
        for node_id in nodes:
            if node_id not in taxonomy:
                raise ConfigError(f"未知节点: {node_id!r}")
            heatmap = cam(model_input, taxonomy.index_of(node_id), node_id=node_id, image_id=record.image_id)
            save_heatmap(heatmap, model_input, out, alpha=cfg.explain.alpha)
            if boxes is not None:
                raw = source.raw(record)
                top, left, side = crop_window(raw.height, raw.width)
                hits = boxes[(boxes["image_id"] == record.image_id) & (boxes["node_id"] == node_id)]
                for box in hits[["x", "y", "w", "h"]].to_numpy():
                    inside, outside = box_contrast(heatmap, box, image_size=side, offset=(left, top))
                    rows.append({"image_id": record.image_id, "node_id": node_id, "inside": inside, "outside": outside, "hit": inside > outside})
    if rows:
        frame = pd.DataFrame(rows)
        frame.to_csv(_output_dir(cfg) / "localization.csv", index=False, float_format="%.6f", lineterminator="\n")
        print(f"localization hit rate {np.mean(frame['hit']):.3f} over {len(frame)} boxes")
    logger.info(f"热力图已写入 {out}")
    return 0


COMMANDS = {
    "taxonomy": cmd_taxonomy,
    "propagate": cmd_propagate,
    "synth": cmd_synth,
    "split": cmd_split,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="配置文件路径")
    common.add_argument("--taxonomy", type=str, default=None, help="分类树文件路径")
    common.add_argument("--manifest", type=str, default=None, help="清单文件路径")
    common.add_argument("--seed", type=int, default=None, help="随机种子")
    common.add_argument("--out", type=str, default=None, help="输出目录")
    common.add_argument("--log-file", type=str, default=None, help="日志文件路径")
    common.add_argument("--log-level", type=str, default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="日志级别")

    parser = argparse.ArgumentParser(description="层次化胸片多标签分类工具")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("taxonomy", parents=[common], help="校验/显示分类树")
    p.add_argument("action", choices=["validate", "show", "index"])
    p.add_argument("path", nargs="?", default=None, help="分类树文件（默认取 --taxonomy 或配置）")
    p.add_argument("--html", type=str, default=None, help="show 时另存 pyvis 交互图")

    sub.add_parser("propagate", parents=[common], help="写出祖先闭包目标矩阵")

    p = sub.add_parser("synth", parents=[common], help="生成合成数据集")
    p.add_argument("--n-images", type=int, default=None, help="图像数量（覆盖配置）")

    p = sub.add_parser("split", parents=[common], help="按患者划分数据集")
    p.add_argument("--lenient", action="store_true", help="患者数不足时只警告")

    sub.add_parser("train", parents=[common], help="训练模型")

    p = sub.add_parser("predict", parents=[common], help="输出预测矩阵")
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--split", type=str, default="test", choices=list(SPLITS) + ["all"])

    p = sub.add_parser("evaluate", parents=[common], help="逐节点评估")
    p.add_argument("--predictions", type=str, required=True)

    p = sub.add_parser("explain", parents=[common], help="输出 GradCAM 热力图")
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--split", type=str, default="test", choices=list(SPLITS) + ["all"])
    p.add_argument("--nodes", nargs="*", default=None, help="要解释的节点（默认取图像的叶节点标签）")
    p.add_argument("--boxes", type=str, default=None, help="合成数据的 boxes.csv，用于定位评估")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """主函数，返回退出码"""
    args = build_parser().parse_args(argv)
    setup_logging(log_level=getattr(logging, args.log_level), log_file=args.log_file)

    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except HierarchyError as e:
        logger.error(f"{type(e).__name__}: {e.message}")
        print(f"error: {e.message}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.exception(f"未预期的错误: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
