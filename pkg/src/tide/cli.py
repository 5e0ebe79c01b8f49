"""Command-line entry points: train, eval, detect and export-attn."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from tide import checkpoint
from tide.config import RunConfig, build_config, dump
from tide.data.episodes import SUPPORT_SIZE, SupportRow, SupportSet, null_image
from tide.data.images import load_image, resize_bilinear, save_image
from tide.errors import ConfigError, NumericError, TideError
from tide.eval import decode_detections, export_results, model_predictor, nms, oracle_predictor, run_protocol
from tide.model import TideModel
from tide.numerics.tensor import no_grad
from tide.train import dataset_from_config, train

CHECKPOINT_NAME = "model.tide"
CONFIG_SUFFIX = ".config"

DETECTIONS_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["query", "image_size", "supports", "detections", "checksum"],
    "additionalProperties": False,
    "properties": {
        "query": {"type": "string"},
        "image_size": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2, "maxItems": 2},
        "supports": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["position", "label", "path"],
                "additionalProperties": False,
                "properties": {
                    "position": {"type": "integer", "minimum": 0},
                    "label": {"type": ["string", "null"]},
                    "path": {"type": ["string", "null"]},
                },
            },
        },
        "detections": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["label", "score", "box"],
                "additionalProperties": False,
                "properties": {
                    "label": {"type": "string"},
                    "score": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                    "box": {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4},
                },
            },
        },
        "checksum": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
    },
}


def config_path(ckpt) -> Path:
    return Path(str(ckpt) + CONFIG_SUFFIX)


def save_model(model: TideModel, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save(path, model.state_dict())
    config_path(path).write_text(dump(model.cfg), encoding="utf-8")


def load_model(ckpt, config_file=None, overrides=()) -> TideModel:
    """Rebuild a model from a checkpoint and its config sidecar.

    The sidecar is the base; `config_file` and `overrides` apply on top.
    """
    side = config_path(ckpt)
    base = build_config(side) if side.exists() else RunConfig()
    cfg = build_config(config_file, overrides, base=base)
    state = checkpoint.load(ckpt)
    model = TideModel(cfg)
    model.load_state_dict(state)
    return model


def _overrides(args) -> list:
    out = list(args.set or [])
    if args.seed is not None:
        out.append(f"seed={args.seed}")
    return out


def cmd_train(config_file=None, overrides=(), out_dir="runs/train", progress=None) -> Path:
    """Train from scratch; writes model.tide (+ .config sidecar) and metrics.jsonl into `out_dir`."""
    cfg = build_config(config_file, overrides)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = dataset_from_config(cfg, out)
    model = TideModel(cfg)
    train(model, dataset, cfg, out / "metrics.jsonl", progress)
    ckpt = out / CHECKPOINT_NAME
    save_model(model, ckpt)
    return ckpt


def cmd_eval(ckpt, config_file=None, overrides=(), oracle: bool = False, report_path=None, results_path=None):
    """Run the N-shot protocol; returns the EvalReport. Parameters are checked unchanged."""
    ckpt = Path(ckpt)
    model = load_model(ckpt, config_file, overrides)
    cfg = model.cfg
    dataset = dataset_from_config(cfg, ckpt.parent)
    before = model.checksum()
    predict = oracle_predictor(dataset, cfg.num_queries) if oracle else model_predictor(model)
    report = run_protocol(predict, dataset, cfg.ways, cfg.shots, cfg.seed_list(), cfg.query_size,
                          cfg.score_threshold, cfg.score_aggregation, cfg.nms, cfg.nms_iou)
    if model.checksum() != before:
        raise NumericError("model parameters changed during evaluation")
    if report_path:
        Path(report_path).write_text(report.to_json() + "\n", encoding="utf-8")
    if results_path:
        export_results(results_path, report)
    return report


def _parse_support(arg: str):
    label, sep, path = arg.partition("=")
    return (label, path) if sep else (Path(arg).stem, arg)


def build_detect_support(supports):
    """SupportSet from (label, path) pairs; repeated labels become extra shots.

    An all-zero support image is treated like the null row: its position
    never yields a detection.
    """
    if not supports:
        raise ConfigError("detect needs at least one support image")
    rows, labels = [], []
    for label, path in supports:
        img = load_image(path)
        if img.shape[1:] != (SUPPORT_SIZE, SUPPORT_SIZE):
            img = resize_bilinear(img, SUPPORT_SIZE, SUPPORT_SIZE)
        blank = not img.any()
        rows.append(SupportRow(img, None if blank else label, is_negative=blank))
        labels.append(None if blank else label)
    rows.append(SupportRow(null_image(), is_null=True))
    return SupportSet(rows), labels


def cmd_detect(ckpt, query_path, supports, config_file=None, overrides=(), out_path=None) -> dict:
    """Single forward over one query image; returns the detections document."""
    model = load_model(ckpt, config_file, overrides)
    cfg = model.cfg
    pairs = [_parse_support(s) if isinstance(s, str) else tuple(s) for s in supports]
    support, labels = build_detect_support(pairs)
    query = load_image(query_path)
    h, w = query.shape[1:]
    before = model.checksum()
    ds = model.predict(resize_bilinear(query, cfg.query_size, cfg.query_size), support)
    dets = decode_detections(ds, support.position_to_class(), (w, h), cfg.score_threshold, cfg.score_aggregation)
    if cfg.nms:
        dets = nms(dets, cfg.nms_iou)
    checksum = model.checksum()
    if checksum != before:
        raise NumericError("model parameters changed during detection")
    doc = {
        "query": str(query_path),
        "image_size": [int(w), int(h)],
        "supports": [{"position": i, "label": labels[i] if i < len(labels) else None,
                      "path": str(pairs[i][1]) if i < len(pairs) else None} for i in range(len(support))],
        "detections": [{"label": d.class_id, "score": d.score, "box": list(d.box.values)} for d in dets],
        "checksum": checksum,
    }
    if out_path:
        Path(out_path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return doc


def heatmap(values: np.ndarray, grid, size) -> np.ndarray:
    """Reshape per-token values to the grid, upsample to (h, w), min-max to [0, 1].

    A constant map renders as all zeros.
    """
    gh, gw = grid
    h, w = size
    up = resize_bilinear(np.asarray(values, dtype=np.float64).reshape(1, gh, gw), h, w)[0]
    lo, hi = up.min(), up.max()
    return np.zeros_like(up) if hi <= lo else (up - lo) / (hi - lo)


def cmd_export_attn(ckpt, query_path, supports, out_dir, config_file=None, overrides=()) -> list:
    """One grayscale PGM per (fusion layer, support row) of token-to-support
    attention on the finest query level. Returns the written paths."""
    model = load_model(ckpt, config_file, overrides)
    cfg = model.cfg
    pairs = [_parse_support(s) if isinstance(s, str) else tuple(s) for s in supports]
    support, _ = build_detect_support(pairs)
    query = load_image(query_path)
    h, w = query.shape[1:]
    record = []
    with no_grad():
        model.forward(resize_bilinear(query, cfg.query_size, cfg.query_size), support.images,
                      support.null_index, record=record)
    gh = gw = cfg.query_size // cfg.query_patch
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for layer, attn in enumerate(record):
        for j in range(attn.shape[1]):
            path = out / f"attn_layer{layer}_support{j}.pgm"
            save_image(path, heatmap(attn[: gh * gw, j], (gh, gw), (h, w)))
            written.append(path)
    return written


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int, help="global seed (same as --set seed=S)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")

    p = argparse.ArgumentParser(prog="tide", description="Test-time few-shot object detection at desk scale.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train from scratch")
    t.add_argument("--out", default="runs/train", help="output directory")

    e = sub.add_parser("eval", parents=[common], help="N-shot evaluation protocol")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--oracle", action="store_true", help="score a ground-truth oracle instead of the model")
    e.add_argument("--report", help="write the report JSON here (default: stdout)")
    e.add_argument("--results", help="write COCO-format detections here")

    for name, helptext in (("detect", "detect support classes in a query image"),
                           ("export-attn", "write cross-attention heatmaps")):
        d = sub.add_parser(name, parents=[common], help=helptext)
        d.add_argument("--checkpoint", required=True)
        d.add_argument("--query", required=True)
        d.add_argument("--support", action="append", required=True, metavar="[LABEL=]PATH",
                       help="support image, repeatable; repeated labels are extra shots")
        d.add_argument("--out", required=name == "export-attn",
                       help="output file (detect) or directory (export-attn)")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    over = _overrides(args)
    try:
        if args.command == "train":
            ckpt = cmd_train(args.config, over, args.out,
                             progress=lambda r: print(json.dumps(r, sort_keys=True), file=sys.stderr))
            print(ckpt)
        elif args.command == "eval":
            report = cmd_eval(args.checkpoint, args.config, over, args.oracle, args.report, args.results)
            if not args.report:
                print(report.to_json())
        elif args.command == "detect":
            doc = cmd_detect(args.checkpoint, args.query, args.support, args.config, over, args.out)
            if not args.out:
                print(json.dumps(doc, sort_keys=True, indent=2))
        else:
            for path in cmd_export_attn(args.checkpoint, args.query, args.support, args.out, args.config, over):
                print(path)
    except (TideError, OSError) as exc:
        print(f"tide: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
