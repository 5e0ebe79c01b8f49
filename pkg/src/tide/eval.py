"""Detection decoding, COCO-style average precision and the 2-way N-shot
evaluation protocol."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from tide.data.coco import Dataset
from tide.data.episodes import build_test_support, crop_annotation, episode_rng, normalized_box, prepare_query
from tide.errors import ConfigError, SamplingError
from tide.geometry import BoundingBox, pairwise_iou
from tide.head import DetectionSet
from tide.numerics.tensor import Tensor

IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass(frozen=True)
class ScoredDetection:
    class_id: int
    score: float
    box: BoundingBox  # corner format, pixels

    def to_dict(self) -> dict:
        return {"class_id": self.class_id, "score": self.score, "box": list(self.box.values)}


def decode_detections(ds: DetectionSet, position_to_class, image_size, score_threshold: float = 0.0,
                      aggregation: str = "sum") -> list:
    """One detection per query whose most likely position is a real class.

    Positions mapped to None (the null row, negatives) suppress the query. A
    class with several shots scores the sum (or max) of its positions'
    probabilities. Only scores strictly above `score_threshold` are kept.
    """
    if aggregation not in ("sum", "max"):
        raise ConfigError(f"unknown score aggregation {aggregation!r}")
    probs = ds.class_dist
    boxes = ds.boxes.data
    if probs.shape[1] != len(position_to_class):
        raise ConfigError("position map does not cover every support position")
    columns = {}
    for j, cid in enumerate(position_to_class):
        if cid is not None:
            columns.setdefault(cid, []).append(j)
    iw, ih = (float(s) for s in image_size)
    out = []
    for i in range(probs.shape[0]):
        cid = position_to_class[int(np.argmax(probs[i]))]
        if cid is None:
            continue
        picked = probs[i, columns[cid]]
        score = min(float(picked.sum() if aggregation == "sum" else picked.max()), 1.0)
        if score <= score_threshold:
            continue
        cx, cy, w, h = boxes[i]
        x1, x2 = np.clip([(cx - w / 2) * iw, (cx + w / 2) * iw], 0.0, iw)
        y1, y2 = np.clip([(cy - h / 2) * ih, (cy + h / 2) * ih], 0.0, ih)
        out.append(ScoredDetection(cid, score, BoundingBox.corners(x1, y1, x2, y2)))
    return out


def nms(dets: list, iou_threshold: float = 0.7) -> list:
    """Greedy per-class suppression in descending score order."""
    kept = []
    for d in sorted(dets, key=lambda d: -d.score):
        if all(k.class_id != d.class_id or
               pairwise_iou(np.array([k.box.values]), np.array([d.box.values]))[0, 0] <= iou_threshold
               for k in kept):
            kept.append(d)
    return kept


def match_detections(dets, ground_truth, iou_threshold: float) -> np.ndarray:
    """Greedy matching in descending score order; returns a TP flag per
    detection in that order.

    `dets` is a list of (image_id, score, (x1, y1, x2, y2)); `ground_truth`
    maps image_id to an [n, 4] corner array. Each detection takes the unmatched
    ground truth of highest IoU, provided IoU >= the threshold.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i][1])
    used = {k: np.zeros(len(v), dtype=bool) for k, v in ground_truth.items()}
    tp = np.zeros(len(dets), dtype=bool)
    for rank, i in enumerate(order):
        img, _, box = dets[i]
        gts = np.asarray(ground_truth.get(img, np.zeros((0, 4))), dtype=np.float64).reshape(-1, 4)
        if not len(gts):
            continue
        ious = pairwise_iou(np.array([box], dtype=np.float64), gts)[0]
        ious[used[img]] = -1.0
        best = int(np.argmax(ious))
        if ious[best] >= iou_threshold:
            used[img][best] = True
            tp[rank] = True
    return tp


def average_precision(dets, ground_truth, iou_threshold: float = 0.5) -> float:
    """Single-class AP with 101-point interpolated precision.

    Zero when there are no detections or no ground truth.
    """
    n_gt = sum(len(v) for v in ground_truth.values())
    if n_gt == 0 or not dets:
        return 0.0
    tp = match_detections(dets, ground_truth, iou_threshold)
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    values = np.array([envelope[i] if i < len(envelope) else 0.0 for i in idx])
    return float(np.mean(values))


def ap_summary(dets, ground_truth) -> dict:
    """AP averaged over IoU 0.50:0.05:0.95, plus AP50 and AP75."""
    per = {t: average_precision(dets, ground_truth, t) for t in IOU_THRESHOLDS}
    return {"AP": float(np.mean(list(per.values()))), "AP50": per[0.5], "AP75": per[0.75]}


@dataclass
class EvalReport:
    ways: int
    shots: int
    seeds: list
    AP: float
    AP50: float
    AP75: float
    per_class: dict  # class name -> {AP, AP50, AP75}, mean over seeds that used it
    per_seed: list  # one dict per seed: classes, support sources, query ids, metrics
    detections: list = field(default_factory=list, repr=False)  # COCO results records

    def to_json(self) -> str:
        body = asdict(self)
        body.pop("detections")
        return json.dumps(body, sort_keys=True, indent=2)


def oracle_predictor(dataset: Dataset, n_queries: int = 8):
    """A stand-in detector that reads the ground truth of the query image."""

    def predict(image_id, query_image, support):
        p2c = support.position_to_class()
        m = len(p2c)
        first = {}
        for j, cid in enumerate(p2c):
            if cid is not None:
                first.setdefault(cid, j)
        anns = [a for a in dataset.annotations_of_image(image_id) if a.category_id in first]
        n = max(n_queries, len(anns))
        probs = np.full((n, m), 1e-12)
        probs[:, support.null_index] = 1.0
        boxes = np.full((n, 4), 0.5)
        for i, a in enumerate(anns):
            probs[i, support.null_index] = 1e-12
            probs[i, first[a.category_id]] = 1.0
            boxes[i] = normalized_box(dataset, a).values
        probs /= probs.sum(axis=1, keepdims=True)
        return DetectionSet(Tensor(np.log(probs)), Tensor(boxes))

    return predict


def model_predictor(model):
    def predict(image_id, query_image, support):
        return model.predict(query_image, support)

    return predict


def sample_test_episode(dataset: Dataset, rng: np.random.Generator, ways: int, shots: int):
    """Pick `ways` novel classes and `shots` annotations of each; queries are
    every other image holding one of those classes."""
    novel = dataset.classes("novel")
    if len(novel) < ways or ways < 1:
        raise ConfigError(f"{ways}-way evaluation needs at least {ways} novel classes, found {len(novel)}")
    classes = sorted(int(c) for c in (novel if len(novel) == ways else rng.choice(novel, ways, replace=False)))
    shot_anns = {}
    for cid in classes:
        pool = dataset.annotations_of_class(cid)
        if len(pool) < shots:
            raise SamplingError(f"class {cid} has {len(pool)} annotations, {shots} shots requested")
        order = rng.permutation(len(pool))[:shots]
        shot_anns[cid] = [pool[i].id for i in sorted(order)]
    shot_images = {dataset.annotations[a].image_id for ids in shot_anns.values() for a in ids}
    queries = sorted({a.image_id for cid in classes for a in dataset.annotations_of_class(cid)} - shot_images)
    if not queries:
        raise SamplingError("no query images remain once the shots are taken")
    return classes, shot_anns, queries


def run_protocol(predict, dataset: Dataset, ways: int = 2, shots: int = 1, seeds=(0,), query_size: int = 64,
                 score_threshold: float = 0.0, aggregation: str = "sum", use_nms: bool = False,
                 nms_iou: float = 0.7) -> EvalReport:
    """Mean AP / AP50 / AP75 over seeds of a `ways`-way `shots`-shot episode.

    `predict(image_id, query_image, support_set) -> DetectionSet` is either a
    trained model (see model_predictor) or an oracle.
    """
    per_seed, per_class, results = [], {}, []
    for seed in seeds:
        rng = episode_rng(seed, shots)
        classes, shot_anns, queries = sample_test_episode(dataset, rng, ways, shots)
        support = build_test_support({c: [crop_annotation(dataset, a) for a in ids] for c, ids in shot_anns.items()},
                                     shot_anns)
        p2c = support.position_to_class()
        dets = {c: [] for c in classes}
        gts = {c: {} for c in classes}
        for iid in queries:
            info = dataset.images[iid]
            for a in dataset.annotations_of_image(iid):
                if a.category_id in gts:
                    gts[a.category_id].setdefault(iid, []).append(a.bbox.values)
            found = decode_detections(predict(iid, prepare_query(dataset, iid, query_size), support), p2c,
                                      (info.width, info.height), score_threshold, aggregation)
            if use_nms:
                found = nms(found, nms_iou)
            for d in found:
                dets[d.class_id].append((iid, d.score, d.box.values))
                x1, y1, x2, y2 = d.box.values
                results.append({"image_id": iid, "category_id": d.class_id, "bbox": [x1, y1, x2 - x1, y2 - y1],
                                "score": d.score, "seed": int(seed)})
        metrics = {}
        for c in classes:
            if not gts[c]:
                continue
            metrics[dataset.categories[c]] = ap_summary(dets[c], {k: np.array(v) for k, v in gts[c].items()})
            per_class.setdefault(dataset.categories[c], []).append(metrics[dataset.categories[c]])
        summary = {k: float(np.mean([m[k] for m in metrics.values()])) for k in ("AP", "AP50", "AP75")}
        per_seed.append({"seed": int(seed), "classes": classes, "support_annotations": {str(c): v for c, v in
                                                                                       shot_anns.items()},
                         "query_images": queries, "per_class": metrics, **summary})
    means = {k: float(np.mean([s[k] for s in per_seed])) for k in ("AP", "AP50", "AP75")}
    class_means = {name: {k: float(np.mean([m[k] for m in runs])) for k in ("AP", "AP50", "AP75")}
                   for name, runs in sorted(per_class.items())}
    return EvalReport(ways, shots, [int(s) for s in seeds], means["AP"], means["AP50"], means["AP75"],
                      class_means, per_seed, results)


def export_results(path, report: EvalReport) -> None:
    """COCO results array: image_id, category_id, [x, y, w, h] bbox, score."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.detections, fh, sort_keys=True)
