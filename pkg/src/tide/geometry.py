"""Bounding boxes: formats, conversion, IoU and generalized IoU."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from tide.errors import DataError, DimError, FormatError
from tide.numerics import tensor as T
from tide.numerics.tensor import Tensor


# slack for float round-off when a box is produced by conversion
_TOL = 1e-9


class BoxFormat(enum.Enum):
    CENTER_NORM = "center_norm"  # (cx, cy, w, h), fractions of the image size
    CORNER_ABS = "corner_abs"  # (x1, y1, x2, y2), pixels


@dataclass(frozen=True)
class BoundingBox:
    format: BoxFormat
    values: tuple

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if len(vals) != 4 or not np.isfinite(vals).all():
            raise DataError(f"a box needs 4 finite values, got {self.values!r}")
        object.__setattr__(self, "values", vals)
        if self.format is BoxFormat.CENTER_NORM:
            cx, cy, w, h = vals
            tol = _TOL
            if not (-tol <= cx <= 1 + tol and -tol <= cy <= 1 + tol and 0 < w <= 1 + tol and 0 < h <= 1 + tol):
                raise DataError(f"center box out of range: {vals}")
        else:
            x1, y1, x2, y2 = vals
            if x1 > x2 or y1 > y2:
                raise DataError(f"corner box has inverted edges: {vals}")

    @classmethod
    def center(cls, cx, cy, w, h) -> "BoundingBox":
        return cls(BoxFormat.CENTER_NORM, (cx, cy, w, h))

    @classmethod
    def corners(cls, x1, y1, x2, y2) -> "BoundingBox":
        return cls(BoxFormat.CORNER_ABS, (x1, y1, x2, y2))

    @property
    def area(self) -> float:
        a, b, c, d = self.values
        return c * d if self.format is BoxFormat.CENTER_NORM else (c - a) * (d - b)


def convert(box: BoundingBox, target: BoxFormat, image_size=None) -> BoundingBox:
    """Convert between formats. `image_size` is (width, height) in pixels."""
    if box.format is target:
        return box
    if image_size is None:
        raise DimError("image_size is required to cross normalized/absolute formats")
    iw, ih = (float(s) for s in image_size)
    if not (iw > 0 and ih > 0):
        raise DimError(f"degenerate image size {image_size!r}")
    if target is BoxFormat.CORNER_ABS:
        cx, cy, w, h = box.values
        return BoundingBox.corners((cx - w / 2) * iw, (cy - h / 2) * ih, (cx + w / 2) * iw, (cy + h / 2) * ih)
    x1, y1, x2, y2 = box.values
    return BoundingBox.center((x1 + x2) / 2 / iw, (y1 + y2) / 2 / ih, (x2 - x1) / iw, (y2 - y1) / ih)


def _corners(box: BoundingBox) -> tuple:
    if box.format is BoxFormat.CORNER_ABS:
        return box.values
    cx, cy, w, h = box.values
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def _check_pair(a: BoundingBox, b: BoundingBox) -> None:
    if a.format is not b.format:
        raise FormatError(f"box formats differ: {a.format.value} vs {b.format.value}")


def _overlap(a: BoundingBox, b: BoundingBox):
    ax1, ay1, ax2, ay2 = _corners(a)
    bx1, by1, bx2, by2 = _corners(b)
    inter = max(0.0, min(ax2, bx2) - max(ax1, bx1)) * max(0.0, min(ay2, by2) - max(ay1, by1))
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    hull = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    return inter, union, hull


def iou(a: BoundingBox, b: BoundingBox) -> float:
    _check_pair(a, b)
    inter, union, _ = _overlap(a, b)
    return inter / union if union > 0 else 0.0


def giou(a: BoundingBox, b: BoundingBox) -> float:
    _check_pair(a, b)
    inter, union, hull = _overlap(a, b)
    value = inter / union if union > 0 else 0.0
    return value - (hull - union) / hull if hull > 0 else value


# ---------------------------------------------------------------- array forms

def cxcywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    half = boxes[..., 2:] / 2
    return np.concatenate([boxes[..., :2] - half, boxes[..., :2] + half], axis=-1)


def xyxy_to_cxcywh(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return np.concatenate([(boxes[..., :2] + boxes[..., 2:]) / 2, boxes[..., 2:] - boxes[..., :2]], axis=-1)


def pairwise_iou(a: np.ndarray, b: np.ndarray, with_giou: bool = False):
    """IoU (and optionally GIoU) between every corner box in `a` and in `b`."""
    a, b = np.asarray(a, dtype=np.float64)[:, None], np.asarray(b, dtype=np.float64)[None]
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    union = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1]) + (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1]) - inter
    safe = np.where(union > 0, union, 1.0)
    out = np.where(union > 0, inter / safe, 0.0)
    if not with_giou:
        return out
    hull = (np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0])) * \
           (np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1]))
    safe_h = np.where(hull > 0, hull, 1.0)
    return out, np.where(hull > 0, out - (hull - union) / safe_h, out)


def giou_tensor(pred: Tensor, target: Tensor) -> Tensor:
    """Row-wise GIoU of two [n, 4] center-format box tensors; differentiable.

    Boxes must have positive width and height so that the union is nonzero.
    """
    if pred.shape != target.shape or pred.shape[-1] != 4:
        raise DimError(f"giou_tensor shapes {pred.shape} / {target.shape}")

    def corners(b):
        c, half = b[..., :2], b[..., 2:] * 0.5
        return c - half, c + half

    p_lo, p_hi = corners(pred)
    t_lo, t_hi = corners(target)
    wh = T.clip(T.minimum(p_hi, t_hi) - T.maximum(p_lo, t_lo), 0.0, np.inf)
    inter = wh[..., 0] * wh[..., 1]
    area_p = pred[..., 2] * pred[..., 3]
    area_t = target[..., 2] * target[..., 3]
    union = area_p + area_t - inter
    hull_wh = T.maximum(p_hi, t_hi) - T.minimum(p_lo, t_lo)
    hull = hull_wh[..., 0] * hull_wh[..., 1]
    return inter / union - (hull - union) / hull
