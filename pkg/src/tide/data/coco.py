"""COCO-style annotation ingestion with base/novel class splits."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from tide.data.images import load_image
from tide.errors import ConfigError, DataError, ParseError
from tide.geometry import BoundingBox


@dataclass(frozen=True)
class ImageInfo:
    id: int
    path: Path
    width: int
    height: int


@dataclass(frozen=True)
class Annotation:
    id: int
    image_id: int
    category_id: int
    bbox: BoundingBox  # corner format, pixels


@dataclass
class Dataset:
    images: dict
    annotations: dict
    categories: dict
    split: dict  # category id -> "base" | "novel"
    _pixels: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for ann in self.annotations.values():
            if ann.image_id not in self.images:
                raise DataError(f"annotation {ann.id} references missing image {ann.image_id}")
            if ann.category_id not in self.categories:
                raise DataError(f"annotation {ann.id} references missing category {ann.category_id}")
        by_image, by_class = {}, {}
        for ann in sorted(self.annotations.values(), key=lambda a: a.id):
            by_image.setdefault(ann.image_id, []).append(ann)
            by_class.setdefault(ann.category_id, []).append(ann)
        self._by_image = by_image
        self._by_class = by_class

    def image(self, image_id: int) -> np.ndarray:
        """Decoded [3, H, W] pixels, cached after first read."""
        if image_id not in self._pixels:
            arr = load_image(self.images[image_id].path)
            arr.flags.writeable = False
            self._pixels[image_id] = arr
        return self._pixels[image_id]

    def annotations_of_image(self, image_id: int) -> list:
        return self._by_image.get(image_id, [])

    def annotations_of_class(self, category_id: int) -> list:
        return self._by_class.get(category_id, [])

    def classes(self, split: str | None = None) -> list:
        if split in (None, "all"):
            return sorted(self.categories)
        return sorted(c for c, s in self.split.items() if s == split)

    def class_id(self, name: str) -> int:
        for cid, cname in self.categories.items():
            if cname == name:
                return cid
        raise ConfigError(f"unknown class name {name!r}")


def _require(record: dict, keys, where: str):
    missing = [k for k in keys if k not in record]
    if missing:
        raise ParseError(f"{where} is missing keys {missing}")


def load_coco(annotation_file, image_root, novel_class_names, min_side: int = 32) -> Dataset:
    """Parse a COCO-style JSON file.

    `bbox` entries are [x, y, w, h] in pixels and become corner boxes.
    Images whose shorter side is below `min_side` are dropped together with
    their annotations.
    """
    try:
        raw = json.loads(Path(annotation_file).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read {annotation_file}: {exc}") from None
    if not isinstance(raw, dict):
        raise ParseError("top level must be an object")
    _require(raw, ("images", "annotations", "categories"), "annotation file")
    root = Path(image_root)

    categories = {}
    for rec in raw["categories"]:
        _require(rec, ("id", "name"), "category")
        categories[int(rec["id"])] = str(rec["name"])
    names = set(categories.values())
    unknown = sorted(set(novel_class_names) - names)
    if unknown:
        raise ConfigError(f"novel class names not in the dataset: {unknown}")
    split = {cid: ("novel" if name in set(novel_class_names) else "base") for cid, name in categories.items()}

    images = {}
    for rec in raw["images"]:
        _require(rec, ("id", "file_name", "width", "height"), "image")
        if min(int(rec["width"]), int(rec["height"])) < min_side:
            continue
        images[int(rec["id"])] = ImageInfo(int(rec["id"]), root / rec["file_name"], int(rec["width"]), int(rec["height"]))

    annotations = {}
    for rec in raw["annotations"]:
        _require(rec, ("id", "image_id", "category_id", "bbox"), "annotation")
        if int(rec["image_id"]) not in images:
            if any(int(im["id"]) == int(rec["image_id"]) for im in raw["images"]):
                continue  # image filtered as too small
        x, y, w, h = (float(v) for v in rec["bbox"])
        if w <= 0 or h <= 0:
            continue
        annotations[int(rec["id"])] = Annotation(
            int(rec["id"]), int(rec["image_id"]), int(rec["category_id"]), BoundingBox.corners(x, y, x + w, y + h))
    return Dataset(images, annotations, categories, split)
