"""Support sets, episodes and the augmentation / resizing applied to crops."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from tide.data.coco import Dataset
from tide.data.images import crop, resize_bilinear
from tide.errors import ConfigError, SamplingError
from tide.geometry import BoundingBox, BoxFormat, convert

SUPPORT_SIZE = 128
MULTISCALE_SIZES = (64, 128, 256)


@dataclass
class EpisodeConfig:
    negative_ratio: float = 1.0
    jitter: float = 0.2
    flip: bool = True
    augment: bool = True
    query_size: int = 64
    train_split: str = "base"  # "base" or "all"

    def __post_init__(self):
        if self.negative_ratio < 0:
            raise ConfigError("negative_ratio must be >= 0")
        if not 0 <= self.jitter < 1:
            raise ConfigError("jitter must lie in [0, 1)")
        if self.train_split not in ("base", "all"):
            raise ConfigError("train_split must be 'base' or 'all'")


@dataclass
class SupportRow:
    image: np.ndarray  # [3, 128, 128] in [0, 1]
    class_id: int | None = None
    is_negative: bool = False
    is_null: bool = False
    source: int | None = None  # annotation id the crop came from


@dataclass
class SupportSet:
    rows: list

    def __post_init__(self):
        nulls = [r for r in self.rows if r.is_null]
        if len(nulls) != 1:
            raise ConfigError(f"a support set needs exactly one null row, got {len(nulls)}")

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def images(self) -> np.ndarray:
        return np.stack([r.image for r in self.rows])

    @property
    def null_index(self) -> int:
        return next(i for i, r in enumerate(self.rows) if r.is_null)

    def position_to_class(self) -> list:
        """Class id per position; None for the null row (and negatives)."""
        return [None if (r.is_null or r.is_negative) else r.class_id for r in self.rows]


@dataclass(frozen=True)
class Target:
    position: int
    box: BoundingBox  # center format, normalized to the query image


@dataclass
class Episode:
    query_id: int
    query_image: np.ndarray  # [3, H', W']
    support: SupportSet
    targets: list
    meta: dict = field(default_factory=dict)

    def manifest_line(self) -> str:
        """One JSON line describing the episode, enough to rebuild it."""
        rows = [{"class_id": r.class_id, "negative": r.is_negative, "null": r.is_null, "source": r.source}
                for r in self.support.rows]
        targets = [{"position": t.position, "box": list(t.box.values)} for t in self.targets]
        return json.dumps({"query_id": self.query_id, "support": rows, "null_index": self.support.null_index,
                           "targets": targets, **self.meta}, sort_keys=True)


def episode_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for episode `index`: workers derive it from (seed, index)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def null_image() -> np.ndarray:
    return np.zeros((3, SUPPORT_SIZE, SUPPORT_SIZE))


def crop_annotation(dataset: Dataset, ann_id: int) -> np.ndarray:
    ann = dataset.annotations[ann_id]
    patch = crop(dataset.image(ann.image_id), ann.bbox.values)
    return resize_bilinear(patch, SUPPORT_SIZE, SUPPORT_SIZE)


def crop_support(dataset: Dataset, class_id: int, rng: np.random.Generator, exclude_images=()) -> tuple:
    """Crop a uniformly drawn annotation of `class_id`; returns (image, ann_id)."""
    excluded = set(exclude_images)
    pool = [a for a in dataset.annotations_of_class(class_id) if a.image_id not in excluded]
    if not pool:
        raise SamplingError(f"no annotation of class {class_id} available")
    ann = pool[int(rng.integers(len(pool)))]
    return crop_annotation(dataset, ann.id), ann.id


def augment(image: np.ndarray, rng: np.random.Generator, cfg: EpisodeConfig) -> np.ndarray:
    """Random horizontal flip (p=0.5) and per-channel brightness jitter."""
    out = image
    if cfg.flip and rng.random() < 0.5:
        out = out[:, :, ::-1]
    if cfg.jitter > 0:
        scale = rng.uniform(1 - cfg.jitter, 1 + cfg.jitter, size=(out.shape[0], 1, 1))
        out = np.clip(out * scale, 0.0, 1.0)
    return np.ascontiguousarray(out)


def multiscale_support(image: np.ndarray) -> list:
    """Resize to 64, 128 and 256 squares, then each back to 128x128."""
    return [resize_bilinear(resize_bilinear(image, s, s), SUPPORT_SIZE, SUPPORT_SIZE) for s in MULTISCALE_SIZES]


def prepare_query(dataset: Dataset, image_id: int, size: int) -> np.ndarray:
    return resize_bilinear(dataset.image(image_id), size, size)


def normalized_box(dataset: Dataset, ann) -> BoundingBox:
    info = dataset.images[ann.image_id]
    return convert(ann.bbox, BoxFormat.CENTER_NORM, (info.width, info.height))


def sample_training_episode(dataset: Dataset, query_image_id: int, rng: np.random.Generator,
                            cfg: EpisodeConfig | None = None) -> Episode:
    """Build one training episode around a query image.

    One positive crop per training class present in the query (taken from a
    different image), round(negative_ratio * positives) negatives cropped from
    training classes absent from the query, and the null row; rows are shuffled.
    """
    cfg = cfg or EpisodeConfig()
    pool = set(dataset.classes(cfg.train_split))
    anns = [a for a in dataset.annotations_of_image(query_image_id) if a.category_id in pool]
    present = sorted({a.category_id for a in anns})
    if not present:
        raise SamplingError(f"image {query_image_id} has no training-class annotation")

    rows = []
    for cid in present:
        img, src = crop_support(dataset, cid, rng, exclude_images=(query_image_id,))
        rows.append(SupportRow(augment(img, rng, cfg) if cfg.augment else img, cid, source=src))
    absent = sorted(c for c in pool - set(present) if dataset.annotations_of_class(c))
    n_neg = int(round(cfg.negative_ratio * len(present))) if absent else 0
    for _ in range(n_neg):
        cid = absent[int(rng.integers(len(absent)))]
        img, src = crop_support(dataset, cid, rng, exclude_images=(query_image_id,))
        rows.append(SupportRow(augment(img, rng, cfg) if cfg.augment else img, cid, is_negative=True, source=src))
    rows.append(SupportRow(null_image(), is_null=True))

    order = rng.permutation(len(rows))
    rows = [rows[i] for i in order]
    position = {r.class_id: i for i, r in enumerate(rows) if not (r.is_null or r.is_negative)}
    targets = [Target(position[a.category_id], normalized_box(dataset, a)) for a in anns]
    return Episode(query_image_id, prepare_query(dataset, query_image_id, cfg.query_size),
                   SupportSet(rows), targets)


def build_test_support(class_to_shot_images: dict, sources: dict | None = None) -> SupportSet:
    """K rows per class in sorted class order, followed by the null row."""
    if not class_to_shot_images:
        raise ConfigError("the test support map is empty")
    rows = []
    for cid in sorted(class_to_shot_images):
        shots = class_to_shot_images[cid]
        if len(shots) < 1:
            raise ConfigError(f"class {cid} has no shots")
        for k, img in enumerate(shots):
            img = np.asarray(img, dtype=np.float64)
            if img.shape[1:] != (SUPPORT_SIZE, SUPPORT_SIZE):
                img = resize_bilinear(img, SUPPORT_SIZE, SUPPORT_SIZE)
            src = None if sources is None else sources[cid][k]
            rows.append(SupportRow(img, cid, source=src))
    rows.append(SupportRow(null_image(), is_null=True))
    return SupportSet(rows)
