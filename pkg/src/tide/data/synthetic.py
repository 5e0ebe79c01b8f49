"""Colored-shape images with exact boxes, written as a COCO-style dataset."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from tide.data.images import save_image

SHAPES = ("circle", "square", "triangle")
# base RGB per shape; each instance is jittered around it
_COLORS = {"circle": (0.9, 0.25, 0.2), "square": (0.2, 0.45, 0.95), "triangle": (0.25, 0.85, 0.3)}


def _mask(shape: str, x: int, y: int, s: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if shape == "square":
        return (xx >= x) & (xx < x + s) & (yy >= y) & (yy < y + s)
    if shape == "circle":
        r = s / 2
        return (xx - (x + r)) ** 2 + (yy - (y + r)) ** 2 <= r * r
    # upright isosceles triangle inscribed in the s x s box
    rel_y = (yy - y) / s
    half = rel_y * s / 2
    cx = x + s / 2
    return (yy >= y) & (yy < y + s) & (xx >= cx - half) & (xx <= cx + half)


def render_image(rng: np.random.Generator, classes, size: int = 64, n_objects: int = 1, required=None):
    """Render one image; returns (pixels [3, H, W], [(class_index, (x, y, w, h))])."""
    bg = rng.uniform(0.1, 0.3)
    img = np.full((3, size, size), bg) + rng.normal(0, 0.02, size=(3, size, size))
    placed, objects = [], []
    picks = [] if required is None else [required]
    while len(picks) < n_objects:
        picks.append(int(rng.integers(len(classes))))
    for cls in picks:
        for _ in range(100):
            s = int(rng.integers(size // 5, size // 2.5))
            x, y = (int(v) for v in rng.integers(1, size - s - 1, size=2))
            if all(x + s + 2 <= px or px + ps + 2 <= x or y + s + 2 <= py or py + ps + 2 <= y
                   for px, py, ps in placed):
                break
        else:
            continue
        placed.append((x, y, s))
        color = np.clip(np.array(_COLORS[classes[cls]]) + rng.normal(0, 0.05, 3), 0, 1)
        m = _mask(classes[cls], x, y, s, size)
        img[:, m] = color[:, None]
        ys, xs = np.nonzero(m)
        objects.append((cls, (float(xs.min()), float(ys.min()), float(xs.max() + 1 - xs.min()),
                              float(ys.max() + 1 - ys.min()))))
    return np.clip(img, 0, 1), objects


def generate_synthetic(out_dir, n_images: int = 16, size: int = 64, classes=("circle", "square"),
                       seed: int = 0, max_objects: int = 2) -> Path:
    """Write `n_images` PNGs plus annotations.json; every class appears in >= 2 images."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
    images, annotations = [], []
    for i in range(n_images):
        n_obj = int(rng.integers(1, max_objects + 1))
        pixels, objects = render_image(rng, classes, size, n_obj, required=i % len(classes))
        name = f"img_{i:04d}.png"
        save_image(out / name, pixels)
        images.append({"id": i + 1, "file_name": name, "width": size, "height": size})
        for cls, bbox in objects:
            annotations.append({"id": len(annotations) + 1, "image_id": i + 1, "category_id": cls + 1,
                                "bbox": list(bbox), "area": bbox[2] * bbox[3], "iscrowd": 0})
    cats = [{"id": i + 1, "name": c} for i, c in enumerate(classes)]
    path = out / "annotations.json"
    path.write_text(json.dumps({"images": images, "annotations": annotations, "categories": cats}, indent=1))
    return path
