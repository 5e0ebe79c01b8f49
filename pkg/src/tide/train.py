"""Optimizer, dataset set-up from a RunConfig and the episodic training loop."""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from tide.config import RunConfig
from tide.data import EpisodeConfig, episode_rng, generate_synthetic, load_coco, sample_training_episode
from tide.data.coco import Dataset
from tide.errors import ConfigError, NumericError
from tide.loss import episode_loss
from tide.model import TideModel


class AdamW:
    """Adam with weight decay applied directly to the weights (not the gradient).

    Only matrices decay; biases, norms and the learnable query rows of rank 1
    are left alone.
    """

    def __init__(self, params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4, grad_clip: float = 0.0):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.weight_decay, self.grad_clip = weight_decay, grad_clip
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> float:
        """Apply one update from the accumulated gradients; returns the global grad norm."""
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
        if not math.isfinite(norm):
            raise NumericError("non-finite gradient")
        if self.grad_clip > 0 and norm > self.grad_clip:
            grads = [g * (self.grad_clip / norm) for g in grads]
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            value = p.data * (1 - self.lr * self.weight_decay) if p.data.ndim >= 2 else p.data
            p.assign(value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps))
        return norm


def episode_config(cfg: RunConfig) -> EpisodeConfig:
    return EpisodeConfig(negative_ratio=cfg.negative_ratio, jitter=cfg.jitter, flip=cfg.flip, augment=cfg.augment,
                         query_size=cfg.query_size, train_split=cfg.train_split)


def dataset_from_config(cfg: RunConfig, work_dir=None) -> Dataset:
    """Load the configured dataset; the synthetic one is rendered on demand.

    Synthetic images go to `image_root` when set, else `<work_dir>/synthetic`.
    All synthetic classes are novel unless `novel_classes` names a subset.
    """
    if cfg.dataset == "coco":
        if not cfg.annotations:
            raise ConfigError("annotations: required for the coco dataset")
        return load_coco(cfg.annotations, cfg.image_root or Path(cfg.annotations).parent,
                         cfg.novel_class_names(), cfg.min_side)
    classes = tuple(c.strip() for c in cfg.synthetic_classes.split(",") if c.strip())
    root = Path(cfg.image_root) if cfg.image_root else Path(work_dir or ".") / "synthetic"
    ann = generate_synthetic(root, n_images=cfg.synthetic_images, size=cfg.query_size, classes=classes,
                             seed=cfg.synthetic_seed)
    return load_coco(ann, root, cfg.novel_class_names() or list(classes), min_side=min(cfg.min_side, cfg.query_size))


def training_images(dataset: Dataset, split: str) -> list:
    pool = set(dataset.classes(split))
    ids = sorted({a.image_id for a in dataset.annotations.values() if a.category_id in pool})
    if not ids:
        raise ConfigError(f"train_split: no image holds a {split!r} class")
    return ids


def train(model: TideModel, dataset: Dataset, cfg: RunConfig, log_path=None, progress=None) -> list:
    """Run `cfg.steps` episodic updates; returns the logged records.

    Episode `s` is drawn from its own stream derived from (seed, s), so runs
    are reproducible step by step. Records go to `log_path` as JSON lines.
    """
    ecfg = episode_config(cfg)
    pool = training_images(dataset, cfg.train_split)
    opt = AdamW(model.parameters(), cfg.lr, weight_decay=cfg.weight_decay, grad_clip=cfg.grad_clip)
    records = []
    log = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for step in range(cfg.steps):
            opt.lr = cfg.lr * (0.1 if 0 < cfg.lr_drop <= step else 1.0)
            rng = episode_rng(cfg.seed, step)
            episode = sample_training_episode(dataset, pool[int(rng.integers(len(pool)))], rng, ecfg)
            model.zero_grads()
            dets = model.forward(episode.query_image, episode.support.images, episode.support.null_index)
            loss, _ = episode_loss(dets, episode, cfg)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at step {step}")
            loss.backward()
            grad_norm = opt.step()
            if step % cfg.log_every == 0 or step == cfg.steps - 1:
                rec = {"step": step, "loss": value, "grad_norm": grad_norm, "query_id": episode.query_id,
                       "targets": len(episode.targets)}
                records.append(rec)
                if log:
                    log.write(json.dumps(rec, sort_keys=True) + "\n")
                    log.flush()
                if progress:
                    progress(rec)
    finally:
        if log:
            log.close()
    return records
