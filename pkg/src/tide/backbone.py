"""Toy asymmetric encoders for query images and support crops.

The query side is a patch-attention pyramid (three levels, 2x merging between
levels); the support side is a flat patch transformer mean-pooled to a single
vector per crop. The two share no parameters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from tide import checkpoint
from tide.config import RunConfig
from tide.data.episodes import SUPPORT_SIZE, multiscale_support
from tide.errors import ConfigError, DimError
from tide.numerics import tensor as T
from tide.numerics.nn import EncoderBlock, LayerNorm, Linear, Module
from tide.numerics.tensor import Tensor


@dataclass
class Level:
    tokens: Tensor  # [h * w, d]
    h: int
    w: int


@dataclass
class QueryFeatures:
    levels: list
    pos: list  # per level [h * w, d] arrays

    @property
    def shapes(self) -> list:
        return [(lv.h, lv.w) for lv in self.levels]


@dataclass
class SupportFeatures:
    rows: Tensor  # [m, d]
    pos: np.ndarray | None = None

    def __post_init__(self):
        if self.pos is not None and self.pos.shape != self.rows.shape:
            raise DimError("support positional embedding shape differs from rows")


def sine_positional_embedding(h: int, w: int, d: int, temperature: float = 10000.0) -> np.ndarray:
    """Fixed 2-D sine/cosine embedding, [h * w, d]; first half encodes y, second x.

    Positions are cell centers normalized to (0, 2*pi).
    """
    if d % 4:
        raise ConfigError(f"positional embedding dim {d} is not divisible by 4")
    if h < 1 or w < 1:
        raise DimError("positional embedding needs a non-empty grid")
    half = d // 2
    dim_t = temperature ** (2 * (np.arange(half) // 2) / half)
    ys = (np.arange(h) + 0.5) / h * 2 * math.pi
    xs = (np.arange(w) + 0.5) / w * 2 * math.pi

    def encode(v):
        arg = v[:, None] / dim_t
        out = np.empty_like(arg)
        out[:, 0::2] = np.sin(arg[:, 0::2])
        out[:, 1::2] = np.cos(arg[:, 1::2])
        return out

    ey, ex = encode(ys), encode(xs)
    return np.concatenate([np.repeat(ey, w, axis=0), np.tile(ex, (h, 1))], axis=1)


def patchify(images: np.ndarray, patch: int) -> tuple:
    """[..., 3, H, W] -> ([..., (H//p)*(W//p), 3*p*p], H//p, W//p); remainders are dropped."""
    *lead, c, h, w = images.shape
    gh, gw = h // patch, w // patch
    if gh < 1 or gw < 1:
        raise DimError(f"image {h}x{w} is smaller than the patch size {patch}")
    x = images[..., : gh * patch, : gw * patch].reshape(*lead, c, gh, patch, gw, patch)
    nl = len(lead)
    x = x.transpose(*range(nl), nl + 1, nl + 3, nl, nl + 2, nl + 4)
    return x.reshape(*lead, gh * gw, c * patch * patch), gh, gw


def merge_index(h: int, w: int) -> tuple:
    """Gather table for 2x2 merging; missing neighbours point at row h*w (a zero row)."""
    oh, ow = -(-h // 2), -(-w // 2)
    idx = np.full((oh * ow, 4), h * w, dtype=np.int64)
    for i in range(oh):
        for j in range(ow):
            for k, (di, dj) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
                y, x = 2 * i + di, 2 * j + dj
                if y < h and x < w:
                    idx[i * ow + j, k] = y * w + x
    return idx, oh, ow


class QueryEncoder(Module):
    def __init__(self, rng, cfg: RunConfig):
        d = cfg.d
        self._patch = cfg.query_patch
        self._d = d
        self.embed = Linear(rng, 3 * cfg.query_patch ** 2, d)
        self.merges = [Linear(rng, 4 * d, d) for _ in range(cfg.query_levels - 1)]
        self.levels = [[EncoderBlock(rng, d, cfg.heads, cfg.ffn_hidden) for _ in range(cfg.query_blocks)]
                       for _ in range(cfg.query_levels)]
        self.norms = [LayerNorm(d) for _ in range(cfg.query_levels)]

    def named_parameters(self, prefix: str = ""):
        yield from self.embed.named_parameters(prefix + "embed.")
        for i, m in enumerate(self.merges):
            yield from m.named_parameters(f"{prefix}merge{i}.")
        for i, blocks in enumerate(self.levels):
            for j, blk in enumerate(blocks):
                yield from blk.named_parameters(f"{prefix}level{i}.block{j}.")
            yield from self.norms[i].named_parameters(f"{prefix}level{i}.norm.")

    def __call__(self, image: np.ndarray) -> QueryFeatures:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[0] != 3:
            raise DimError(f"query image must be [3, H, W], got {image.shape}")
        patches, h, w = patchify(image, self._patch)
        x = self.embed(Tensor(patches))
        levels, pos = [], []
        for i, blocks in enumerate(self.levels):
            if i:
                idx, h, w = merge_index(h, w)
                padded = T.concat([x, Tensor(np.zeros((1, self._d)))], axis=0)
                x = self.merges[i - 1](T.take_rows(padded, idx.reshape(-1)).reshape(h * w, 4 * self._d))
            p = sine_positional_embedding(h, w, self._d)
            x = x + Tensor(p)
            for blk in blocks:
                x = blk(x)
            levels.append(Level(self.norms[i](x), h, w))
            pos.append(p)
        return QueryFeatures(levels, pos)


class SupportEncoder(Module):
    def __init__(self, rng, cfg: RunConfig):
        d = cfg.d
        self._patch = cfg.support_patch
        self._d = d
        self.embed = Linear(rng, 3 * cfg.support_patch ** 2, d)
        self.blocks = [EncoderBlock(rng, d, cfg.heads, cfg.ffn_hidden) for _ in range(cfg.support_blocks)]
        self.norm = LayerNorm(d)
        g = SUPPORT_SIZE // cfg.support_patch
        self._pos = sine_positional_embedding(g, g, d)

    def encode(self, images: np.ndarray) -> Tensor:
        """[n, 3, 128, 128] -> [n, d]."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[1:] != (3, SUPPORT_SIZE, SUPPORT_SIZE):
            raise DimError(f"support images must be [m, 3, {SUPPORT_SIZE}, {SUPPORT_SIZE}], got {images.shape}")
        patches, _, _ = patchify(images, self._patch)
        x = self.embed(Tensor(patches)) + Tensor(self._pos)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x).mean(axis=1)

    def __call__(self, images: np.ndarray, use_multiscale: bool = False) -> Tensor:
        images = np.asarray(images, dtype=np.float64)
        if not use_multiscale:
            return self.encode(images)
        m = images.shape[0]
        variants = np.stack([np.stack(multiscale_support(img)) for img in images])  # [m, 3, 3, 128, 128]
        enc = self.encode(variants.reshape(m * 3, 3, SUPPORT_SIZE, SUPPORT_SIZE))
        return enc.reshape(m, 3, self._d).mean(axis=1)


def support_position_embedding(m: int, d: int) -> np.ndarray:
    """Row-position embedding for support rows: the 1 x m grid case."""
    return sine_positional_embedding(1, m, d)


def encode_support(encoder: SupportEncoder, images: np.ndarray, use_multiscale: bool = False,
                   pos_embed: bool = False) -> SupportFeatures:
    rows = encoder(images, use_multiscale)
    return SupportFeatures(rows, support_position_embedding(rows.shape[0], rows.shape[1]) if pos_embed else None)


def save_support_embeddings(path, rows: np.ndarray) -> None:
    checkpoint.save(path, {"support_embeddings": np.asarray(rows, dtype=np.float64)})


def load_external_support_embeddings(path, d: int, pos_embed: bool = False) -> SupportFeatures:
    """Read precomputed support rows (record "support_embeddings", shape [m, d])."""
    records = checkpoint.load(path)
    if "support_embeddings" not in records:
        raise ConfigError("embedding file has no 'support_embeddings' record")
    rows = records["support_embeddings"]
    if rows.ndim != 2 or rows.shape[1] != d:
        raise ConfigError(f"support embeddings have shape {rows.shape}, expected [m, {d}]")
    if rows.shape[0] == 0:
        raise ConfigError("support embeddings are empty")
    return SupportFeatures(Tensor(rows), support_position_embedding(rows.shape[0], d) if pos_embed else None)
