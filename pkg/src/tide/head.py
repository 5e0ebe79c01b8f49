"""Support-guided query selection, the dual cross-attention decoder, the
support-position classifier and the box regressor."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from tide.config import RunConfig
from tide.errors import ConfigError, DimError
from tide.numerics import tensor as T
from tide.numerics.nn import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention
from tide.numerics.tensor import Tensor


@dataclass
class ObjectQueries:
    q: Tensor  # [N, d]
    k: int
    indices: list


@dataclass
class DetectionSet:
    """Fixed-size prediction set.

    `log_probs` [N, m] are log-distributions over support positions; `boxes`
    [N, 4] are center-format boxes in (0, 1). `layers` holds the per-decoder-
    layer (log_probs, boxes) pairs, the last of which is the top-level pair.
    """

    log_probs: Tensor
    boxes: Tensor
    layers: list = field(default_factory=list)
    selected: list = field(default_factory=list)

    @property
    def class_dist(self) -> np.ndarray:
        return np.exp(self.log_probs.data)

    def __len__(self) -> int:
        return self.boxes.shape[0]


def select_queries(tokens: Tensor, support, k: int, n_queries: int, learnable: Tensor) -> ObjectQueries:
    """Top-k tokens by their best similarity to any support row, then the
    learnable rows. Ties go to the lower token index."""
    n_tok = tokens.shape[0]
    if k > n_tok:
        raise ConfigError(f"cannot select {k} queries from {n_tok} tokens")
    if k > n_queries or learnable.shape[0] != n_queries - k:
        raise ConfigError(f"learnable rows {learnable.shape[0]} != num_queries {n_queries} - k {k}")
    s = support.data if isinstance(support, Tensor) else np.asarray(support)
    scores = (tokens.data @ s.T).max(axis=1)
    order = np.argsort(-scores, kind="stable")[:k]
    if k == 0:
        return ObjectQueries(learnable, 0, [])
    picked = T.take_rows(tokens, order)
    q = picked if k == n_queries else T.concat([picked, learnable], axis=0)
    return ObjectQueries(q, k, [int(i) for i in order])


class DecoderLayer(Module):
    def __init__(self, rng, d: int, heads: int, ffn_hidden: int):
        self.ln_self = LayerNorm(d)
        self.self_attn = MultiHeadAttention(rng, d, heads)
        self.ln_img_q = LayerNorm(d)
        self.ln_img_kv = LayerNorm(d)
        self.cross_img = MultiHeadAttention(rng, d, heads)
        self.ln_sup_q = LayerNorm(d)
        self.ln_sup_kv = LayerNorm(d)
        self.cross_sup = MultiHeadAttention(rng, d, heads)
        self.ln_ffn = LayerNorm(d)
        self.ffn = FeedForward(rng, d, ffn_hidden)

    def __call__(self, c: Tensor, tokens: Tensor, support: Tensor) -> Tensor:
        h = self.ln_self(c)
        c = c + self.self_attn(h, h, h)
        mem = self.ln_img_kv(tokens)
        c = c + self.cross_img(self.ln_img_q(c), mem, mem)
        mem = self.ln_sup_kv(support)
        c = c + self.cross_sup(self.ln_sup_q(c), mem, mem)
        return c + self.ffn(self.ln_ffn(c))


class Decoder(Module):
    def __init__(self, rng, cfg: RunConfig):
        self.layers = [DecoderLayer(rng, cfg.d, cfg.heads, cfg.ffn_hidden) for _ in range(cfg.decoder_layers)]

    def __call__(self, queries: Tensor, tokens: Tensor, support: Tensor) -> list:
        """All layer states; the input queries are not included."""
        if queries.shape[-1] != tokens.shape[-1] or tokens.shape[-1] != support.shape[-1]:
            raise DimError("decoder inputs differ in feature dim")
        states, c = [], queries
        for layer in self.layers:
            c = layer(c, tokens, support)
            states.append(c)
        return states


def classify(c: Tensor, support: Tensor, projection: Linear | None = None) -> Tensor:
    """Log-softmax over support positions of (projected c) . support^T."""
    if support.shape[0] == 0:
        raise ConfigError("classification needs at least one support row")
    if c.shape[-1] != support.shape[-1]:
        raise DimError("decoder state and support dims differ")
    emb = c if projection is None else projection(c)
    return T.log_softmax(T.matmul(emb, T.swapaxes(support, -1, -2)), axis=-1)


def classify_binary(c: Tensor, head: Linear, m: int, null_index: int) -> Tensor:
    """Target / non-target head laid out over support positions.

    The non-target mass sits on the null position; the target mass is split
    evenly across the other positions, so support identity carries no signal.
    """
    if m == 0:
        raise ConfigError("classification needs at least one support row")
    logit = head(c)  # [N, 1]
    if m == 1:
        return T.mul(logit, 0.0)
    mask = np.ones((1, m))
    mask[0, null_index] = 0.0
    pos = T.log_sigmoid(logit) - math.log(m - 1)
    neg = T.log_sigmoid(-logit)
    return pos * Tensor(mask) + neg * Tensor(1.0 - mask)


def token_anchors(shapes) -> np.ndarray:
    """Center-format box of every token's grid cell, levels concatenated."""
    out = []
    for h, w in shapes:
        ys, xs = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
        out.append(np.stack([xs.reshape(-1), ys.reshape(-1), np.full(h * w, 1.0 / w), np.full(h * w, 1.0 / h)], 1))
    return np.concatenate(out, axis=0)


def anchor_logits(anchors: np.ndarray, selected, n_queries: int) -> np.ndarray:
    """Inverse-sigmoid anchors for the selected token queries; learnable rows get 0 (a centered half-size box)."""
    out = np.zeros((n_queries, 4))
    if len(selected):
        a = np.clip(anchors[np.asarray(selected)], 1e-4, 1 - 1e-4)
        out[: len(selected)] = np.log(a / (1 - a))
    return out


class BoxHead(Module):
    """MLP with ReLUs, squashed into (0, 1) by a sigmoid.

    With `offsets` (logit-space anchors, [N, 4]) the MLP output is added
    before the sigmoid, so a zero output reproduces the anchor box.
    """

    def __init__(self, rng, d: int, n_layers: int = 6, zero_last: bool = False):
        self.layers = [Linear(rng, d, d) for _ in range(n_layers - 1)] + [Linear(rng, d, 4, zero=zero_last)]

    def __call__(self, c: Tensor, offsets: np.ndarray | None = None) -> Tensor:
        x = c
        for layer in self.layers[:-1]:
            x = T.relu(layer(x))
        x = self.layers[-1](x)
        return T.sigmoid(x if offsets is None else x + Tensor(offsets))
