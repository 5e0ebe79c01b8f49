"""Feature enhancer: bi-directional cross-attention, deformable multi-scale
self-attention and feed-forward blocks over query tokens and support rows."""
from __future__ import annotations

import math

import numpy as np

from tide.backbone import QueryFeatures, SupportFeatures
from tide.config import RunConfig
from tide.errors import DimError
from tide.numerics import tensor as T
from tide.numerics.nn import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, merge_heads, split_heads
from tide.numerics.tensor import Tensor


class BiAttention(Module):
    """Query tokens and support rows attend to each other through one shared
    logit matrix: rows softmax over supports for the tokens, columns softmax
    over tokens for the supports."""

    def __init__(self, rng, d: int, heads: int, enabled: bool = True):
        self._heads = heads
        self._enabled = enabled
        self.ln_z = LayerNorm(d)
        self.ln_s = LayerNorm(d)
        self.w_q = Linear(rng, d, d)
        self.w_k = Linear(rng, d, d)
        self.w_v = Linear(rng, d, d)  # support values flowing into tokens
        self.w_v_rev = Linear(rng, d, d)  # token values flowing into supports
        self.out_z = Linear(rng, d, d)
        self.out_s = Linear(rng, d, d)

    def __call__(self, z: Tensor, s: Tensor, record: list | None = None):
        if not self._enabled:
            return z, s
        if z.shape[-1] != s.shape[-1]:
            raise DimError("token and support dims differ")
        zn, sn = self.ln_z(z), self.ln_s(s)
        dh = z.shape[-1] // self._heads
        logits = T.matmul(split_heads(self.w_q(zn), self._heads),
                          T.swapaxes(split_heads(self.w_k(sn), self._heads), -1, -2)) * (1.0 / math.sqrt(dh))
        to_support = T.softmax(logits, axis=-1)  # [H, n_tok, m]
        to_tokens = T.softmax(T.swapaxes(logits, -1, -2), axis=-1)  # [H, m, n_tok]
        if record is not None:
            record.append(to_support.data.mean(axis=0))
        z_new = z + self.out_z(merge_heads(T.matmul(to_support, split_heads(self.w_v(sn), self._heads))))
        s_new = s + self.out_s(merge_heads(T.matmul(to_tokens, split_heads(self.w_v_rev(zn), self._heads))))
        return z_new, s_new


def reference_points(shapes) -> np.ndarray:
    """Normalized (x, y) cell centers of every token, levels concatenated."""
    pts = []
    for h, w in shapes:
        ys, xs = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
        pts.append(np.stack([xs.reshape(-1), ys.reshape(-1)], axis=1))
    return np.concatenate(pts, axis=0)


class DeformableAttention(Module):
    """Each token samples K points per head and level around its reference
    point and mixes them with softmax weights over levels x points."""

    def __init__(self, rng, d: int, heads: int, n_levels: int, n_points: int):
        self._heads, self._levels, self._points = heads, n_levels, n_points
        self.offsets = Linear(rng, d, heads * n_levels * n_points * 2, zero=True)
        self.weights = Linear(rng, d, heads * n_levels * n_points)
        self.value = Linear(rng, d, d)
        self.out = Linear(rng, d, d)

    def sampling(self, query: Tensor, shapes):
        """Sampling locations [T, H, L, K, 2] (clamped to [0,1]) and weights [T, H, L*K]."""
        n = query.shape[0]
        H, L, K = self._heads, self._levels, self._points
        ref = reference_points(shapes)
        scale = np.array([[w, h] for h, w in shapes], dtype=np.float64)  # offsets are in level-cell units
        off = self.offsets(query).reshape(n, H, L, K, 2)
        loc = Tensor(ref[:, None, None, None, :]) + off / Tensor(scale[None, None, :, None, :])
        attn = T.softmax(self.weights(query).reshape(n, H, L * K), axis=-1)
        return T.clip(loc, 0.0, 1.0), attn

    def __call__(self, query: Tensor, value_in: Tensor, shapes) -> Tensor:
        if len(shapes) != self._levels:
            raise DimError(f"expected {self._levels} level shapes, got {len(shapes)}")
        n, d = value_in.shape
        if sum(h * w for h, w in shapes) != n:
            raise DimError("level grid shapes do not cover the token sequence")
        H, K = self._heads, self._points
        dh = d // H
        loc, attn = self.sampling(query, shapes)
        values = self.value(value_in)
        start, total = 0, None
        for lvl, (h, w) in enumerate(shapes):
            v = values[start:start + h * w].reshape(h, w, H, dh)
            v = T.transpose(v, (2, 0, 1, 3))  # [H, h, w, dh]
            pts = T.transpose(loc[:, :, lvl], (1, 0, 2, 3)).reshape(H, n * K, 2)
            sampled = T.bilinear_sample(v, pts).reshape(H, n, K, dh)
            wts = T.transpose(attn[:, :, lvl * K:(lvl + 1) * K], (1, 0, 2)).reshape(H, n, K, 1)
            part = (sampled * wts).sum(axis=2)  # [H, n, dh]
            total = part if total is None else total + part
            start += h * w
        return self.out(merge_heads(total))


class FusionLayer(Module):
    def __init__(self, rng, cfg: RunConfig):
        d = cfg.d
        self.bmha = BiAttention(rng, d, cfg.heads, enabled=cfg.enable_bmha)
        self.ln_z2 = LayerNorm(d)
        self.ln_s2 = LayerNorm(d)
        self.dmsa = DeformableAttention(rng, d, cfg.heads, cfg.query_levels, cfg.dmsa_points)
        self.support_attn = MultiHeadAttention(rng, d, cfg.heads)
        self.ln_z3 = LayerNorm(d)
        self.ln_s3 = LayerNorm(d)
        self.ffn_z = FeedForward(rng, d, cfg.ffn_hidden)
        self.ffn_s = FeedForward(rng, d, cfg.ffn_hidden)

    def deformable(self, z: Tensor, s: Tensor, pos: np.ndarray, shapes):
        zn = self.ln_z2(z)
        z = z + self.dmsa(zn + Tensor(pos), zn, shapes)
        sn = self.ln_s2(s)
        return z, s + self.support_attn(sn, sn, sn)

    def feed_forward(self, z: Tensor, s: Tensor):
        return z + self.ffn_z(self.ln_z3(z)), s + self.ffn_s(self.ln_s3(s))

    def __call__(self, z, s, pos, shapes, record=None):
        z, s = self.bmha(z, s, record)
        z, s = self.deformable(z, s, pos, shapes)
        return self.feed_forward(z, s)


class Fusion(Module):
    def __init__(self, rng, cfg: RunConfig):
        self.layers = [FusionLayer(rng, cfg) for _ in range(cfg.fusion_layers)]

    def __call__(self, qf: QueryFeatures, sf: SupportFeatures, record: list | None = None):
        """Returns (enhanced tokens [T, d], enhanced support rows [m, d]); tokens of all levels are concatenated."""
        z = T.concat([lv.tokens for lv in qf.levels], axis=0)
        s = sf.rows
        if z.shape[-1] != s.shape[-1]:
            raise DimError("query and support feature dims differ")
        if sf.pos is not None:
            s = s + Tensor(sf.pos)
        pos = np.concatenate(qf.pos, axis=0)
        for layer in self.layers:
            z, s = layer(z, s, pos, qf.shapes, record)
        return z, s

