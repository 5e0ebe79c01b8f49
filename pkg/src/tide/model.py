"""The assembled detector."""
from __future__ import annotations

import numpy as np

from tide.backbone import QueryEncoder, SupportEncoder, SupportFeatures, encode_support
from tide.config import RunConfig
from tide.data.episodes import SupportSet
from tide.fusion import Fusion
from tide.head import (BoxHead, Decoder, DetectionSet, anchor_logits, classify, classify_binary, select_queries,
                       token_anchors)
from tide.numerics.nn import Linear, Module, Parameter
from tide.numerics.tensor import no_grad


class TideModel(Module):
    def __init__(self, cfg: RunConfig, rng: np.random.Generator | None = None):
        cfg.validate()
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self._cfg = cfg
        self.query_encoder = QueryEncoder(rng, cfg)
        self.support_encoder = SupportEncoder(rng, cfg)
        self.fusion = Fusion(rng, cfg)
        self.queries = Parameter(rng.normal(0.0, 1.0, size=(cfg.num_queries - cfg.num_selected, cfg.d)))
        self.decoder = Decoder(rng, cfg)
        if cfg.enable_dcc:
            self.class_proj = [Linear(rng, cfg.d, cfg.d, bias=False) for _ in range(cfg.decoder_layers)]
        else:
            self.binary_head = [Linear(rng, cfg.d, 1) for _ in range(cfg.decoder_layers)]
        self.box_head = BoxHead(rng, cfg.d, cfg.box_layers, zero_last=cfg.anchor_boxes)
        self.assign_names()

    @property
    def cfg(self) -> RunConfig:
        return self._cfg

    def encode_support(self, images: np.ndarray) -> SupportFeatures:
        return encode_support(self.support_encoder, images, self._cfg.use_multiscale, self._cfg.support_pos_embed)

    def forward(self, query_image: np.ndarray, support_images: np.ndarray | None, null_index: int,
                support_features: SupportFeatures | None = None, record: list | None = None) -> DetectionSet:
        """One pass from pixels (or precomputed support rows) to a DetectionSet.

        `record`, when given, collects each fusion layer's token-to-support
        attention ([T, m] head-averaged) for visualization.
        """
        cfg = self._cfg
        qf = self.query_encoder(query_image)
        sf = support_features if support_features is not None else self.encode_support(support_images)
        tokens, support = self.fusion(qf, sf, record)
        guide = sf.rows if cfg.select_with_raw_support else support
        oq = select_queries(tokens, guide, cfg.num_selected, cfg.num_queries, self.queries)
        m = support.shape[0]
        offsets = anchor_logits(token_anchors(qf.shapes), oq.indices, cfg.num_queries) if cfg.anchor_boxes else None
        layers = []
        for i, state in enumerate(self.decoder(oq.q, tokens, support)):
            if cfg.enable_dcc:
                log_probs = classify(state, support, self.class_proj[i])
            else:
                log_probs = classify_binary(state, self.binary_head[i], m, null_index)
            layers.append((log_probs, self.box_head(state, offsets)))
        return DetectionSet(layers[-1][0], layers[-1][1], layers, oq.indices)

    def predict(self, query_image: np.ndarray, support: SupportSet) -> DetectionSet:
        with no_grad():
            return self.forward(query_image, support.images, support.null_index)
