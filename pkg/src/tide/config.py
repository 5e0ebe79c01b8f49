"""Run configuration: defaults, key=value files and command-line overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from tide.errors import ConfigError


@dataclass
class RunConfig:
    # architecture
    d: int = 64
    heads: int = 4
    fusion_layers: int = 6
    decoder_layers: int = 6
    num_queries: int = 32
    num_selected: int = 16
    dmsa_points: int = 4
    ffn_dim: int = 0  # 0 means 4 * d
    query_patch: int = 8
    support_patch: int = 16
    query_levels: int = 3
    query_blocks: int = 2
    support_blocks: int = 3
    box_layers: int = 6
    # ablations and interpretation flags
    enable_bmha: bool = True
    enable_dcc: bool = True
    support_pos_embed: bool = True
    use_multiscale: bool = False
    select_with_raw_support: bool = False
    anchor_boxes: bool = True  # boxes regressed around the selected token's cell
    # loss
    aux_loss: bool = True
    lambda_cls: float = 1.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    null_weight: float = 1.0
    # data
    dataset: str = "synthetic"  # "synthetic" or "coco"
    annotations: str = ""
    image_root: str = ""
    novel_classes: str = ""  # comma separated
    train_split: str = "base"
    negative_ratio: float = 1.0
    jitter: float = 0.2
    flip: bool = True
    augment: bool = True
    query_size: int = 64
    min_side: int = 32
    synthetic_images: int = 16
    synthetic_classes: str = "circle,square"
    synthetic_seed: int = 0
    # optimization
    seed: int = 0
    lr: float = 1e-4
    weight_decay: float = 1e-4
    grad_clip: float = 0.0
    lr_drop: int = 0  # step after which lr is divided by 10; 0 keeps it constant
    steps: int = 1000
    log_every: int = 10
    # evaluation
    ways: int = 2
    shots: int = 1
    eval_seeds: str = "0"
    score_threshold: float = 0.0
    score_aggregation: str = "sum"
    nms: bool = False
    nms_iou: float = 0.7

    @property
    def ffn_hidden(self) -> int:
        return self.ffn_dim or 4 * self.d

    @property
    def lambdas(self) -> tuple:
        return (self.lambda_cls, self.lambda_l1, self.lambda_giou)

    def novel_class_names(self) -> list:
        return [c.strip() for c in self.novel_classes.split(",") if c.strip()]

    def seed_list(self) -> list:
        try:
            return [int(s) for s in self.eval_seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError("eval_seeds: expected comma-separated integers") from None

    def validate(self) -> "RunConfig":
        def need(cond, field, msg):
            if not cond:
                raise ConfigError(f"{field}: {msg}")

        need(self.d > 0, "d", "must be positive")
        need(self.heads > 0 and self.d % self.heads == 0, "heads", f"must divide d={self.d}")
        need(self.d % 4 == 0, "d", "must be divisible by 4 for sine positional embeddings")
        need(self.fusion_layers >= 0, "fusion_layers", "must be >= 0")
        need(self.decoder_layers >= 1, "decoder_layers", "must be >= 1")
        need(self.num_queries >= 1, "num_queries", "must be >= 1")
        need(0 <= self.num_selected <= self.num_queries, "num_selected", "must lie in [0, num_queries]")
        need(self.dmsa_points >= 1, "dmsa_points", "must be >= 1")
        need(self.query_levels >= 2, "query_levels", "must be >= 2")
        need(self.box_layers >= 1, "box_layers", "must be >= 1")
        need(self.dataset in ("synthetic", "coco"), "dataset", "must be 'synthetic' or 'coco'")
        need(self.train_split in ("base", "all"), "train_split", "must be 'base' or 'all'")
        need(self.negative_ratio >= 0, "negative_ratio", "must be >= 0")
        need(0 <= self.jitter < 1, "jitter", "must lie in [0, 1)")
        need(self.query_size >= self.query_patch, "query_size", "must be >= query_patch")
        need(self.lr > 0, "lr", "must be positive")
        need(self.steps >= 0, "steps", "must be >= 0")
        need(self.lr_drop >= 0, "lr_drop", "must be >= 0")
        need(self.log_every >= 1, "log_every", "must be >= 1")
        need(self.ways >= 1, "ways", "must be >= 1")
        need(self.shots >= 1, "shots", "must be >= 1")
        need(self.score_aggregation in ("sum", "max"), "score_aggregation", "must be 'sum' or 'max'")
        need(self.null_weight >= 0, "null_weight", "must be >= 0")
        self.seed_list()
        return self


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, text: str):
    if key not in _FIELDS:
        raise ConfigError(f"{key}: unknown configuration key")
    kind = type(getattr(RunConfig(), key))
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None


def parse_lines(text: str) -> dict:
    """Parse flat `key=value` lines; blank lines and `#` comments are ignored."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = _coerce(key.strip(), value)
    return out


def build_config(config_file=None, overrides=(), base: RunConfig | None = None) -> RunConfig:
    """Defaults < config file < `key=value` overrides."""
    values = dataclasses.asdict(base or RunConfig())
    if config_file:
        try:
            values.update(parse_lines(Path(config_file).read_text(encoding="utf-8")))
        except OSError as exc:
            raise ConfigError(f"config file: {exc}") from None
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, value = item.split("=", 1)
        values[key.strip()] = _coerce(key.strip(), value)
    return RunConfig(**values).validate()


def dump(cfg: RunConfig) -> str:
    lines = []
    for key, value in dataclasses.asdict(cfg).items():
        lines.append(f"{key}={str(value).lower() if isinstance(value, bool) else value}")
    return "\n".join(lines) + "\n"
