from tide.data.coco import Annotation, Dataset, ImageInfo, load_coco
from tide.data.episodes import (
    Episode,
    EpisodeConfig,
    SupportRow,
    SupportSet,
    Target,
    augment,
    build_test_support,
    crop_annotation,
    crop_support,
    episode_rng,
    multiscale_support,
    sample_training_episode,
)
from tide.data.synthetic import generate_synthetic

__all__ = [
    "Annotation", "Dataset", "ImageInfo", "load_coco", "Episode", "EpisodeConfig", "SupportRow",
    "SupportSet", "Target", "augment", "build_test_support", "crop_annotation", "crop_support",
    "episode_rng", "multiscale_support", "sample_training_episode", "generate_synthetic",
]
