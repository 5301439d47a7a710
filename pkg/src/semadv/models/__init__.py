from .adapters import (
    TAPS,
    Captioner,
    Classifier,
    Colorizer,
    FeatureExtractor,
    classify,
    classify_batch,
    colorize,
    cosine_distance,
    embed,
)
from .registry import load_model, registered_tags

__all__ = [
    "TAPS",
    "Captioner",
    "Classifier",
    "Colorizer",
    "FeatureExtractor",
    "classify",
    "classify_batch",
    "colorize",
    "cosine_distance",
    "embed",
    "load_model",
    "registered_tags",
]
