"""Multimodal meme sentiment classification with local explanations."""

from .dataset import (
    CLASS_NAMES,
    DatasetManifest,
    DatasetStats,
    Label,
    Sample,
    SplitResult,
    compute_stats,
    load_manifest,
    read_manifest,
    stratified_split,
    top_k_words,
    validate_manifest,
)
from .preprocess import PreprocessConfig, normalize_caption, prepare_image

__version__ = "0.1.0"

__all__ = [
    "CLASS_NAMES",
    "DatasetManifest",
    "DatasetStats",
    "Label",
    "PreprocessConfig",
    "Sample",
    "SplitResult",
    "compute_stats",
    "load_manifest",
    "normalize_caption",
    "prepare_image",
    "read_manifest",
    "stratified_split",
    "top_k_words",
    "validate_manifest",
]
