"""Caption normalization and image standardization."""

from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Tuple

import numpy as np

TABLE_VERSION = "1"

# Characters dropped before canonical composition. Dropping them first keeps the
# pipeline idempotent: removing a joiner can expose a newly composable pair.
ZERO_WIDTH = "\u200b\u200c\u200d\u2060\ufeff\u00ad"

# Applied after NFC. Bengali nukta letters are composition exclusions, so NFC
# leaves them decomposed; the table folds them back to the single codepoint.
DEFAULT_TABLE: Mapping[str, str] = {
    "\u09a1\u09bc": "\u09dc",  # DDDHA
    "\u09a2\u09bc": "\u09dd",  # RHA
    "\u09af\u09bc": "\u09df",  # YYA
    "\u201c": '"',
    "\u201d": '"',
    "\u201e": '"',
    "\u00ab": '"',
    "\u00bb": '"',
    "\u2018": "'",
    "\u2019": "'",
    "\u201a": "'",
    "\u2032": "'",
    "\u2013": "-",
    "\u2014": "-",
    "\u2015": "-",
    "\u2212": "-",
    "\u2026": "...",
    "\uff01": "!",
    "\uff1f": "?",
    "\uff0c": ",",
    "\uff1a": ":",
    "\uff1b": ";",
    "\u0965": "\u0964\u0964",  # double danda as two dandas
}

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ImageDecodeError(OSError):
    def __init__(self, path, reason: str = ""):
        self.path = str(path)
        super().__init__(f"cannot decode image {self.path}" + (f": {reason}" if reason else ""))


@dataclass(frozen=True)
class PreprocessConfig:
    target_size: Tuple[int, int] = (224, 224)  # (width, height)
    normalization_table: Mapping[str, str] = field(default_factory=lambda: dict(DEFAULT_TABLE))
    pixel_mean: Tuple[float, float, float] = IMAGENET_MEAN
    pixel_std: Tuple[float, float, float] = IMAGENET_STD
    table_version: str = TABLE_VERSION

    def __post_init__(self):
        w, h = self.target_size
        if w <= 0 or h <= 0:
            raise ValueError(f"target_size must be positive, got {self.target_size}")
        if any(s <= 0 for s in self.pixel_std):
            raise ValueError("pixel_std must be positive")
        table = self.normalization_table
        for src, dst in table.items():
            if not src:
                raise ValueError("normalization table keys must be non-empty")
            # a target that itself contains a source would make normalization non-idempotent
            hit = next((k for k in table if k in dst), None)
            if hit is not None:
                raise ValueError(f"table target for {src!r} contains source {hit!r}")


DEFAULT_CONFIG = PreprocessConfig()

_UNICODE_ESCAPE = re.compile(r"\\u([0-9a-fA-F]{4})")


def _unescape(text: str) -> str:
    return _UNICODE_ESCAPE.sub(lambda m: chr(int(m.group(1), 16)), text)


def load_normalization_table(path) -> dict:
    """Read a substitution table: one ``source<TAB>target`` pair per line.

    ``\\uXXXX`` escapes are decoded, ``#`` starts a comment line and an empty
    target deletes the source sequence.
    """
    table = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if "\t" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'source<TAB>target'")
        src, dst = line.split("\t", 1)
        src = _unescape(src)
        if not src:
            raise ValueError(f"{path}:{lineno}: empty source sequence")
        table[src] = _unescape(dst)
    return table


def _table_pattern(table: Mapping[str, str]) -> Optional[re.Pattern]:
    if not table:
        return None
    keys = sorted(table, key=len, reverse=True)
    return re.compile("|".join(re.escape(k) for k in keys))


_pattern_cache: dict = {}


def _compiled(table: Mapping[str, str]):
    key = tuple(sorted(table.items()))
    pat = _pattern_cache.get(key)
    if pat is None:
        pat = _pattern_cache[key] = _table_pattern(table)
    return pat


def normalize_caption(text: str, config: PreprocessConfig = DEFAULT_CONFIG) -> str:
    """Canonicalize a caption.

    Zero-width characters are removed, NFC is applied, then the substitution
    table, and finally whitespace runs collapse to single spaces.
    """
    if not text:
        return ""
    text = text.translate({ord(c): None for c in ZERO_WIDTH})
    text = unicodedata.normalize("NFC", text)
    table = config.normalization_table
    pat = _compiled(table)
    if pat is not None:
        text = pat.sub(lambda m: table[m.group(0)], text)
    return " ".join(text.split())


def max_expansion(config: PreprocessConfig = DEFAULT_CONFIG) -> int:
    """Upper bound on output/input length ratio of `normalize_caption`."""
    table_ratio = max(
        (len(dst) / len(src) for src, dst in config.normalization_table.items()), default=1
    )
    # NFC alone can expand a single codepoint into at most three.
    return int(np.ceil(max(3, table_ratio)))


# ---------------------------------------------------------------------------- images


def load_rgb(image_path, size: Tuple[int, int] = (224, 224)) -> np.ndarray:
    """Decode to RGB, bilinearly resize to ``size`` (w, h); float32 HxWx3 in [0, 1]."""
    from PIL import Image

    try:
        with Image.open(image_path) as im:
            im = im.convert("RGB")
            if im.size != tuple(size):
                im = im.resize(tuple(size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32)
    except FileNotFoundError as exc:
        raise ImageDecodeError(image_path, "file not found") from exc
    except Exception as exc:
        raise ImageDecodeError(image_path, str(exc)) from exc
    return arr / 255.0


def standardize(rgb, config: PreprocessConfig = DEFAULT_CONFIG):
    """HxWx3 (or NxHxWx3) array in [0, 1] -> standardized channel-first torch tensor."""
    import torch

    x = torch.as_tensor(np.asarray(rgb, dtype=np.float32))
    mean = torch.tensor(config.pixel_mean, dtype=torch.float32)
    std = torch.tensor(config.pixel_std, dtype=torch.float32)
    x = (x - mean) / std
    return x.movedim(-1, -3).contiguous()


def prepare_image(image_path, config: PreprocessConfig = DEFAULT_CONFIG):
    """Load an image file as a standardized (3, H, W) float tensor."""
    return standardize(load_rgb(image_path, config.target_size), config)
