"""Generated image+caption datasets where the label needs both modalities.

Each image carries a coloured square whose colour encodes a level in {0, 1, 2}
and each caption carries a cue word encoding another level among code-mixed
filler words. The label thresholds the sum of the two levels:

    sum 0-1 -> Negative     sum 2 -> Neutral     sum 3-4 -> Positive

The three classes are balanced. Either modality alone cannot do better than
5/9 accuracy, yet the label is additive in the two cues, so a late-fusion
linear head can represent it exactly.
"""

from __future__ import annotations

from pathlib import Path
from typing import List, Tuple

import numpy as np

from .dataset import Label, Sample, write_manifest

COLORS = {"red": (200, 40, 40), "green": (40, 180, 60), "blue": (40, 60, 210)}
CUES = ("boo", "hmm", "yay")
IMAGE_LEVEL = {name: i for i, name in enumerate(COLORS)}
TEXT_LEVEL = {cue: i for i, cue in enumerate(CUES)}


def label_for(color: str, cue: str) -> Label:
    s = IMAGE_LEVEL[color] + TEXT_LEVEL[cue]
    if s <= 1:
        return Label.NEGATIVE
    if s == 2:
        return Label.NEUTRAL
    return Label.POSITIVE


RULES = {(c, w): label_for(c, w) for c in COLORS for w in CUES}

FILLER = (
    "ami", "tumi", "ki", "holo", "bhai", "lol", "the", "when", "you", "exam",
    "আমি", "তুমি", "কি", "হলো", "ভাই", "পরীক্ষা", "যখন", "আজ", "friend", "life",
)


def render_image(color: str, rng: np.random.Generator, size: int = 224) -> np.ndarray:
    img = rng.uniform(90, 170, size=(size, size, 3))
    side = int(rng.integers(56, 88))
    y, x = rng.integers(0, size - side, size=2)
    jitter = rng.normal(0, 12, size=3)
    img[y : y + side, x : x + side] = np.asarray(COLORS[color]) + jitter
    return np.clip(img, 0, 255).astype(np.uint8)


def render_caption(cue: str, rng: np.random.Generator) -> str:
    words = list(rng.choice(FILLER, size=int(rng.integers(3, 9))))
    words.insert(int(rng.integers(0, len(words) + 1)), cue)
    return " ".join(words)


def make_bimodal_dataset(out_dir, n_per_combo: int = 40, seed: int = 0) -> Path:
    """Write PNG images and ``manifest.tsv`` under ``out_dir``; return the manifest path."""
    from PIL import Image

    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    samples: List[Sample] = []
    combos: List[Tuple[str, str]] = [c for c in RULES for _ in range(n_per_combo)]
    order = rng.permutation(len(combos))
    for k, idx in enumerate(order):
        color, cue = combos[idx]
        sid = f"syn{k:05d}"
        path = img_dir / f"{sid}.png"
        Image.fromarray(render_image(color, rng)).save(path)
        samples.append(Sample(sid, f"images/{sid}.png", render_caption(cue, rng), label_for(color, cue)))
    manifest = out_dir / "manifest.tsv"
    write_manifest(samples, manifest)
    return manifest
