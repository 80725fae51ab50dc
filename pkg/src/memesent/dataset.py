"""Meme manifest ingestion, validation, stratified splitting and statistics."""

from __future__ import annotations

import csv
import enum
import math
import unicodedata
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .preprocess import normalize_caption

MANIFEST_HEADER = ("id", "image_path", "caption", "label")
DEFAULT_RATIOS = (0.7, 0.1, 0.2)


class ManifestError(ValueError):
    """Raised for malformed manifests (duplicate ids, unknown labels, bad rows)."""


class SplitError(ValueError):
    pass


class Label(enum.IntEnum):
    """Sentiment classes. The integer value is the model's class index."""

    NEUTRAL = 0
    POSITIVE = 1
    NEGATIVE = 2

    @classmethod
    def parse(cls, value) -> "Label":
        if isinstance(value, Label):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        try:
            return cls[str(value).strip().upper()]
        except KeyError:
            raise ManifestError(f"unknown label {value!r}; expected neutral|positive|negative") from None

    @property
    def display(self) -> str:
        return self.name.capitalize()


CLASS_NAMES = tuple(label.display for label in Label)


@dataclass(frozen=True)
class Sample:
    id: str
    image_path: str
    caption: str
    label: Label

    def __post_init__(self):
        object.__setattr__(self, "label", Label.parse(self.label))
        if self.caption is None:
            object.__setattr__(self, "caption", "")


@dataclass
class DatasetManifest:
    samples: List[Sample]
    source_uri: str = ""

    def __post_init__(self):
        seen = set()
        for s in self.samples:
            if s.id in seen:
                raise ManifestError(f"duplicate sample id {s.id!r}")
            seen.add(s.id)
        self._index = {s.id: s for s in self.samples}

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, sample_id: str) -> Sample:
        return self._index[sample_id]

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self._index

    @property
    def ids(self) -> List[str]:
        return [s.id for s in self.samples]

    def subset(self, ids: Iterable[str]) -> List[Sample]:
        return [self._index[i] for i in ids]


@dataclass
class SplitResult:
    train: List[str]
    val: List[str]
    test: List[str]
    ratios: Tuple[float, float, float] = DEFAULT_RATIOS
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "ratios": list(self.ratios),
            "seed": self.seed,
            "train": list(self.train),
            "val": list(self.val),
            "test": list(self.test),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitResult":
        return cls(
            train=list(d["train"]),
            val=list(d["val"]),
            test=list(d["test"]),
            ratios=tuple(d.get("ratios", DEFAULT_RATIOS)),
            seed=int(d.get("seed", 0)),
        )


@dataclass
class DatasetStats:
    class_counts: Dict[str, int]
    language_counts: Dict[str, int]
    caption_length: Dict[str, float]
    word_frequencies: Dict[str, int] = field(default_factory=dict)
    length_histogram: Dict[int, int] = field(default_factory=dict)

    def to_dict(self, include_frequencies: bool = True) -> dict:
        d = {
            "size": sum(self.class_counts.values()),
            "class_counts": dict(self.class_counts),
            "language_counts": dict(self.language_counts),
            "caption_length": dict(self.caption_length),
            "length_histogram": {str(k): v for k, v in sorted(self.length_histogram.items())},
        }
        if include_frequencies:
            d["word_frequencies"] = dict(self.word_frequencies)
        return d


# --------------------------------------------------------------------------- I/O


def read_manifest(path) -> List[Sample]:
    """Parse a tab-separated manifest file into raw `Sample` records.

    Relative image paths are resolved against the manifest's directory.
    """
    path = Path(path)
    try:
        fh = path.open(encoding="utf-8", newline="")
    except OSError as exc:
        raise OSError(f"cannot read manifest {path}: {exc}") from exc
    base = path.parent
    records = []
    with fh:
        reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        header = next(reader, None)
        if header is None:
            return []
        header = [h.strip().lower() for h in header]
        if tuple(header) != MANIFEST_HEADER:
            raise ManifestError(f"{path}: expected header {MANIFEST_HEADER}, got {tuple(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ManifestError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            sid, image_path, caption, label = row
            image = Path(image_path)
            if not image.is_absolute():
                image = base / image
            records.append(Sample(sid.strip(), str(image), caption, Label.parse(label)))
    return records


def write_manifest(samples: Sequence[Sample], path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write("\t".join(MANIFEST_HEADER) + "\n")
        for s in samples:
            caption = s.caption.replace("\t", " ").replace("\n", " ")
            fh.write(f"{s.id}\t{s.image_path}\t{caption}\t{s.label.name.lower()}\n")


def load_manifest(path, validate: bool = True) -> DatasetManifest:
    records = read_manifest(path)
    if validate:
        manifest, _ = validate_manifest(records, source_uri=str(path))
        return manifest
    return DatasetManifest(records, source_uri=str(path))


# ---------------------------------------------------------------------- validation


def _image_ok(path: str) -> bool:
    from PIL import Image

    try:
        with Image.open(path) as im:
            im.load()
        return True
    except Exception:
        return False


def validate_manifest(
    raw_manifest: Sequence[Sample], source_uri: str = "", workers: int = 4
) -> Tuple[DatasetManifest, List[Sample]]:
    """Drop records whose image files are missing or cannot be decoded.

    Returns the validated manifest and the rejected records, both in input order.
    Empty captions are kept.
    """
    seen = set()
    for s in raw_manifest:
        if s.id in seen:
            raise ManifestError(f"duplicate sample id {s.id!r}")
        seen.add(s.id)

    paths = [s.image_path for s in raw_manifest]
    if workers > 1 and len(paths) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            ok = list(pool.map(_image_ok, paths))
    else:
        ok = [_image_ok(p) for p in paths]

    kept = [s for s, good in zip(raw_manifest, ok) if good]
    rejected = [s for s, good in zip(raw_manifest, ok) if not good]
    return DatasetManifest(kept, source_uri=source_uri), rejected


# ----------------------------------------------------------------------- splitting


def _round_half_up(x: float) -> int:
    # 1e-9 guards against products such as 0.1 * 5 landing just under .5
    return int(math.floor(x + 0.5 + 1e-9))


def split_counts(n: int, ratios: Sequence[float] = DEFAULT_RATIOS) -> Tuple[int, int, int]:
    """Per-class (train, val, test) sizes: val and test rounded, train takes the rest."""
    _, r_val, r_test = ratios
    val = _round_half_up(n * r_val)
    test = _round_half_up(n * r_test)
    return n - val - test, val, test


def _check_ratios(ratios) -> Tuple[float, float, float]:
    if len(ratios) != 3:
        raise SplitError("ratios must be (train, val, test)")
    ratios = tuple(float(r) for r in ratios)
    if any(r <= 0 for r in ratios):
        raise SplitError(f"ratios must be positive, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-6:
        raise SplitError(f"ratios must sum to 1, got {sum(ratios)}")
    return ratios


def stratified_split(
    manifest: DatasetManifest, ratios: Sequence[float] = DEFAULT_RATIOS, seed: int = 0
) -> SplitResult:
    """Stratified train/val/test partition of manifest ids.

    Within each class the ids are sorted, then shuffled by a generator seeded
    from ``(seed, class index)``, so the result depends only on the id set,
    the ratios and the seed.
    """
    ratios = _check_ratios(ratios)
    by_class: Dict[Label, List[str]] = {}
    for s in manifest.samples:
        by_class.setdefault(s.label, []).append(s.id)

    train, val, test = [], [], []
    for label in Label:
        ids = sorted(by_class.get(label, []))
        if not ids:
            continue
        if len(ids) < len(ratios):
            raise SplitError(
                f"class {label.display} has {len(ids)} samples; need at least {len(ratios)}"
            )
        n_train, n_val, n_test = split_counts(len(ids), ratios)
        if n_train < 1:
            raise SplitError(f"class {label.display} leaves no training samples")
        rng = np.random.default_rng([seed, int(label)])
        order = [ids[i] for i in rng.permutation(len(ids))]
        val.extend(order[:n_val])
        test.extend(order[n_val : n_val + n_test])
        train.extend(order[n_val + n_test :])
    return SplitResult(train=train, val=val, test=test, ratios=ratios, seed=seed)


# ---------------------------------------------------------------------- statistics

LANGUAGES = ("Bengali", "English", "Mixed", "None")


def _char_script(ch: str) -> Optional[str]:
    if not ch.isalpha() and unicodedata.category(ch) not in ("Mn", "Mc"):
        return None
    if "\u0980" <= ch <= "\u09ff":
        return "Bengali"
    if ch.isalpha() and unicodedata.name(ch, "").startswith("LATIN"):
        return "Latin"
    return None


def detect_language(caption: str) -> str:
    """Classify a caption as Bengali, English, Mixed or None by word-token script.

    Tokens without letters (digits, emoji, punctuation) do not vote.
    """
    has_bn = has_en = False
    for token in caption.split():
        scripts = {_char_script(ch) for ch in token}
        has_bn = has_bn or "Bengali" in scripts
        has_en = has_en or "Latin" in scripts
    if has_bn and has_en:
        return "Mixed"
    if has_bn:
        return "Bengali"
    if has_en:
        return "English"
    return "None"


def word_count(caption: str) -> int:
    return len(caption.split())


def _strip_punct(token: str) -> str:
    start, end = 0, len(token)
    while start < end and unicodedata.category(token[start]).startswith(("P", "S")):
        start += 1
    while end > start and unicodedata.category(token[end - 1]).startswith(("P", "S")):
        end -= 1
    return token[start:end]


def frequency_tokens(caption: str) -> List[str]:
    """Tokens counted for word frequencies: punctuation-trimmed, casefolded, letter-bearing."""
    out = []
    for tok in caption.split():
        tok = _strip_punct(tok).casefold()
        if tok and any(_char_script(ch) for ch in tok):
            out.append(tok)
    return out


def compute_stats(manifest: DatasetManifest) -> DatasetStats:
    class_counts = {label.display: 0 for label in Label}
    language_counts = {lang: 0 for lang in LANGUAGES}
    lengths = []
    freqs: Counter = Counter()
    for s in manifest.samples:
        class_counts[s.label.display] += 1
        text = normalize_caption(s.caption)
        language_counts[detect_language(text)] += 1
        lengths.append(word_count(text))
        freqs.update(frequency_tokens(text))

    if lengths:
        length = {"min": min(lengths), "max": max(lengths), "mean": sum(lengths) / len(lengths)}
    else:
        length = {"min": 0, "max": 0, "mean": 0.0}
    return DatasetStats(
        class_counts=class_counts,
        language_counts=language_counts,
        caption_length=length,
        word_frequencies=dict(freqs),
        length_histogram=dict(Counter(lengths)),
    )


def top_k_words(stats: DatasetStats, k: int) -> List[Tuple[str, int]]:
    if k < 1:
        raise ValueError("k must be >= 1")
    items = sorted(stats.word_frequencies.items(), key=lambda kv: (-kv[1], kv[0]))
    return items[:k]


def plot_length_histogram(stats: DatasetStats, output_path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    output_path = Path(output_path)
    hist = sorted(stats.length_histogram.items())
    fig, ax = plt.subplots(figsize=(7, 4))
    if hist:
        xs, ys = zip(*hist)
        ax.bar(xs, ys, width=1.0, color="#4c72b0")
    ax.set_xlabel("Caption length (words)")
    ax.set_ylabel("Frequency")
    ax.set_title("Caption length-frequency distribution")
    fig.tight_layout()
    fig.savefig(output_path, dpi=120)
    plt.close(fig)
    return output_path
