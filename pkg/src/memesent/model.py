"""Unimodal encoders, classifier heads and the late-fusion classifier."""

from __future__ import annotations

import json
import threading
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .dataset import Label
from .preprocess import DEFAULT_CONFIG, PreprocessConfig, normalize_caption, prepare_image

NUM_CLASSES = len(Label)
TEXT_KINDS = ("recurrent_bidirectional", "pretrained_transformer")
MODALITIES = ("text", "image", "fusion")

# Pooled feature width of each backbone. "compact" is a small CNN for CPU-scale runs.
BACKBONE_DIMS = {
    "residual_50": 2048,
    "mobile_v3_large": 960,
    "dense_161": 2208,
    "compact": 64,
}


class ContractError(ValueError):
    """Input shape or dimension does not match the model's contract."""


class ConfigurationError(RuntimeError):
    pass


# ------------------------------------------------------------------------- configs


@dataclass
class TextEncoderConfig:
    kind: str = "recurrent_bidirectional"
    vocab_size: int = 0
    embedding_dim: int = 128
    hidden_dim: int = 128
    num_layers: int = 1
    output_dim: Optional[int] = None
    pretrained_ref: Optional[str] = None
    max_length: int = 128
    # used only by the untrained transformer fallback
    transformer_layers: int = 2
    transformer_heads: int = 4

    def __post_init__(self):
        if self.kind not in TEXT_KINDS:
            raise ConfigurationError(f"unknown text encoder kind {self.kind!r}")
        if self.kind == "recurrent_bidirectional":
            if min(self.embedding_dim, self.hidden_dim, self.num_layers) <= 0:
                raise ConfigurationError("recurrent encoder needs positive embedding/hidden dims")
            expected = 2 * self.hidden_dim
        else:
            expected = None if self.pretrained_ref else self.hidden_dim
        if self.output_dim is None:
            self.output_dim = expected
        elif expected is not None and self.output_dim != expected:
            raise ConfigurationError(f"text output_dim {self.output_dim} != encoder width {expected}")
        if self.output_dim is not None and self.output_dim <= 0:
            raise ConfigurationError("text output_dim must be positive")


@dataclass
class VisualEncoderConfig:
    backbone: str = "residual_50"
    pretrained: bool = False
    output_dim: Optional[int] = None
    image_size: int = 224

    def __post_init__(self):
        if self.backbone not in BACKBONE_DIMS:
            raise ConfigurationError(f"unknown backbone {self.backbone!r}")
        width = BACKBONE_DIMS[self.backbone]
        if self.backbone == "compact":
            self.output_dim = self.output_dim or width
        elif self.output_dim is None:
            self.output_dim = width
        elif self.output_dim != width:
            raise ConfigurationError(
                f"{self.backbone} pools to {width} features, not {self.output_dim}"
            )


@dataclass
class FusionConfig:
    text: TextEncoderConfig = field(default_factory=TextEncoderConfig)
    visual: VisualEncoderConfig = field(default_factory=VisualEncoderConfig)
    projection_dim: int = 20
    num_classes: int = NUM_CLASSES
    projection_activation: bool = False

    @property
    def classifier_in(self) -> int:
        return 2 * self.projection_dim


# ---------------------------------------------------------------------- tokenizers

PAD, UNK, CLS = "[PAD]", "[UNK]", "[CLS]"


class Vocabulary:
    """Whitespace word vocabulary. Index 0 is padding, 1 unknown, 2 the summary token."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.itos = [PAD, UNK, CLS] + [t for t in tokens if t not in (PAD, UNK, CLS)]
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    @staticmethod
    def split(caption: str) -> List[str]:
        return caption.casefold().split()

    @classmethod
    def build(cls, captions: Iterable[str], min_freq: int = 1, max_size: Optional[int] = None):
        counts = Counter(tok for c in captions for tok in cls.split(c))
        ranked = sorted((t for t, n in counts.items() if n >= min_freq), key=lambda t: (-counts[t], t))
        if max_size is not None:
            ranked = ranked[:max_size]
        return cls(ranked)

    def encode(self, caption: str) -> List[int]:
        return [self.stoi.get(t, 1) for t in self.split(caption)]

    def to_list(self) -> List[str]:
        return list(self.itos[3:])


class VocabTokenizer:
    def __init__(self, vocab: Vocabulary, max_length: int = 128, add_cls: bool = False):
        self.vocab = vocab
        self.max_length = max_length
        self.add_cls = add_cls

    def __call__(self, captions: Sequence[str]) -> Dict[str, torch.Tensor]:
        seqs = []
        for c in captions:
            ids = self.vocab.encode(c)
            if self.add_cls:
                ids = [2] + ids
            seqs.append(ids[: self.max_length])
        width = max([len(s) for s in seqs] + [1])
        input_ids = torch.zeros(len(seqs), width, dtype=torch.long)
        mask = torch.zeros(len(seqs), width, dtype=torch.long)
        for i, s in enumerate(seqs):
            if s:
                input_ids[i, : len(s)] = torch.tensor(s)
                mask[i, : len(s)] = 1
        return {"input_ids": input_ids, "attention_mask": mask}


class HFTokenizer:
    def __init__(self, ref: str, max_length: int = 128):
        from transformers import AutoTokenizer

        try:
            self.tok = AutoTokenizer.from_pretrained(ref)
        except Exception as exc:
            raise ConfigurationError(f"cannot load tokenizer {ref!r}: {exc}") from exc
        self.max_length = max_length

    def __call__(self, captions: Sequence[str]) -> Dict[str, torch.Tensor]:
        enc = self.tok(
            list(captions), padding=True, truncation=True, max_length=self.max_length, return_tensors="pt"
        )
        return {"input_ids": enc["input_ids"], "attention_mask": enc["attention_mask"]}


# ------------------------------------------------------------------------ encoders


class BiLSTMEncoder(nn.Module):
    """Bidirectional LSTM; the feature is the concatenated final forward/backward states."""

    def __init__(self, config: TextEncoderConfig):
        super().__init__()
        if config.vocab_size <= 0:
            raise ConfigurationError("recurrent encoder needs vocab_size > 0")
        self.config = config
        self.embedding = nn.Embedding(config.vocab_size, config.embedding_dim, padding_idx=0)
        self.lstm = nn.LSTM(
            config.embedding_dim,
            config.hidden_dim,
            num_layers=config.num_layers,
            batch_first=True,
            bidirectional=True,
        )
        self.output_dim = 2 * config.hidden_dim

    def forward(self, input_ids: torch.Tensor, attention_mask: torch.Tensor) -> torch.Tensor:
        lengths = attention_mask.sum(dim=1)
        empty = lengths == 0
        # empty captions run one padding step, then get the zero initial state
        packed = nn.utils.rnn.pack_padded_sequence(
            self.embedding(input_ids), lengths.clamp(min=1).cpu(), batch_first=True, enforce_sorted=False
        )
        _, (h, _) = self.lstm(packed)
        feat = torch.cat([h[-2], h[-1]], dim=1)
        return feat.masked_fill(empty.unsqueeze(1), 0.0)


class TransformerEncoder(nn.Module):
    """ELECTRA-style encoder; the feature is the hidden state at the summary position."""

    def __init__(self, config: TextEncoderConfig):
        super().__init__()
        from transformers import AutoModel, ElectraConfig, ElectraModel

        self.config = config
        if config.pretrained_ref:
            try:
                self.backbone = AutoModel.from_pretrained(config.pretrained_ref)
            except Exception as exc:
                raise ConfigurationError(
                    f"cannot load pretrained text weights {config.pretrained_ref!r}: {exc}"
                ) from exc
            width = self.backbone.config.hidden_size
            if config.output_dim is not None and config.output_dim != width:
                raise ConfigurationError(f"text output_dim {config.output_dim} != model width {width}")
            config.output_dim = width
        else:
            if config.vocab_size <= 0:
                raise ConfigurationError("untrained transformer fallback needs vocab_size > 0")
            self.backbone = ElectraModel(
                ElectraConfig(
                    vocab_size=config.vocab_size,
                    embedding_size=config.embedding_dim,
                    hidden_size=config.hidden_dim,
                    num_hidden_layers=config.transformer_layers,
                    num_attention_heads=config.transformer_heads,
                    intermediate_size=4 * config.hidden_dim,
                    max_position_embeddings=max(512, config.max_length + 1),
                    pad_token_id=0,
                )
            )
        self.output_dim = config.output_dim

    def forward(self, input_ids: torch.Tensor, attention_mask: torch.Tensor) -> torch.Tensor:
        out = self.backbone(input_ids=input_ids, attention_mask=attention_mask)
        return out.last_hidden_state[:, 0]


def build_text_encoder(config: TextEncoderConfig) -> nn.Module:
    if config.kind == "recurrent_bidirectional":
        return BiLSTMEncoder(config)
    return TransformerEncoder(config)


def make_tokenizer(config: TextEncoderConfig, vocab: Optional[Vocabulary]):
    if config.kind == "pretrained_transformer" and config.pretrained_ref:
        return HFTokenizer(config.pretrained_ref, config.max_length)
    if vocab is None:
        raise ConfigurationError("a vocabulary is required for this text encoder")
    return VocabTokenizer(vocab, config.max_length, add_cls=config.kind == "pretrained_transformer")


class CompactCNN(nn.Module):
    def __init__(self, width: int = 64):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(3, 16, kernel_size=8, stride=8),
            nn.ReLU(),
            nn.Conv2d(16, 32, kernel_size=3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(32, width, kernel_size=3, stride=2, padding=1),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )

    def forward(self, x):
        return self.body(x)


_TV_WEIGHTS = {
    "residual_50": ("resnet50", "ResNet50_Weights"),
    "mobile_v3_large": ("mobilenet_v3_large", "MobileNet_V3_Large_Weights"),
    "dense_161": ("densenet161", "DenseNet161_Weights"),
}


class VisualEncoder(nn.Module):
    """Backbone trunk followed by global average pooling."""

    def __init__(self, config: VisualEncoderConfig):
        super().__init__()
        self.config = config
        self.output_dim = config.output_dim
        if config.backbone == "compact":
            self.trunk = CompactCNN(config.output_dim)
            return
        import torchvision.models as tvm

        fn_name, weights_name = _TV_WEIGHTS[config.backbone]
        weights = getattr(tvm, weights_name).IMAGENET1K_V1 if config.pretrained else None
        try:
            net = getattr(tvm, fn_name)(weights=weights)
        except Exception as exc:
            raise ConfigurationError(f"cannot load pretrained weights for {config.backbone}: {exc}") from exc
        # each torchvision classifier pools then applies its head; dropping the head leaves the pooled features
        if config.backbone == "residual_50":
            net.fc = nn.Identity()
        else:
            net.classifier = nn.Identity()
        self.trunk = net

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        size = self.config.image_size
        if images.dim() == 3:
            images = images.unsqueeze(0)
        if images.dim() != 4 or tuple(images.shape[1:]) != (3, size, size):
            raise ContractError(f"expected images shaped (B, 3, {size}, {size}), got {tuple(images.shape)}")
        return self.trunk(images)


# ---------------------------------------------------------------------------- heads


class ClassifierHead(nn.Module):
    def __init__(self, in_dim: int, num_classes: int = NUM_CLASSES):
        super().__init__()
        self.linear = nn.Linear(in_dim, num_classes)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        if feat.shape[-1] != self.linear.in_features:
            raise ContractError(f"head expects {self.linear.in_features} features, got {feat.shape[-1]}")
        return self.linear(feat)


class FusionHead(nn.Module):
    """Project each modality to ``projection_dim``, concatenate, classify."""

    def __init__(self, text_dim: int, image_dim: int, projection_dim: int = 20,
                 num_classes: int = NUM_CLASSES, activation: bool = False):
        super().__init__()
        self.text_proj = nn.Linear(text_dim, projection_dim)
        self.image_proj = nn.Linear(image_dim, projection_dim)
        self.act = nn.ReLU() if activation else nn.Identity()
        self.classifier = nn.Linear(2 * projection_dim, num_classes)

    def forward(self, text_feat: torch.Tensor, image_feat: torch.Tensor) -> torch.Tensor:
        if text_feat.shape[-1] != self.text_proj.in_features:
            raise ContractError(f"text features must have width {self.text_proj.in_features}, got {text_feat.shape[-1]}")
        if image_feat.shape[-1] != self.image_proj.in_features:
            raise ContractError(f"image features must have width {self.image_proj.in_features}, got {image_feat.shape[-1]}")
        if text_feat.shape[:-1] != image_feat.shape[:-1]:
            raise ContractError("text and image batches differ in size")
        z = torch.cat([self.act(self.text_proj(text_feat)), self.act(self.image_proj(image_feat))], dim=-1)
        return self.classifier(z)


# -------------------------------------------------------------------------- models


class MemeClassifier(nn.Module):
    """Text-only, image-only or late-fusion classifier over a batch dict.

    Batches carry ``input_ids``/``attention_mask`` for text and ``image`` for
    images; a model reads only the keys its modality needs.
    """

    def __init__(self, modality: str, fusion: FusionConfig, vocab: Optional[Vocabulary] = None,
                 freeze_encoders: bool = False):
        super().__init__()
        if modality not in MODALITIES:
            raise ConfigurationError(f"unknown modality {modality!r}")
        self.modality = modality
        self.fusion_config = fusion
        self.vocab = vocab
        self.freeze_encoders = freeze_encoders
        self.text_encoder = self.visual_encoder = None
        self.tokenizer = None

        if modality in ("text", "fusion"):
            if fusion.text.vocab_size <= 0 and vocab is not None:
                fusion.text.vocab_size = len(vocab)
            self.text_encoder = build_text_encoder(fusion.text)
            self.tokenizer = make_tokenizer(fusion.text, vocab)
        if modality in ("image", "fusion"):
            self.visual_encoder = VisualEncoder(fusion.visual)

        if modality == "text":
            self.head = ClassifierHead(self.text_encoder.output_dim, fusion.num_classes)
        elif modality == "image":
            self.head = ClassifierHead(self.visual_encoder.output_dim, fusion.num_classes)
        else:
            self.head = FusionHead(
                self.text_encoder.output_dim,
                self.visual_encoder.output_dim,
                fusion.projection_dim,
                fusion.num_classes,
                fusion.projection_activation,
            )
        if freeze_encoders:
            for enc in (self.text_encoder, self.visual_encoder):
                if enc is not None:
                    enc.requires_grad_(False)

    @property
    def uses_text(self) -> bool:
        return self.text_encoder is not None

    @property
    def uses_image(self) -> bool:
        return self.visual_encoder is not None

    def tokenize(self, captions: Sequence[str]) -> Dict[str, torch.Tensor]:
        return self.tokenizer(captions)

    def encode_text(self, input_ids, attention_mask) -> torch.Tensor:
        return self.text_encoder(input_ids, attention_mask)

    def encode_image(self, images) -> torch.Tensor:
        return self.visual_encoder(images)

    def forward(self, batch: Dict[str, torch.Tensor]) -> torch.Tensor:
        if self.modality == "text":
            return self.head(self.encode_text(batch["input_ids"], batch["attention_mask"]))
        if self.modality == "image":
            return self.head(self.encode_image(batch["image"]))
        t = self.encode_text(batch["input_ids"], batch["attention_mask"])
        v = self.encode_image(batch["image"])
        return self.head(t, v)


def build_model(modality: str, backbone: str = "residual_50", text_kind: str = "recurrent_bidirectional",
                vocab: Optional[Vocabulary] = None, pretrained: bool = False,
                pretrained_ref: Optional[str] = None, seed: Optional[int] = None, **overrides) -> MemeClassifier:
    """Convenience constructor used by the CLI and tests.

    ``overrides`` may set ``embedding_dim``, ``hidden_dim``, ``num_layers``,
    ``visual_dim``, ``projection_dim``, ``projection_activation`` and
    ``freeze_encoders``.
    """
    if seed is not None:
        torch.manual_seed(seed)
    text = TextEncoderConfig(
        kind=text_kind,
        vocab_size=len(vocab) if vocab is not None else 0,
        embedding_dim=overrides.get("embedding_dim", 128),
        hidden_dim=overrides.get("hidden_dim", 128),
        num_layers=overrides.get("num_layers", 1),
        pretrained_ref=pretrained_ref,
    )
    visual = VisualEncoderConfig(
        backbone=backbone,
        pretrained=pretrained,
        output_dim=overrides.get("visual_dim") if backbone == "compact" else None,
    )
    fusion = FusionConfig(
        text=text,
        visual=visual,
        projection_dim=overrides.get("projection_dim", 20),
        projection_activation=overrides.get("projection_activation", False),
    )
    return MemeClassifier(modality, fusion, vocab, freeze_encoders=overrides.get("freeze_encoders", False))


# --------------------------------------------------------------------- checkpoints

CONFIG_FILE = "config.json"
WEIGHTS_FILE = "weights.pt"


def save_checkpoint(model: MemeClassifier, directory, extra: Optional[dict] = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    doc = {
        "format": 1,
        "modality": model.modality,
        "class_order": [label.display for label in Label],
        "fusion": asdict(model.fusion_config),
        "freeze_encoders": model.freeze_encoders,
        "vocab": model.vocab.to_list() if model.vocab is not None else None,
    }
    if extra:
        doc["extra"] = extra
    (directory / CONFIG_FILE).write_text(json.dumps(doc, indent=2, ensure_ascii=False), encoding="utf-8")
    torch.save(model.state_dict(), directory / WEIGHTS_FILE)
    return directory


def load_checkpoint(directory) -> MemeClassifier:
    directory = Path(directory)
    try:
        doc = json.loads((directory / CONFIG_FILE).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigurationError(f"cannot read checkpoint config in {directory}: {exc}") from exc
    if doc.get("class_order") != [label.display for label in Label]:
        raise ConfigurationError(f"checkpoint class order {doc.get('class_order')} does not match {list(Label)}")
    fusion_doc = dict(doc["fusion"])
    text = TextEncoderConfig(**fusion_doc.pop("text"))
    visual = VisualEncoderConfig(**fusion_doc.pop("visual"))
    # weights come from the blob, never re-downloaded
    visual.pretrained = False
    fusion = FusionConfig(text=text, visual=visual, **fusion_doc)
    vocab = Vocabulary(doc["vocab"]) if doc.get("vocab") is not None else None
    model = MemeClassifier(doc["modality"], fusion, vocab, freeze_encoders=doc.get("freeze_encoders", False))
    state = torch.load(directory / WEIGHTS_FILE, map_location="cpu", weights_only=True)
    model.load_state_dict(state)
    model.eval()
    return model


# ----------------------------------------------------------------------- inference


class Predictor:
    """Batched, lock-serialized inference over a `MemeClassifier`.

    Safe to share between threads: each call takes the lock for the whole batch.
    """

    def __init__(self, model: MemeClassifier, preprocess: PreprocessConfig = DEFAULT_CONFIG,
                 batch_size: int = 32):
        self.model = model.eval()
        self.preprocess = preprocess
        self.batch_size = batch_size
        self._lock = threading.Lock()

    @property
    def modality(self) -> str:
        return self.model.modality

    def _batch(self, captions: Optional[Sequence[str]], images: Optional[torch.Tensor]) -> dict:
        batch = {}
        if self.model.uses_text:
            if captions is None:
                raise ContractError("this model needs captions")
            batch.update(self.model.tokenize([normalize_caption(c, self.preprocess) for c in captions]))
        if self.model.uses_image:
            if images is None:
                raise ContractError("this model needs images")
            batch["image"] = images
        return batch

    def logits(self, captions: Optional[Sequence[str]] = None, images: Optional[torch.Tensor] = None) -> np.ndarray:
        n = len(captions) if captions is not None else len(images)
        if captions is not None and images is not None and len(captions) != len(images):
            raise ContractError("captions and images differ in length")
        out = []
        with self._lock, torch.no_grad():
            for start in range(0, n, self.batch_size):
                stop = start + self.batch_size
                b = self._batch(
                    captions[start:stop] if captions is not None else None,
                    images[start:stop] if images is not None else None,
                )
                out.append(self.model(b).double().numpy())
        if not out:
            return np.zeros((0, self.model.fusion_config.num_classes))
        return np.concatenate(out)

    def predict_proba(self, captions=None, images=None) -> np.ndarray:
        z = self.logits(captions, images)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict_samples(self, samples) -> np.ndarray:
        """Class probabilities for manifest samples, loading images from disk."""
        samples = list(samples)
        captions = [s.caption for s in samples] if self.model.uses_text else None
        images = None
        if self.model.uses_image:
            images = torch.stack([prepare_image(s.image_path, self.preprocess) for s in samples]) if samples else None
        if not samples:
            return np.zeros((0, self.model.fusion_config.num_classes))
        return self.predict_proba(captions, images)
