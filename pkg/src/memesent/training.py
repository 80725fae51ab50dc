"""Optimization loop, learning-curve trace and curve plots."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
from torch.utils.data import DataLoader, Dataset

from .dataset import DatasetManifest, Sample, SplitResult
from .model import ConfigurationError, MemeClassifier
from .preprocess import DEFAULT_CONFIG, PreprocessConfig, normalize_caption, prepare_image

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-5
    betas: Tuple[float, float] = (0.9, 0.9999)
    epsilon: float = 1e-9
    weight_decay: float = 0.08
    max_epochs: int = 30
    early_stop_patience: Optional[int] = 5
    seed: int = 0
    class_weighting: bool = False
    num_workers: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        # zero is accepted so a null-update run can be expressed
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be non-negative")
        if not all(0 < b < 1 for b in self.betas):
            raise ConfigurationError(f"betas must lie in (0, 1), got {self.betas}")
        if self.epsilon <= 0 or self.weight_decay < 0:
            raise ConfigurationError("epsilon must be positive and weight_decay non-negative")
        if self.max_epochs < 1:
            raise ConfigurationError("max_epochs must be >= 1")


@dataclass
class TrainingTrace:
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    train_accuracy: List[float] = field(default_factory=list)
    val_accuracy: List[float] = field(default_factory=list)
    best_epoch: int = -1

    def __len__(self):
        return len(self.train_loss)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingTrace":
        return cls(**{k: d[k] for k in ("train_loss", "val_loss", "train_accuracy", "val_accuracy", "best_epoch")})


def make_optimizer(params, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(
        params,
        lr=config.learning_rate,
        betas=config.betas,
        eps=config.epsilon,
        weight_decay=config.weight_decay,
    )


class MemeDataset(Dataset):
    """Yields ``(normalized caption, image tensor or None, label index)``.

    Prepared images are cached in memory when ``cache_images`` is set.
    """

    def __init__(self, samples: Sequence[Sample], use_text: bool = True, use_image: bool = True,
                 preprocess: PreprocessConfig = DEFAULT_CONFIG, cache_images: bool = True):
        self.samples = list(samples)
        self.use_text = use_text
        self.use_image = use_image
        self.preprocess = preprocess
        self.cache_images = cache_images
        self._cache: Dict[int, torch.Tensor] = {}

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        s = self.samples[i]
        caption = normalize_caption(s.caption, self.preprocess) if self.use_text else ""
        image = None
        if self.use_image:
            image = self._cache.get(i)
            if image is None:
                image = prepare_image(s.image_path, self.preprocess)
                if self.cache_images:
                    self._cache[i] = image
        return caption, image, int(s.label)


def make_collate(model: MemeClassifier):
    def collate(items):
        captions, images, labels = zip(*items)
        batch = {"label": torch.tensor(labels, dtype=torch.long)}
        if model.uses_text:
            batch.update(model.tokenize(list(captions)))
        if model.uses_image:
            batch["image"] = torch.stack(images)
        return batch

    return collate


def make_loader(model: MemeClassifier, samples: Sequence[Sample], batch_size: int, shuffle: bool,
                seed: int = 0, preprocess: PreprocessConfig = DEFAULT_CONFIG, num_workers: int = 0,
                dataset: Optional[MemeDataset] = None) -> DataLoader:
    ds = dataset or MemeDataset(samples, model.uses_text, model.uses_image, preprocess)
    gen = torch.Generator().manual_seed(seed)
    return DataLoader(ds, batch_size=batch_size, shuffle=shuffle, generator=gen,
                      collate_fn=make_collate(model), num_workers=num_workers)


def _class_weights(samples: Sequence[Sample], num_classes: int) -> torch.Tensor:
    counts = np.bincount([int(s.label) for s in samples], minlength=num_classes).astype(float)
    counts[counts == 0] = 1.0
    return torch.tensor(len(samples) / (num_classes * counts), dtype=torch.float32)


def _run_epoch(model, loader, loss_fn, optimizer=None, epoch: int = 0) -> Tuple[float, float]:
    training = optimizer is not None
    model.train(training)
    total_loss, correct, seen = 0.0, 0, 0
    with torch.set_grad_enabled(training):
        for i, batch in enumerate(loader):
            labels = batch["label"]
            logits = model(batch)
            loss = loss_fn(logits, labels)
            if not torch.isfinite(loss):
                phase = "training" if training else "validation"
                raise TrainingError(f"non-finite {phase} loss at epoch {epoch}, batch {i}: {loss.item()}")
            if training:
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
            n = labels.shape[0]
            total_loss += loss.item() * n
            correct += (logits.argmax(dim=1) == labels).sum().item()
            seen += n
    return total_loss / seen, correct / seen


def train(model: MemeClassifier, splits: SplitResult, manifest: DatasetManifest,
          config: TrainConfig = TrainConfig(), preprocess: PreprocessConfig = DEFAULT_CONFIG,
          ) -> Tuple[Dict[str, torch.Tensor], TrainingTrace]:
    """Fit ``model`` on the train split, selecting the epoch with lowest validation loss.

    The best weights are loaded back into ``model`` and also returned as a state dict.
    """
    if not splits.train or not splits.val:
        raise ConfigurationError("train and validation splits must be non-empty")
    train_samples = manifest.subset(splits.train)
    val_samples = manifest.subset(splits.val)

    torch.manual_seed(config.seed)
    train_loader = make_loader(model, train_samples, config.batch_size, True, config.seed,
                               preprocess, config.num_workers)
    val_loader = make_loader(model, val_samples, config.batch_size, False, config.seed,
                             preprocess, config.num_workers)

    weight = _class_weights(train_samples, model.fusion_config.num_classes) if config.class_weighting else None
    loss_fn = nn.CrossEntropyLoss(weight=weight)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = make_optimizer(params, config)

    trace = TrainingTrace()
    best_state, best_loss, stale = None, math.inf, 0
    for epoch in range(config.max_epochs):
        tr_loss, tr_acc = _run_epoch(model, train_loader, loss_fn, optimizer, epoch)
        va_loss, va_acc = _run_epoch(model, val_loader, loss_fn, None, epoch)
        trace.train_loss.append(tr_loss)
        trace.train_accuracy.append(tr_acc)
        trace.val_loss.append(va_loss)
        trace.val_accuracy.append(va_acc)
        log.info("epoch %d train_loss=%.4f train_acc=%.4f val_loss=%.4f val_acc=%.4f",
                 epoch, tr_loss, tr_acc, va_loss, va_acc)
        if va_loss < best_loss:
            best_loss, stale = va_loss, 0
            trace.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
        else:
            stale += 1
            if config.early_stop_patience is not None and stale >= config.early_stop_patience:
                log.info("early stop after epoch %d", epoch)
                break

    model.load_state_dict(best_state)
    model.eval()
    return best_state, trace


def emit_curves(trace: TrainingTrace, output_path) -> Path:
    """Dual-axis loss/accuracy plot; a JSON sidecar with the plotted values sits next to it."""
    if len(trace) == 0:
        raise ValueError("cannot plot an empty trace")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    output_path = Path(output_path)
    epochs = np.arange(1, len(trace) + 1)
    fig, ax_loss = plt.subplots(figsize=(7, 4))
    ax_acc = ax_loss.twinx()
    ax_loss.plot(epochs, trace.train_loss, "o-", color="tab:blue", label="train loss")
    ax_loss.plot(epochs, trace.val_loss, "o--", color="tab:cyan", label="val loss")
    ax_acc.plot(epochs, trace.train_accuracy, "s-", color="tab:red", label="train acc")
    ax_acc.plot(epochs, trace.val_accuracy, "s--", color="tab:orange", label="val acc")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(0, 1)
    if trace.best_epoch >= 0:
        ax_loss.axvline(trace.best_epoch + 1, color="gray", lw=0.8, ls=":")
    lines = ax_loss.get_lines()[:2] + ax_acc.get_lines()
    ax_loss.legend(lines, [l.get_label() for l in lines], loc="center right", fontsize=8)
    fig.tight_layout()
    fig.savefig(output_path, dpi=120)
    plt.close(fig)
    output_path.with_suffix(".json").write_text(json.dumps(trace.to_dict(), indent=2))
    return output_path
