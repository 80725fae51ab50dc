"""Support-weighted classification metrics, confusion matrices and run comparison."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dataset import CLASS_NAMES, DatasetManifest, Label

REPORT_SCHEMA_VERSION = 1
MODALITY_GROUPS = {"image": "Visual", "text": "Textual", "fusion": "Visual + Textual"}
GROUP_ORDER = ("Visual", "Textual", "Visual + Textual")


class EvaluationError(ValueError):
    pass


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den != 0)
    return out


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int], num_classes: int = len(Label)) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    if y_true.shape != y_pred.shape:
        raise EvaluationError("labels and predictions differ in length")
    if y_true.size == 0:
        raise EvaluationError("cannot evaluate an empty prediction set")
    for name, arr in (("label", y_true), ("prediction", y_pred)):
        bad = arr[(arr < 0) | (arr >= num_classes)]
        if bad.size:
            raise EvaluationError(f"{name} {int(bad[0])} outside the {num_classes} classes")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


@dataclass
class EvaluationReport:
    accuracy: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    per_class: Dict[str, Dict[str, float]]
    confusion: List[List[int]]
    class_names: Tuple[str, ...] = CLASS_NAMES
    name: str = ""
    modality: str = ""
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_confusion(cls, cm, class_names: Sequence[str] = CLASS_NAMES, **kw) -> "EvaluationReport":
        cm = np.asarray(cm, dtype=np.int64)
        if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
            raise EvaluationError(f"confusion matrix must be square, got {cm.shape}")
        if (cm < 0).any():
            raise EvaluationError("confusion counts must be non-negative")
        total = cm.sum()
        if total == 0:
            raise EvaluationError("empty confusion matrix")
        tp = np.diag(cm).astype(float)
        support = cm.sum(axis=1).astype(float)
        predicted = cm.sum(axis=0).astype(float)
        precision = _safe_div(tp, predicted)
        recall = _safe_div(tp, support)
        f1 = _safe_div(2 * precision * recall, precision + recall)
        w = support / total
        per_class = {
            name: {"precision": float(p), "recall": float(r), "f1": float(f), "support": int(s)}
            for name, p, r, f, s in zip(class_names, precision, recall, f1, support)
        }
        return cls(
            accuracy=float(tp.sum() / total),
            weighted_precision=float(w @ precision),
            weighted_recall=float(w @ recall),
            weighted_f1=float(w @ f1),
            per_class=per_class,
            confusion=cm.tolist(),
            class_names=tuple(class_names),
            **kw,
        )

    @property
    def confusion_array(self) -> np.ndarray:
        return np.asarray(self.confusion, dtype=np.int64)

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "name": self.name,
            "modality": self.modality,
            "class_order": list(self.class_names),
            "accuracy": self.accuracy,
            "weighted_precision": self.weighted_precision,
            "weighted_recall": self.weighted_recall,
            "weighted_f1": self.weighted_f1,
            "per_class": self.per_class,
            "confusion": self.confusion,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationReport":
        if d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise EvaluationError(f"unsupported report schema {d.get('schema_version')!r}")
        return cls(
            accuracy=d["accuracy"],
            weighted_precision=d["weighted_precision"],
            weighted_recall=d["weighted_recall"],
            weighted_f1=d["weighted_f1"],
            per_class=d["per_class"],
            confusion=d["confusion"],
            class_names=tuple(d["class_order"]),
            name=d.get("name", ""),
            modality=d.get("modality", ""),
            meta=d.get("meta", {}),
        )

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    @classmethod
    def load(cls, path) -> "EvaluationReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def evaluate_predictions(y_true, y_pred, **kw) -> EvaluationReport:
    return EvaluationReport.from_confusion(confusion_matrix(y_true, y_pred), **kw)


def evaluate(model, test_ids: Sequence[str], manifest: DatasetManifest, preprocess=None,
             name: str = "", batch_size: int = 32) -> EvaluationReport:
    """Run ``model`` over the test split and score its argmax predictions."""
    from .model import Predictor
    from .preprocess import DEFAULT_CONFIG

    if not test_ids:
        raise EvaluationError("test split is empty")
    samples = manifest.subset(test_ids)
    predictor = Predictor(model, preprocess or DEFAULT_CONFIG, batch_size=batch_size)
    proba = predictor.predict_samples(samples)
    y_pred = proba.argmax(axis=1)
    y_true = [int(s.label) for s in samples]
    return evaluate_predictions(y_true, y_pred, name=name, modality=model.modality)


# ------------------------------------------------------------------------ comparison


@dataclass(frozen=True)
class ReferenceRow:
    group: str
    name: str
    accuracy: float
    precision: float
    recall: float
    f1: float


# Weighted scores reported for MemoSen test data; shown beside new runs, never recomputed.
PUBLISHED_REFERENCE_ROWS = (
    ReferenceRow("Visual", "ResNet50", 0.72, 0.67, 0.72, 0.69),
    ReferenceRow("Visual", "MobileNet v3 (Large)", 0.71, 0.66, 0.71, 0.67),
    ReferenceRow("Visual", "DenseNet161", 0.73, 0.69, 0.73, 0.70),
    ReferenceRow("Textual", "BiLSTM", 0.62, 0.39, 0.62, 0.48),
    ReferenceRow("Textual", "BanglishBERT", 0.66, 0.66, 0.66, 0.66),
    ReferenceRow("Visual + Textual", "BanglishBERT + DenseNet161", 0.73, 0.68, 0.73, 0.70),
    ReferenceRow("Visual + Textual", "BanglishBERT + ResNet50", 0.74, 0.69, 0.74, 0.71),
)


@dataclass
class ComparisonTable:
    rows: List[dict]
    best: Optional[str]

    def to_dict(self) -> dict:
        return {"best": self.best, "rows": self.rows}

    def to_text(self) -> str:
        header = f"{'Group':<18} {'Model':<30} {'Accuracy':>8} {'Precision':>9} {'Recall':>7} {'F1':>6}"
        lines = [header, "-" * len(header)]
        last_group = None
        for row in self.rows:
            group = row["group"] if row["group"] != last_group else ""
            last_group = row["group"]
            mark = " *" if row.get("best") else (" (reported)" if row.get("reference") else "")
            lines.append(
                f"{group:<18} {row['name']:<30} {row['accuracy']:>8.2f} {row['precision']:>9.2f} "
                f"{row['recall']:>7.2f} {row['f1']:>6.2f}{mark}"
            )
        if self.best is not None:
            lines.append(f"* best run: {self.best}")
        return "\n".join(lines)


def _group_of(report: EvaluationReport) -> str:
    return MODALITY_GROUPS.get(report.modality, "Other")


def rank_key(name: str, report: EvaluationReport):
    # higher F1, then higher accuracy, then lexicographically smaller name
    return (-report.weighted_f1, -report.accuracy, name)


def compare_runs(reports: Sequence[Tuple[str, EvaluationReport]], include_reference: bool = False) -> ComparisonTable:
    if not reports:
        raise EvaluationError("need at least one report")
    names = [n for n, _ in reports]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise EvaluationError(f"duplicate run names: {', '.join(dupes)}")

    best = min(reports, key=lambda nr: rank_key(*nr))[0]
    rows = [
        {
            "group": _group_of(r),
            "name": n,
            "accuracy": r.accuracy,
            "precision": r.weighted_precision,
            "recall": r.weighted_recall,
            "f1": r.weighted_f1,
            "best": n == best,
            "reference": False,
        }
        for n, r in reports
    ]
    if include_reference:
        rows += [
            {"group": ref.group, "name": ref.name, "accuracy": ref.accuracy, "precision": ref.precision,
             "recall": ref.recall, "f1": ref.f1, "best": False, "reference": True}
            for ref in PUBLISHED_REFERENCE_ROWS
        ]
    order = {g: i for i, g in enumerate(GROUP_ORDER)}
    rows.sort(key=lambda r: (order.get(r["group"], len(order)), r["reference"]))
    return ComparisonTable(rows=rows, best=best)


def failing_classes(report: EvaluationReport, recall_threshold: float = 0.5) -> List[dict]:
    out = []
    cm = report.confusion_array
    for i, name in enumerate(report.class_names):
        stats = report.per_class[name]
        if stats["support"] == 0:
            continue
        if cm[i, i] == 0:
            out.append({"class": name, "reason": "no correct predictions", "recall": 0.0,
                        "support": stats["support"]})
        elif stats["recall"] < recall_threshold:
            out.append({"class": name, "reason": "recall below threshold", "recall": stats["recall"],
                        "support": stats["support"]})
    return out


def per_class_failure_report(report: EvaluationReport, recall_threshold: float = 0.5) -> str:
    """Readable list of classes the model never gets right or recalls poorly; empty if none."""
    lines = []
    for item in failing_classes(report, recall_threshold):
        if item["reason"] == "no correct predictions":
            lines.append(f"{item['class']}: no correct predictions (support {item['support']})")
        else:
            lines.append(
                f"{item['class']}: recall {item['recall']:.3f} below threshold {recall_threshold:.3f} "
                f"(support {item['support']})"
            )
    return "\n".join(lines)


def plot_confusion(report: EvaluationReport, output_path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    output_path = Path(output_path)
    cm = report.confusion_array
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(cm, cmap="Blues")
    ticks = range(len(report.class_names))
    ax.set_xticks(ticks, report.class_names)
    ax.set_yticks(ticks, report.class_names)
    ax.set_xlabel("Predicted")
    ax.set_ylabel("True")
    thresh = cm.max() / 2 if cm.size else 0
    for i in range(cm.shape[0]):
        for j in range(cm.shape[1]):
            ax.text(j, i, str(cm[i, j]), ha="center", va="center",
                    color="white" if cm[i, j] > thresh else "black")
    fig.colorbar(im, ax=ax, fraction=0.046)
    if report.name:
        ax.set_title(report.name)
    fig.tight_layout()
    fig.savefig(output_path, dpi=120)
    plt.close(fig)
    return output_path
