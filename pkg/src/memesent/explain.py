"""Perturbation-based local explanations for image and caption inputs.

An instance is split into interpretable features (superpixels or word
tokens). Random binary masks switch features off, the black box scores every
perturbed instance, and a proximity-weighted ridge regression over the masks
gives one signed weight per feature.
"""

from __future__ import annotations

import html
import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dataset import CLASS_NAMES, Label

IMAGE_BASELINES = ("mean_color", "gray", "zeros")
TEXT_BASELINES = ("remove_token", "mask_token")
SEGMENTERS = ("slic", "grid")
DISTANCES = ("cosine", "hamming")
MASK_TOKEN = "[MASK]"

SUPPORT_RGB = (0.0, 0.8, 0.0)
OPPOSE_RGB = (0.9, 0.0, 0.0)
# token highlight colour by the class a token pushes towards
CLASS_COLORS = {
    Label.POSITIVE: (255, 140, 0),
    Label.NEGATIVE: (0, 160, 60),
    Label.NEUTRAL: (30, 110, 255),
}


class ExplanationError(ValueError):
    pass


@dataclass
class LimeConfig:
    num_samples: int = 1000
    kernel_width: Optional[float] = None  # None -> 0.25 * sqrt(d)
    ridge_lambda: float = 1.0
    num_segments_target: int = 50
    top_k: int = 5
    seed: int = 0
    image_baseline: str = "mean_color"
    text_baseline: str = "remove_token"
    segmenter: str = "slic"
    distance: str = "cosine"
    target_class: Optional[int] = None
    batch_size: int = 64

    def __post_init__(self):
        if self.kernel_width is not None and self.kernel_width <= 0:
            raise ExplanationError("kernel_width must be positive")
        if self.ridge_lambda < 0:
            raise ExplanationError("ridge_lambda must be non-negative")
        if self.num_samples < 1 or self.num_segments_target < 1 or self.top_k < 1:
            raise ExplanationError("num_samples, num_segments_target and top_k must be >= 1")
        for value, allowed, name in (
            (self.image_baseline, IMAGE_BASELINES, "image_baseline"),
            (self.text_baseline, TEXT_BASELINES, "text_baseline"),
            (self.segmenter, SEGMENTERS, "segmenter"),
            (self.distance, DISTANCES, "distance"),
        ):
            if value not in allowed:
                raise ExplanationError(f"{name} must be one of {allowed}, got {value!r}")

    def width_for(self, d: int) -> float:
        return self.kernel_width if self.kernel_width is not None else 0.25 * math.sqrt(max(d, 1))


@dataclass
class FeatureSpace:
    kind: str  # "superpixels" | "tokens"
    count: int
    segment_map: Optional[np.ndarray] = None
    tokens: List[str] = field(default_factory=list)
    spans: List[Tuple[int, int]] = field(default_factory=list)
    text: str = ""


@dataclass
class Explanation:
    modality: str
    target_class: int
    feature_weights: List[float]
    intercept: float
    surrogate_r2: float
    masks_used: int
    class_weights: List[List[float]] = field(default_factory=list)
    original_proba: List[float] = field(default_factory=list)
    tokens: List[str] = field(default_factory=list)
    segmenter: str = ""
    num_segments_target: int = 0
    kernel_width: float = 0.0
    seed: int = 0

    @property
    def num_features(self) -> int:
        return len(self.feature_weights)

    @property
    def target_name(self) -> str:
        return CLASS_NAMES[self.target_class]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Explanation":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "Explanation":
        return cls.from_dict(json.loads(text))

    def ranked_features(self) -> List[Tuple[int, float]]:
        return sorted(enumerate(self.feature_weights), key=lambda iw: (-abs(iw[1]), iw[0]))


# ----------------------------------------------------------------- feature spaces


def _relabel(labels: np.ndarray) -> np.ndarray:
    _, inv = np.unique(labels, return_inverse=True)
    return inv.reshape(labels.shape).astype(np.int32)


def grid_segments(height: int, width: int, target: int) -> np.ndarray:
    rows = max(1, int(round(math.sqrt(target))))
    cols = max(1, int(round(target / rows)))
    rows, cols = min(rows, height), min(cols, width)
    r = (np.arange(height) * rows) // height
    c = (np.arange(width) * cols) // width
    return (r[:, None] * cols + c[None, :]).astype(np.int32)


def segment_image(image: np.ndarray, config: LimeConfig = LimeConfig()) -> FeatureSpace:
    """Partition an HxWx3 image into superpixels with contiguous ids 0..d-1."""
    image = np.asarray(image)
    h, w = image.shape[:2]
    if config.num_segments_target > h * w:
        raise ExplanationError(f"cannot make {config.num_segments_target} segments from {h * w} pixels")
    if config.segmenter == "grid":
        seg = grid_segments(h, w, config.num_segments_target)
    else:
        from skimage.segmentation import slic

        seg = slic(image.astype(np.float64), n_segments=config.num_segments_target, compactness=10,
                   start_label=0, channel_axis=-1)
        # texture-free noise can collapse into a handful of regions
        if len(np.unique(seg)) < max(2, config.num_segments_target // 4):
            seg = grid_segments(h, w, config.num_segments_target)
    seg = _relabel(seg)
    return FeatureSpace(kind="superpixels", count=int(seg.max()) + 1, segment_map=seg)


_TOKEN = re.compile(r"\S+")


def tokenize_for_explanation(caption: str) -> FeatureSpace:
    matches = list(_TOKEN.finditer(caption))
    return FeatureSpace(
        kind="tokens",
        count=len(matches),
        tokens=[m.group(0) for m in matches],
        spans=[m.span() for m in matches],
        text=caption,
    )


# ------------------------------------------------------------------ perturbation


def sample_masks(d: int, num_samples: int, seed: int = 0) -> np.ndarray:
    """Binary (num_samples, d) matrix; row 0 keeps every feature."""
    if d < 1:
        raise ExplanationError("need at least one feature")
    rng = np.random.default_rng(seed)
    masks = rng.integers(0, 2, size=(num_samples, d), dtype=np.int8)
    masks[0] = 1
    return masks


def _fill_image(image: np.ndarray, fs: FeatureSpace, baseline: str) -> np.ndarray:
    if baseline == "gray":
        return np.full_like(image, 0.5)
    if baseline == "zeros":
        return np.zeros_like(image)
    seg = fs.segment_map.ravel()
    flat = image.reshape(-1, image.shape[-1]).astype(np.float64)
    counts = np.bincount(seg, minlength=fs.count)
    means = np.stack([np.bincount(seg, weights=flat[:, ch], minlength=fs.count) for ch in range(flat.shape[1])], 1)
    means /= counts[:, None]
    return means[fs.segment_map].astype(image.dtype)


def perturb_images(image: np.ndarray, masks: np.ndarray, fs: FeatureSpace, baseline: str = "mean_color",
                   fill: Optional[np.ndarray] = None) -> np.ndarray:
    """Batch of perturbed copies of ``image``, one per mask row."""
    masks = np.atleast_2d(masks)
    if masks.shape[1] != fs.count:
        raise ExplanationError(f"mask length {masks.shape[1]} != feature count {fs.count}")
    if fill is None:
        fill = _fill_image(image, fs, baseline)
    keep = masks.astype(bool)[:, fs.segment_map]  # (N, H, W)
    return np.where(keep[..., None], image[None], fill[None])


def perturb_text(fs: FeatureSpace, mask: Sequence[int], baseline: str = "remove_token") -> str:
    if len(mask) != fs.count:
        raise ExplanationError(f"mask length {len(mask)} != token count {fs.count}")
    if all(mask):
        return fs.text
    if baseline == "remove_token":
        return " ".join(t for t, m in zip(fs.tokens, mask) if m)
    return " ".join(t if m else MASK_TOKEN for t, m in zip(fs.tokens, mask))


def apply_mask(instance, mask, feature_space: FeatureSpace, baseline: Optional[str] = None):
    """Switch off the features whose mask entry is 0. An all-ones mask returns ``instance`` unchanged."""
    mask = np.asarray(mask)
    if mask.ndim != 1 or mask.shape[0] != feature_space.count:
        raise ExplanationError(f"mask length {mask.shape} != feature count {feature_space.count}")
    if feature_space.kind == "tokens":
        return perturb_text(feature_space, mask, baseline or "remove_token")
    if mask.all():
        return instance
    return perturb_images(np.asarray(instance), mask[None], feature_space, baseline or "mean_color")[0]


# ------------------------------------------------------------------------ surrogate


def mask_distances(masks: np.ndarray, metric: str = "cosine") -> np.ndarray:
    """Distance of each mask row from the all-ones row."""
    masks = np.asarray(masks, dtype=np.float64)
    d = masks.shape[1]
    kept = masks.sum(axis=1)
    if metric == "hamming":
        return (d - kept) / d
    # cos(z, 1) = k / (sqrt(k) sqrt(d)); an empty mask is maximally distant
    cos = np.sqrt(kept / d)
    return np.where(kept > 0, 1.0 - cos, 1.0)


def kernel_weights(distances: np.ndarray, kernel_width: float) -> np.ndarray:
    return np.exp(-np.square(distances) / kernel_width**2)


def fit_surrogate(masks, predictions, mask_distances, config: LimeConfig = LimeConfig()):
    """Proximity-weighted ridge regression of predictions on masks.

    Minimizes ``sum_i w_i (f_i - beta.z_i - b)^2 + lambda |beta|^2`` with an
    unpenalized intercept. Returns ``(beta, intercept, weighted_r2)``.
    """
    Z = np.asarray(masks, dtype=np.float64)
    y = np.asarray(predictions, dtype=np.float64)
    n, d = Z.shape
    if y.shape != (n,):
        raise ExplanationError(f"predictions must have shape ({n},), got {y.shape}")
    if not np.all(np.isfinite(y)):
        raise ExplanationError("predictions must be finite")
    if n < d + 2:
        raise ExplanationError(f"need at least d + 2 = {d + 2} samples, got {n}")
    w = kernel_weights(np.asarray(mask_distances, dtype=np.float64), config.width_for(d))
    lam = config.ridge_lambda

    sw = w.sum()
    z_bar = w @ Z / sw
    y_bar = w @ y / sw
    Zc = Z - z_bar
    yc = y - y_bar
    A = Zc.T @ (w[:, None] * Zc) + lam * np.eye(d)
    b = Zc.T @ (w * yc)
    if lam == 0 and np.linalg.matrix_rank(A) < d:
        raise ExplanationError("normal equations are singular; use ridge_lambda > 0")
    try:
        beta = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise ExplanationError("normal equations are singular; use ridge_lambda > 0") from exc
    intercept = float(y_bar - z_bar @ beta)

    resid = y - (Z @ beta + intercept)
    ss_res = float(w @ resid**2)
    ss_tot = float(w @ yc**2)
    # a constant target is fitted exactly by the intercept alone
    r2 = 1.0 if np.ptp(y) == 0 or ss_tot <= 0 else 1.0 - ss_res / ss_tot
    return beta, intercept, r2


def permutation_null(masks, predictions, distances, config: LimeConfig = LimeConfig(),
                     n_permutations: int = 200, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and std of surrogate coefficients refit on shuffled predictions."""
    rng = np.random.default_rng(seed)
    y = np.asarray(predictions, dtype=np.float64)
    betas = np.stack([fit_surrogate(masks, rng.permutation(y), distances, config)[0]
                      for _ in range(n_permutations)])
    return betas.mean(axis=0), betas.std(axis=0, ddof=1)


# ---------------------------------------------------------------------- pipeline


def _check_proba(p: np.ndarray, n: int) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] != n:
        raise ExplanationError(f"predict function must return ({n}, C) probabilities, got {p.shape}")
    if not np.all(np.isfinite(p)) or (p < -1e-9).any() or np.abs(p.sum(axis=1) - 1).max() > 1e-4:
        raise ExplanationError("predict function must return probability rows summing to 1")
    return p


def _predict_all(predict_fn, batches) -> np.ndarray:
    out = []
    for batch in batches:
        out.append(_check_proba(predict_fn(batch), len(batch)))
    return np.concatenate(out)


def explain_instance(instance, predict_fn: Callable, modality: str, config: LimeConfig = LimeConfig()) -> Explanation:
    """Explain one image (HxWx3 array in [0, 1]) or one caption against ``predict_fn``.

    ``predict_fn`` takes a batch (array of images or list of captions) and
    returns class-probability rows.
    """
    if modality == "image":
        image = np.asarray(instance)
        fs = segment_image(image, config)
    elif modality == "text":
        fs = tokenize_for_explanation(instance)
    else:
        raise ExplanationError(f"modality must be 'image' or 'text', got {modality!r}")
    d = fs.count
    meta = dict(
        modality=modality,
        tokens=fs.tokens,
        segmenter=config.segmenter if modality == "image" else "",
        num_segments_target=config.num_segments_target if modality == "image" else 0,
        seed=config.seed,
    )

    if d == 0:
        proba = _check_proba(predict_fn([instance]), 1)[0]
        target = int(proba.argmax()) if config.target_class is None else int(config.target_class)
        return Explanation(target_class=target, feature_weights=[], intercept=float(proba[target]),
                           surrogate_r2=1.0, masks_used=0, class_weights=[[] for _ in proba],
                           original_proba=proba.tolist(), kernel_width=0.0, **meta)
    if config.num_samples < d + 2:
        raise ExplanationError(f"num_samples must be >= d + 2 = {d + 2}")

    masks = sample_masks(d, config.num_samples, config.seed)
    bs = config.batch_size
    chunks = [masks[i : i + bs] for i in range(0, len(masks), bs)]
    if modality == "image":
        fill = _fill_image(image, fs, config.image_baseline)
        batches = (perturb_images(image, m, fs, config.image_baseline, fill) for m in chunks)
    else:
        batches = ([perturb_text(fs, row, config.text_baseline) for row in m] for m in chunks)
    proba = _predict_all(predict_fn, batches)

    target = int(proba[0].argmax()) if config.target_class is None else int(config.target_class)
    if not 0 <= target < proba.shape[1]:
        raise ExplanationError(f"target class {target} out of range")
    dist = mask_distances(masks, config.distance)
    fits = [fit_surrogate(masks, proba[:, c], dist, config) for c in range(proba.shape[1])]
    beta, intercept, r2 = fits[target]
    return Explanation(
        target_class=target,
        feature_weights=beta.tolist(),
        intercept=intercept,
        surrogate_r2=r2,
        masks_used=len(masks),
        class_weights=[f[0].tolist() for f in fits],
        original_proba=proba[0].tolist(),
        kernel_width=config.width_for(d),
        **meta,
    )


def image_predict_fn(predictor, caption: str = "", preprocess=None):
    """Adapter: batch of HxWx3 images -> probabilities, caption held fixed."""
    from .preprocess import DEFAULT_CONFIG, standardize

    cfg = preprocess or predictor.preprocess or DEFAULT_CONFIG

    def fn(images):
        images = np.asarray(images)
        captions = [caption] * len(images) if predictor.model.uses_text else None
        return predictor.predict_proba(captions, standardize(images, cfg))

    return fn


def text_predict_fn(predictor, image: Optional[np.ndarray] = None, preprocess=None):
    """Adapter: list of captions -> probabilities, image held fixed."""
    from .preprocess import DEFAULT_CONFIG, standardize

    cfg = preprocess or predictor.preprocess or DEFAULT_CONFIG
    fixed = standardize(image, cfg) if (image is not None and predictor.model.uses_image) else None

    def fn(captions):
        captions = list(captions)
        images = fixed.unsqueeze(0).expand(len(captions), *fixed.shape) if fixed is not None else None
        return predictor.predict_proba(captions, images)

    return fn


def explain_sample(sample, predictor, modality: str, config: LimeConfig = LimeConfig()) -> Dict[str, Explanation]:
    """Explain a manifest sample with a `Predictor`; ``modality`` may be image, text or both."""
    from .preprocess import load_rgb, normalize_caption

    pre = predictor.preprocess
    wanted = ("image", "text") if modality == "both" else (modality,)
    caption = normalize_caption(sample.caption, pre)
    image = load_rgb(sample.image_path, pre.target_size) if predictor.model.uses_image else None
    out = {}
    for mode in wanted:
        if mode == "image":
            if image is None:
                raise ExplanationError("model has no image input to explain")
            out["image"] = explain_instance(image, image_predict_fn(predictor, caption), "image", config)
        elif mode == "text":
            if not predictor.model.uses_text:
                raise ExplanationError("model has no caption input to explain")
            out["text"] = explain_instance(caption, text_predict_fn(predictor, image), "text", config)
        else:
            raise ExplanationError(f"unknown modality {mode!r}")
    return out


# ---------------------------------------------------------------------- rendering


def overlay_image(explanation: Explanation, image: np.ndarray, feature_space: FeatureSpace,
                  top_k: int = 5, max_alpha: float = 0.6) -> np.ndarray:
    """Tint the top-k supporting superpixels green and top-k opposing ones red."""
    w = np.asarray(explanation.feature_weights, dtype=np.float64)
    out = np.asarray(image, dtype=np.float64).copy()
    scale = np.abs(w).max() if w.size else 0.0
    if scale == 0:
        return out
    pos = [i for i in np.argsort(-w, kind="stable")[:top_k] if w[i] > 0]
    neg = [i for i in np.argsort(w, kind="stable")[:top_k] if w[i] < 0]
    for idxs, color in ((pos, SUPPORT_RGB), (neg, OPPOSE_RGB)):
        for i in idxs:
            alpha = max_alpha * abs(w[i]) / scale
            region = feature_space.segment_map == i
            out[region] = (1 - alpha) * out[region] + alpha * np.asarray(color)
    return out


def token_colors(explanation: Explanation) -> List[Optional[Tuple[Tuple[int, int, int], float]]]:
    """Per token: (rgb of the class it pushes towards, opacity) or None when it pushes nowhere."""
    cw = np.asarray(explanation.class_weights, dtype=np.float64)
    if cw.size == 0:
        cw = np.zeros((len(CLASS_NAMES), explanation.num_features))
    scale = cw.max() if cw.size else 0.0
    out = []
    for j in range(explanation.num_features):
        c = int(cw[:, j].argmax())
        if scale <= 0 or cw[c, j] <= 0:
            out.append(None)
        else:
            out.append((CLASS_COLORS[Label(c)], float(cw[c, j] / scale)))
    return out


def render_text_html(explanation: Explanation) -> str:
    parts = []
    for tok, col in zip(explanation.tokens, token_colors(explanation)):
        if col is None:
            parts.append(f"<span>{html.escape(tok)}</span>")
        else:
            (r, g, b), a = col
            parts.append(f'<span style="background-color: rgba({r},{g},{b},{a:.3f})">{html.escape(tok)}</span>')
    legend = " ".join(
        f'<span style="background-color: rgb{CLASS_COLORS[label]}">{label.display}</span>' for label in Label
    )
    return (
        '<div class="memesent-explanation">\n'
        f"<p>explained class: {html.escape(explanation.target_name)}</p>\n"
        f"<p>{' '.join(parts)}</p>\n"
        f"<p>{legend}</p>\n</div>\n"
    )


def render_explanation(explanation: Explanation, sample, output_path,
                       feature_space: Optional[FeatureSpace] = None, top_k: int = 5,
                       max_alpha: float = 0.6) -> Dict[str, Path]:
    """Write the overlay (PNG for images, HTML for captions) and a JSON sidecar.

    ``sample`` is an image array or a manifest `Sample` for image explanations;
    it is unused for caption explanations, which carry their own tokens.
    """
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    written = {}
    if explanation.modality == "image":
        from PIL import Image

        if hasattr(sample, "image_path"):
            from .preprocess import load_rgb

            image = load_rgb(sample.image_path)
        else:
            image = np.asarray(sample, dtype=np.float64)
        if feature_space is None:
            cfg = LimeConfig(segmenter=explanation.segmenter or "slic",
                             num_segments_target=explanation.num_segments_target or 50)
            feature_space = segment_image(image, cfg)
        if feature_space.count != explanation.num_features:
            raise ExplanationError("feature space does not match the explanation")
        rgb = overlay_image(explanation, image, feature_space, top_k, max_alpha)
        Image.fromarray(np.clip(np.rint(rgb * 255), 0, 255).astype(np.uint8)).save(output_path)
    else:
        output_path.write_text(render_text_html(explanation), encoding="utf-8")
    written["overlay"] = output_path
    sidecar = output_path.with_suffix(".json")
    sidecar.write_text(explanation.to_json(), encoding="utf-8")
    written["json"] = sidecar
    return written
