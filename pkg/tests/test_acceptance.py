"""Acceptance criteria, one PASS/FAIL line each in the terminal summary."""

import time

import numpy as np
import torch
from sklearn.metrics import accuracy_score, precision_recall_fscore_support

from conftest import ACCEPTANCE_LINES
from memesent.dataset import DatasetManifest, Label, Sample, load_manifest, stratified_split
from memesent.evaluation import PUBLISHED_REFERENCE_ROWS, EvaluationReport, compare_runs, evaluate, evaluate_predictions
from memesent.explain import (
    LimeConfig,
    explain_instance,
    fit_surrogate,
    mask_distances,
    permutation_null,
    sample_masks,
)
from memesent.model import Vocabulary, build_model
from memesent.preprocess import normalize_caption
from memesent.synthetic import make_bimodal_dataset
from memesent.training import TrainConfig, make_optimizer, train


def record(n, ok, detail):
    ACCEPTANCE_LINES.append(f"ACCEPTANCE {n} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def test_1_split_reproduction():
    path = "unused.png"
    labels = [label for label, n in zip(Label, (291, 1349, 2728)) for _ in range(n)]
    manifest = DatasetManifest([Sample(f"m{i:05d}", path, "", l) for i, l in enumerate(labels)])
    t0 = time.perf_counter()
    split = stratified_split(manifest, (0.7, 0.1, 0.2), seed=0)
    elapsed = time.perf_counter() - t0
    cells = [[sum(manifest[i].label == label for i in ids) for label in Label]
             for ids in (split.train, split.val, split.test)]
    expected = [[204, 944, 1909], [29, 135, 273], [58, 270, 546]]
    record(1, cells == expected and elapsed < 1.0,
           f"split cells {cells} (expected {expected}), {elapsed:.3f}s < 1s")


def _random_confusion(rng):
    return rng.integers(0, 100, size=(3, 3)) + np.eye(3, dtype=int) * rng.integers(0, 2)


def test_2_weighted_recall_equals_accuracy():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        cm = _random_confusion(rng)
        r = EvaluationReport.from_confusion(cm)
        worst = max(worst, abs(r.weighted_recall - r.accuracy))
    record(2, worst <= 1e-12, f"max |weighted recall - accuracy| over 100 matrices = {worst:.2e} <= 1e-12")


def test_3_metric_oracle():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 500))
        y_true, y_pred = rng.integers(0, 3, n), rng.integers(0, 3, n)
        r = evaluate_predictions(y_true, y_pred)
        p, rec, f, _ = precision_recall_fscore_support(y_true, y_pred, labels=[0, 1, 2], average="weighted",
                                                       zero_division=0)
        ref = (accuracy_score(y_true, y_pred), p, rec, f)
        ours = (r.accuracy, r.weighted_precision, r.weighted_recall, r.weighted_f1)
        worst = max(worst, max(abs(a - b) for a, b in zip(ours, ref)))
    record(3, worst <= 1e-12, f"max deviation from reference metrics over 100 sets = {worst:.2e} <= 1e-12")


def test_4_surrogate_recovery():
    t0 = time.perf_counter()
    betas = []
    for seed in range(5):
        masks = sample_masks(2, 1000, seed)
        y = 2 * masks[:, 0] + 3 * masks[:, 1] + 1
        betas.append(fit_surrogate(masks, y, mask_distances(masks), LimeConfig(ridge_lambda=1e-8))[0])
    elapsed = time.perf_counter() - t0
    mean = np.mean(betas, axis=0)
    err = float(np.abs(mean - [2, 3]).max())
    record(4, err <= 1e-3 and elapsed < 5.0,
           f"seed-averaged beta = ({mean[0]:.6f}, {mean[1]:.6f}), max error {err:.1e} <= 1e-3, {elapsed:.2f}s < 5s")


def _batched(box, masks, batch):
    return np.concatenate([box(masks[i:i + batch]) for i in range(0, len(masks), batch)])


def test_5_null_calibration():
    img = np.random.default_rng(0).random((224, 224, 3))
    cfg = LimeConfig(segmenter="grid", num_segments_target=49)

    # caption-driven box: the image only ever reaches it as an ignored argument
    def caption_only(images):
        return np.tile([0.1, 0.7, 0.2], (len(images), 1))

    const = explain_instance(img, caption_only, "image", cfg)
    const_ok = float(np.abs(const.feature_weights).max()) <= 1e-12

    # noise box, fixed seed: independent of the image but not constant
    def noise(seed):
        rng = np.random.default_rng(seed)
        return lambda batch: rng.dirichlet([1.0, 1.0, 1.0], size=len(batch))

    exp = explain_instance(img, noise(0), "image", cfg)
    masks = sample_masks(49, cfg.num_samples, cfg.seed)
    proba = _batched(noise(0), masks, cfg.batch_size)[:, exp.target_class]
    mu, sigma = permutation_null(masks, proba, mask_distances(masks), cfg, n_permutations=200)
    outside = int(np.sum(np.abs(np.asarray(exp.feature_weights) - mu) > 3 * sigma))

    def good_box(captions):
        g = np.array([float("good" in c.split()) for c in captions])
        return np.stack([0.1 * np.ones_like(g), 0.8 * g + 0.05, 0.85 - 0.8 * g], axis=1)

    text = explain_instance("honestly this meme is good lol", good_box, "text", LimeConfig(num_samples=500))
    ranked = text.ranked_features()
    w = np.asarray(text.feature_weights)
    good = text.tokens.index("good")
    indicator_first = ranked[0][0] == good and w[good] > 0 and all(w[good] > w[j] for j in range(len(w)) if j != good)

    record(5, const_ok and outside == 0 and indicator_first,
           f"image-independent box: {outside}/49 superpixel weights outside the 3-sigma null band "
           f"(constant box max |w| = {np.abs(const.feature_weights).max():.1e}); "
           f"indicator token ranked first: {indicator_first}")


def test_6_synthetic_end_to_end(tmp_path):
    t0 = time.perf_counter()
    manifest = load_manifest(make_bimodal_dataset(tmp_path, n_per_combo=40, seed=0))
    split = stratified_split(manifest, seed=0)
    vocab = Vocabulary.build(normalize_caption(manifest[i].caption) for i in split.train)
    config = TrainConfig(learning_rate=1e-3, max_epochs=40, early_stop_patience=5, seed=0)
    f1 = {}
    for modality in ("text", "image", "fusion"):
        model = build_model(modality, backbone="compact", vocab=None if modality == "image" else vocab,
                            seed=0, embedding_dim=32, hidden_dim=32)
        train(model, split, manifest, config)
        f1[modality] = evaluate(model, split.test, manifest, name=modality).weighted_f1
    elapsed = time.perf_counter() - t0
    ok = f1["fusion"] >= 0.90 and f1["text"] <= 0.75 and f1["image"] <= 0.75 and elapsed < 300
    record(6, ok, f"weighted F1 fusion={f1['fusion']:.3f} (>= 0.90), text={f1['text']:.3f}, "
                  f"image={f1['image']:.3f} (<= 0.75), {elapsed:.0f}s < 300s")


def test_7_optimizer_reference():
    from test_training import adamw_reference

    cfg = TrainConfig()
    a = (3.0, 0.5)
    start = (1.5, -2.0)
    expected = adamw_reference(start, lambda th: [a[0] * th[0], a[1] * th[1]], 5, cfg.learning_rate,
                               cfg.betas, cfg.epsilon, cfg.weight_decay)
    theta = torch.tensor(start, dtype=torch.float64, requires_grad=True)
    opt = make_optimizer([theta], cfg)
    worst = 0.0
    for step in range(5):
        opt.zero_grad()
        (0.5 * (a[0] * theta[0] ** 2 + a[1] * theta[1] ** 2)).backward()
        opt.step()
        worst = max(worst, float(np.abs(theta.detach().numpy() - expected[step]).max()))
    record(7, worst <= 1e-8, f"max deviation from the direct update formula over 5 steps = {worst:.1e} <= 1e-8 "
                             f"(lr {cfg.learning_rate}, betas {cfg.betas}, eps {cfg.epsilon}, decay {cfg.weight_decay})")


def test_8_determinism(synthetic_data):
    manifest, _ = synthetic_data
    same_split = stratified_split(manifest, seed=11) == stratified_split(manifest, seed=11)

    small = stratified_split(DatasetManifest(manifest.samples[:90]), seed=0)
    vocab = Vocabulary.build(manifest[i].caption for i in small.train)
    traces = []
    for _ in range(2):
        model = build_model("fusion", backbone="compact", vocab=vocab, seed=0, embedding_dim=8, hidden_dim=8)
        traces.append(train(model, small, manifest, TrainConfig(learning_rate=1e-3, max_epochs=2, seed=0))[1])
    same_trace = traces[0] == traces[1]

    img = np.random.default_rng(8).random((64, 64, 3))
    cfg = LimeConfig(num_segments_target=16, num_samples=200, seed=5)

    def box(batch):
        m = np.asarray(batch).reshape(len(batch), -1).mean(axis=1)
        return np.stack([m, 1 - m, np.zeros_like(m)], axis=1)

    same_bytes = explain_instance(img, box, "image", cfg).to_json() == explain_instance(img, box, "image", cfg).to_json()
    record(8, same_split and same_trace and same_bytes,
           f"identical split: {same_split}, identical training trace: {same_trace}, "
           f"identical explanation bytes: {same_bytes}")


def test_9_reference_rows_documented():
    # the published numbers need the original data and large pretrained weights;
    # they ship as reference rows rather than reproduced results
    ref = {r.name: r for r in PUBLISHED_REFERENCE_ROWS}
    fusion = ref.get("BanglishBERT + ResNet50")
    placeholder = EvaluationReport.from_confusion(np.diag([1, 1, 1]), modality="fusion")
    table = compare_runs([("local run", placeholder)], include_reference=True)
    listed = sum(r["reference"] for r in table.rows)
    ok = len(PUBLISHED_REFERENCE_ROWS) == 7 and fusion is not None and fusion.f1 == 0.71 and listed == 7
    record(9, ok, "not reproduced at desk scale (needs the MemoSen data and large pretrained weights); "
                  f"{listed} published reference rows available via 'compare --with-reference', "
                  f"headline fusion weighted F1 {fusion.f1 if fusion else 'missing'}")
