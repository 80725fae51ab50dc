import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from memesent.dataset import Label, word_count
from memesent.explain import (
    CLASS_COLORS,
    SUPPORT_RGB,
    Explanation,
    ExplanationError,
    LimeConfig,
    apply_mask,
    explain_instance,
    fit_surrogate,
    mask_distances,
    perturb_images,
    permutation_null,
    render_explanation,
    render_text_html,
    sample_masks,
    segment_image,
    token_colors,
    tokenize_for_explanation,
    overlay_image,
)

GRID49 = LimeConfig(segmenter="grid", num_segments_target=49)


def _image(seed=0, size=224):
    return np.random.default_rng(seed).random((size, size, 3))


def _partitioned(fs):
    ids = np.unique(fs.segment_map)
    return ids.tolist() == list(range(fs.count))


# ----------------------------------------------------------------- feature spaces


def test_grid_49_segments_of_32_pixels():
    fs = segment_image(_image(), GRID49)
    assert fs.count == 49 and fs.segment_map.shape == (224, 224)
    assert np.bincount(fs.segment_map.ravel()).tolist() == [32 * 32] * 49
    for s in range(49):
        rows, cols = np.nonzero(fs.segment_map == s)
        assert rows.max() - rows.min() == 31 and cols.max() - cols.min() == 31


def test_slic_partition_and_determinism():
    from skimage import data
    from skimage.transform import resize

    img = resize(data.astronaut() / 255.0, (224, 224))
    a = segment_image(img, LimeConfig())
    b = segment_image(img, LimeConfig())
    assert np.array_equal(a.segment_map, b.segment_map)
    assert _partitioned(a) and 20 <= a.count <= 80
    assert not np.array_equal(a.segment_map, segment_image(img, GRID49).segment_map)


def test_slic_collapse_falls_back_to_grid():
    fs = segment_image(_image(1), LimeConfig(num_segments_target=49))
    assert fs.count == 49 and _partitioned(fs)


def test_too_many_segments():
    with pytest.raises(ExplanationError):
        segment_image(np.zeros((4, 4, 3)), LimeConfig(num_segments_target=17))


def test_token_count_and_spans():
    caption = " ".join(f"w{i}" for i in range(19))
    fs = tokenize_for_explanation(caption)
    assert fs.count == 19
    text = "  ami  khub happy\tbro "
    fs = tokenize_for_explanation(text)
    assert fs.tokens == ["ami", "khub", "happy", "bro"]
    assert [text[s:e] for s, e in fs.spans] == fs.tokens
    # the gaps between spans are pure whitespace
    rebuilt = "".join(text[prev:s] + text[s:e] for prev, (s, e) in zip([0] + [e for _, e in fs.spans], fs.spans))
    assert rebuilt + text[fs.spans[-1][1]:] == text
    assert tokenize_for_explanation("").count == 0


@settings(max_examples=1000, deadline=None)
@given(st.text(max_size=60))
def test_tokenization_agrees_with_word_count(caption):
    assert tokenize_for_explanation(caption).count == word_count(caption)


# ------------------------------------------------------------------------ masks


def test_mask_anchoring_and_shape():
    m = sample_masks(1, 4, seed=3)
    assert m.shape == (4, 1) and m[0, 0] == 1 and set(np.unique(m)) <= {0, 1}
    assert sample_masks(30, 50, seed=9)[0].tolist() == [1] * 30
    assert np.array_equal(sample_masks(5, 20, 2), sample_masks(5, 20, 2))
    with pytest.raises(ExplanationError):
        sample_masks(0, 10)


def test_mask_cell_mean_concentrates():
    m = sample_masks(8, 10_000, seed=0)[1:]
    assert np.all((m.mean(axis=0) >= 0.47) & (m.mean(axis=0) <= 0.53))


def test_apply_mask():
    img = _image(2, 64)
    fs = segment_image(img, LimeConfig(segmenter="grid", num_segments_target=16))
    assert apply_mask(img, np.ones(16, int), fs) is img
    gray = apply_mask(img, np.zeros(16, int), fs, "gray")
    assert np.all(gray == 0.5)
    text = tokenize_for_explanation("a b c")
    assert apply_mask("a b c", [1, 0, 1], text) == "a c"
    assert apply_mask("a b c", [1, 0, 1], text, "mask_token") == "a [MASK] c"
    assert apply_mask("a  b c", [1, 1, 1], tokenize_for_explanation("a  b c")) == "a  b c"
    with pytest.raises(ExplanationError):
        apply_mask("a b c", [1, 0], text)


def test_mean_color_baseline_fills_segment_means():
    img = _image(3, 8)
    fs = segment_image(img, LimeConfig(segmenter="grid", num_segments_target=4))
    out = apply_mask(img, np.array([0, 1, 1, 1]), fs)
    region = fs.segment_map == 0
    np.testing.assert_allclose(out[region], np.broadcast_to(img[region].mean(axis=0), out[region].shape))
    assert np.array_equal(out[~region], img[~region])


def test_cosine_distance():
    m = np.array([[1, 1, 1, 1], [1, 0, 0, 0], [0, 0, 0, 0]])
    np.testing.assert_allclose(mask_distances(m), [0.0, 0.5, 1.0])
    np.testing.assert_allclose(mask_distances(m, "hamming"), [0.0, 0.75, 1.0])


# -------------------------------------------------------------------- surrogate


def test_constant_black_box():
    masks = sample_masks(6, 200, seed=0)
    cfg = LimeConfig(ridge_lambda=1e-8)
    beta, b0, r2 = fit_surrogate(masks, np.full(200, 0.3), mask_distances(masks), cfg)
    assert np.abs(beta).max() < 1e-12 and b0 == pytest.approx(0.3, abs=1e-12) and r2 == 1.0


def _wls_oracle(Z, y, w):
    X = np.hstack([Z, np.ones((len(Z), 1))])
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)
    return coef[:-1], coef[-1]


@pytest.mark.parametrize("seed", range(5))
def test_linear_black_box_recovery(seed):
    masks = sample_masks(2, 1000, seed)
    y = 2 * masks[:, 0] + 3 * masks[:, 1] + 1.0
    dist = mask_distances(masks)
    cfg = LimeConfig(ridge_lambda=1e-8)
    beta, b0, r2 = fit_surrogate(masks, y, dist, cfg)
    np.testing.assert_allclose(beta, [2, 3], atol=1e-3)
    assert b0 == pytest.approx(1.0, abs=1e-3) and r2 == pytest.approx(1.0, abs=1e-9)
    oracle_beta, oracle_b0 = _wls_oracle(masks.astype(float), y, np.exp(-dist**2 / cfg.width_for(2) ** 2))
    np.testing.assert_allclose(beta, oracle_beta, atol=1e-6)


def test_noisy_fit_matches_weighted_least_squares_oracle():
    rng = np.random.default_rng(5)
    masks = sample_masks(5, 300, 5)
    y = masks @ rng.normal(size=5) + rng.normal(scale=0.1, size=300)
    dist = mask_distances(masks)
    cfg = LimeConfig(ridge_lambda=1e-10)
    beta, b0, _ = fit_surrogate(masks, y, dist, cfg)
    ob, ob0 = _wls_oracle(masks.astype(float), y, np.exp(-dist**2 / cfg.width_for(5) ** 2))
    np.testing.assert_allclose(beta, ob, atol=1e-6)
    assert b0 == pytest.approx(ob0, abs=1e-6)


def test_three_sample_toy_by_hand():
    # one feature, three samples, kernel width 1: w = (1, e^-1, 1)
    z = [1.0, 0.0, 1.0]
    f = [0.9, 0.2, 0.7]
    lam = 0.5
    w = [1.0, math.exp(-1.0), 1.0]
    # normal equations in (beta, b0):
    # [sum w z^2 + lam, sum w z] [beta]   [sum w z f]
    # [sum w z,         sum w  ] [b0  ] = [sum w f  ]
    a11 = sum(wi * zi * zi for wi, zi in zip(w, z)) + lam
    a12 = sum(wi * zi for wi, zi in zip(w, z))
    a22 = sum(w)
    r1 = sum(wi * zi * fi for wi, zi, fi in zip(w, z, f))
    r2 = sum(wi * fi for wi, fi in zip(w, f))
    det = a11 * a22 - a12 * a12
    beta_hand = (r1 * a22 - a12 * r2) / det
    b0_hand = (a11 * r2 - a12 * r1) / det

    masks = np.array([[1], [0], [1]])
    beta, b0, _ = fit_surrogate(masks, f, mask_distances(masks), LimeConfig(kernel_width=1.0, ridge_lambda=lam))
    assert abs(beta[0] - beta_hand) < 1e-10
    assert abs(b0 - b0_hand) < 1e-10


def test_singular_without_ridge_raises():
    base = sample_masks(1, 20, 0)
    masks = np.hstack([base, base])  # duplicated column
    with pytest.raises(ExplanationError, match="ridge_lambda > 0"):
        fit_surrogate(masks, np.linspace(0, 1, 20), mask_distances(masks), LimeConfig(ridge_lambda=0.0))
    fit_surrogate(masks, np.linspace(0, 1, 20), mask_distances(masks), LimeConfig(ridge_lambda=1e-3))


def test_surrogate_input_errors():
    masks = sample_masks(4, 5, 0)
    with pytest.raises(ExplanationError, match="d \\+ 2"):
        fit_surrogate(masks, np.zeros(5), mask_distances(masks))
    masks = sample_masks(2, 10, 0)
    with pytest.raises(ExplanationError):
        fit_surrogate(masks, np.r_[np.zeros(9), np.nan], mask_distances(masks))
    with pytest.raises(ExplanationError):
        LimeConfig(kernel_width=0)


def test_sign_flip_in_two_class_problem():
    rng = np.random.default_rng(1)
    masks = sample_masks(7, 400, 1)
    p = 1 / (1 + np.exp(-(masks @ rng.normal(size=7) - 1)))
    dist = mask_distances(masks)
    b1, i1, _ = fit_surrogate(masks, p, dist)
    b2, i2, _ = fit_surrogate(masks, 1 - p, dist)
    np.testing.assert_allclose(b2, -b1, atol=1e-6)
    assert i1 + i2 == pytest.approx(1.0, abs=1e-6)


def test_fidelity_averaged_over_seeds():
    betas = []
    for seed in range(5):
        masks = sample_masks(2, 1000, seed)
        y = 2 * masks[:, 0] + 3 * masks[:, 1] + 1
        betas.append(fit_surrogate(masks, y, mask_distances(masks), LimeConfig(ridge_lambda=1e-8))[0])
    np.testing.assert_allclose(np.mean(betas, axis=0), [2, 3], atol=1e-3)


# -------------------------------------------------------------------- pipeline


def _constant_box(batch):
    return np.tile([0.2, 0.5, 0.3], (len(batch), 1))


def _noise_box(seed):
    rng = np.random.default_rng(seed)

    def fn(batch):
        return rng.dirichlet([1.0, 1.0, 1.0], size=len(batch))

    return fn


def _good_box(captions):
    # Positive when "good" is present, Negative otherwise
    g = np.array([float("good" in c.split()) for c in captions])
    return np.stack([0.1 * np.ones_like(g), 0.8 * g + 0.05, 0.85 - 0.8 * g], axis=1)


def test_image_independent_box_gives_zero_weights():
    exp = explain_instance(_image(), _constant_box, "image", GRID49)
    assert exp.num_features == 49
    assert np.abs(exp.feature_weights).max() < 1e-12


def test_noise_box_weights_inside_null_band():
    # one fixed seed; the null band is per-feature at 3 sigma
    img = _image()
    cfg = GRID49
    exp = explain_instance(img, _noise_box(0), "image", cfg)
    masks = sample_masks(49, cfg.num_samples, cfg.seed)
    box = _noise_box(0)
    proba = np.concatenate([box(masks[i:i + cfg.batch_size]) for i in range(0, len(masks), cfg.batch_size)])
    dist = mask_distances(masks)
    np.testing.assert_allclose(fit_surrogate(masks, proba[:, exp.target_class], dist, cfg)[0],
                               exp.feature_weights, atol=1e-12)
    mu, sigma = permutation_null(masks, proba[:, exp.target_class], dist, cfg, n_permutations=200)
    assert np.all(np.abs(np.asarray(exp.feature_weights) - mu) <= 3 * sigma)


def test_indicator_token_ranked_first():
    exp = explain_instance("this meme is good for real", _good_box, "text", LimeConfig(num_samples=500))
    assert exp.target_name == "Positive"
    w = np.asarray(exp.feature_weights)
    good = exp.tokens.index("good")
    assert w[good] > 0 and all(w[good] > w[j] for j in range(len(w)) if j != good)
    assert exp.ranked_features()[0][0] == good


def test_explanation_bytes_are_deterministic():
    img = _image(4, 64)
    cfg = LimeConfig(num_segments_target=16, num_samples=200, seed=11)
    box = lambda b: _noise_box(int(np.asarray(b).sum() * 1e3) % 2**32)(b)
    a = explain_instance(img, box, "image", cfg).to_json()
    b = explain_instance(img, box, "image", cfg).to_json()
    assert a == b
    t1 = explain_instance("good vibes only", _good_box, "text", cfg).to_json()
    assert t1 == explain_instance("good vibes only", _good_box, "text", cfg).to_json()


def test_anchoring_row_zero_is_original():
    img = _image(5, 32)
    fs = segment_image(img, LimeConfig(segmenter="grid", num_segments_target=4))
    out = perturb_images(img, sample_masks(4, 3, 0), fs)
    assert np.array_equal(out[0], img)
    seen = []

    def box(batch):
        seen.extend(list(batch) if isinstance(batch, list) else [])
        return _good_box(batch)

    caption = "good  day\tfolks"
    exp = explain_instance(caption, box, "text", LimeConfig(num_samples=20))
    assert seen[0] == caption
    assert exp.original_proba == _good_box([caption])[0].tolist()


def test_non_probability_rows_rejected():
    with pytest.raises(ExplanationError, match="probability"):
        explain_instance("a b c", lambda b: np.ones((len(b), 3)), "text", LimeConfig(num_samples=10))
    with pytest.raises(ExplanationError):
        explain_instance("a b c", lambda b: np.ones((len(b) + 1, 3)) / 3, "text", LimeConfig(num_samples=10))


def test_empty_caption_gives_empty_explanation():
    exp = explain_instance("", _good_box, "text")
    assert exp.num_features == 0 and exp.masks_used == 0 and exp.tokens == []
    assert exp.target_name == "Negative"


def test_target_class_override_and_class_weights():
    exp = explain_instance("good news", _good_box, "text", LimeConfig(num_samples=50, target_class=2))
    assert exp.target_class == 2
    assert exp.feature_weights == exp.class_weights[2]
    # rows sum to one so the class weights cancel
    np.testing.assert_allclose(np.sum(exp.class_weights, axis=0), 0, atol=1e-9)


# ------------------------------------------------------------------- rendering


def _expl(weights, modality="image", tokens=()):
    return Explanation(modality=modality, target_class=1, feature_weights=list(weights), intercept=0.0,
                       surrogate_r2=1.0, masks_used=10, tokens=list(tokens),
                       class_weights=[[0.0] * len(weights), list(weights), [-w for w in weights]])


def test_zero_weights_leave_image_and_text_untouched():
    img = _image(6, 32)
    fs = segment_image(img, LimeConfig(segmenter="grid", num_segments_target=4))
    assert np.array_equal(overlay_image(_expl([0, 0, 0, 0]), img, fs), img)
    zero_text = _expl([0, 0], "text", ["a", "b"])
    assert token_colors(zero_text) == [None, None]
    assert "rgba" not in render_text_html(zero_text)


def test_single_dominant_superpixel_is_one_green_region():
    img = _image(7, 32)
    fs = segment_image(img, LimeConfig(segmenter="grid", num_segments_target=4))
    out = overlay_image(_expl([0, 0, 0.7, 0]), img, fs, top_k=5, max_alpha=0.6)
    changed = np.any(out != img, axis=-1)
    assert np.array_equal(changed, fs.segment_map == 2)
    region = fs.segment_map == 2
    np.testing.assert_allclose(out[region], 0.4 * img[region] + 0.6 * np.asarray(SUPPORT_RGB))


def test_negative_weights_tint_red():
    img = np.full((8, 8, 3), 0.5)
    fs = segment_image(img, LimeConfig(segmenter="grid", num_segments_target=4))
    out = overlay_image(_expl([0, -1.0, 0, 0]), img, fs)
    px = out[fs.segment_map == 1][0]
    assert px[0] > 0.5 and px[1] < 0.5


def test_token_colors_follow_class():
    exp = _expl([0.5, -0.5], "text", ["yay", "boo"])
    colors = token_colors(exp)
    assert colors[0][0] == CLASS_COLORS[Label.POSITIVE]
    assert colors[1][0] == CLASS_COLORS[Label.NEGATIVE]  # "boo" pushes towards Negative
    assert colors[0][1] == pytest.approx(1.0)


def test_render_round_trips_sidecar(tmp_path):
    img = _image(8, 32)
    fs = segment_image(img, LimeConfig(segmenter="grid", num_segments_target=4))
    exp = _expl([0.1, -0.2, 0.3, 0.0])
    written = render_explanation(exp, img, tmp_path / "o.png", feature_space=fs)
    assert written["overlay"].read_bytes()[:4] == b"\x89PNG"
    assert Explanation.from_json(written["json"].read_text()) == exp
    text = _expl([0.2, 0.0], "text", ["<b>", "x"])
    written = render_explanation(text, None, tmp_path / "t.html")
    html_out = written["overlay"].read_text()
    assert "&lt;b&gt;" in html_out and "Positive" in html_out
    assert json.loads(written["json"].read_text())["tokens"] == ["<b>", "x"]


def test_render_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError):
        render_explanation(_expl([0.1], "text", ["a"]), None, blocker / "x.html")
