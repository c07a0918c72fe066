import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from util_grad import small_model
from xwin.evaluation import (FeatureTable, auroc, domain_similarity, extract_features,
                             encoder_for_eval, few_shot_finetune, linear_probe,
                             logistic_probe_fit, patch_correspondence, probe_scores,
                             probe_determinism_guard, stratified_few_shot)


# ------------------------------------------------------------ auroc


def test_auroc_perfect_separation():
    scores = np.array([0.9, 0.8, 0.2, 0.1])
    labels = np.array([True, True, False, False])
    assert auroc(scores, labels) == 1.0


def test_auroc_reversed():
    scores = np.array([0.1, 0.2, 0.8, 0.9])
    labels = np.array([True, True, False, False])
    assert auroc(scores, labels) == 0.0


def test_auroc_all_tied():
    scores = np.ones(10)
    labels = np.array([True] * 4 + [False] * 6)
    assert auroc(scores, labels) == 0.5


def test_auroc_tie_contributes_half():
    scores = np.array([1.0, 0.5, 0.5, 0.0])
    labels = np.array([True, True, False, False])
    # pairs: (1>0.5)+(1>0)+(0.5=0.5 -> 1/2)+(0.5>0) = 3.5 of 4
    assert auroc(scores, labels) == pytest.approx(3.5 / 4)


def test_auroc_single_class_rejected():
    with pytest.raises(ValueError):
        auroc(np.ones(4), np.array([True] * 4))


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 2**31 - 1),
    scale=st.floats(0.1, 10.0),
    shift=st.floats(-5.0, 5.0),
)
def test_auroc_invariant_under_monotone_transforms(seed, scale, shift):
    rng = np.random.default_rng(seed)
    scores = rng.standard_normal(20)
    labels = np.concatenate([np.ones(10, bool), np.zeros(10, bool)])
    base = auroc(scores, labels)
    assert auroc(scale * scores + shift, labels) == pytest.approx(base, abs=1e-12)
    assert auroc(np.exp(scores), labels) == pytest.approx(base, abs=1e-12)


# ------------------------------------------------------------ probe


def _toy_features(rng, n=40, d=6, separable=True):
    labels = np.concatenate([np.ones(n // 2, bool), np.zeros(n // 2, bool)])
    feats = rng.standard_normal((n, d))
    if separable:
        feats[:, 0] += np.where(labels, 4.0, -4.0)
    return feats, labels


def test_probe_separable_reaches_perfect_auroc():
    rng = np.random.default_rng(0)
    f_train, y_train = _toy_features(rng)
    f_test, y_test = _toy_features(rng)
    train = FeatureTable(f_train, {"task": y_train}, "train")
    test = FeatureTable(f_test, {"task": y_test}, "test")
    assert linear_probe(train, test, "task") == 1.0


def test_probe_permuted_labels_near_chance():
    rng = np.random.default_rng(1)
    aurocs = []
    for seed in range(20):
        r = np.random.default_rng(seed)
        f_train, y_train = _toy_features(r, n=60)
        y_perm = r.permutation(y_train)
        f_test, y_test = _toy_features(r, n=40)
        y_test_perm = r.permutation(y_test)
        train = FeatureTable(f_train, {"task": y_perm}, "train")
        test = FeatureTable(f_test, {"task": y_test_perm}, "test")
        aurocs.append(linear_probe(train, test, "task"))
    assert abs(float(np.mean(aurocs)) - 0.5) < 0.1


def test_probe_deterministic():
    rng = np.random.default_rng(2)
    f, y = _toy_features(rng)
    p1 = logistic_probe_fit(f, y.astype(float))
    p2 = logistic_probe_fit(f, y.astype(float))
    assert np.array_equal(p1[0], p2[0]) and p1[1] == p2[1]
    s1 = probe_scores(p1, f)
    s2 = probe_scores(p2, f)
    assert np.array_equal(s1, s2)


def test_probe_does_not_mutate_encoder():
    model = small_model(seed=0)
    enc = encoder_for_eval(model)
    rng = np.random.default_rng(3)
    imgs = rng.random((6, 16, 16))
    with probe_determinism_guard(enc):
        feats = extract_features(enc, imgs)
        labels = np.array([True, False, True, False, True, False])
        linear_probe(FeatureTable(feats, {"t": labels}), FeatureTable(feats, {"t": labels}), "t")


def test_extract_features_shape_and_consistency():
    model = small_model(seed=1)
    enc = encoder_for_eval(model, "teacher")
    rng = np.random.default_rng(4)
    img = rng.random((16, 16))
    feats = extract_features(enc, np.stack([img, img, img]))
    assert feats.shape == (3, 16)
    assert np.allclose(feats[0], feats[1])
    assert np.array_equal(extract_features(enc, [img]), feats[:1])


# ------------------------------------------------------------ few-shot


def test_stratified_sampling_exact_counts():
    labels = np.array([True] * 10 + [False] * 20)
    idx = stratified_few_shot(labels, 5, np.random.default_rng(0))
    assert labels[idx].sum() == 5 and (~labels[idx]).sum() == 5
    with pytest.raises(ValueError):
        stratified_few_shot(labels, 11, np.random.default_rng(0))


def test_few_shot_report_has_five_entries():
    model = small_model(seed=2)
    rng = np.random.default_rng(5)
    train_imgs = rng.random((16, 16, 16))
    train_labels = np.array([True, False] * 8)
    test_imgs = rng.random((8, 16, 16))
    test_labels = np.array([True, False] * 4)
    report = few_shot_finetune(model, train_imgs, train_labels, test_imgs,
                               test_labels, k=4, epochs=2)
    assert len(report.auroc_per_seed) == 5
    assert all(0.0 <= a <= 1.0 for a in report.auroc_per_seed)


def test_few_shot_does_not_mutate_model():
    model = small_model(seed=3)
    before = {n: p.clone() for n, p in model.named_parameters()}
    rng = np.random.default_rng(6)
    few_shot_finetune(model, rng.random((8, 16, 16)), np.array([True, False] * 4),
                      rng.random((4, 16, 16)), np.array([True, False] * 2),
                      k=2, seeds=(0,), epochs=1)
    for n, p in model.named_parameters():
        assert torch.equal(p, before[n]), n


# ------------------------------------------------- domain similarity


def test_domain_similarity_identical_sets():
    rng = np.random.default_rng(7)
    f = rng.standard_normal((10, 8))
    cos, l2 = domain_similarity(f, f.copy())
    assert cos == pytest.approx(1.0)
    assert l2 == pytest.approx(0.0)


def test_domain_similarity_orthogonal_centers():
    a = np.tile([1.0, 0.0], (5, 1))
    b = np.tile([0.0, 1.0], (5, 1))
    cos, l2 = domain_similarity(a, b)
    assert cos == pytest.approx(0.0, abs=1e-12)
    assert l2 == pytest.approx(np.sqrt(2.0))


# --------------------------------------------- patch correspondence


def test_patch_correspondence_self_peak():
    model = small_model(seed=4, image_size=32)  # 4x4 grid
    enc = encoder_for_eval(model)
    rng = np.random.default_rng(8)
    img = rng.random((32, 32))
    for landmark in (0, 7, 15):
        heat = patch_correspondence(enc, img, img, landmark)
        assert heat.shape == (4, 4)
        assert np.all(heat >= -1.0 - 1e-9) and np.all(heat <= 1.0 + 1e-9)
        assert int(np.argmax(heat.reshape(-1))) == landmark
        assert heat.reshape(-1)[landmark] == pytest.approx(1.0)
