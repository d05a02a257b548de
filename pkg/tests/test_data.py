import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tokenmix.data import (Scene, Shape, SplitSpec, UndefinedMetricError, class_iou, class_kind,
                           class_palette, confusion_matrix, evaluate, gen_scene, load_archive,
                           make_splits, miou, read_scene_record, render_label, save_archive,
                           shape_mask, write_scene_record)
from tokenmix.errors import ConfigError, ShapeError
from tokenmix.model import ModelConfig, SegmenterModel


def brute_confusion(pred, truth, c):
    cm = np.zeros((c, c), dtype=np.int64)
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            cm[truth[i, j], pred[i, j]] += 1
    return cm


def brute_miou(pred, truth, c):
    ious = []
    for k in range(c):
        inter = union = 0
        for p, t in zip(pred.ravel(), truth.ravel()):
            inter += p == k and t == k
            union += p == k or t == k
        if union:
            ious.append(inter / union)
    return sum(ious) / len(ious)


# -- scenes ------------------------------------------------------------------

def test_zero_shapes_all_background():
    s = gen_scene(np.random.default_rng(0), size=32, num_classes=2, n_shapes=0)
    assert not s.label.any()
    assert s.image.shape == (32, 32, 3)


def test_full_frame_rectangle():
    s = gen_scene(np.random.default_rng(0), shapes=[Shape("rectangle", 1, (0, 0, 32, 32))])
    assert (s.label == 1).all()


@pytest.mark.parametrize("r", [6.0, 7.5, 9.0, 12.0])
def test_circle_area(r):
    rng = np.random.default_rng(int(r * 10))
    for _ in range(20):
        cy, cx = rng.uniform(r, 64 - r, size=2)
        area = shape_mask(Shape("circle", 1, (cy, cx, r)), 64).sum()
        assert abs(area - math.pi * r * r) <= 0.05 * math.pi * r * r


def test_later_shapes_occlude():
    a = Shape("rectangle", 1, (0, 0, 20, 20))
    b = Shape("rectangle", 2, (10, 10, 30, 30))
    lbl = render_label([a, b], 32)
    assert lbl[15, 15] == 2 and lbl[5, 5] == 1 and lbl[25, 25] == 2 and lbl[31, 0] == 0
    assert render_label([b, a], 32)[15, 15] == 1


def test_recolouring_changes_image_not_label():
    shapes = [Shape("circle", 1, (16, 16, 8)), Shape("rectangle", 2, (2, 2, 10, 12))]
    s1 = gen_scene(np.random.default_rng(4), shapes=shapes)
    s2 = gen_scene(np.random.default_rng(4), shapes=shapes, palette=class_palette(4)[::-1].copy())
    np.testing.assert_array_equal(s1.label, s2.label)
    assert not np.array_equal(s1.image, s2.image)


def test_random_scenes_are_valid():
    for seed in range(50):
        s = gen_scene(np.random.default_rng(seed), num_classes=4)
        assert s.image.min() >= 0 and s.image.max() <= 1
        assert s.label.min() >= 0 and s.label.max() < 4
        assert 1 <= len(np.unique(s.label)) <= 4


def test_classes_have_characteristic_shapes():
    assert [class_kind(k) for k in (1, 2, 3, 4)] == ["circle", "rectangle", "triangle", "circle"]


def test_gen_scene_preconditions():
    with pytest.raises(ConfigError):
        gen_scene(np.random.default_rng(0), size=8)
    with pytest.raises(ConfigError):
        gen_scene(np.random.default_rng(0), num_classes=1)


# -- splits ------------------------------------------------------------------

def test_split_sizes_and_disjointness():
    lab, unl, val = make_splits(SplitSpec(4, 64, 32, seed=3))
    assert (len(lab), len(unl), len(val)) == (4, 64, 32)
    ids = [s.scene_id for s in lab + unl + val]
    assert len(set(ids)) == len(ids)
    assert all(s.label is None for s in unl)
    assert all(s.label is not None for s in lab + val)


def test_splits_deterministic():
    a = make_splits(SplitSpec(2, 3, 2, seed=9))
    b = make_splits(SplitSpec(2, 3, 2, seed=9))
    for sa, sb in zip(sum(a, []), sum(b, [])):
        np.testing.assert_array_equal(sa.image, sb.image)
    c = make_splits(SplitSpec(2, 3, 2, seed=10))
    assert not np.array_equal(a[0][0].image, c[0][0].image)


def test_split_counts_must_be_positive():
    with pytest.raises(ConfigError):
        SplitSpec(0, 4, 4)


# -- metrics ------------------------------------------------------------------

def test_confusion_diagonal_and_constant():
    truth = np.random.default_rng(0).integers(0, 3, (8, 8))
    cm = confusion_matrix(truth, truth, 3)
    np.testing.assert_array_equal(cm, np.diag(np.bincount(truth.ravel(), minlength=3)))
    cm = confusion_matrix(np.full((8, 8), 2), truth, 3)
    assert cm[:, :2].sum() == 0
    np.testing.assert_array_equal(cm[:, 2], np.bincount(truth.ravel(), minlength=3))


def test_confusion_matches_double_loop():
    rng = np.random.default_rng(1)
    for _ in range(20):
        pred, truth = rng.integers(0, 4, (8, 8)), rng.integers(0, 4, (8, 8))
        cm = confusion_matrix(pred, truth, 4)
        np.testing.assert_array_equal(cm, brute_confusion(pred, truth, 4))
        assert cm.sum() == 64


def test_confusion_errors():
    with pytest.raises(IndexError):
        confusion_matrix(np.array([[0, 4]]), np.array([[0, 1]]), 4)
    with pytest.raises(IndexError):
        confusion_matrix(np.array([[0, 1]]), np.array([[-1, 1]]), 4)
    with pytest.raises(ShapeError):
        confusion_matrix(np.zeros((2, 2), int), np.zeros((2, 3), int), 4)


def test_miou_cases():
    truth = np.array([[0, 0], [1, 1]])
    assert miou(confusion_matrix(truth, truth, 2)) == 1.0
    assert miou(confusion_matrix(1 - truth, truth, 2)) == 0.0
    cm = confusion_matrix(np.zeros_like(truth), truth, 2)
    np.testing.assert_array_equal(class_iou(cm), [0.5, 0.0])
    assert miou(cm) == 0.25


def test_miou_excludes_empty_classes():
    truth = np.array([[0, 2]])
    cm = confusion_matrix(truth, truth, 4)
    iou = class_iou(cm)
    assert np.isnan(iou[1]) and np.isnan(iou[3])
    assert miou(cm) == 1.0
    with pytest.raises(UndefinedMetricError):
        miou(np.zeros((3, 3), int))


@settings(max_examples=100, deadline=None)
@given(arrays(np.int64, (5, 6), elements=st.integers(0, 3)), arrays(np.int64, (5, 6), elements=st.integers(0, 3)))
def test_miou_matches_brute_force(pred, truth):
    score = miou(confusion_matrix(pred, truth, 4))
    assert 0.0 <= score <= 1.0
    assert score == pytest.approx(brute_miou(pred, truth, 4), abs=1e-15)
    assert (score == 1.0) == np.array_equal(pred, truth)


def _val(n=4):
    return make_splits(SplitSpec(1, 1, n, seed=5))[2]


def test_evaluate_oracle_and_constant():
    val = _val()
    lookup = {s.image.tobytes(): s.label for s in val}
    score, per_class = evaluate(lambda x: np.stack([lookup[i.tobytes()] for i in x]), val, num_classes=4)
    assert score == 1.0
    assert per_class.shape == (4,)

    half = np.zeros((32, 32), int)
    half[:, 16:] = 1
    balanced = [Scene(np.zeros((32, 32, 3)), half) for _ in range(3)]
    score, _ = evaluate(lambda x: np.zeros(x.shape[:3], int), balanced, num_classes=2)
    assert score == 0.25


def test_evaluate_uses_one_global_matrix():
    a = np.zeros((32, 32), int)
    b = np.ones((32, 32), int)
    scenes = [Scene(np.zeros((32, 32, 3)), a), Scene(np.ones((32, 32, 3)), b)]

    def pred(x):
        return np.zeros(x.shape[:3], int)

    # per-image averaging would give (1.0 + 0.0) / 2; the pooled matrix gives (0.5 + 0) / 2
    assert evaluate(pred, scenes, num_classes=2)[0] == 0.25


def test_evaluate_model_is_deterministic():
    val = _val(3)
    model = SegmenterModel.init(ModelConfig(), np.random.default_rng(0))
    a = evaluate(model, val)
    b = evaluate(model, val, batch_size=2)
    assert a[0] == b[0]
    np.testing.assert_array_equal(a[1], b[1])
    with pytest.raises(ValueError):
        evaluate(model, [])


# -- archive ------------------------------------------------------------------

def test_scene_record_round_trip(tmp_path):
    s = gen_scene(np.random.default_rng(0))
    s.scene_id = 7
    write_scene_record(tmp_path / "a.bin", s, 4)
    raw = (tmp_path / "a.bin").read_bytes()
    assert np.frombuffer(raw[:16], "<i4").tolist() == [32, 32, 4, 1]
    assert len(raw) == 16 + 32 * 32 * 3 * 8 + 32 * 32 * 4
    back, c = read_scene_record(tmp_path / "a.bin", 7)
    assert c == 4
    np.testing.assert_array_equal(back.image, s.image)
    np.testing.assert_array_equal(back.label, s.label)


def test_archive_round_trip(tmp_path):
    spec = SplitSpec(2, 3, 2, seed=1)
    lab, unl, val = make_splits(spec)
    save_archive(tmp_path, spec, {"labeled": lab, "unlabeled": unl, "val": val}, 4)
    manifest = (tmp_path / "manifest.txt").read_text()
    assert "seed=1" in manifest and "split.unlabeled=2,3,4" in manifest
    spec2, splits = load_archive(tmp_path)
    assert spec2 == spec
    assert [s.scene_id for s in splits["val"]] == [5, 6]
    assert all(s.label is None for s in splits["unlabeled"])
    for a, b in zip(lab + unl + val, splits["labeled"] + splits["unlabeled"] + splits["val"]):
        np.testing.assert_array_equal(a.image, b.image)
