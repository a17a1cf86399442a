from __future__ import annotations

import math

import numpy as np
import pytest

from objsearch import nn
from objsearch.detector import (
    Detection,
    DetectorConfig,
    build_dataset,
    detect,
    detection_loss,
    forward,
    init_detector,
    load_detector,
    loss_graph,
    save_detector,
    train,
)
from objsearch.scene import Box

from oracles import assert_grads_close, detection_loss_reference, finite_difference_grads


@pytest.fixture(scope="module")
def small_model():
    return init_detector(DetectorConfig(feature_dim=8, embed_dim=4), seed=2)


def test_detect_output_ranges(small_model):
    rng = np.random.default_rng(1)
    for _ in range(30):
        det = detect(small_model, rng.normal(size=8), rng.normal(size=8))
        assert 0.0 <= det.p <= 1.0
        assert 0.0 <= det.box.x <= 1.0 and 0.0 <= det.box.y <= 1.0
        assert 0.0 < det.box.w <= 1.0 and 0.0 < det.box.h <= 1.0
        assert det.present == (det.p >= small_model.config.threshold)


def test_detect_dimension_mismatch(small_model):
    with pytest.raises(nn.ShapeError):
        detect(small_model, np.zeros(5), np.zeros(8))


def test_detection_area_zero_when_absent():
    det = Detection(p=0.2, box=Box(0.5, 0.5, 0.5, 0.5), present=False)
    assert det.area == 0.0
    det = Detection(p=0.9, box=Box(0.5, 0.5, 0.5, 0.5), present=True)
    assert det.area == 0.25


def test_loss_perfect_prediction_is_nearly_zero():
    b = (0.5, 0.5, 0.2, 0.2)
    val = detection_loss(1.0 - 1e-7, b, 1, b, box_weight=0.5)
    assert val == pytest.approx(-math.log(1.0 - 1e-7), abs=1e-9)
    assert val < 2e-7


def test_loss_negative_at_half_is_ln2():
    val = detection_loss(0.5, (0.3, 0.3, 0.2, 0.2), 0, None, box_weight=0.5)
    assert val == pytest.approx(math.log(2.0), abs=1e-9)


def test_loss_positive_with_box_error():
    val = detection_loss(0.5, (0.5, 0.5, 0.2, 0.2), 1, (0.5, 0.5, 0.4, 0.2), box_weight=0.5)
    assert val == pytest.approx(math.log(2.0) + 0.5 * 0.04, abs=1e-9)
    assert val == pytest.approx(0.7131, abs=1e-4)


def test_loss_label_box_consistency_enforced():
    with pytest.raises(ValueError):
        detection_loss(0.5, (0.5, 0.5, 0.2, 0.2), 1, None, 0.5)
    with pytest.raises(ValueError):
        detection_loss(0.5, (0.5, 0.5, 0.2, 0.2), 0, (0.5, 0.5, 0.2, 0.2), 0.5)


def test_loss_matches_reference_on_random_pairs():
    rng = np.random.default_rng(31)
    for _ in range(100):
        p = float(rng.uniform(1e-9, 1.0 - 1e-9))
        box = rng.uniform(0.05, 0.95, 4)
        present = int(rng.integers(0, 2))
        truth = rng.uniform(0.05, 0.95, 4) if present else None
        weight = float(rng.uniform(0.1, 2.0))
        mine = detection_loss(p, box, present, truth, weight)
        ref = detection_loss_reference(p, box, present, truth if present else None, weight)
        assert mine == pytest.approx(ref, abs=1e-12)


def test_loss_gradients_match_finite_differences(small_model):
    rng = np.random.default_rng(7)
    view, targ = rng.normal(size=8), rng.normal(size=8)
    for present in (0.0, 1.0):
        truth = rng.uniform(0.2, 0.8, 4)

        def graph(p):
            prob, box = forward(p, view, targ)
            return loss_graph(prob, box, np.asarray(present), truth, 0.5)

        _, grads = nn.value_and_grad(graph, small_model.params)
        fd = finite_difference_grads(
            lambda ps: float(graph(ps.leaves()).data), small_model.params, rng=rng
        )
        assert_grads_close(grads, fd, tol=1e-4)


def test_box_head_gets_no_gradient_on_negative_sample(small_model):
    rng = np.random.default_rng(8)
    view, targ = rng.normal(size=8), rng.normal(size=8)

    def graph(p):
        prob, box = forward(p, view, targ)
        return loss_graph(prob, box, np.asarray(0.0), rng.uniform(0.2, 0.8, 4), 0.5)

    _, grads = nn.value_and_grad(graph, small_model.params)
    assert np.all(grads["box_out.W"] == 0.0)
    assert np.all(grads["box_out.b"] == 0.0)
    assert np.all(grads["box_hidden.W"] == 0.0)


def test_default_box_weight_is_half():
    assert DetectorConfig().box_weight == 0.5


def test_build_dataset_requires_positives_and_negatives(scene_5x5):
    data = build_dataset([scene_5x5])
    n_states = len(scene_5x5.view_features)
    assert data.views.shape == (n_states * 4, 32)
    assert 0 < data.labels.sum() < len(data.labels)


def test_train_loss_decreases(scene_5x5):
    _, curve = train(scene_5x5, DetectorConfig(), seed=3, epochs=8)
    assert curve[-1] < curve[0]


def test_train_lr_zero_leaves_params_unchanged(scene_5x5):
    config = DetectorConfig(lr=0.0)
    before = init_detector(config, seed=3)
    model, _ = train(scene_5x5, config, seed=3, epochs=1)
    for name in before.params.names():
        assert np.array_equal(model.params[name], before.params[name])


def test_train_deterministic(scene_5x5):
    m1, c1 = train(scene_5x5, DetectorConfig(), seed=3, epochs=3)
    m2, c2 = train(scene_5x5, DetectorConfig(), seed=3, epochs=3)
    assert c1 == c2
    for name in m1.params.names():
        assert np.array_equal(m1.params[name], m2.params[name])


def test_checkpoint_roundtrip(tmp_path, small_model):
    path = tmp_path / "det.npz"
    save_detector(small_model, path)
    loaded = load_detector(path)
    assert loaded.config == small_model.config
    for name in small_model.params.names():
        assert np.array_equal(loaded.params[name], small_model.params[name])


def test_load_rejects_wrong_kind(tmp_path, small_model):
    path = tmp_path / "x.npz"
    nn.save_checkpoint(small_model.params, path, {"kind": "other"})
    with pytest.raises(ValueError, match="detector"):
        load_detector(path)