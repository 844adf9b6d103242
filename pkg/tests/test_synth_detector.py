import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cellpr.boxes import BoundingBox
from cellpr.data import ImageRecord
from cellpr.detector import (MIN_SIDE_PX, DetectorTrainConfig, DivergenceError, GridDetectorParams, assign_targets,
                             cell_features, decode_box, detect, detection_loss, detection_loss_outputs, encode_box,
                             forward, nms, train_detector)
from cellpr.imaging import GrayImage
from cellpr.regularizer import RegularizerConfig
from cellpr.synth import Cell, ClassParams, SceneSpec, draw_cells, generate_scenes, rasterize, render_scene

SMALL_TRAIN = DetectorTrainConfig(epochs=6)


def random_params(rng, image, grid=8, n_classes=2, scale=1.0):
    feats = cell_features(image, grid)
    p = GridDetectorParams.init(feats, grid, n_classes, (image.width, image.height), rng)
    p.weight = rng.normal(0, scale, p.weight.shape)
    p.bias = rng.normal(0, scale, p.bias.shape)
    return p, feats


# ---------------------------------------------------------------- scenes

def test_zero_counts_give_pure_background():
    spec = SceneSpec(classes=[ClassParams("a", 0, 5, 1, 60, 10), ClassParams("b", 0, 9, 1, 170, 10)],
                     noise_sd=0.0)
    rec = render_scene(spec, seed=1)
    assert rec.gold == []
    assert np.all(rec.image.pixels == spec.background)


def test_single_cell_geometry():
    cell = Cell(0, 50.0, 50.0, 8.0, 8.0, 0.3, 60.0)
    b = cell.bbox()
    assert np.allclose(b.as_array(), [42, 42, 58, 58], atol=1e-12)
    spec = SceneSpec(noise_sd=0.0)
    px = rasterize(spec, [cell], np.random.default_rng(0))
    assert px[50, 50] == 60.0 and px[50, 41] == spec.background and px[50, 58] == spec.background


def test_mean_box_size_matches_generative_parameters():
    spec = SceneSpec()
    recs = generate_scenes(spec, 200, seed=0)
    rng = np.random.default_rng(123)
    for cid, cp in enumerate(spec.classes):
        got = [b.area for r in recs for c, b in r.gold if c == cid]
        # Monte-Carlo oracle for the expected bounding-box area of a randomly rotated ellipse
        n = 200_000
        r = np.maximum(spec.min_radius, rng.normal(cp.radius_mean, cp.radius_sd, n))
        asp = rng.uniform(*cp.aspect_range, n)
        a, b = r * np.sqrt(asp), r / np.sqrt(asp)
        t = rng.uniform(0, math.pi, n)
        hw = np.sqrt((a * np.cos(t)) ** 2 + (b * np.sin(t)) ** 2)
        hh = np.sqrt((a * np.sin(t)) ** 2 + (b * np.cos(t)) ** 2)
        expected = np.mean(4 * hw * hh)
        assert np.mean(got) == pytest.approx(expected, rel=0.05)


def test_scenes_deterministic_per_seed_and_distinct_across_seeds():
    spec = SceneSpec()
    a, b, c = render_scene(spec, seed=5), render_scene(spec, seed=5), render_scene(spec, seed=6)
    assert np.array_equal(a.image.pixels, b.image.pixels) and a.gold == b.gold
    assert not np.array_equal(a.image.pixels, c.image.pixels)


def test_scene_spec_rejects_indistinct_classes():
    with pytest.raises(ValueError):
        SceneSpec(classes=[ClassParams("a", 3, 5, 1, 60, 10), ClassParams("b", 3, 5, 2, 60, 5)])
    with pytest.raises(ValueError):
        ClassParams("a", -1, 5, 1, 60, 10)


def test_cells_stay_inside_the_image():
    spec = SceneSpec()
    for cell in draw_cells(spec, np.random.default_rng(2)):
        b = cell.bbox()
        assert 0 <= b.w_l and b.w_r <= spec.width and 0 <= b.h_l and b.h_r <= spec.height


# ---------------------------------------------------------------- detection

def test_cell_features_shape(scenes):
    f = cell_features(scenes[0].image, 16)
    assert f.shape[0] == 256 and np.all(np.isfinite(f))


def test_saturated_objectness_gives_no_detections(scenes):
    rng = np.random.default_rng(0)
    p, _ = random_params(rng, scenes[0].image)
    p.weight[:, 0] = 0.0
    p.bias[0] = -np.inf
    assert detect(p, scenes[0].image, conf_threshold=0.0) == []


def test_nms_keeps_one_of_identical_boxes():
    boxes = np.array([[1, 1, 10, 10], [1, 1, 10, 10]], dtype=float)
    assert nms(boxes, np.array([0.6, 0.9])) == [1]
    far = np.array([[0, 0, 5, 5], [20, 20, 25, 25]], dtype=float)
    assert sorted(nms(far, np.array([0.5, 0.4]))) == [0, 1]


def test_decode_encode_round_trip(scenes):
    p, _ = random_params(np.random.default_rng(1), scenes[0].image, grid=16)
    w, h = p.image_size
    sw, sh = p.cell_size
    for rec in scenes:
        for _, b in rec.gold:
            if b.width <= MIN_SIDE_PX or b.height <= MIN_SIDE_PX:
                continue
            cx, cy = b.center
            row, col = min(int(cy // sh), p.grid - 1), min(int(cx // sw), p.grid - 1)
            back = decode_box(p, encode_box(p, b, row, col), row, col)
            assert np.max(np.abs(back.as_array() - b.clamp(w, h).as_array())) <= 0.5


@given(st.integers(0, 10_000), st.floats(0.0, 0.9))
def test_detections_inside_image_with_valid_confidence(seed, thr):
    rng = np.random.default_rng(seed)
    img = GrayImage(rng.uniform(0, 255, (64, 64)))
    p, _ = random_params(rng, img, grid=8, scale=2.0)
    for d in detect(p, img, conf_threshold=thr):
        b = d.box
        assert 0 <= b.w_l <= b.w_r <= 64 and 0 <= b.h_l <= b.h_r <= 64
        assert thr <= d.confidence <= 1.0


# ---------------------------------------------------------------- loss

def test_perfect_predictions():
    rng = np.random.default_rng(2)
    img = GrayImage(rng.uniform(0, 255, (64, 64)))
    p, _ = random_params(rng, img)
    gold = [(0, BoundingBox(5, 5, 15, 15)), (1, BoundingBox(30, 40, 50, 60))]
    obj, cls, box = assign_targets(p, gold)
    out = np.zeros((p.grid ** 2, p.n_out))
    out[:, 0] = np.where(obj > 0, 50.0, -50.0)
    pos = obj > 0
    out[pos, p.cls_slice] = -50.0
    out[np.flatnonzero(pos), 1 + cls[pos]] = 50.0
    out[:, p.box_slice] = box
    res = detection_loss_outputs(p, out, (obj, cls, box))
    assert res.loc == 0.0
    assert res.cls <= 1e-40 and res.obj <= 1e-20


def test_empty_image_has_only_background_objectness():
    rng = np.random.default_rng(3)
    rec = ImageRecord(GrayImage(rng.uniform(0, 255, (64, 64))), [])
    p, _ = random_params(rng, rec.image)
    res, gw, gb = detection_loss(p, rec)
    assert res.cls == 0.0 and res.loc == 0.0 and res.total == res.obj > 0
    assert np.all(gw[:, p.box_slice] == 0) and np.all(gw[:, p.cls_slice] == 0)


def test_detection_loss_gradient_matches_finite_differences(scenes):
    rng = np.random.default_rng(4)
    rec = scenes[1]
    p, feats = random_params(rng, rec.image, grid=16, scale=0.3)
    _, gw, gb = detection_loss(p, rec, pos_weight=2.0, features=feats)
    h = 1e-6
    worst = 0.0

    def loss():
        return detection_loss(p, rec, pos_weight=2.0, features=feats)[0].total

    for arr, grad in ((p.weight, gw), (p.bias, gb)):
        flat, gflat = arr.reshape(-1), grad.reshape(-1)
        for k in rng.choice(flat.size, size=min(40, flat.size), replace=False):
            old = flat[k]
            flat[k] = old + h
            up = loss()
            flat[k] = old - h
            dn = loss()
            flat[k] = old
            fd = (up - dn) / (2 * h)
            worst = max(worst, abs(gflat[k] - fd) / max(abs(fd), 1e-2))
    assert worst <= 1e-5


# ---------------------------------------------------------------- training

def test_zero_lambda_is_bitwise_baseline(scenes, extractor):
    base = train_detector(scenes, SMALL_TRAIN, 2)
    off = train_detector(scenes, SMALL_TRAIN, 2, RegularizerConfig(lambda_reg=0.0), extractor)
    assert np.array_equal(base.params.weight, off.params.weight)
    assert np.array_equal(base.params.bias, off.params.bias)
    assert [r.l_total for r in base.step_reports] == [r.l_total for r in off.step_reports]


def test_training_is_deterministic_and_loss_trends_down(scenes):
    cfg = dataclasses.replace(SMALL_TRAIN, epochs=20)
    a = train_detector(scenes, cfg, 2)
    b = train_detector(scenes, cfg, 2)
    assert np.array_equal(a.params.weight, b.params.weight)
    trace = np.array([r.l_total for r in a.step_reports])
    assert np.all(np.isfinite(trace))
    window = 6
    ma = np.convolve(trace, np.ones(window) / window, mode="valid")
    assert ma[-1] < ma[0]
    assert np.mean(trace[-window:]) < 0.5 * np.mean(trace[:window])


def test_regularized_training_runs(scenes, extractor):
    res = train_detector(scenes, dataclasses.replace(SMALL_TRAIN, epochs=12), 2, RegularizerConfig(), extractor)
    assert all(math.isfinite(r.l_total) for r in res.step_reports)
    assert any(r.l_exp != 0.0 for r in res.step_reports)


def test_implicit_regularizer_needs_extractor(scenes):
    with pytest.raises(ValueError):
        train_detector(scenes, SMALL_TRAIN, 2, RegularizerConfig())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(scenes):
    with pytest.raises(DivergenceError):
        train_detector(scenes, dataclasses.replace(SMALL_TRAIN, learning_rate=1e6, epochs=50), 2)


def test_params_json_round_trip(scenes, tmp_path):
    p, _ = random_params(np.random.default_rng(5), scenes[0].image)
    p.save(tmp_path / "d.json")
    q = GridDetectorParams.load(tmp_path / "d.json")
    assert np.array_equal(forward(p, cell_features(scenes[0].image, p.grid)),
                          forward(q, cell_features(scenes[0].image, q.grid)))
