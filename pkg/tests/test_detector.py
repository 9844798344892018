import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from beamguard import scene
from beamguard.detector import BoundingBox, assign_bin, detect_blob, detect_oracle, select_box

CAM = scene.CameraModel()
FLAT = scene.Difficulty(0, 0, texture_amplitude=0.0)
FLAT3 = scene.Difficulty(3, 3, texture_amplitude=0.0)


def box_centered(xc, half=1.0):
    return BoundingBox(xc - half, 0, xc + half, 2)


def render(seed, difficulty):
    spec = scene.sample_scene(seed, difficulty, CAM)
    return spec, scene.quantize(scene.render_scene(spec, CAM))


class _Rec:
    def __init__(self, target, distractors):
        self.target_bbox = target
        self.distractor_bboxes = distractors


# -- bins ---------------------------------------------------------------------------

@pytest.mark.parametrize("xc,expected", [(480, 4), (0, 1), (121, 2), (960, 8), (959.9, 8)])
def test_assign_bin_examples(xc, expected):
    assert assign_bin(box_centered(xc), 960, 8) == expected


def test_assign_bin_direct_arithmetic():
    # ceil(121 * 8 / 960) = ceil(1.00833) = 2
    assert assign_bin(BoundingBox(120, 0, 122, 4), 960, 8) == 2


@given(st.floats(0, 960), st.integers(1, 32))
def test_assign_bin_in_range(xc, bins):
    b = assign_bin(box_centered(xc, 0.5), 960, bins)
    assert 1 <= b <= bins


def test_assign_bin_rejects_zero_bins():
    with pytest.raises(ValueError):
        assign_bin(box_centered(5), 10, 0)


# -- boxes --------------------------------------------------------------------------

def test_box_rejects_degenerate_and_bad_confidence():
    with pytest.raises(ValueError):
        BoundingBox(3, 0, 3, 1)
    with pytest.raises(ValueError):
        BoundingBox(0, 2, 1, 1)
    with pytest.raises(ValueError):
        BoundingBox(0, 0, 1, 1, confidence=1.5)


def test_box_geometry():
    b = BoundingBox(2, 4, 6, 10)
    assert b.center == (4, 7) and b.area == 24 and b.inside(6, 10) and not b.inside(5, 10)


# -- oracle -------------------------------------------------------------------------

def test_oracle_single_target():
    spec = scene.sample_scene(3, FLAT, CAM)
    boxes = detect_oracle(_Rec(spec.target_bbox, ()))
    assert [b.as_tuple() for b in boxes] == [spec.target_bbox]
    assert boxes[0].confidence == 1.0


def test_oracle_three_distractors():
    spec = scene.sample_scene(4, FLAT3, CAM)
    rec = _Rec(spec.target_bbox, tuple(v.bbox for v in spec.distractors))
    assert len(detect_oracle(rec)) == 4


def test_oracle_is_order_independent():
    recs = []
    for s in range(10):
        spec = scene.sample_scene(s, FLAT3, CAM)
        recs.append(_Rec(spec.target_bbox, tuple(v.bbox for v in spec.distractors)))
    forward = [detect_oracle(r) for r in recs]
    backward = [detect_oracle(r) for r in reversed(recs)][::-1]
    assert forward == backward


def test_oracle_requires_metadata():
    with pytest.raises(ValueError):
        detect_oracle(object())


# -- blob ---------------------------------------------------------------------------

def test_blob_matches_oracle_on_flat_single_target_scenes():
    for seed in range(200):
        spec, img = render(seed, FLAT)
        boxes = detect_blob(img, scene.TARGET_COLOR)
        assert len(boxes) == 1
        got, want = boxes[0].as_tuple(), spec.target_bbox
        assert all(abs(g - w) <= 1.0 for g, w in zip(got, want)), (seed, got, want)


def test_blob_uniform_background_is_empty():
    img = np.full((32, 32, 3), 0.4, dtype=np.float32)
    assert detect_blob(img, scene.TARGET_COLOR) == []


def test_blob_zero_tolerance_equals_default_on_pixel_aligned_target():
    # integer box edges: every target pixel carries the exact colour
    for seed in range(50):
        spec = scene.sample_scene(seed, FLAT3, CAM)
        w = float(round(spec.target_size[0]))
        spec = dataclasses.replace(spec, target_size=(w, spec.target_size[1]),
                                   target_center_x=float(round(spec.target_center_x - w / 2)) + w / 2)
        img = scene.quantize(scene.render_scene(spec, CAM))
        assert detect_blob(img, scene.TARGET_COLOR, 0.0) == detect_blob(img, scene.TARGET_COLOR, 0.05)


def test_blob_center_within_one_pixel_on_noiseless_scenes():
    hits = 0
    for seed in range(1000):
        spec, img = render(seed, FLAT3)
        boxes = detect_blob(img, scene.TARGET_COLOR)
        if boxes:
            (cx, cy), (tx, ty) = boxes[0].center, BoundingBox(*spec.target_bbox).center
            hits += abs(cx - tx) <= 1 and abs(cy - ty) <= 1
    assert hits >= 990


def test_blob_sorts_by_area_and_drops_speck():
    img = np.zeros((20, 20, 3))
    color = (1.0, 0.0, 0.0)
    img[1:3, 1:3] = color        # 4 px: below minimum area
    img[5:8, 5:8] = color        # 9 px
    img[10:15, 10:16] = color    # 30 px
    boxes = detect_blob(img, color)
    assert [b.as_tuple() for b in boxes] == [(10, 10, 16, 15), (5, 5, 8, 8)]


def test_blob_uses_four_connectivity():
    img = np.zeros((12, 12, 3))
    color = (0.0, 1.0, 0.0)
    img[0:3, 0:3] = color
    img[3:6, 3:6] = color  # touches the first block only diagonally
    assert len(detect_blob(img, color)) == 2


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (16, 16, 3), elements=st.sampled_from([0.0, 0.5, 1.0])))
def test_blob_boxes_satisfy_invariants(img):
    for b in detect_blob(img, (0.5, 0.5, 0.5), tolerance=0.0, min_area=1):
        assert b.x_min < b.x_max and b.y_min < b.y_max and b.inside(16, 16)


# -- selection ----------------------------------------------------------------------

def test_select_box_modes():
    boxes = [BoundingBox(0, 0, 2, 2), BoundingBox(5, 5, 9, 9), BoundingBox(3, 0, 4, 1)]
    assert select_box(boxes, mode="largest") == boxes[1]
    picks = {select_box(boxes, np.random.default_rng(s)) for s in range(50)}
    assert picks == set(boxes)
    with pytest.raises(ValueError):
        select_box([], np.random.default_rng(0))
    with pytest.raises(ValueError):
        select_box(boxes, None)
    with pytest.raises(ValueError):
        select_box(boxes, np.random.default_rng(0), mode="random")
