import dataclasses
import json
import math

import numpy as np
import pytest
from scipy import stats

from beamguard import rf, scene
from beamguard.detector import BoundingBox, assign_bin, detect_oracle

CAM = scene.CameraModel()
PURE_LOS = scene.ChannelConfig(max_nlos=0)


# -- camera -------------------------------------------------------------------------

def test_azimuth_center_is_zero():
    assert scene.azimuth_from_pixel(32, CAM) == 0.0


def test_azimuth_left_edge_quarter_pi():
    cam = scene.CameraModel(64, 64, math.pi / 2)
    assert scene.azimuth_from_pixel(0, cam) == pytest.approx(-math.pi / 4, abs=1e-15)


def test_azimuth_formula_recomputed():
    cam = scene.CameraModel(100, 40, 1.2)
    assert scene.azimuth_from_pixel(75, cam) == pytest.approx(math.atan(0.5 * math.tan(0.6)),
                                                               abs=1e-15)


def test_azimuth_strictly_increasing_and_bounded():
    xs = np.linspace(0, 64, 513)
    az = [scene.azimuth_from_pixel(x, CAM) for x in xs]
    assert np.all(np.diff(az) > 0)
    with pytest.raises(ValueError):
        scene.azimuth_from_pixel(-0.1, CAM)
    with pytest.raises(ValueError):
        scene.azimuth_from_pixel(64.1, CAM)


def test_camera_validation():
    with pytest.raises(ValueError):
        scene.CameraModel(8, 64)
    with pytest.raises(ValueError):
        scene.CameraModel(64, 64, math.pi)


# -- sampling -----------------------------------------------------------------------

def test_sample_scene_deterministic():
    assert scene.sample_scene(0) == scene.sample_scene(0)
    assert scene.sample_scene(0) != scene.sample_scene(1)


def test_zero_distractor_difficulty():
    assert scene.sample_scene(5, scene.Difficulty(0, 0)).distractors == ()


def test_distractor_count_within_difficulty():
    counts = {len(scene.sample_scene(s, scene.Difficulty(1, 3)).distractors) for s in range(200)}
    assert counts == {1, 2, 3}


def test_distractor_colours_keep_margin_from_target():
    for s in range(100):
        spec = scene.sample_scene(s, scene.Difficulty(4, 4))
        for v in spec.distractors:
            assert max(abs(a - b) for a, b in zip(v.color, spec.target_color)) >= scene.COLOR_MARGIN


def test_target_x_uniform_over_visible_band():
    d = scene.Difficulty(0, 0)
    half = d.max_vehicle_width / 2
    xs = np.array([scene.sample_scene(s, d, CAM).target_center_x for s in range(10_000)])
    assert xs.min() >= half and xs.max() <= 64 - half
    counts, _ = np.histogram(xs, bins=16, range=(half, 64 - half))
    assert stats.chisquare(counts).pvalue > 0.01


def test_target_box_inside_frame():
    for s in range(300):
        assert BoundingBox(*scene.sample_scene(s, scene.Difficulty(2, 2)).target_bbox).inside(64, 64)


# -- rendering ----------------------------------------------------------------------

def _target_only_flat(seed):
    return scene.sample_scene(seed, scene.Difficulty(0, 0, texture_amplitude=0.0))


def test_fully_covered_target_pixels_carry_exact_colour():
    for seed in range(30):
        spec = _target_only_flat(seed)
        img = scene.render_scene(spec, CAM)
        x0, y0, x1, y1 = spec.target_bbox
        cols = np.arange(64)
        full = (cols >= x0) & (cols + 1 <= x1)
        block = img[int(y0):int(y1)][:, full]
        assert block.size and np.all(block == np.asarray(spec.target_color))


def test_pixel_aligned_target_box_is_exact_everywhere():
    spec = dataclasses.replace(_target_only_flat(1), target_center_x=20.0, target_size=(8.0, 5))
    img = scene.render_scene(spec, CAM)
    x0, y0, x1, y1 = (int(v) if float(v).is_integer() else v for v in spec.target_bbox)
    assert np.all(img[int(y0):int(y1), int(x0):int(x1)] == np.asarray(spec.target_color))


def test_partial_columns_blend_by_coverage():
    spec = dataclasses.replace(_target_only_flat(1), target_center_x=20.25, target_size=(8.0, 5))
    img = scene.render_scene(spec, CAM)
    bg = scene.render_scene(dataclasses.replace(spec, target_center_x=40.0), CAM)
    row = int(spec.target_bbox[1])
    expected = 0.75 * np.asarray(spec.target_color) + 0.25 * bg[row, 16]
    np.testing.assert_allclose(img[row, 16], expected, atol=1e-12)


def test_render_bit_identical():
    spec = scene.sample_scene(9, scene.Difficulty(3, 3))
    assert np.array_equal(scene.render_scene(spec, CAM), scene.render_scene(spec, CAM))


def test_render_pixel_range():
    for s in range(100):
        img = scene.render_scene(scene.sample_scene(s, scene.Difficulty(4, 4, 0.2)), CAM)
        assert img.min() >= 0 and img.max() <= 1


def test_target_drawn_last():
    spec = scene.sample_scene(2, scene.Difficulty(0, 0, texture_amplitude=0.0))
    t = spec.target
    blocker = scene.Vehicle(t.center_x, t.center_y, t.width + 2, t.height,
                            scene.DISTRACTOR_PALETTE[0])
    img = scene.render_scene(dataclasses.replace(spec, distractors=(blocker,)), CAM)
    cx, cy = int(t.center_x), int(t.center_y)
    assert np.array_equal(img[cy, cx], np.asarray(spec.target_color))


def test_oracle_round_trip_recovers_target_center():
    man = scene.generate_dataset(40, scenarios=[scene.Difficulty(3, 3)], seed=3)
    for r in man.records:
        box = detect_oracle(r)[0]
        x0, y0, x1, y1 = r.target_bbox
        assert abs(box.center[0] - (x0 + x1) / 2) <= 0.5
        assert abs(box.center[1] - (y0 + y1) / 2) <= 0.5
        assert len(detect_oracle(r)) == 4


# -- dataset ------------------------------------------------------------------------

def test_pure_los_label_is_nearest_grid_angle():
    cb = rf.build_codebook(16, 16)
    man = scene.generate_dataset(50, channel_config=PURE_LOS, seed=4)
    grid = cb.design_sines()
    for r in man.records:
        dist = np.abs(grid - math.sin(r.azimuth_rad))
        assert dist[r.beam_label - 1] == pytest.approx(dist.min(), abs=1e-12)


def test_boresight_target_maps_to_beam_nearest_zero():
    cb, params = rf.build_codebook(16, 16), rf.RateParams()
    az = scene.azimuth_from_pixel(CAM.image_width / 2, CAM)
    ch = scene.record_channel(az, 0, PURE_LOS, 16, params.num_subcarriers)
    label = rf.optimal_beam_index(ch, cb, params)
    # grid sines -1/16 and +1/16 are equally near 0 rad
    assert label in (8, 9)
    assert label == int(np.argmax(rf.codebook_rates(ch, cb, params))) + 1


def test_generation_is_deterministic():
    a = scene.generate_dataset(100, seed=7)
    b = scene.generate_dataset(100, seed=7)
    assert [r.to_json() for r in a.records] == [r.to_json() for r in b.records]
    assert np.array_equal(a.images, b.images)
    assert a.header() == b.header()


def test_position_and_label_rank_correlated_under_pure_los():
    man = scene.generate_dataset(2000, channel_config=PURE_LOS, seed=1)
    xs = [(r.target_bbox[0] + r.target_bbox[2]) / 2 for r in man.records]
    rho = stats.spearmanr(xs, [r.beam_label for r in man.records]).statistic
    assert rho >= 0.99


def test_label_audit_against_brute_force():
    man = scene.generate_dataset(500, seed=11)
    cb = man.codebook()
    for r in man.records:
        table = [rf.average_rate(man.channel(r), cb.beamformer(i), man.rate_params)
                 for i in range(1, cb.num_beams + 1)]
        assert r.beam_label == int(np.argmax(table)) + 1
        assert r.bin_label == assign_bin(BoundingBox(*r.target_bbox), 64, man.num_bins)
    assert man.images.min() >= 0 and man.images.max() <= 1


def test_nlos_paths_stay_weak():
    cfg = scene.ChannelConfig()
    for seed in range(200):
        ch = scene.record_channel(0.1, seed, cfg, 16, 4)
        assert len(ch.paths) <= 1 + cfg.max_nlos
        assert all(abs(p.gain) <= 0.2 * abs(ch.paths[0].gain) for p in ch.paths[1:])


def test_generate_rejects_empty():
    with pytest.raises(ValueError):
        scene.generate_dataset(0)


def test_images_are_exact_eighths_bits():
    man = scene.generate_dataset(8, seed=0)
    assert np.array_equal(np.round(man.images * 255) / 255, man.images.astype(np.float64)
                          .astype(np.float32))


# -- splits -------------------------------------------------------------------------

def _manifest(n, scenarios=("single",)):
    return scene.generate_dataset(n, scenarios=scenarios, seed=0)


def test_split_thousand_records():
    man = scene.split_dataset(_manifest(1000), (0.7, 0.1, 0.2), seed=0)
    assert man.counts() == {"train": 700, "val": 100, "test": 200}


def test_split_all_train():
    assert scene.split_dataset(_manifest(30), (1.0, 0.0, 0.0)).counts() == \
        {"train": 30, "val": 0, "test": 0}


def test_split_is_per_scenario():
    man = scene.split_dataset(_manifest(1000, ("single", "dense")), seed=2)
    for name in ("single", "dense"):
        splits = [r.split for r in man.records if r.scenario_id == name]
        assert (splits.count("train"), splits.count("val"), splits.count("test")) == (350, 50, 100)


def test_split_deterministic_per_seed():
    a = [r.split for r in scene.split_dataset(_manifest(200), seed=5).records]
    b = [r.split for r in scene.split_dataset(_manifest(200), seed=5).records]
    c = [r.split for r in scene.split_dataset(_manifest(200), seed=6).records]
    assert a == b and a != c


@pytest.mark.parametrize("n", [7, 13, 99, 101])
def test_split_counts_within_one_of_exact(n):
    counts = scene.split_dataset(_manifest(n), seed=0).counts()
    for frac, split in zip((0.7, 0.1, 0.2), ("train", "val", "test")):
        assert abs(counts[split] - frac * n) <= 1


def test_split_rejects_bad_fractions():
    with pytest.raises(ValueError):
        scene.split_dataset(_manifest(10), (0.7, 0.1, 0.1))


def test_default_desk_scale_counts():
    man = scene.generate_dataset(4000, seed=0)
    assert man.counts() == {"train": 2800, "val": 400, "test": 800}


# -- persistence --------------------------------------------------------------------

def test_save_load_round_trip(tmp_path):
    man = scene.generate_dataset(24, seed=2)
    scene.save_dataset(man, tmp_path)
    back = scene.load_dataset(tmp_path)
    assert np.array_equal(back.images, man.images)
    assert [r.to_json() for r in back.records] == [r.to_json() for r in man.records]
    assert back.geometry_hash == man.geometry_hash
    line = json.loads((tmp_path / "records.jsonl").read_text().splitlines()[0])
    assert line["image_path"] == "images/00000.png"
    for key in ("beam_label", "bin_label", "target_bbox", "azimuth_rad", "scenario_id", "split"):
        assert key in line
    header = json.loads((tmp_path / "manifest.json").read_text())
    assert header["seed"] == 2 and header["counts"] == man.counts()
