"""Synthetic V2I street scenes labelled with their rate-optimal beam.

A scene is a road with one target vehicle (fixed colour) and optional
distractor vehicles drawn as axis-aligned rectangles.  Vertical box edges
sit on the pixel grid; horizontal edges are continuous and rendered with
partial-coverage blending so the image carries the sub-pixel target
position that determines the beam label.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from . import rf
from ._util import stable_hash, to_jsonable
from .detector import BoundingBox, assign_bin

# Muted, 8-bit representable colours: vehicles differ from the road and from
# each other by small margins, as in real street imagery.
TARGET_COLOR = (140 / 255, 84 / 255, 77 / 255)
DISTRACTOR_PALETTE = (
    (84 / 255, 92 / 255, 128 / 255),
    (133 / 255, 128 / 255, 92 / 255),
    (77 / 255, 77 / 255, 77 / 255),
    (140 / 255, 140 / 255, 140 / 255),
    (84 / 255, 115 / 255, 89 / 255),
)
COLOR_MARGIN = 0.15  # per-channel L-inf distance of every distractor from the target
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class CameraModel:
    image_width: int = 64
    image_height: int = 64
    horizontal_fov_rad: float = math.radians(90.0)

    def __post_init__(self):
        if self.image_width < 16 or self.image_height < 16:
            raise ValueError("image must be at least 16x16")
        if not 0.0 < self.horizontal_fov_rad < math.pi:
            raise ValueError("field of view must lie in (0, pi)")


@dataclass(frozen=True)
class Vehicle:
    center_x: float
    center_y: float
    width: float
    height: int
    color: tuple[float, float, float]

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        return (
            self.center_x - self.width / 2,
            self.center_y - self.height / 2,
            self.center_x + self.width / 2,
            self.center_y + self.height / 2,
        )


@dataclass(frozen=True)
class Difficulty:
    min_distractors: int = 2
    max_distractors: int = 2
    texture_amplitude: float = 0.02
    min_vehicle_width: float = 6.0  # in pixels of a 64-px wide frame
    max_vehicle_width: float = 10.0


SCENARIOS = {
    "single": Difficulty(0, 0),
    "sparse": Difficulty(2, 2),
    "dense": Difficulty(4, 4),
    "mixed": Difficulty(0, 4),
}
DEFAULT_SCENARIOS = ("single", "sparse", "dense", "mixed")


@dataclass(frozen=True)
class SceneSpec:
    target_center_x: float
    target_center_y: float
    target_size: tuple[float, int]
    target_color: tuple[float, float, float]
    distractors: tuple[Vehicle, ...] = ()
    background_seed: int = 0
    texture_amplitude: float = 0.02

    @property
    def target(self) -> Vehicle:
        w, h = self.target_size
        return Vehicle(self.target_center_x, self.target_center_y, w, h, self.target_color)

    @property
    def target_bbox(self) -> tuple[float, float, float, float]:
        return self.target.bbox


@dataclass(frozen=True)
class ChannelConfig:
    max_nlos: int = 2
    nlos_gain_ratio: float = 0.2
    los_gain: float = 1.0
    max_delay_s: float = 50e-9
    subcarrier_spacing_hz: float = 10e6

    def __post_init__(self):
        if not 0.0 <= self.nlos_gain_ratio < 1.0:
            raise ValueError("NLOS paths must stay weaker than the LOS path")


def azimuth_from_pixel(x_center: float, camera: CameraModel) -> float:
    """Pinhole mapping from horizontal pixel position to azimuth."""
    w = camera.image_width
    if not 0.0 <= x_center <= w:
        raise ValueError(f"x={x_center} outside frame [0, {w}]")
    return math.atan((2.0 * x_center / w - 1.0) * math.tan(camera.horizontal_fov_rad / 2.0))


def _road_top(camera: CameraModel) -> int:
    return int(round(0.4 * camera.image_height))


def _sample_vehicle(rng, camera, difficulty, color) -> Vehicle:
    scale = camera.image_width / 64.0
    w = float(rng.uniform(difficulty.min_vehicle_width, difficulty.max_vehicle_width) * scale)
    h = max(3, int(round(0.6 * w)))
    # one band for every width keeps the centre uniform over it
    half = difficulty.max_vehicle_width * scale / 2
    cx = float(rng.uniform(half, camera.image_width - half))
    top = _road_top(camera) + 1
    y0 = int(rng.integers(top, camera.image_height - h))
    return Vehicle(cx, y0 + h / 2, w, h, tuple(color))


def sample_scene(rng_seed: int, difficulty: Difficulty = Difficulty(),
                 camera: CameraModel = CameraModel(),
                 target_color=TARGET_COLOR) -> SceneSpec:
    """Deterministic scene for a seed; target x uniform over the visible band."""
    rng = np.random.default_rng(rng_seed)
    target = _sample_vehicle(rng, camera, difficulty, target_color)
    n = int(rng.integers(difficulty.min_distractors, difficulty.max_distractors + 1))
    palette = [c for c in DISTRACTOR_PALETTE
               if max(abs(a - b) for a, b in zip(c, target_color)) >= COLOR_MARGIN]
    distractors = tuple(
        _sample_vehicle(rng, camera, difficulty, palette[int(rng.integers(len(palette)))])
        for _ in range(n)
    )
    return SceneSpec(
        target_center_x=target.center_x,
        target_center_y=target.center_y,
        target_size=(target.width, target.height),
        target_color=tuple(target_color),
        distractors=distractors,
        background_seed=int(rng.integers(2**31 - 1)),
        texture_amplitude=difficulty.texture_amplitude,
    )


def _background(camera: CameraModel, seed: int, amplitude: float) -> np.ndarray:
    H, W = camera.image_height, camera.image_width
    road = _road_top(camera)
    img = np.empty((H, W, 3))
    t = np.linspace(0.0, 1.0, road)[:, None]
    sky = (1 - t) * np.array([0.62, 0.72, 0.85]) + t * np.array([0.80, 0.83, 0.86])
    img[:road] = sky[:, None, :]
    img[road:] = np.array([0.40, 0.40, 0.42])
    if amplitude > 0:
        rng = np.random.default_rng(seed)
        coarse = rng.normal(size=(H // 8 + 1, W // 8 + 1))
        coarse = ndimage.zoom(coarse, (H / coarse.shape[0], W / coarse.shape[1]), order=1)
        coarse = coarse[:H, :W]
        fine = rng.normal(size=(H, W, 3))
        img += amplitude * (coarse[..., None] + 0.5 * fine)
    return img


def _draw(img: np.ndarray, v: Vehicle) -> None:
    x0, y0, x1, y1 = v.bbox
    r0, r1 = int(round(y0)), int(round(y1))
    cols = np.arange(img.shape[1])
    cover = np.clip(np.minimum(x1, cols + 1) - np.maximum(x0, cols), 0.0, 1.0)
    sel = cover > 0
    c = cover[sel][None, :, None]
    color = np.asarray(v.color)
    img[r0:r1, sel] = (1 - c) * img[r0:r1, sel] + c * color


def render_scene(spec: SceneSpec, camera: CameraModel = CameraModel()) -> np.ndarray:
    """Render to an H x W x 3 float array in [0, 1]; the target is drawn last."""
    img = _background(camera, spec.background_seed, spec.texture_amplitude)
    for v in spec.distractors:
        _draw(img, v)
    _draw(img, spec.target)
    return np.clip(img, 0.0, 1.0)


def quantize(image: np.ndarray) -> np.ndarray:
    """Round to 8 bit and back, as stored on disk."""
    return (np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).astype(np.float32) / 255.0)


@dataclass
class DatasetRecord:
    record_id: str
    beam_label: int
    bin_label: int
    target_bbox: tuple[float, float, float, float]
    azimuth_rad: float
    scenario_id: str
    split: str
    distractor_bboxes: tuple = ()
    channel_seed: int = 0
    target_color: tuple[float, float, float] = TARGET_COLOR
    image: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def image_path(self) -> str:
        return f"images/{self.record_id}.png"

    def to_json(self) -> dict:
        d = {k: to_jsonable(getattr(self, k)) for k in (
            "record_id", "beam_label", "bin_label", "target_bbox", "azimuth_rad",
            "scenario_id", "split", "distractor_bboxes", "channel_seed", "target_color")}
        d["image_path"] = self.image_path
        return d


@dataclass
class DatasetManifest:
    records: list[DatasetRecord]
    images: np.ndarray  # (n, H, W, 3) float32, exact multiples of 1/255
    camera: CameraModel
    num_antennas: int
    num_beams: int
    rate_params: rf.RateParams
    channel_config: ChannelConfig
    seed: int
    num_bins: int = 8
    fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    channel_mean: tuple[float, ...] = (0.0, 0.0, 0.0)
    channel_std: tuple[float, ...] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if not self.records:
            raise ValueError("manifest needs at least one record")

    @property
    def geometry(self) -> dict:
        return {"camera": to_jsonable(self.camera), "num_antennas": self.num_antennas,
                "num_beams": self.num_beams}

    @property
    def geometry_hash(self) -> str:
        return stable_hash(self.geometry)

    def codebook(self) -> rf.BeamCodebook:
        return rf.build_codebook(self.num_antennas, self.num_beams)

    def counts(self) -> dict[str, int]:
        out = {s: 0 for s in SPLITS}
        for r in self.records:
            out[r.split] = out.get(r.split, 0) + 1
        return out

    def indices(self, split: str | None = None) -> np.ndarray:
        return np.array([i for i, r in enumerate(self.records)
                         if split is None or r.split == split], dtype=int)

    def split_arrays(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        """Images and zero-based class targets for one split."""
        idx = self.indices(split)
        labels = np.array([self.records[i].beam_label - 1 for i in idx], dtype=np.int64)
        return self.images[idx], labels

    def channel(self, record: DatasetRecord) -> rf.ChannelState:
        return record_channel(record.azimuth_rad, record.channel_seed, self.channel_config,
                              self.num_antennas, self.rate_params.num_subcarriers)

    def header(self) -> dict:
        return {
            "format_version": 1,
            "camera": to_jsonable(self.camera),
            "codebook": {"num_antennas": self.num_antennas, "num_beams": self.num_beams},
            "rate_params": to_jsonable(self.rate_params),
            "channel_config": to_jsonable(self.channel_config),
            "seed": self.seed,
            "num_bins": self.num_bins,
            "fractions": list(self.fractions),
            "counts": self.counts(),
            "num_records": len(self.records),
            "normalization": {"mean": list(self.channel_mean), "std": list(self.channel_std)},
            "geometry_hash": self.geometry_hash,
        }


def record_channel(azimuth_rad: float, channel_seed: int, cfg: ChannelConfig,
                   num_antennas: int, num_subcarriers: int) -> rf.ChannelState:
    """Rebuild a record's channel from its azimuth and path seed."""
    rng = np.random.default_rng(channel_seed)
    n_nlos = int(rng.integers(0, cfg.max_nlos + 1)) if cfg.max_nlos > 0 else 0
    nlos = []
    for _ in range(n_nlos):
        mag = rng.uniform(0.25, 1.0) * cfg.nlos_gain_ratio * cfg.los_gain
        phase = rng.uniform(0, 2 * np.pi)
        az = rng.uniform(-0.45 * np.pi, 0.45 * np.pi)
        delay = rng.uniform(0, cfg.max_delay_s)
        nlos.append(rf.PathSpec(complex(mag * np.exp(1j * phase)), float(az), 0.0, float(delay)))
    los = rf.PathSpec(complex(cfg.los_gain), float(azimuth_rad), 0.0, 0.0)
    return rf.synthesize_channel(los, nlos, num_subcarriers, num_antennas,
                                 cfg.subcarrier_spacing_hz)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_dataset(manifest: DatasetManifest, fractions=(0.70, 0.10, 0.20),
                  seed: int = 0) -> DatasetManifest:
    """Random train/val/test partition, done independently per scenario."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"split fractions {fractions} must be non-negative and sum to 1")
    groups: dict[str, list[int]] = {}
    for i, r in enumerate(manifest.records):
        groups.setdefault(r.scenario_id, []).append(i)
    for g, name in enumerate(sorted(groups)):
        members = groups[name]
        n = len(members)
        n_train = _round_half_up(fractions[0] * n)
        n_val = min(_round_half_up(fractions[1] * n), n - n_train)
        order = np.random.default_rng([seed, g]).permutation(n)
        for rank, j in enumerate(order):
            split = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
            manifest.records[members[j]].split = split
    manifest.fractions = fractions
    return manifest


def generate_dataset(
    n: int,
    camera: CameraModel = CameraModel(),
    codebook: rf.BeamCodebook | None = None,
    rate_params: rf.RateParams = rf.RateParams(),
    channel_config: ChannelConfig = ChannelConfig(),
    seed: int = 0,
    scenarios=DEFAULT_SCENARIOS,
    num_bins: int = 8,
    fractions=(0.70, 0.10, 0.20),
    out_dir: str | Path | None = None,
    target_color=TARGET_COLOR,
) -> DatasetManifest:
    """Render ``n`` labelled scenes; scenarios are assigned round-robin."""
    if n < 1:
        raise ValueError("n must be at least 1")
    codebook = codebook or rf.build_codebook(16, 16)
    scenarios = tuple(scenarios)
    if not scenarios:
        raise ValueError("need at least one scenario")
    images = np.empty((n, camera.image_height, camera.image_width, 3), dtype=np.float32)
    records = []
    for i in range(n):
        scenario = scenarios[i % len(scenarios)]
        difficulty = SCENARIOS[scenario] if isinstance(scenario, str) else scenario
        name = scenario if isinstance(scenario, str) else f"custom{i % len(scenarios)}"
        scene_seed, channel_seed = (int(s) for s in
                                    np.random.default_rng([seed, i]).integers(2**31 - 1, size=2))
        spec = sample_scene(scene_seed, difficulty, camera, target_color)
        images[i] = quantize(render_scene(spec, camera))
        az = azimuth_from_pixel(spec.target_center_x, camera)
        channel = record_channel(az, channel_seed, channel_config, codebook.num_antennas,
                                 rate_params.num_subcarriers)
        bbox = spec.target_bbox
        records.append(DatasetRecord(
            record_id=f"{i:05d}",
            beam_label=rf.optimal_beam_index(channel, codebook, rate_params),
            bin_label=assign_bin(BoundingBox(*bbox), camera.image_width, num_bins),
            target_bbox=bbox,
            azimuth_rad=az,
            scenario_id=name,
            split="train",
            distractor_bboxes=tuple(v.bbox for v in spec.distractors),
            channel_seed=channel_seed,
            target_color=tuple(target_color),
        ))
    for r, img in zip(records, images):
        r.image = img
    flat = images.reshape(-1, 3).astype(np.float64)
    manifest = DatasetManifest(
        records=records, images=images, camera=camera,
        num_antennas=codebook.num_antennas, num_beams=codebook.num_beams,
        rate_params=rate_params, channel_config=channel_config, seed=seed,
        num_bins=num_bins,
        channel_mean=tuple(float(v) for v in flat.mean(axis=0)),
        channel_std=tuple(float(v) for v in flat.std(axis=0)),
    )
    split_dataset(manifest, fractions, seed)
    if out_dir is not None:
        save_dataset(manifest, out_dir)
    return manifest


def save_dataset(manifest: DatasetManifest, out_dir: str | Path, extra: dict | None = None) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for r, img in zip(manifest.records, manifest.images):
        Image.fromarray(np.round(img * 255).astype(np.uint8), "RGB").save(out / r.image_path)
        lines.append(json.dumps(r.to_json(), sort_keys=True))
    (out / "records.jsonl").write_text("\n".join(lines) + "\n")
    np.save(out / "codebook.npy", manifest.codebook().weights)  # (L, N) complex128
    header = manifest.header()
    if extra:
        header.update(extra)
    (out / "manifest.json").write_text(json.dumps(header, sort_keys=True, indent=2) + "\n")
    return out


def load_dataset(data_dir: str | Path) -> DatasetManifest:
    src = Path(data_dir)
    header = json.loads((src / "manifest.json").read_text())
    records = []
    images = []
    for line in (src / "records.jsonl").read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        path = d.pop("image_path")
        d["target_bbox"] = tuple(d["target_bbox"])
        d["distractor_bboxes"] = tuple(tuple(b) for b in d["distractor_bboxes"])
        d["target_color"] = tuple(d["target_color"])
        records.append(DatasetRecord(**d))
        with Image.open(src / path) as im:
            images.append(np.asarray(im.convert("RGB"), dtype=np.uint8))
    images = np.stack(images).astype(np.float32) / 255.0
    for r, img in zip(records, images):
        r.image = img
    return DatasetManifest(
        records=records,
        images=images,
        camera=CameraModel(**header["camera"]),
        num_antennas=header["codebook"]["num_antennas"],
        num_beams=header["codebook"]["num_beams"],
        rate_params=rf.RateParams(**header["rate_params"]),
        channel_config=ChannelConfig(**header["channel_config"]),
        seed=header["seed"],
        num_bins=header["num_bins"],
        fractions=tuple(header["fractions"]),
        channel_mean=tuple(header["normalization"]["mean"]),
        channel_std=tuple(header["normalization"]["std"]),
    )


__all__ = [
    "CameraModel", "Vehicle", "Difficulty", "SceneSpec", "ChannelConfig", "DatasetRecord",
    "DatasetManifest", "SCENARIOS", "DEFAULT_SCENARIOS", "TARGET_COLOR",
    "azimuth_from_pixel", "sample_scene", "render_scene", "generate_dataset", "split_dataset",
    "record_channel", "save_dataset", "load_dataset", "quantize",
]
