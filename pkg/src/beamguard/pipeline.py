"""Config-driven glue shared by the command line, demos and acceptance tests."""
from __future__ import annotations

import math

import numpy as np

from . import attack as atk
from . import rf, scene
from .evaluation import AttackGrid
from .model import BackboneConfig, FrmConfig, TrainConfig, build_model, distill_train, train_model


def camera_from(cfg: dict) -> scene.CameraModel:
    c = cfg["camera"]
    return scene.CameraModel(c["image_width"], c["image_height"],
                             math.radians(c["horizontal_fov_deg"]))


def generate(cfg: dict, out_dir=None) -> scene.DatasetManifest:
    d = cfg["dataset"]
    unknown = [s for s in d["scenarios"] if s not in scene.SCENARIOS]
    if unknown:
        raise ValueError(f"unknown scenarios {unknown}; choose from {sorted(scene.SCENARIOS)}")
    return scene.generate_dataset(
        d["n"],
        camera=camera_from(cfg),
        codebook=rf.build_codebook(cfg["codebook"]["num_antennas"], cfg["codebook"]["num_beams"]),
        rate_params=rf.RateParams(**cfg["rate"]),
        channel_config=scene.ChannelConfig(**cfg["channel"]),
        seed=cfg["seeds"]["dataset"],
        scenarios=tuple(d["scenarios"]),
        num_bins=d["num_bins"],
        fractions=tuple(d["fractions"]),
        out_dir=out_dir,
    )


def train_config(cfg: dict, seed: int | None = None, epochs: int | None = None) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(batch_size=t["batch_size"],
                       epochs=t["epochs"] if epochs is None else epochs,
                       learning_rate=t["learning_rate"], lr_decay_factor=t["lr_decay_factor"],
                       plateau_patience=t["plateau_patience"],
                       seed=cfg["seeds"]["train"] if seed is None else seed)


def backbone_config(cfg: dict, manifest: scene.DatasetManifest, num_classes=None,
                    variant=None) -> BackboneConfig:
    m = cfg["model"]
    return BackboneConfig(variant=variant or m["variant"],
                          stage_channels=tuple(m["stage_channels"]),
                          input_size=(manifest.camera.image_height, manifest.camera.image_width),
                          num_classes=num_classes or manifest.num_beams,
                          coord_channels=m["coord_channels"])


def train_victim(cfg: dict, manifest: scene.DatasetManifest, frm: bool | None = None,
                 teacher=None, seed: int | None = None, epochs: int | None = None):
    """Train one victim; with ``teacher`` it is a distilled student."""
    f = cfg["frm"]
    frm_cfg = FrmConfig(f["bottleneck_channels"], f["depth"], f["enabled"] if frm is None else frm)
    tcfg = train_config(cfg, seed, epochs)
    model = build_model(backbone_config(cfg, manifest), frm_cfg, manifest.channel_mean,
                        manifest.channel_std, seed=tcfg.seed)
    train, val = manifest.split_arrays("train"), manifest.split_arrays("val")
    if teacher is None:
        return train_model(model, train, val, tcfg)
    return distill_train(teacher, model, train, val, tcfg, cfg["train"]["distill_temperature"],
                         cfg["train"]["distill_mix_weight"])


def attacker_indices(cfg: dict, manifest: scene.DatasetManifest, seed: int | None = None,
                     fraction: float | None = None) -> np.ndarray:
    """Images available to the attacker: a share of the non-test pool."""
    pool = np.concatenate([manifest.indices("train"), manifest.indices("val")])
    fraction = cfg["attack"]["data_fraction"] if fraction is None else fraction
    return atk.attacker_subset(pool, len(manifest.records), fraction,
                               cfg["seeds"]["attack"] if seed is None else seed)


def train_attacker(cfg: dict, manifest: scene.DatasetManifest, seed: int | None = None,
                   epochs: int | None = None, num_bins: int | None = None,
                   fraction: float | None = None, detector: str | None = None):
    """Proxy-label the attacker's images and fit the surrogate.

    Returns ``(surrogate, proxy, indices)``.
    """
    a = cfg["attack"]
    seed = cfg["seeds"]["attack"] if seed is None else seed
    fraction = a["data_fraction"] if fraction is None else fraction
    num_bins = a["num_bins"] if num_bins is None else num_bins
    detector = detector or a["detector"]
    idx = attacker_indices(cfg, manifest, seed, fraction)
    images = manifest.images[idx]
    records = [manifest.records[i] for i in idx]
    detections = atk.detect_all(images, detector, records,
                                target_color=records[0].target_color if records else None,
                                tolerance=a["blob_tolerance"])
    proxy = atk.build_proxy_dataset(images, detections, num_bins, seed=seed,
                                    selection=a["selection"], detector_mode=detector)
    tcfg = train_config(cfg, seed, a["surrogate_epochs"] if epochs is None else epochs)
    surrogate = atk.train_surrogate(
        proxy, tcfg, backbone_config(cfg, manifest, num_bins, a["surrogate_variant"]),
        val_fraction=a["surrogate_val_fraction"], data_fraction=fraction)
    return surrogate, proxy, idx


def grid_from(cfg: dict) -> AttackGrid:
    g = cfg["grid"]
    return AttackGrid(tuple(g["epsilons"]), tuple(g["sigmas"]), tuple(g["topk"]))


def universal_perturbations(cfg: dict, surrogate, images: np.ndarray, epsilons=None) -> dict:
    epsilons = cfg["grid"]["epsilons"] if epsilons is None else epsilons
    return {float(e): atk.generate_uap(surrogate, images, e, cfg["attack"]["batch_size"])
            for e in epsilons}
