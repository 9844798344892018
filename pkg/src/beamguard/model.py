"""Beam classifiers: convolutional backbone, feature refinement module, GAP head.

The refinement module (FRM) is a small conv stack whose output is
*subtracted* from the backbone features before global average pooling.
Its last convolution starts at zero, so an untrained FRM is an identity
refinement and the FRM model begins exactly where the plain model does.
"""
from __future__ import annotations

import copy
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ._util import stable_hash

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"BGCKPT01"


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    variant: str = "mini_residual"
    stage_channels: tuple[int, ...] = (16, 32, 64)
    input_size: tuple[int, int] = (64, 64)
    num_classes: int = 16
    coord_channels: bool = True

    def __post_init__(self):
        if self.variant not in ("mini_residual", "mini_plain"):
            raise ValueError(f"unknown backbone variant {self.variant!r}")
        if len(self.stage_channels) < 2 or min(self.stage_channels) < 1:
            raise ValueError("backbone needs at least two positive-width stages")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")

    def feature_shape(self) -> tuple[int, int, int]:
        h, w = self.input_size
        # stem and every stage after the first halve the resolution
        for _ in range(len(self.stage_channels)):
            h, w = math.ceil(h / 2), math.ceil(w / 2)
        return self.stage_channels[-1], h, w


@dataclass(frozen=True)
class FrmConfig:
    bottleneck_channels: int | None = None  # None -> C // 2
    depth: int = 3
    enabled: bool = True

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("FRM depth must be at least 2")

    def resolved_bottleneck(self, channels: int) -> int:
        k = self.bottleneck_channels or max(1, channels // 2)
        if k > channels:
            raise ValueError("FRM bottleneck cannot exceed the feature channels")
        return k


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 30
    learning_rate: float = 1e-3
    lr_decay_factor: float = 0.1
    plateau_patience: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.learning_rate <= 0 or not 0 < self.lr_decay_factor <= 1:
            raise ValueError(f"invalid training config {self}")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


class _ResidualBlock(nn.Module):
    def __init__(self, cin, cout, stride, residual=True):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.residual = residual
        self.shortcut = None
        if residual and (cin != cout or stride != 1):
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False),
                                          nn.BatchNorm2d(cout))

    def forward(self, x):
        y = self.bn2(self.conv2(F.relu(self.bn1(self.conv1(x)))))
        if self.residual:
            y = y + (x if self.shortcut is None else self.shortcut(x))
        return F.relu(y)


class Backbone(nn.Module):
    """Stride-2 stem followed by one block per stage (stride 2 after the first)."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.stage_channels
        cin = 3 + (2 if cfg.coord_channels else 0)
        self.stem = nn.Sequential(nn.Conv2d(cin, ch[0], 3, 2, 1, bias=False),
                                  nn.BatchNorm2d(ch[0]), nn.ReLU())
        residual = cfg.variant == "mini_residual"
        blocks, prev = [], ch[0]
        for i, c in enumerate(ch):
            blocks.append(_ResidualBlock(prev, c, 1 if i == 0 else 2, residual))
            prev = c
        self.stages = nn.Sequential(*blocks)

    def forward(self, x):
        if self.cfg.coord_channels:
            n, _, h, w = x.shape
            ys = torch.linspace(-1, 1, h, dtype=x.dtype).view(1, 1, h, 1).expand(n, 1, h, w)
            xs = torch.linspace(-1, 1, w, dtype=x.dtype).view(1, 1, 1, w).expand(n, 1, h, w)
            x = torch.cat([x, xs, ys], dim=1)
        return self.stages(self.stem(x))


class FeatureRefinement(nn.Module):
    """Conv C->k + ReLU, (depth-2) x [Conv k->k, BN, ReLU], Conv k->C."""

    def __init__(self, channels: int, bottleneck: int, depth: int):
        super().__init__()
        layers = [nn.Conv2d(channels, bottleneck, 3, 1, 1), nn.ReLU()]
        for _ in range(depth - 2):
            layers += [nn.Conv2d(bottleneck, bottleneck, 3, 1, 1), nn.BatchNorm2d(bottleneck),
                       nn.ReLU()]
        self.body = nn.Sequential(*layers)
        self.restore = nn.Conv2d(bottleneck, channels, 3, 1, 1)
        nn.init.zeros_(self.restore.weight)
        nn.init.zeros_(self.restore.bias)
        self.channels = channels

    def forward(self, features):
        if features.shape[1] != self.channels:
            raise ValueError(f"FRM expects {self.channels} channels, got {features.shape[1]}")
        return self.restore(self.body(features))


def frm_parameter_count(channels: int, bottleneck: int, depth: int) -> int:
    C, k = channels, bottleneck
    count = 9 * C * k + k                    # reduce conv + bias
    count += (depth - 2) * (9 * k * k + k + 2 * k)  # conv + bias + BN affine
    count += 9 * k * C + C                   # restore conv + bias
    return count


class BeamClassifier(nn.Module):
    """Normalize -> backbone -> (features - FRM(features)) -> GAP -> linear."""

    def __init__(self, backbone_cfg: BackboneConfig = BackboneConfig(),
                 frm_cfg: FrmConfig = FrmConfig(enabled=False),
                 mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25)):
        super().__init__()
        std = np.asarray(std, dtype=np.float64)
        if np.any(std <= 0):
            raise ValueError("normalization std must be strictly positive")
        self.backbone_cfg = backbone_cfg
        self.frm_cfg = frm_cfg
        self.backbone = Backbone(backbone_cfg)
        channels = backbone_cfg.stage_channels[-1]
        self.frm = None
        if frm_cfg.enabled:
            self.frm = FeatureRefinement(channels, frm_cfg.resolved_bottleneck(channels),
                                         frm_cfg.depth)
        self.head = nn.Linear(channels, backbone_cfg.num_classes)
        self.register_buffer("mean", torch.tensor(mean, dtype=torch.float32).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std, dtype=torch.float32).view(1, 3, 1, 1))
        self.metadata: dict = {"epochs_seen": 0}

    @property
    def num_classes(self) -> int:
        return self.backbone_cfg.num_classes

    def config_dict(self) -> dict:
        return {"backbone": asdict(self.backbone_cfg), "frm": asdict(self.frm_cfg)}

    @property
    def config_hash(self) -> str:
        return stable_hash(self.config_dict())

    def normalize(self, x):
        if tuple(x.shape[-2:]) != tuple(self.backbone_cfg.input_size):
            x = F.interpolate(x, size=self.backbone_cfg.input_size, mode="bilinear",
                              align_corners=False)
        return (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)

    def extract_features(self, x_normalized):
        return self.backbone(x_normalized)

    def refine_features(self, features):
        if self.frm is None:
            return features
        return features - self.frm(features)

    def forward(self, x):
        """Logits for NCHW images with pixel values in [0, 1]."""
        refined = self.refine_features(self.extract_features(self.normalize(x)))
        return self.head(refined.mean(dim=(2, 3)))

    @torch.no_grad()
    def predict_logits(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Logits for an (N, H, W, 3) array of [0, 1] images."""
        was_training = self.training
        self.eval()
        out = []
        for start in range(0, len(images), batch_size):
            out.append(self(to_tensor(images[start:start + batch_size])).numpy())
        self.train(was_training)
        if not out:
            return np.zeros((0, self.num_classes), dtype=np.float32)
        return np.concatenate(out)


def to_tensor(images_nhwc: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images_nhwc)).to(dtype).permute(0, 3, 1, 2)


def build_model(backbone_cfg: BackboneConfig = BackboneConfig(),
                frm_cfg: FrmConfig = FrmConfig(enabled=False),
                mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25), seed: int = 0) -> BeamClassifier:
    """Construct a classifier with seeded initialization."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = BeamClassifier(backbone_cfg, frm_cfg, mean, std)
    model.metadata["seed"] = seed
    model.eval()
    return model


def extract_features(model: BeamClassifier, image_batch: torch.Tensor) -> torch.Tensor:
    return model.extract_features(image_batch)


def frm_forward(frm: FeatureRefinement, features: torch.Tensor) -> torch.Tensor:
    return frm(features)


def refine_features(model: BeamClassifier, features: torch.Tensor) -> torch.Tensor:
    return model.refine_features(features)


def classify_logits(model: BeamClassifier, image_batch: torch.Tensor) -> torch.Tensor:
    return model(image_batch)



def predict_beam(model, image: np.ndarray) -> int:
    """1-based beam index for one H x W x 3 image (ties -> lowest index)."""
    logits = model.predict_logits(np.asarray(image)[None])[0]
    return int(np.argmax(logits)) + 1


def _accuracy(model: BeamClassifier, images, labels) -> float:
    logits = model.predict_logits(images)
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def _fit(model: BeamClassifier, images: np.ndarray, loss_fn, val, cfg: TrainConfig,
         labels_for_acc: np.ndarray | None = None):
    x_val, y_val = val
    if len(images) == 0 or len(x_val) == 0:
        raise ValueError("training and validation splits must be non-empty")
    history = []
    if cfg.epochs == 0:
        return model, history
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    best_acc, best_state, stale = -1.0, None, 0
    lr = cfg.learning_rate
    n = len(images)
    for epoch in range(cfg.epochs):
        model.train()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = to_tensor(images[idx])
            logits = model(x)
            loss = loss_fn(logits, idx)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch offset {start}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            seen += len(idx)
        model.metadata["epochs_seen"] = model.metadata.get("epochs_seen", 0) + 1
        val_acc = _accuracy(model, x_val, y_val)
        history.append({"epoch": epoch + 1, "train_loss": total / seen, "val_top1": val_acc,
                        "lr": lr})
        log.info("epoch %d loss %.4f val top-1 %.4f lr %.1e", epoch + 1, total / seen,
                 val_acc, lr)
        if val_acc > best_acc:
            best_acc, best_state, stale = val_acc, copy.deepcopy(model.state_dict()), 0
        else:
            stale += 1
            if stale >= cfg.plateau_patience:
                lr *= cfg.lr_decay_factor
                for group in opt.param_groups:
                    group["lr"] = lr
                stale = 0
    model.load_state_dict(best_state)
    model.metadata["best_val_top1"] = best_acc
    model.eval()
    return model, history


def train_model(model: BeamClassifier, train: tuple[np.ndarray, np.ndarray],
                val: tuple[np.ndarray, np.ndarray], cfg: TrainConfig = TrainConfig()):
    """Cross-entropy training with Adam and plateau LR decay.

    ``train`` and ``val`` are ``(images NHWC in [0,1], zero-based class targets)``.
    Returns the best-validation model and the per-epoch history.
    """
    x, y = train
    targets = torch.as_tensor(np.asarray(y), dtype=torch.long)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        return _fit(model, x, lambda logits, idx: F.cross_entropy(logits, targets[idx]), val, cfg)


def distill_train(teacher: BeamClassifier, student: BeamClassifier,
                  train: tuple[np.ndarray, np.ndarray], val: tuple[np.ndarray, np.ndarray],
                  cfg: TrainConfig = TrainConfig(), temperature: float = 20.0,
                  mix_weight: float = 0.5):
    """Defensive-distillation student.

    Loss: ``mix * CE(hard labels) + (1 - mix) * T^2 * CE(softmax(teacher / T), student)``
    where the student's own softmax is taken at temperature 1, so a high
    temperature yields a student with compressed logits.
    """
    if temperature <= 0 or not 0.0 <= mix_weight <= 1.0:
        raise ValueError("temperature must be positive and mix_weight in [0, 1]")
    x, y = train
    targets = torch.as_tensor(np.asarray(y), dtype=torch.long)
    soft = torch.softmax(torch.from_numpy(teacher.predict_logits(x)).double() / temperature,
                         dim=1).float()

    def loss_fn(logits, idx):
        hard = F.cross_entropy(logits, targets[idx])
        soft_ce = -(soft[idx] * F.log_softmax(logits, dim=1)).sum(dim=1).mean()
        return mix_weight * hard + (1 - mix_weight) * temperature ** 2 * soft_ce

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        student, history = _fit(student, x, loss_fn, val, cfg)
    student.metadata.update({"distilled": True, "temperature": temperature,
                             "mix_weight": mix_weight})
    return student, history


def _role(name: str) -> str:
    if name in ("mean", "std"):
        return "normalization"
    return name.split(".", 1)[0]


def save_checkpoint(model: BeamClassifier, path: str | Path, extra: dict | None = None) -> Path:
    """Write a little-endian f32 checkpoint with a JSON header."""
    state = model.state_dict()
    arrays, entries, offset = [], [], 0
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        entries.append({"name": name, "role": _role(name), "shape": list(arr.shape),
                        "dtype": str(tensor.dtype).replace("torch.", ""), "offset": offset})
        arrays.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "format_version": 1,
        "config": model.config_dict(),
        "config_hash": model.config_hash,
        "normalization": {"mean": model.mean.flatten().tolist(),
                          "std": model.std.flatten().tolist()},
        "metadata": model.metadata,
        "arrays": entries,
    }
    if extra:
        header.update(extra)
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for chunk in arrays:
            fh.write(chunk)
    return path


def read_checkpoint_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(8) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a beamguard checkpoint")
        (size,) = struct.unpack("<I", fh.read(4))
        return json.loads(fh.read(size))


def load_checkpoint(path: str | Path) -> BeamClassifier:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a beamguard checkpoint")
    (size,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + size])
    data = raw[12 + size:]
    bcfg = header["config"]["backbone"]
    bcfg = BackboneConfig(**{**bcfg, "stage_channels": tuple(bcfg["stage_channels"]),
                             "input_size": tuple(bcfg["input_size"])})
    fcfg = FrmConfig(**header["config"]["frm"])
    model = BeamClassifier(bcfg, fcfg, header["normalization"]["mean"],
                           header["normalization"]["std"])
    state = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=entry["offset"])
        t = torch.from_numpy(arr.reshape(entry["shape"]).copy())
        state[entry["name"]] = t.to(getattr(torch, entry["dtype"]))
    model.load_state_dict(state)
    model.metadata = header.get("metadata", {})
    model.eval()
    return model


__all__ = [
    "BackboneConfig", "FrmConfig", "TrainConfig", "BeamClassifier", "FeatureRefinement",
    "Backbone", "TrainingDiverged", "build_model", "extract_features", "frm_forward",
    "refine_features", "classify_logits", "predict_beam", "train_model", "distill_train",
    "frm_parameter_count", "save_checkpoint", "load_checkpoint", "read_checkpoint_header",
    "to_tensor",
]
