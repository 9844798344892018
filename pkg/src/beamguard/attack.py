"""Spatial proxy attack: bin labels from detections, surrogate, FGSM perturbations.

Nothing here touches beam labels or victim parameters.  The attacker works
from camera images, bounding boxes from its own detector, and the surrogate
it trains on horizontal-bin labels.
"""
from __future__ import annotations

import contextlib
import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .detector import BoundingBox, assign_bin, detect_blob, detect_oracle, select_box
from .model import BackboneConfig, BeamClassifier, FrmConfig, TrainConfig, build_model, train_model

PERTURBATION_MAGIC = b"BGPERT01"


class ProxyLabelingError(RuntimeError):
    pass


@dataclass
class ProxyDataset:
    images: np.ndarray            # (n, H, W, 3)
    bins: np.ndarray              # 1..A
    num_bins: int
    detector_mode: str
    selection_seed: int
    source_indices: np.ndarray    # positions in the image collection handed in
    skipped: int = 0

    def __post_init__(self):
        if self.num_bins < 2:
            raise ValueError("need at least two spatial bins")
        if len(self.bins) and (self.bins.min() < 1 or self.bins.max() > self.num_bins):
            raise ValueError("bin label out of range")

    def __len__(self):
        return len(self.bins)


@dataclass
class SurrogateModel:
    model: BeamClassifier
    num_bins: int
    data_fraction: float
    architecture: str
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.model.num_classes != self.num_bins:
            raise ValueError("surrogate head must have one output per bin")


@dataclass
class Perturbation:
    delta: np.ndarray   # (H, W, 3) or a stack (N, H, W, 3) for per-sample attacks
    epsilon: float
    kind: str = "universal"
    source_hash: str = ""
    norm: str = "inf"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("universal", "per_sample"):
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        if self.delta.size and float(np.max(np.abs(self.delta.astype(np.float64)))) > self.epsilon:
            raise ValueError("perturbation exceeds its l-inf budget")


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float
    seed: int = 0
    clip: bool = True
    sigma_max: float = 0.05

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.sigma > self.sigma_max:
            raise ValueError(f"sigma {self.sigma} exceeds the noise bound {self.sigma_max}")


def model_fingerprint(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in model.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().astype("<f4").tobytes())
    return h.hexdigest()[:16]


# -- proxy labels and surrogate -------------------------------------------------

def detect_all(images: np.ndarray, mode: str = "oracle", records=None,
               target_color=None, tolerance: float = 0.05) -> list[list[BoundingBox]]:
    """Run one detector over a collection of images."""
    if mode == "oracle":
        if records is None or len(records) != len(images):
            raise ValueError("oracle detection needs one record per image")
        return [detect_oracle(r) for r in records]
    if mode == "blob":
        if target_color is None:
            raise ValueError("blob detection needs the target colour")
        return [detect_blob(img, target_color, tolerance) for img in images]
    raise ValueError(f"unknown detector mode {mode!r}")


def build_proxy_dataset(images: np.ndarray, detections: list[list[BoundingBox]], num_bins: int,
                        seed: int = 0, selection: str = "uniform",
                        detector_mode: str = "oracle") -> ProxyDataset:
    """Label each image with the horizontal bin of one detected vehicle."""
    if len(images) != len(detections):
        raise ValueError("one detection list per image is required")
    width = images.shape[2]
    keep, bins = [], []
    for t, boxes in enumerate(detections):
        if not boxes:
            continue
        rng = np.random.default_rng([seed, t])
        box = select_box(list(boxes), rng, selection)
        keep.append(t)
        bins.append(assign_bin(box, width, num_bins))
    skipped = len(images) - len(keep)
    if len(images) and skipped > 0.5 * len(images):
        raise ProxyLabelingError(f"{skipped} of {len(images)} images had no detections")
    keep = np.asarray(keep, dtype=int)
    return ProxyDataset(images=images[keep], bins=np.asarray(bins, dtype=np.int64),
                        num_bins=num_bins, detector_mode=detector_mode, selection_seed=seed,
                        source_indices=keep, skipped=skipped)


def attacker_subset(candidates: np.ndarray, total: int, fraction: float = 0.5,
                    seed: int = 0) -> np.ndarray:
    """Sorted random subset of ``floor(fraction * total)`` candidate indices."""
    if not 0 < fraction <= 1:
        raise ValueError("data fraction must lie in (0, 1]")
    count = min(int(np.floor(fraction * total)), len(candidates))
    pick = np.random.default_rng(seed).choice(len(candidates), size=count, replace=False)
    return np.sort(np.asarray(candidates)[pick])


def train_surrogate(proxy: ProxyDataset, cfg: TrainConfig = TrainConfig(),
                    arch: BackboneConfig = BackboneConfig(), val_fraction: float = 0.1,
                    data_fraction: float = 0.5) -> SurrogateModel:
    """Supervised bin classifier on the attacker's own normalization statistics."""
    n = len(proxy)
    if n < 2:
        raise ValueError("proxy dataset too small")
    order = np.random.default_rng([cfg.seed, 7]).permutation(n)
    n_val = max(1, int(round(val_fraction * n)))
    val_idx, train_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
    flat = proxy.images.reshape(-1, 3).astype(np.float64)
    arch = replace(arch, num_classes=proxy.num_bins)
    model = build_model(arch, FrmConfig(enabled=False), flat.mean(0), flat.std(0), seed=cfg.seed)
    labels = proxy.bins - 1
    model, history = train_model(model, (proxy.images[train_idx], labels[train_idx]),
                                 (proxy.images[val_idx], labels[val_idx]), cfg)
    model.metadata.update({"role": "surrogate", "num_bins": proxy.num_bins,
                           "detector_mode": proxy.detector_mode})
    return SurrogateModel(model, proxy.num_bins, data_fraction, arch.variant, history)


# -- perturbations ---------------------------------------------------------------

def _f32_budget(epsilon: float) -> np.float32:
    """Largest float32 not exceeding epsilon."""
    e = np.float32(epsilon)
    if float(e) > epsilon:
        e = np.nextafter(e, np.float32(0))
    return e


def adversarial_loss(logits: torch.Tensor) -> torch.Tensor:
    """Negative batch mean of the largest logit."""
    return -logits.max(dim=1).values.mean()


def _clip_unit(perturbed: torch.Tensor, clean: torch.Tensor) -> torch.Tensor:
    # saturated clean pixels pass no gradient
    clipped = perturbed.clamp(0.0, 1.0)
    interior = (clean > 0) & (clean < 1)
    return torch.where(interior, clipped, clipped.detach())


@contextlib.contextmanager
def _frozen(model: torch.nn.Module):
    was_training = model.training
    flags = [p.requires_grad for p in model.parameters()]
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        yield model
    finally:
        for p, f in zip(model.parameters(), flags):
            p.requires_grad_(f)
        model.train(was_training)


def _as_model(surrogate) -> BeamClassifier:
    return surrogate.model if isinstance(surrogate, SurrogateModel) else surrogate


def accumulate_uap_gradient(surrogate, images: np.ndarray, batch_size: int = 32,
                            delta: np.ndarray | None = None, dtype=torch.float32) -> np.ndarray:
    """Sum over batches of d L_adv / d delta, shape (H, W, 3).

    ``delta`` is the point of evaluation (zero by default).
    """
    model = _as_model(surrogate)
    if len(images) == 0:
        raise ValueError("no images to attack")
    h, w = images.shape[1:3]
    total = torch.zeros(1, 3, h, w, dtype=torch.float64)
    base = torch.zeros(1, 3, h, w, dtype=dtype)
    if delta is not None:
        base = torch.from_numpy(np.asarray(delta)).to(dtype).permute(2, 0, 1)[None]
    original = next(model.parameters()).dtype
    with _frozen(model):
        model.to(dtype)
        try:
            for start in range(0, len(images), batch_size):
                batch = torch.from_numpy(
                    np.ascontiguousarray(images[start:start + batch_size])).to(dtype).permute(0, 3, 1, 2)
                d = base.clone().requires_grad_(True)
                loss = adversarial_loss(model(_clip_unit(batch + d, batch)))
                (grad,) = torch.autograd.grad(loss, d)
                if not torch.isfinite(grad).all():
                    raise FloatingPointError("non-finite gradient during perturbation synthesis")
                total += grad.double()
        finally:
            model.to(original)
    return total[0].permute(1, 2, 0).numpy()


def generate_uap(surrogate, images: np.ndarray, epsilon: float,
                 batch_size: int = 32) -> Perturbation:
    """FGSM universal perturbation from the batch-averaged gradient at delta = 0."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    model = _as_model(surrogate)
    grad_sum = accumulate_uap_gradient(model, images, batch_size)
    num_batches = -(-len(images) // batch_size)
    mean_grad = grad_sum / num_batches
    eps = _f32_budget(epsilon)
    delta = (eps * np.sign(mean_grad)).astype(np.float32)
    delta = np.clip(delta, -eps, eps)
    return Perturbation(delta, float(epsilon), "universal", model_fingerprint(model),
                        meta={"batch_size": batch_size, "num_batches": num_batches,
                              "num_images": int(len(images))})


def fgsm_sample_attack(surrogate, image: np.ndarray, epsilon: float,
                       batch_size: int = 64) -> Perturbation:
    """Per-image sign-gradient perturbation; accepts one image or a stack."""
    model = _as_model(surrogate)
    images = np.asarray(image)
    single = images.ndim == 3
    if single:
        images = images[None]
    eps = _f32_budget(epsilon)
    deltas = np.empty(images.shape, dtype=np.float32)
    with _frozen(model):
        for start in range(0, len(images), batch_size):
            batch = torch.from_numpy(
                np.ascontiguousarray(images[start:start + batch_size])).float().permute(0, 3, 1, 2)
            d = torch.zeros_like(batch, requires_grad=True)
            # per-image losses are independent, so the sum gives each image its own gradient
            loss = -model(_clip_unit(batch + d, batch)).max(dim=1).values.sum()
            (grad,) = torch.autograd.grad(loss, d)
            if not torch.isfinite(grad).all():
                raise FloatingPointError("non-finite gradient during perturbation synthesis")
            step = eps * np.sign(grad.permute(0, 2, 3, 1).numpy())
            deltas[start:start + batch_size] = np.clip(step, -eps, eps)
    return Perturbation(deltas[0] if single else deltas, float(epsilon), "per_sample",
                        model_fingerprint(model))


def apply_perturbation(image: np.ndarray, pert: Perturbation) -> np.ndarray:
    """``clip(image + delta, 0, 1)`` with the l-inf distance to ``image`` kept within budget."""
    image = np.asarray(image)
    delta = pert.delta
    if image.shape[-3:] != delta.shape[-3:] or (delta.ndim == 4 and delta.shape != image.shape):
        raise ValueError(f"perturbation shape {delta.shape} does not fit images {image.shape}")
    dtype = image.dtype if image.dtype.kind == "f" else np.float32
    out = np.clip(image.astype(dtype) + delta.astype(dtype), 0, 1).astype(dtype)
    over = np.abs(out.astype(np.float64) - image.astype(np.float64)) > pert.epsilon
    if np.any(over):
        # float rounding of the sum can overshoot the budget by one ulp
        out[over] = np.nextafter(out[over], image.astype(dtype)[over])
    return out


def gaussian_noise(image: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    """Add i.i.d. N(0, sigma^2) noise per pixel; clip to [0, 1] if requested."""
    image = np.asarray(image)
    dtype = image.dtype if image.dtype.kind == "f" else np.float32
    if spec.sigma == 0:
        return image.astype(dtype, copy=True)
    noise = np.random.default_rng(spec.seed).normal(0.0, spec.sigma, size=image.shape)
    out = image.astype(np.float64) + noise
    if spec.clip:
        out = np.clip(out, 0.0, 1.0)
    return out.astype(dtype)


# -- perturbation files --------------------------------------------------------

def save_perturbation(pert: Perturbation, path: str | Path, extra: dict | None = None) -> Path:
    delta = np.asarray(pert.delta, dtype="<f4")
    h, w, c = delta.shape[-3:]
    header = {
        "format_version": 1,
        "height": h, "width": w, "channels": c,
        "count": 1 if delta.ndim == 3 else delta.shape[0],
        "epsilon": pert.epsilon, "kind": pert.kind, "norm": pert.norm,
        "source_hash": pert.source_hash,
        **pert.meta,
    }
    if extra:
        header.update(extra)
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(PERTURBATION_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(delta.tobytes())
    return path


def read_perturbation_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(8) != PERTURBATION_MAGIC:
            raise ValueError(f"{path} is not a perturbation file")
        (size,) = struct.unpack("<I", fh.read(4))
        return json.loads(fh.read(size))


def load_perturbation(path: str | Path) -> Perturbation:
    raw = Path(path).read_bytes()
    if raw[:8] != PERTURBATION_MAGIC:
        raise ValueError(f"{path} is not a perturbation file")
    (size,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + size])
    shape = (header["height"], header["width"], header["channels"])
    if header.get("kind") == "per_sample" and header.get("count", 1) > 1:
        shape = (header["count"],) + shape
    delta = np.frombuffer(raw, dtype="<f4", offset=12 + size).reshape(shape).astype(np.float32)
    known = {"format_version", "height", "width", "channels", "count", "epsilon", "kind", "norm",
             "source_hash"}
    meta = {k: v for k, v in header.items() if k not in known}
    return Perturbation(delta, header["epsilon"], header["kind"], header["source_hash"],
                        header.get("norm", "inf"), meta)
