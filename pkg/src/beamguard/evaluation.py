"""Robustness measurements: Top-K accuracy on matched noise/adversarial budgets.

Models are only touched through ``predict_logits(images) -> (n, L) array``,
so any object with that method (including test stubs) can be evaluated.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rf
from ._util import canonical_json, to_jsonable
from .attack import NoiseSpec, Perturbation, apply_perturbation, gaussian_noise

ORIENTATION = "adversarial_drop_minus_noise_drop; positive means the adversarial perturbation hurts more"
# Full-scale reference point that the desk-scale setup does not attempt to match.
EXTERNAL_REFERENCE = {
    "backbone": "resnet50", "scenario": 2, "k": 3, "epsilon": 0.05,
    "degradation_diff": 0.689, "asserted": False,
}


class MissingArtifactError(KeyError):
    pass


@dataclass(frozen=True)
class AttackGrid:
    epsilons: tuple[float, ...] = (0.02, 0.03, 0.04, 0.05)
    sigmas: tuple[float, ...] = (0.01, 0.015, 0.02, 0.025)
    topk: tuple[int, ...] = (1, 2, 3, 5)

    def __post_init__(self):
        if len(self.epsilons) != len(self.sigmas):
            raise ValueError("epsilon and sigma grids must pair up by index")
        for e, s in zip(self.epsilons, self.sigmas):
            if abs(e - 2 * s) > 0.1 * 2 * s:
                raise ValueError(f"epsilon {e} is not within 10% of 2*sigma ({2 * s})")
        if not self.topk or min(self.topk) < 1:
            raise ValueError("top-k values must be positive")

    def pairs(self) -> list[tuple[float, float]]:
        return list(zip(self.epsilons, self.sigmas))


# -- scoring primitives -----------------------------------------------------------

def topk_hits(logits: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Boolean per row: 1-based ``labels`` among the ``k`` largest logits.

    Ties rank the lower class index first.
    """
    logits = np.asarray(logits)
    if k > logits.shape[1]:
        raise ValueError(f"k={k} exceeds the number of classes {logits.shape[1]}")
    top = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return np.any(top == (np.asarray(labels)[:, None] - 1), axis=1)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = np.exp(z - z.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def mean_max_softmax(logits: np.ndarray) -> float:
    return float(softmax(logits).max(axis=1).mean())


def perturb(images: np.ndarray, perturbation: Perturbation | None = None,
            noise: NoiseSpec | None = None) -> np.ndarray:
    if perturbation is not None and noise is not None:
        raise ValueError("apply either a perturbation or noise, not both")
    if perturbation is not None:
        return apply_perturbation(images, perturbation)
    if noise is not None:
        return gaussian_noise(images, noise)
    return images


def topk_accuracy(model, images: np.ndarray, labels: np.ndarray, k: int,
                  perturbation: Perturbation | None = None,
                  noise: NoiseSpec | None = None) -> float:
    """Fraction of images whose 1-based label is in the model's top ``k``."""
    if len(images) == 0:
        raise ValueError("empty evaluation split")
    logits = model.predict_logits(perturb(images, perturbation, noise))
    return float(topk_hits(logits, labels, k).mean())


# -- rates ----------------------------------------------------------------------

def rate_table(manifest, indices) -> np.ndarray:
    """(n, L) average rate of every codebook beam for the given records."""
    codebook = manifest.codebook()
    out = np.empty((len(indices), codebook.num_beams))
    for row, i in enumerate(indices):
        record = manifest.records[i]
        if record.channel_seed is None or record.azimuth_rad is None:
            raise ValueError(f"record {record.record_id} lacks channel metadata")
        out[row] = rf.codebook_rates(manifest.channel(record), codebook, manifest.rate_params)
    return out


@dataclass
class RateImpact:
    mean_oracle: float
    mean_clean: float
    mean_attacked: float
    gamma_min: float
    violation_clean: float
    violation_attacked: float
    gaps: np.ndarray = field(repr=False)  # oracle minus attacked rate, per record

    def summary(self) -> dict:
        return {k: getattr(self, k) for k in (
            "mean_oracle", "mean_clean", "mean_attacked", "gamma_min",
            "violation_clean", "violation_attacked")} | {
            "min_gap": float(self.gaps.min()), "mean_gap": float(self.gaps.mean())}


def _rate_impact(table: np.ndarray, clean_pred: np.ndarray, attacked_pred: np.ndarray,
                 gamma_min_fraction: float) -> RateImpact:
    rows = np.arange(len(table))
    oracle = table.max(axis=1)
    clean = table[rows, clean_pred - 1]
    attacked = table[rows, attacked_pred - 1]
    gamma_min = gamma_min_fraction * float(oracle.mean())
    return RateImpact(
        mean_oracle=float(oracle.mean()),
        mean_clean=float(clean.mean()),
        mean_attacked=float(attacked.mean()),
        gamma_min=gamma_min,
        violation_clean=float(np.mean(clean < gamma_min)),
        violation_attacked=float(np.mean(attacked < gamma_min)),
        gaps=oracle - attacked,
    )


def predicted_beams(logits: np.ndarray) -> np.ndarray:
    return np.argmax(logits, axis=1) + 1  # first maximum wins


def rate_impact_report(model, manifest, split: str = "test",
                       perturbation: Perturbation | None = None,
                       noise: NoiseSpec | None = None,
                       gamma_min_fraction: float = 0.5) -> RateImpact:
    """Rates achieved by the model's beam choices, clean and under attack.

    Each record's channel is rebuilt from its azimuth and path seed.
    """
    idx = manifest.indices(split)
    if len(idx) == 0:
        raise ValueError(f"split {split!r} is empty")
    images = manifest.images[idx]
    table = rate_table(manifest, idx)
    clean_pred = predicted_beams(model.predict_logits(images))
    if perturbation is None and noise is None:
        attacked_pred = clean_pred
    else:
        attacked_pred = predicted_beams(model.predict_logits(perturb(images, perturbation, noise)))
    return _rate_impact(table, clean_pred, attacked_pred, gamma_min_fraction)


# -- the grid ---------------------------------------------------------------------

@dataclass
class EvalReport:
    cells: list[dict]      # model, scenario, condition, budget, k, accuracy, count
    counts: dict           # scenario -> number of evaluated records
    seeds: dict
    rates: dict            # model -> condition key -> rate summary
    confidence: dict       # model -> condition key -> mean max softmax / mean max logit
    grid: AttackGrid
    metadata: dict = field(default_factory=dict)

    def accuracy(self, model: str, condition: str, budget: float | None = None, k: int = 1,
                 scenario: str = "all") -> float:
        for c in self.cells:
            if (c["model"], c["scenario"], c["condition"], c["k"]) == (model, scenario, condition, k) \
                    and (budget is None or math.isclose(c["budget"], budget)):
                return c["accuracy"]
        raise KeyError((model, scenario, condition, budget, k))

    @property
    def models(self) -> list[str]:
        return sorted({c["model"] for c in self.cells})

    @property
    def scenarios(self) -> list[str]:
        return sorted({c["scenario"] for c in self.cells})

    def to_dict(self) -> dict:
        return to_jsonable({
            "cells": self.cells, "counts": self.counts, "seeds": self.seeds,
            "rates": self.rates, "confidence": self.confidence, "grid": self.grid,
            "metadata": self.metadata,
        })

    def to_json(self) -> str:
        return canonical_json(self.to_dict())


def _key(condition: str, budget: float | None) -> str:
    return condition if budget is None else f"{condition}@{budget:g}"


def evaluate_grid(models: dict, manifest, grid: AttackGrid = AttackGrid(),
                  perturbations: dict | None = None, noise_seeds=(0, 1, 2),
                  split: str = "test", gamma_min_fraction: float = 0.5,
                  sigma_max: float = 0.05) -> EvalReport:
    """Top-K accuracy for every model x scenario x condition x budget x k.

    Noise cells average over ``noise_seeds``.  ``perturbations`` maps each
    grid epsilon to a universal perturbation.
    """
    perturbations = dict(perturbations or {})
    missing = [e for e in grid.epsilons
               if not any(math.isclose(e, p) for p in perturbations)]
    if missing:
        raise MissingArtifactError(f"no perturbation for epsilon {missing}")

    def pert_for(eps):
        return next(v for p, v in perturbations.items() if math.isclose(eps, p))

    idx = manifest.indices(split)
    if len(idx) == 0:
        raise ValueError(f"split {split!r} is empty")
    images = manifest.images[idx]
    labels = np.array([manifest.records[i].beam_label for i in idx])
    scenario_of = np.array([manifest.records[i].scenario_id for i in idx])
    groups = {"all": np.ones(len(idx), dtype=bool)}
    for name in sorted(set(scenario_of)):
        groups[name] = scenario_of == name
    table = rate_table(manifest, idx)

    adv_inputs = {e: apply_perturbation(images, pert_for(e)) for e in grid.epsilons}
    noise_inputs = {(s, seed): gaussian_noise(images, NoiseSpec(s, seed, sigma_max=sigma_max))
                    for s in grid.sigmas for seed in noise_seeds}

    cells, rates, confidence = [], {}, {}
    for name in sorted(models):
        model = models[name]
        clean_logits = model.predict_logits(images)
        clean_pred = predicted_beams(clean_logits)
        # hits[condition key] -> list over repetitions of {k: bool array}
        runs: dict[tuple[str, float | None], list[dict[int, np.ndarray]]] = {}

        def record(cond, budget, logits):
            runs.setdefault((cond, budget), []).append(
                {k: topk_hits(logits, labels, k) for k in grid.topk})
            key = _key(cond, budget)
            impact = _rate_impact(table, clean_pred, predicted_beams(logits), gamma_min_fraction)
            summary = impact.summary()
            conf = {"mean_max_softmax": mean_max_softmax(logits),
                    "mean_max_logit": float(np.max(logits, axis=1).mean())}
            if key in rates[name]:  # average over noise seeds
                n = len(runs[(cond, budget)])
                for d, new in ((rates[name][key], summary), (confidence[name][key], conf)):
                    for f, v in new.items():
                        d[f] = d[f] + (v - d[f]) / n
            else:
                rates[name][key] = summary
                confidence[name][key] = conf

        rates[name], confidence[name] = {}, {}
        record("clean", None, clean_logits)
        for s in grid.sigmas:
            for seed in noise_seeds:
                record("noise", s, model.predict_logits(noise_inputs[(s, seed)]))
        for e in grid.epsilons:
            record("adversarial", e, model.predict_logits(adv_inputs[e]))

        for (cond, budget), reps in runs.items():
            for scen, mask in groups.items():
                for k in grid.topk:
                    acc = float(np.mean([r[k][mask].mean() for r in reps]))
                    cells.append({"model": name, "scenario": scen, "condition": cond,
                                  "budget": budget, "k": k, "accuracy": acc,
                                  "count": int(mask.sum())})
    return EvalReport(
        cells=cells,
        counts={s: int(m.sum()) for s, m in groups.items()},
        seeds={"noise": list(noise_seeds), "dataset": manifest.seed},
        rates=rates,
        confidence=confidence,
        grid=grid,
        metadata={"split": split, "gamma_min_fraction": gamma_min_fraction,
                  "perturbation_sources": {f"{e:g}": pert_for(e).source_hash
                                           for e in grid.epsilons},
                  "external_reference": EXTERNAL_REFERENCE},
    )


# -- degradation difference ---------------------------------------------------------

@dataclass
class DegradationTable:
    ks: tuple[int, ...]
    pairs: tuple[tuple[float, float], ...]
    values: np.ndarray      # (len(ks), len(pairs)); positive = adversarial stronger
    model: str
    scenario: str
    orientation: str = ORIENTATION


def degradation_diff(report: EvalReport, model: str, scenario: str = "all") -> DegradationTable:
    """Per (k, paired budget): adversarial accuracy drop minus noise accuracy drop."""
    pairs = tuple(report.grid.pairs())
    if not pairs:
        raise ValueError("report has no paired budgets")
    ks = tuple(report.grid.topk)
    values = np.zeros((len(ks), len(pairs)))
    for a, k in enumerate(ks):
        clean = report.accuracy(model, "clean", None, k, scenario)
        for b, (eps, sigma) in enumerate(pairs):
            noise_drop = clean - report.accuracy(model, "noise", sigma, k, scenario)
            adv_drop = clean - report.accuracy(model, "adversarial", eps, k, scenario)
            values[a, b] = adv_drop - noise_drop
    return DegradationTable(ks, pairs, values, model, scenario)


def write_degradation_csv(table: DegradationTable, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"# {table.orientation}"])
        w.writerow(["k"] + [f"eps={e:g}|sigma={s:g}" for e, s in table.pairs])
        for k, row in zip(table.ks, table.values):
            w.writerow([k] + [f"{v:.6f}" for v in row])
    return path


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_degradation_heatmap(table: DegradationTable, path: str | Path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.6))
    lim = max(1e-6, float(np.abs(table.values).max()))
    im = ax.imshow(100 * table.values, cmap="RdBu_r", vmin=-100 * lim, vmax=100 * lim)
    ax.set_xticks(range(len(table.pairs)), [f"{e:g}/{s:g}" for e, s in table.pairs])
    ax.set_yticks(range(len(table.ks)), [f"Top-{k}" for k in table.ks])
    ax.set_xlabel("epsilon / sigma")
    for (i, j), v in np.ndenumerate(table.values):
        ax.text(j, i, f"{100 * v:.1f}", ha="center", va="center", fontsize=8)
    fig.colorbar(im, ax=ax, label="pp (positive = adversarial stronger)")
    ax.set_title(f"{table.model} / {table.scenario}")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


# -- logits -------------------------------------------------------------------------

@dataclass
class LogitRecord:
    index: int
    clean_logits: np.ndarray
    perturbed_logits: np.ndarray
    true_index: int
    clean_predicted: int
    perturbed_predicted: int
    condition: str

    def to_json(self) -> dict:
        return to_jsonable({
            "index": self.index, "condition": self.condition, "true": self.true_index,
            "clean_pred": self.clean_predicted, "perturbed_pred": self.perturbed_predicted,
            "clean_logits": np.round(self.clean_logits.astype(np.float64), 6),
            "perturbed_logits": np.round(self.perturbed_logits.astype(np.float64), 6),
        })


def export_logits(model, images: np.ndarray, labels: np.ndarray,
                  perturbation: Perturbation | None = None,
                  noise: NoiseSpec | None = None, condition: str | None = None) -> list[LogitRecord]:
    """Clean and perturbed pre-softmax outputs, one record per image."""
    clean = model.predict_logits(images)
    if perturbation is None and noise is None:
        perturbed = clean.copy()
    else:
        perturbed = model.predict_logits(perturb(images, perturbation, noise))
    if not (np.all(np.isfinite(clean)) and np.all(np.isfinite(perturbed))):
        raise FloatingPointError("non-finite logits")
    condition = condition or ("adversarial" if perturbation is not None
                              else "noise" if noise is not None else "clean")
    cp, pp = predicted_beams(clean), predicted_beams(perturbed)
    return [LogitRecord(i, clean[i], perturbed[i], int(labels[i]), int(cp[i]), int(pp[i]), condition)
            for i in range(len(images))]


def logit_shift(records: list[LogitRecord]) -> dict:
    clean = np.array([r.clean_logits.max() for r in records], dtype=np.float64)
    pert = np.array([r.perturbed_logits.max() for r in records], dtype=np.float64)
    return {"mean_max_logit_clean": float(clean.mean()),
            "mean_max_logit_perturbed": float(pert.mean()),
            "difference": float(pert.mean() - clean.mean()),
            "count": len(records)}


def write_logits_jsonl(records: list[LogitRecord], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
    return path


def plot_logit_histograms(records: list[LogitRecord], path: str | Path, title: str = "") -> Path:
    plt = _pyplot()
    clean = np.concatenate([r.clean_logits for r in records])
    pert = np.concatenate([r.perturbed_logits for r in records])
    bins = np.linspace(min(clean.min(), pert.min()), max(clean.max(), pert.max()), 60)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.hist(clean, bins=bins, alpha=0.6, label="clean")
    ax.hist(pert, bins=bins, alpha=0.6, label=records[0].condition if records else "perturbed")
    ax.set_xlabel("logit value")
    ax.set_ylabel("count")
    ax.legend()
    ax.set_title(title)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


# -- bundle -----------------------------------------------------------------------

def accuracy_table_rows(report: EvalReport, k: int, scenario: str = "all") -> list[list]:
    """Rows of condition/budget against one column per model."""
    models = report.models
    rows = [["condition", "budget"] + models]
    conds = [("clean", None)] + [("noise", s) for s in report.grid.sigmas] \
        + [("adversarial", e) for e in report.grid.epsilons]
    for cond, budget in conds:
        rows.append([cond, "" if budget is None else f"{budget:g}"]
                    + [f"{report.accuracy(m, cond, budget, k, scenario):.4f}" for m in models])
    return rows


def write_report_bundle(report: EvalReport, out_dir: str | Path,
                        logit_records: dict[str, list[LogitRecord]] | None = None,
                        figures: bool = True) -> Path:
    """``report.json``, ``tables/*.csv``, ``figures/*.png`` and ``logits.jsonl``."""
    out = Path(out_dir)
    (out / "tables").mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n")
    for scen in report.scenarios:
        for k in report.grid.topk:
            with open(out / "tables" / f"accuracy_{scen}_top{k}.csv", "w", newline="") as fh:
                csv.writer(fh).writerows(accuracy_table_rows(report, k, scen))
    for model in report.models:
        if not report.grid.epsilons:
            continue
        table = degradation_diff(report, model)
        write_degradation_csv(table, out / "tables" / f"degradation_{model}.csv")
        if figures:
            plot_degradation_heatmap(table, out / "figures" / f"degradation_{model}.png")
    if logit_records:
        with open(out / "logits.jsonl", "w") as fh:
            for model in sorted(logit_records):
                for r in logit_records[model]:
                    fh.write(json.dumps({"model": model, **r.to_json()}, sort_keys=True) + "\n")
        if figures:
            for model, recs in sorted(logit_records.items()):
                if recs:
                    plot_logit_histograms(recs, out / "figures" / f"logits_{model}.png", model)
    return out


__all__ = [
    "AttackGrid", "EvalReport", "DegradationTable", "LogitRecord", "RateImpact",
    "MissingArtifactError", "topk_hits", "topk_accuracy", "softmax", "mean_max_softmax",
    "rate_table", "rate_impact_report", "evaluate_grid", "degradation_diff",
    "write_degradation_csv", "plot_degradation_heatmap", "export_logits", "logit_shift",
    "write_logits_jsonl", "plot_logit_histograms", "accuracy_table_rows", "write_report_bundle",
]
