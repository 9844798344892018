"""Command line: gen-data, train, attack, eval, report.

Exit codes: 0 success, 2 configuration error, 3 missing artifact,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import attack as atk
from . import config as cfgmod
from . import evaluation as ev
from . import pipeline
from .model import TrainingDiverged, load_checkpoint, read_checkpoint_header, save_checkpoint
from .scene import load_dataset, save_dataset

log = logging.getLogger("beamguard")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4


class MissingArtifacts(Exception):
    def __init__(self, paths):
        self.paths = [str(p) for p in paths]
        super().__init__("missing artifacts:\n  " + "\n  ".join(self.paths))


class GeometryMismatch(Exception):
    pass


def apply_thread_cap() -> None:
    value = os.environ.get("BEAMGUARD_THREADS")
    if not value:
        return
    try:
        n = int(value)
    except ValueError:
        raise cfgmod.ConfigError(f"BEAMGUARD_THREADS must be an integer, got {value!r}")
    if n < 1:
        raise cfgmod.ConfigError("BEAMGUARD_THREADS must be at least 1")
    import torch
    torch.set_num_threads(n)


def _require(*paths) -> None:
    missing = [p for p in paths if p is not None and not Path(p).exists()]
    if missing:
        raise MissingArtifacts(missing)


def _refuse_overwrite(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists; pass --force to overwrite")


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _provenance(cfg: dict, manifest) -> dict:
    return {"run_config": cfg, "run_config_hash": cfgmod.config_hash(cfg),
            "seeds": cfg["seeds"], "geometry_hash": manifest.geometry_hash}


def _check_geometry(manifest, headers: dict[str, dict]) -> None:
    bad = [name for name, h in headers.items()
           if h.get("geometry_hash") not in (None, manifest.geometry_hash)]
    if bad:
        raise GeometryMismatch(
            f"artifacts built for a different camera/codebook than the dataset: {', '.join(bad)}")


# -- subcommands --------------------------------------------------------------------

def cmd_gen_data(cfg: dict, out_dir, force: bool = False):
    out = Path(out_dir)
    _refuse_overwrite(out / "manifest.json", force)
    manifest = pipeline.generate(cfg)
    save_dataset(manifest, out, extra={"run_config_hash": cfgmod.config_hash(cfg),
                                       "run_config": cfg})
    log.info("wrote %d records to %s (%s)", len(manifest.records), out, manifest.counts())
    return manifest


def cmd_train(cfg: dict, data_dir, out, teacher=None, force: bool = False):
    out = Path(out)
    _require(Path(data_dir) / "manifest.json", teacher)
    _refuse_overwrite(out, force)
    manifest = load_dataset(data_dir)
    teacher_model = None
    if teacher is not None:
        _check_geometry(manifest, {str(teacher): read_checkpoint_header(teacher)})
        teacher_model = load_checkpoint(teacher)
    model, history = pipeline.train_victim(cfg, manifest, teacher=teacher_model)
    extra = _provenance(cfg, manifest) | {"role": "victim", "history": history,
                                          "teacher": None if teacher is None else _file_digest(teacher)}
    save_checkpoint(model, out, extra)
    metrics = out.with_suffix(".metrics.csv")
    with open(metrics, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_top1", "lr"])
        w.writeheader()
        w.writerows(history)
    log.info("saved %s (best val top-1 %s)", out, model.metadata.get("best_val_top1"))
    return out


def _attacker_images(cfg: dict, manifest, header: dict) -> np.ndarray:
    idx = pipeline.attacker_indices(cfg, manifest, header["selection_seed"], header["data_fraction"])
    return manifest.images[idx]


def cmd_attack(cfg: dict, data_dir, mode: str, out, surrogate=None, split: str = "test",
               force: bool = False):
    out = Path(out)
    _require(Path(data_dir) / "manifest.json", surrogate)
    _refuse_overwrite(out, force)
    manifest = load_dataset(data_dir)
    a = cfg["attack"]
    if mode == "proxy-train":
        sur, proxy, idx = pipeline.train_attacker(cfg, manifest)
        extra = _provenance(cfg, manifest) | {
            "role": "surrogate", "num_bins": proxy.num_bins, "detector_mode": proxy.detector_mode,
            "data_fraction": a["data_fraction"], "selection_seed": cfg["seeds"]["attack"],
            "num_images": int(len(idx)), "skipped": proxy.skipped,
            "architecture": sur.architecture, "history": sur.history}
        save_checkpoint(sur.model, out, extra)
        log.info("surrogate on %d images, best val bin accuracy %.3f", len(idx),
                 sur.model.metadata.get("best_val_top1", float("nan")))
        return out
    if surrogate is None:
        raise cfgmod.ConfigError(f"--mode {mode} needs --surrogate")
    header = read_checkpoint_header(surrogate)
    if header.get("role") != "surrogate":
        raise cfgmod.ConfigError(f"{surrogate} is not a surrogate checkpoint")
    _check_geometry(manifest, {str(surrogate): header})
    model = load_checkpoint(surrogate)
    meta = _provenance(cfg, manifest) | {
        "num_bins": header["num_bins"], "detector_mode": header["detector_mode"],
        "surrogate": _file_digest(surrogate)}
    meta.pop("run_config")
    if mode == "gen-uap":
        pert = atk.generate_uap(model, _attacker_images(cfg, manifest, header), a["epsilon"],
                                a["batch_size"])
    elif mode == "per-sample":
        idx = manifest.indices(split)
        pert = atk.fgsm_sample_attack(model, manifest.images[idx], a["epsilon"])
        meta["split"] = split
    else:
        raise cfgmod.ConfigError(f"unknown attack mode {mode!r}")
    atk.save_perturbation(pert, out, meta)
    log.info("wrote %s perturbation eps=%g to %s", pert.kind, pert.epsilon, out)
    return out


def _parse_model_args(items) -> dict[str, Path]:
    models = {}
    for item in items:
        name, sep, path = item.partition("=")
        if not sep:
            path, name = item, Path(item).stem
        if name in models:
            raise cfgmod.ConfigError(f"duplicate model name {name!r}")
        models[name] = Path(path)
    return models


def cmd_eval(cfg: dict, data_dir, model_args, perturbation_paths, out_dir, force: bool = False,
             figures: bool = True):
    out = Path(out_dir)
    models = _parse_model_args(model_args)
    _require(Path(data_dir) / "manifest.json", *models.values(), *perturbation_paths)
    _refuse_overwrite(out / "report.json", force)
    manifest = load_dataset(data_dir)
    headers = {str(p): read_checkpoint_header(p) for p in models.values()}
    headers.update({str(p): atk.read_perturbation_header(p) for p in perturbation_paths})
    _check_geometry(manifest, headers)
    perts, pert_files = {}, {}
    for p in perturbation_paths:
        pert = atk.load_perturbation(p)
        if pert.kind != "universal":
            raise cfgmod.ConfigError(f"{p} is not a universal perturbation")
        perts[float(pert.epsilon)] = pert
        pert_files[f"{pert.epsilon:g}"] = _file_digest(p)
    grid = pipeline.grid_from(cfg)
    missing = [e for e in grid.epsilons if not any(np.isclose(e, k) for k in perts)]
    if missing:
        raise MissingArtifacts([f"universal perturbation for epsilon={e:g}" for e in missing])
    loaded = {name: load_checkpoint(p) for name, p in models.items()}
    e = cfg["eval"]
    report = ev.evaluate_grid(loaded, manifest, grid, perts, tuple(e["noise_seeds"]),
                              e["split"], e["gamma_min_fraction"], e["sigma_max"])
    report.metadata.update({
        "run_config_hash": cfgmod.config_hash(cfg), "geometry_hash": manifest.geometry_hash,
        "models": {n: _file_digest(p) for n, p in models.items()},
        "perturbations": pert_files,
    })
    logit_records = None
    match = [k for k in perts if np.isclose(k, e["logit_epsilon"])]
    if match:
        idx = manifest.indices(e["split"])
        labels = np.array([manifest.records[i].beam_label for i in idx])
        logit_records = {n: ev.export_logits(m, manifest.images[idx], labels, perts[match[0]])
                         for n, m in loaded.items()}
        report.metadata["logit_shift"] = {n: ev.logit_shift(r) for n, r in logit_records.items()}
    ev.write_report_bundle(report, out, logit_records, figures=figures)
    log.info("wrote report bundle to %s", out)
    return report


def render_report(report: dict, k: int = 1, scenario: str = "all") -> str:
    """Plain-text accuracy and degradation tables from a ``report.json`` dict."""
    cells = [c for c in report["cells"] if c["k"] == k and c["scenario"] == scenario]
    models = sorted({c["model"] for c in cells})
    rows = {}
    for c in cells:
        rows.setdefault((c["condition"], c["budget"]), {})[c["model"]] = c["accuracy"]
    order = {"clean": 0, "noise": 1, "adversarial": 2}
    lines = [f"Top-{k} accuracy, scenario={scenario}",
             f"{'condition':<12}{'budget':>8}" + "".join(f"{m:>14}" for m in models)]
    for (cond, budget), accs in sorted(rows.items(), key=lambda kv: (order[kv[0][0]], kv[0][1] or 0)):
        b = "" if budget is None else f"{budget:g}"
        lines.append(f"{cond:<12}{b:>8}" + "".join(f"{accs.get(m, float('nan')):>14.4f}" for m in models))
    grid = report["grid"]
    lines.append("")
    lines.append("adversarial drop minus noise drop, pp (positive = adversarial stronger)")
    for m in models:
        clean = rows[("clean", None)][m]
        diffs = []
        for eps, sig in zip(grid["epsilons"], grid["sigmas"]):
            adv = rows.get(("adversarial", eps), {}).get(m)
            noi = rows.get(("noise", sig), {}).get(m)
            if adv is None or noi is None:
                continue
            diffs.append(f"eps={eps:g}: {100 * ((clean - adv) - (clean - noi)):+.1f}")
        lines.append(f"  {m}: " + ", ".join(diffs))
    rates = report.get("rates", {})
    if rates:
        lines.append("")
        lines.append("mean rate (bits/s/Hz): oracle / clean / attacked at largest epsilon")
        for m in models:
            r = rates[m]
            adv_keys = [key for key in r if key.startswith("adversarial@")]
            worst = r[max(adv_keys, key=lambda s: float(s.split("@")[1]))] if adv_keys else r["clean"]
            lines.append(f"  {m}: {r['clean']['mean_oracle']:.3f} / {r['clean']['mean_clean']:.3f}"
                         f" / {worst['mean_attacked']:.3f}"
                         f" (below gamma_min: {worst['violation_attacked']:.3f})")
    return "\n".join(lines) + "\n"


def cmd_report(run_dir, k: int = 1, scenario: str = "all", out=None):
    path = Path(run_dir) / "report.json"
    _require(path)
    text = render_report(json.loads(path.read_text()), k, scenario)
    if out is not None:
        Path(out).write_text(text)
    return text


# -- argument parsing ------------------------------------------------------------

def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="beamguard", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="render a labelled dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int)
    g.add_argument("--seed", type=int)

    t = sub.add_parser("train", parents=[common], help="train a victim classifier")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--frm", type=_on_off, metavar="on|off")
    t.add_argument("--distill", metavar="TEACHER", help="teacher checkpoint for distillation")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)

    a = sub.add_parser("attack", parents=[common], help="surrogate training and perturbations")
    a.add_argument("--data", required=True)
    a.add_argument("--mode", required=True, choices=["proxy-train", "gen-uap", "per-sample"])
    a.add_argument("--out", required=True)
    a.add_argument("--surrogate")
    a.add_argument("--epsilon", type=float)
    a.add_argument("--bins", type=int)
    a.add_argument("--data-fraction", type=float)
    a.add_argument("--detector", choices=["oracle", "blob"])
    a.add_argument("--epochs", type=int)
    a.add_argument("--seed", type=int)
    a.add_argument("--split", default="test")

    e = sub.add_parser("eval", parents=[common], help="evaluate models on the attack grid")
    e.add_argument("--data", required=True)
    e.add_argument("--models", nargs="+", required=True, metavar="NAME=CKPT")
    e.add_argument("--perturbations", nargs="*", default=[])
    e.add_argument("--out", required=True)
    e.add_argument("--no-figures", action="store_true")

    r = sub.add_parser("report", help="print tables from an evaluation bundle")
    r.add_argument("run_dir")
    r.add_argument("--k", type=int, default=1)
    r.add_argument("--scenario", default="all")
    r.add_argument("--out")
    r.add_argument("-v", "--verbose", action="store_true")
    return p


def _overrides(args) -> dict:
    o: dict = {}

    def put(section, key, value):
        if value is not None:
            o.setdefault(section, {})[key] = value

    cmd = args.command
    if cmd == "gen-data":
        put("dataset", "n", args.n)
        put("seeds", "dataset", args.seed)
    elif cmd == "train":
        put("frm", "enabled", args.frm)
        put("train", "epochs", args.epochs)
        put("seeds", "train", args.seed)
    elif cmd == "attack":
        put("attack", "epsilon", args.epsilon)
        put("attack", "num_bins", args.bins)
        put("attack", "data_fraction", args.data_fraction)
        put("attack", "detector", args.detector)
        put("attack", "surrogate_epochs", args.epochs)
        put("seeds", "attack", args.seed)
    return o


def run(args) -> int:
    if args.command == "report":
        sys.stdout.write(cmd_report(args.run_dir, args.k, args.scenario, args.out))
        return EXIT_OK
    cfg = cfgmod.build(_overrides(args), args.config)
    apply_thread_cap()
    if args.command == "gen-data":
        cmd_gen_data(cfg, args.out, args.force)
    elif args.command == "train":
        cmd_train(cfg, args.data, args.out, args.distill, args.force)
    elif args.command == "attack":
        cmd_attack(cfg, args.data, args.mode, args.out, args.surrogate, args.split, args.force)
    elif args.command == "eval":
        cmd_eval(cfg, args.data, args.models, args.perturbations, args.out, args.force,
                 figures=not args.no_figures)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (cfgmod.ConfigError, GeometryMismatch, FileExistsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifacts, ev.MissingArtifactError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())
