import json

import numpy as np
import pytest
import torch

from beamguard import attack as atk
from beamguard import cli
from beamguard.model import TrainingDiverged, load_checkpoint, read_checkpoint_header

SMALL = {
    "dataset": {"n": 60},
    "model": {"stage_channels": [8, 8, 16]},
    "train": {"epochs": 1},
    "attack": {"surrogate_epochs": 1},
    "grid": {"epsilons": [0.04], "sigmas": [0.02], "topk": [1, 3]},
    "eval": {"noise_seeds": [0], "logit_epsilon": 0.04},
}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.json"
    cfg.write_text(json.dumps(SMALL))
    c = ["--config", str(cfg)]
    assert cli.main(["gen-data", "--out", str(root / "data"), *c]) == 0
    assert cli.main(["train", "--data", str(root / "data"), "--out", str(root / "base.ckpt"),
                     "--frm", "off", *c]) == 0
    assert cli.main(["train", "--data", str(root / "data"), "--out", str(root / "frm.ckpt"),
                     "--frm", "on", *c]) == 0
    assert cli.main(["attack", "--data", str(root / "data"), "--mode", "proxy-train",
                     "--out", str(root / "sur.ckpt"), "--bins", "8", "--data-fraction", "0.5",
                     *c]) == 0
    assert cli.main(["attack", "--data", str(root / "data"), "--mode", "gen-uap",
                     "--surrogate", str(root / "sur.ckpt"), "--epsilon", "0.04",
                     "--out", str(root / "uap.bin"), *c]) == 0
    return root, c


def test_gen_data_small_count(tmp_path):
    assert cli.main(["gen-data", "--out", str(tmp_path / "d"), "--n", "10"]) == 0
    lines = (tmp_path / "d" / "records.jsonl").read_text().splitlines()
    assert len(lines) == 10
    header = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert sum(header["counts"].values()) == 10
    assert "run_config_hash" in header
    cb = np.load(tmp_path / "d" / "codebook.npy")
    assert cb.shape == (16, 16) and np.iscomplexobj(cb)


def test_gen_data_rerun_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert cli.main(["gen-data", "--out", str(tmp_path / name), "--n", "12", "--seed", "4"]) == 0
    for f in ("records.jsonl", "manifest.json", "codebook.npy", "images/00007.png"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_refuses_overwrite_without_force(work, capsys):
    root, c = work
    assert cli.main(["gen-data", "--out", str(root / "data"), *c]) == 2
    assert "--force" in capsys.readouterr().err
    assert cli.main(["train", "--data", str(root / "data"), "--out", str(root / "base.ckpt"), *c]) == 2


def test_unknown_config_key_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"dataset": {"n": 10, "colour": "red"}}))
    assert cli.main(["gen-data", "--out", str(tmp_path / "d"), "--config", str(bad)]) == 2
    assert not (tmp_path / "d").exists()


def test_frm_flag_changes_only_frm_section(work):
    root, _ = work
    a = read_checkpoint_header(root / "base.ckpt")["run_config"]
    b = read_checkpoint_header(root / "frm.ckpt")["run_config"]
    assert [s for s in a if a[s] != b[s]] == ["frm"]
    assert load_checkpoint(root / "frm.ckpt").frm is not None
    assert load_checkpoint(root / "base.ckpt").frm is None


def test_checkpoints_embed_provenance(work):
    root, _ = work
    data_hash = json.loads((root / "data" / "manifest.json").read_text())["geometry_hash"]
    for name in ("base.ckpt", "sur.ckpt"):
        h = read_checkpoint_header(root / name)
        assert h["geometry_hash"] == data_hash and "run_config_hash" in h and "seeds" in h
    metrics = (root / "base.metrics.csv").read_text().splitlines()
    assert metrics[0] == "epoch,train_loss,val_top1,lr" and len(metrics) == 2


def test_zero_epochs_is_initialization(work, tmp_path):
    root, c = work
    out = tmp_path / "init.ckpt"
    assert cli.main(["train", "--data", str(root / "data"), "--out", str(out), "--epochs", "0", *c]) == 0
    assert read_checkpoint_header(out)["history"] == []
    again = tmp_path / "init2.ckpt"
    assert cli.main(["train", "--data", str(root / "data"), "--out", str(again), "--epochs", "0", *c]) == 0
    sa, sb = load_checkpoint(out).state_dict(), load_checkpoint(again).state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)


def test_surrogate_header_and_data_share(work):
    root, _ = work
    h = read_checkpoint_header(root / "sur.ckpt")
    n = json.loads((root / "data" / "manifest.json").read_text())["counts"]
    assert h["num_bins"] == 8 and h["detector_mode"] == "oracle" and h["data_fraction"] == 0.5
    assert h["num_images"] <= 0.5 * sum(n.values())


def test_uap_header_and_bound(work):
    root, _ = work
    h = atk.read_perturbation_header(root / "uap.bin")
    assert h["epsilon"] == 0.04 and h["num_bins"] == 8 and h["detector_mode"] == "oracle"
    assert float(np.max(np.abs(atk.load_perturbation(root / "uap.bin").delta))) <= 0.04


def test_uap_rerun_identical_and_blind_to_victims(work, tmp_path):
    root, c = work
    # a different victim now sits next to the surrogate; the attack must not notice
    assert cli.main(["train", "--data", str(root / "data"), "--out", str(tmp_path / "other.ckpt"),
                     "--seed", "9", *c]) == 0
    out = tmp_path / "uap2.bin"
    assert cli.main(["attack", "--data", str(root / "data"), "--mode", "gen-uap",
                     "--surrogate", str(root / "sur.ckpt"), "--epsilon", "0.04",
                     "--out", str(out), *c]) == 0
    assert out.read_bytes() == (root / "uap.bin").read_bytes()


def test_per_sample_mode(work, tmp_path):
    root, c = work
    out = tmp_path / "ps.bin"
    assert cli.main(["attack", "--data", str(root / "data"), "--mode", "per-sample",
                     "--surrogate", str(root / "sur.ckpt"), "--epsilon", "0.02",
                     "--out", str(out), *c]) == 0
    pert = atk.load_perturbation(out)
    n_test = json.loads((root / "data" / "manifest.json").read_text())["counts"]["test"]
    assert pert.kind == "per_sample" and pert.delta.shape[0] == n_test


def test_attack_needs_surrogate_checkpoint(work, tmp_path):
    root, c = work
    args = ["attack", "--data", str(root / "data"), "--mode", "gen-uap", "--out", str(tmp_path / "u")]
    assert cli.main([*args, *c]) == 2
    assert cli.main([*args, "--surrogate", str(root / "base.ckpt"), *c]) == 2
    assert cli.main([*args, "--surrogate", str(tmp_path / "nope.ckpt"), *c]) == 3


def test_eval_bundle_and_report(work, tmp_path, capsys):
    root, c = work
    args = ["eval", "--data", str(root / "data"), "--models", f"base={root / 'base.ckpt'}",
            f"frm={root / 'frm.ckpt'}", "--perturbations", str(root / "uap.bin"), *c]
    assert cli.main([*args, "--out", str(tmp_path / "r1")]) == 0
    assert cli.main([*args, "--out", str(tmp_path / "r2")]) == 0
    a, b = (tmp_path / "r1/report.json").read_bytes(), (tmp_path / "r2/report.json").read_bytes()
    assert a == b
    report = json.loads(a)
    assert report["metadata"]["geometry_hash"] and set(report["rates"]) == {"base", "frm"}
    for f in ("tables/accuracy_all_top1.csv", "tables/degradation_frm.csv",
              "figures/degradation_base.png", "logits.jsonl"):
        assert (tmp_path / "r1" / f).exists()
    header = (tmp_path / "r1/tables/accuracy_all_top3.csv").read_text().splitlines()[0]
    assert header == "condition,budget,base,frm"
    capsys.readouterr()
    assert cli.main(["report", str(tmp_path / "r1"), "--k", "3"]) == 0
    text = capsys.readouterr().out
    assert "Top-3 accuracy" in text and "adversarial" in text and "eps=0.04" in text


def test_clean_only_grid(work, tmp_path):
    root, _ = work
    cfg = tmp_path / "clean.json"
    cfg.write_text(json.dumps(SMALL | {"grid": {"epsilons": [], "sigmas": [], "topk": [1]}}))
    assert cli.main(["eval", "--data", str(root / "data"), "--models", str(root / "base.ckpt"),
                     "--out", str(tmp_path / "r"), "--config", str(cfg)]) == 0
    report = json.loads((tmp_path / "r/report.json").read_text())
    assert {c["condition"] for c in report["cells"]} == {"clean"}


def test_eval_lists_every_missing_artifact(work, tmp_path, capsys):
    root, c = work
    code = cli.main(["eval", "--data", str(root / "data"), "--models", str(tmp_path / "a.ckpt"),
                     str(tmp_path / "b.ckpt"), "--perturbations", str(tmp_path / "u.bin"),
                     "--out", str(tmp_path / "r"), *c])
    err = capsys.readouterr().err
    assert code == 3
    assert all(name in err for name in ("a.ckpt", "b.ckpt", "u.bin"))


def test_eval_missing_grid_perturbation_exits_3(work, tmp_path):
    root, c = work
    assert cli.main(["eval", "--data", str(root / "data"), "--models", str(root / "base.ckpt"),
                     "--out", str(tmp_path / "r"), *c]) == 3


def test_eval_refuses_mismatched_geometry(work, tmp_path, capsys):
    root, c = work
    other = tmp_path / "other.json"
    other.write_text(json.dumps(SMALL | {"codebook": {"num_antennas": 8, "num_beams": 16}}))
    assert cli.main(["gen-data", "--out", str(tmp_path / "d8"), "--config", str(other)]) == 0
    code = cli.main(["eval", "--data", str(tmp_path / "d8"), "--models", str(root / "base.ckpt"),
                     "--perturbations", str(root / "uap.bin"), "--out", str(tmp_path / "r"),
                     "--config", str(other)])
    assert code == 2 and "different camera/codebook" in capsys.readouterr().err


def test_numeric_failure_exits_4(work, tmp_path, monkeypatch):
    root, c = work

    def diverge(*a, **k):
        raise TrainingDiverged("loss became nan at epoch 1")
    monkeypatch.setattr(cli.pipeline, "train_victim", diverge)
    assert cli.main(["train", "--data", str(root / "data"), "--out", str(tmp_path / "x.ckpt"), *c]) == 4
    assert not (tmp_path / "x.ckpt").exists()


def test_report_on_missing_bundle_exits_3(tmp_path):
    assert cli.main(["report", str(tmp_path)]) == 3


def test_thread_cap_env(tmp_path, monkeypatch):
    monkeypatch.setenv("BEAMGUARD_THREADS", "many")
    assert cli.main(["gen-data", "--out", str(tmp_path / "d"), "--n", "5"]) == 2
    before = torch.get_num_threads()
    monkeypatch.setenv("BEAMGUARD_THREADS", "1")
    try:
        assert cli.main(["gen-data", "--out", str(tmp_path / "d"), "--n", "5"]) == 0
        assert torch.get_num_threads() == 1
    finally:
        torch.set_num_threads(before)
