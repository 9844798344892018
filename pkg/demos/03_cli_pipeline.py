"""
The command line, end to end
============================

Every stage writes an artifact the next stage reads.  A reduced config
keeps the run short; drop the overrides for the desk-scale defaults.
"""

# %%
import json
import tempfile
from pathlib import Path

from beamguard import cli

work = Path(tempfile.mkdtemp(prefix="beamguard-"))
config = work / "run.json"
config.write_text(json.dumps({
    "dataset": {"n": 400},
    "train": {"epochs": 3},
    "attack": {"surrogate_epochs": 3},
    "eval": {"noise_seeds": [0]},
}))
c = ["--config", str(config)]


def run(*argv):
    code = cli.main([*argv, *c])
    print("beamguard", argv[0], "->", code)


# %%
run("gen-data", "--out", str(work / "data"))
run("train", "--data", str(work / "data"), "--out", str(work / "base.ckpt"), "--frm", "off")
run("train", "--data", str(work / "data"), "--out", str(work / "frm.ckpt"), "--frm", "on")
run("train", "--data", str(work / "data"), "--out", str(work / "dd.ckpt"),
    "--distill", str(work / "base.ckpt"))

# %%
run("attack", "--data", str(work / "data"), "--mode", "proxy-train", "--out", str(work / "sur.ckpt"))
for eps in ("0.02", "0.03", "0.04", "0.05"):
    run("attack", "--data", str(work / "data"), "--mode", "gen-uap", "--surrogate",
        str(work / "sur.ckpt"), "--epsilon", eps, "--out", str(work / f"uap_{eps}.bin"))

# %%
run("eval", "--data", str(work / "data"), "--models", f"baseline={work / 'base.ckpt'}",
    f"frm={work / 'frm.ckpt'}", f"dd={work / 'dd.ckpt'}",
    "--perturbations", *[str(p) for p in sorted(work.glob("uap_*.bin"))],
    "--out", str(work / "report"))
print(cli.cmd_report(work / "report", k=1))
print("artifacts in", work)
