"""
A black-box attack in miniature
===============================

Train a victim on beam labels, let an attacker who never sees those labels
train a surrogate on horizontal image bins, then craft one universal
perturbation and compare it with Gaussian noise at a matched budget.
Small sizes keep this under a few minutes on one core.
"""

# %%
import numpy as np

from beamguard import attack as atk
from beamguard import evaluation as ev
from beamguard import scene
from beamguard.model import BackboneConfig, FrmConfig, TrainConfig, build_model, train_model

man = scene.generate_dataset(1200, seed=0)
print(man.counts())
train, val = man.split_arrays("train"), man.split_arrays("val")
test_idx = man.indices("test")
x_test = man.images[test_idx]
y_test = np.array([man.records[i].beam_label for i in test_idx])

# %% [markdown]
# The victim: a small residual CNN, with and without the feature
# refinement module.

# %%
bb = BackboneConfig(num_classes=16)
cfg = TrainConfig(epochs=8, seed=0)
victims = {}
for name, frm in (("baseline", FrmConfig(enabled=False)), ("frm", FrmConfig())):
    model = build_model(bb, frm, man.channel_mean, man.channel_std, seed=0)
    victims[name], _ = train_model(model, train, val, cfg)
    print(name, "clean top-1", ev.topk_accuracy(victims[name], x_test, y_test, 1))

# %% [markdown]
# The attacker: half of the non-test images, labelled by which of 8
# horizontal bins a detected vehicle falls in.

# %%
pool = np.concatenate([man.indices("train"), man.indices("val")])
idx = atk.attacker_subset(pool, len(man.records), 0.5, seed=0)
detections = atk.detect_all(man.images[idx], "oracle", [man.records[i] for i in idx])
proxy = atk.build_proxy_dataset(man.images[idx], detections, num_bins=8, seed=0)
surrogate = atk.train_surrogate(proxy, TrainConfig(epochs=8, seed=0), BackboneConfig(num_classes=8))
print("surrogate images:", len(proxy), "skipped:", proxy.skipped)

# %% [markdown]
# One perturbation for every image, against noise whose 95% mass fits the
# same bound.

# %%
uap = atk.generate_uap(surrogate, proxy.images, epsilon=0.04)
for name, model in victims.items():
    clean = ev.topk_accuracy(model, x_test, y_test, 1)
    noisy = ev.topk_accuracy(model, x_test, y_test, 1, noise=atk.NoiseSpec(0.02, seed=0))
    adv = ev.topk_accuracy(model, x_test, y_test, 1, perturbation=uap)
    print(f"{name:9s} clean {clean:.3f}  noise {noisy:.3f}  universal {adv:.3f}")

# %% [markdown]
# What the wrong beams cost in achievable rate.

# %%
impact = ev.rate_impact_report(victims["baseline"], man, "test", perturbation=uap)
print({k: round(v, 3) for k, v in impact.summary().items()})
