"""
A short collaborative pretraining run
=====================================

Masked-patch restoration, visible-patch restoration, age prediction and an
adversarial critic trained jointly on a handful of phantoms. The full
schedule is 500 epochs; this demo runs a few to show the moving parts.
"""

from dataclasses import replace

import numpy as np

from mciat.config import ExperimentConfig
from mciat.pretrain import AblationMode, PretrainModel, epoch_means, predict_ages, train
from mciat.synth import build_dataset
from mciat.volume import PatchGrid, patchify

cfg = ExperimentConfig()
pc = replace(cfg.pretrain, epochs=5, warmup_epochs=1)

# which tasks each ablation mode switches on
for m in range(5):
    print("mode", m, AblationMode.from_index(m))

phantoms = build_dataset(cfg.phantom, 32, seed=0)
grid = PatchGrid(cfg.phantom.patch, cfg.phantom.shape)
patches = np.stack([patchify(p.volume, grid) for p in phantoms])
ages = np.array([p.age for p in phantoms])

model = PretrainModel(pc, np.random.default_rng(1))
records = train(model, patches[:24], ages[:24], pc, mask_seed=2)

# one record per optimizer step; epoch means smooth the trace
for key in ("L_sd", "L_pixel", "L_age", "L_adv_D", "L_adv_G", "total"):
    print(key, np.round(epoch_means(records, key), 4))

# ages of unseen phantoms, read from the age head
pred = predict_ages(model, patches[24:], pc.mask_ratio, seed=3)
print("true", np.round(ages[24:], 1))
print("pred", np.round(pred, 1))
