"""
Phantom volumes, patches and masks
==================================

A phantom is a small synthetic 3D volume with a known age, class label and
behaviour scores. This walk-through builds one, cuts it into patch tokens,
draws a pretraining mask and applies a random intensity curve.
"""

import numpy as np

from mciat.synth import PhantomSpec, class_region, generate_phantom
from mciat.volume import BezierCurve, PatchGrid, patchify, random_distortion, sample_mask, unpatchify

spec = PhantomSpec()
young = generate_phantom(spec, seed=0, age=25.0, label=0)
old = generate_phantom(spec, seed=0, age=75.0, label=0)
print("volume", young.volume.shape, "values in", float(young.volume.min()), "..", float(young.volume.max()))

# the ventricle widens and the blobs shrink with age
centre = tuple(s // 2 for s in spec.shape)
print("centre voxel young/old:", young.volume[centre], old.volume[centre])

# the class label only touches a periventricular region
case = generate_phantom(spec, seed=0, age=25.0, label=1)
changed = np.abs(case.volume - young.volume) > 0
print("voxels changed by the label:", int(changed.sum()), "inside region:", bool(np.all(class_region(spec)[changed] > 0)))

# 6-voxel cubes, z-major order: 5 x 6 x 5 = 150 tokens of 216 voxels
grid = PatchGrid(spec.patch, spec.shape)
patches = patchify(young.volume, grid)
print("tokens", patches.shape, "roundtrip exact:", np.array_equal(unpatchify(patches, grid), young.volume))

# 76% of the tokens are hidden from the encoder
plan = sample_mask(grid.n_patches, 0.76, np.random.default_rng(0))
print("masked", plan.masked.size, "visible", plan.visible.size)

# visible tokens are distorted by a monotone Bezier intensity curve
curve = BezierCurve((0.2, 0.8), (0.6, 0.1))
x = np.linspace(0, 1, 5)
print("curve at", x, "->", np.round(curve(x), 3))
distorted = random_distortion(patches[plan.visible], 1.0, np.random.default_rng(1))
print("mean intensity before/after:", float(patches[plan.visible].mean()), float(distorted.mean()))
