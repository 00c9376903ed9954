"""Cubic patching of volumes, random masking and Bezier intensity distortion.

Volumes are indexed ``(z, y, x)``. Patches are enumerated in C order over the
patch grid, so the z block index varies slowest ("z-major"), and each patch is
flattened in C order as well.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PatchGrid:
    patch: int
    dims: tuple[int, int, int]

    def __post_init__(self):
        if self.patch < 1:
            raise ValueError("patch size must be positive")
        bad = [d for d in self.dims if d % self.patch]
        if len(self.dims) != 3 or bad:
            raise ValueError(f"volume dims {self.dims} are not divisible by patch size {self.patch}")

    @property
    def grid(self) -> tuple[int, int, int]:
        return tuple(d // self.patch for d in self.dims)

    @property
    def n_patches(self) -> int:
        gz, gy, gx = self.grid
        return gz * gy * gx

    @property
    def patch_len(self) -> int:
        return self.patch**3

    def patch_index(self) -> np.ndarray:
        """Voxel-to-patch index map with the volume's shape."""
        ids = np.arange(self.n_patches).reshape(self.grid)
        p = self.patch
        return ids.repeat(p, 0).repeat(p, 1).repeat(p, 2)


def patchify(volume: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Split ``(..., Z, Y, X)`` into ``(..., N, p**3)`` non-overlapping patches."""
    volume = np.asarray(volume)
    if volume.shape[-3:] != tuple(grid.dims):
        raise ValueError(f"volume shape {volume.shape[-3:]} does not match grid dims {grid.dims}")
    lead = volume.shape[:-3]
    p = grid.patch
    gz, gy, gx = grid.grid
    v = volume.reshape(lead + (gz, p, gy, p, gx, p))
    k = len(lead)
    axes = tuple(range(k)) + (k, k + 2, k + 4, k + 1, k + 3, k + 5)
    return np.ascontiguousarray(v.transpose(axes)).reshape(lead + (grid.n_patches, grid.patch_len))


def unpatchify(patches: np.ndarray, grid: PatchGrid) -> np.ndarray:
    patches = np.asarray(patches)
    if patches.shape[-2:] != (grid.n_patches, grid.patch_len):
        raise ValueError(
            f"expected (..., {grid.n_patches}, {grid.patch_len}) patches, got {patches.shape}"
        )
    lead = patches.shape[:-2]
    p = grid.patch
    gz, gy, gx = grid.grid
    v = patches.reshape(lead + (gz, gy, gx, p, p, p))
    k = len(lead)
    axes = tuple(range(k)) + (k, k + 3, k + 1, k + 4, k + 2, k + 5)
    return np.ascontiguousarray(v.transpose(axes)).reshape(lead + tuple(grid.dims))


@dataclass(frozen=True)
class MaskPlan:
    visible: np.ndarray
    masked: np.ndarray
    ratio: float

    @property
    def n_tokens(self) -> int:
        return len(self.visible) + len(self.masked)

    def order(self) -> np.ndarray:
        """Original positions of the sequence ``visible ++ masked``."""
        return np.concatenate([self.visible, self.masked])

    def restore_order(self) -> np.ndarray:
        """Indices that put ``visible ++ masked`` back into grid order."""
        return np.argsort(self.order(), kind="stable")


def mask_count(n: int, ratio: float) -> int:
    # round half up, not Python's round-half-even
    return int(np.floor(ratio * n + 0.5))


def sample_mask(n: int, ratio: float, rng: np.random.Generator) -> MaskPlan:
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must lie in (0, 1), got {ratio}")
    n_mask = mask_count(n, ratio)
    if n_mask in (0, n):
        raise ValueError(f"mask ratio {ratio} over {n} patches masks {n_mask}: degenerate plan")
    perm = rng.permutation(n)
    return MaskPlan(np.sort(perm[n_mask:]), np.sort(perm[:n_mask]), ratio)


LUT_SIZE = 1024


@dataclass(frozen=True)
class BezierCurve:
    """Cubic Bezier from (0,0) to (1,1) used as an intensity lookup."""

    p1: tuple[float, float]
    p2: tuple[float, float]
    increasing: bool = True

    def table(self) -> tuple[np.ndarray, np.ndarray]:
        t = np.linspace(0.0, 1.0, LUT_SIZE)
        a, b, c, d = (1 - t) ** 3, 3 * (1 - t) ** 2 * t, 3 * (1 - t) * t**2, t**3
        xs = b * self.p1[0] + c * self.p2[0] + d
        ys = b * self.p1[1] + c * self.p2[1] + d
        # x(t) is non-decreasing for control points in the unit square
        return np.maximum.accumulate(xs), ys

    def __call__(self, values: np.ndarray) -> np.ndarray:
        xs, ys = self.table()
        out = np.interp(values, xs, ys)
        if not self.increasing:
            out = 1.0 - out
        return np.clip(out, 0.0, 1.0)

    @classmethod
    def random(cls, rng: np.random.Generator) -> "BezierCurve":
        p1 = tuple(float(v) for v in rng.random(2))
        p2 = tuple(float(v) for v in rng.random(2))
        return cls(p1, p2, increasing=bool(rng.random() >= 0.5))


def bezier_transform(patches: np.ndarray, curve: BezierCurve, apply_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Remap every voxel through ``curve`` with probability ``apply_prob``, else copy."""
    patches = np.asarray(patches)
    if patches.size and (patches.min() < 0.0 or patches.max() > 1.0):
        raise ValueError("bezier_transform expects voxel values in [0, 1]")
    if rng.random() < apply_prob:
        return curve(patches).astype(patches.dtype)
    return patches.copy()


def random_distortion(patches: np.ndarray, apply_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Draw a fresh random curve and apply it to one sample's patches."""
    curve = BezierCurve.random(rng)
    return bezier_transform(patches, curve, apply_prob, rng)


def assemble_restoration(masked_preds: np.ndarray, visible_preds: np.ndarray, plan: MaskPlan, grid: PatchGrid) -> np.ndarray:
    """Put masked predictions at masked positions and visible ones at visible positions."""
    masked_preds = np.asarray(masked_preds)
    visible_preds = np.asarray(visible_preds)
    if len(masked_preds) != len(plan.masked) or len(visible_preds) != len(plan.visible):
        raise ValueError(
            f"plan has {len(plan.masked)} masked / {len(plan.visible)} visible positions, got "
            f"{len(masked_preds)} / {len(visible_preds)} predictions"
        )
    out = np.zeros((grid.n_patches, grid.patch_len), dtype=np.result_type(masked_preds, visible_preds))
    out[plan.masked] = masked_preds
    out[plan.visible] = visible_preds
    return unpatchify(out, grid)
