"""Procedural phantom volumes with planted age, class and behaviour factors.

Each phantom is a soft-edged ellipsoidal "brain" with a central ventricle
that widens with age, a ring of structural blobs that shrink with age and
whose brightness follows a contrast latent, and (for label 1) extra
intensity in a periventricular region with a flat top and a cosine edge.
Behaviour scores are linear in the latent factors
``(age_z, contrast, nuisance_1, nuisance_2)`` plus noise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

LATENTS = ("age_z", "contrast", "nuisance_1", "nuisance_2")

_BLOB_CENTERS = np.array(
    [
        (-0.45, -0.35, 0.0),
        (0.45, -0.35, 0.0),
        (-0.40, 0.30, 0.45),
        (0.40, 0.30, 0.45),
        (0.0, -0.55, -0.40),
        (-0.40, 0.35, -0.35),
        (0.0, 0.60, 0.20),
        (0.0, -0.20, 0.60),
    ]
)
_JITTER_DIRS = np.array(
    [
        (0.0, 1.0, 0.0),
        (0.0, 1.0, 0.0),
        (1.0, 0.0, 0.0),
        (-1.0, 0.0, 0.0),
        (0.0, 0.0, 1.0),
        (0.0, 0.0, 1.0),
        (1.0, 0.0, 0.0),
        (0.0, 1.0, 0.0),
    ]
)
# centred on the ventricle, where the guider's attention concentrates at toy scale
CLASS_CENTER = (0.0, 0.0, 0.0)
CLASS_RADIUS = 0.30
CLASS_EDGE = 0.10


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple[int, int, int] = (30, 36, 30)
    patch: int = 6
    n_blobs: int = 6
    age_range: tuple[float, float] = (20.0, 80.0)
    class_effect: float = 0.1
    noise_sigma: float = 0.02
    contrast_effect: float = 0.15
    nuisance_effect: float = 0.03
    jitter: float = 0.05
    behavior_names: tuple[str, ...] = ("age_linked", "contrast_linked", "composite")
    behavior_weights: tuple[tuple[float, ...], ...] = (
        (1.0, 0.0, 0.0, 0.0),
        (0.0, 1.0, 0.0, 0.0),
        (0.7, 0.7, 0.0, 0.0),
    )
    behavior_noise: float = 0.3

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "age_range", tuple(float(a) for a in self.age_range))
        object.__setattr__(self, "behavior_names", tuple(self.behavior_names))
        object.__setattr__(self, "behavior_weights", tuple(tuple(float(w) for w in row) for row in self.behavior_weights))
        if len(shape) != 3 or any(s % self.patch for s in shape):
            raise ValueError(f"volume shape {shape} is not divisible by patch size {self.patch}")
        if self.noise_sigma < 0 or self.behavior_noise < 0:
            raise ValueError("noise levels must be >= 0")
        if not 0 <= self.n_blobs <= len(_BLOB_CENTERS):
            raise ValueError(f"n_blobs must lie in 0..{len(_BLOB_CENTERS)}")
        lo, hi = self.age_range
        if not lo < hi:
            raise ValueError(f"age range {self.age_range} is empty")
        if len(self.behavior_names) != len(self.behavior_weights):
            raise ValueError("behavior_names and behavior_weights differ in length")
        if any(len(row) != len(LATENTS) for row in self.behavior_weights):
            raise ValueError(f"each behavior weight row needs {len(LATENTS)} entries {LATENTS}")

    def age_z(self, age: float) -> float:
        lo, hi = self.age_range
        return (age - (lo + hi) / 2) / ((hi - lo) / np.sqrt(12.0))


@dataclass
class Phantom:
    volume: np.ndarray
    age: float
    label: int
    behavior: np.ndarray
    latents: np.ndarray
    seed: int
    behavior_names: tuple[str, ...] = field(default=())


def _coords(shape):
    axes = [(np.arange(n) + 0.5) / n * 2.0 - 1.0 for n in shape]
    return np.meshgrid(*axes, indexing="ij")


def _soft(radius_minus_dist, width=0.04):
    return 1.0 / (1.0 + np.exp(-radius_minus_dist / width))


def class_region(spec: PhantomSpec) -> np.ndarray:
    """Weight in [0, 1] of the class perturbation: a flat top with a cosine edge, zero outside."""
    z, y, x = _coords(spec.shape)
    cz, cy, cx = CLASS_CENTER
    d = np.sqrt((z - cz) ** 2 + (y - cy) ** 2 + (x - cx) ** 2)
    t = np.clip((CLASS_RADIUS - d) / CLASS_EDGE, 0.0, 1.0)
    return 0.5 * (1.0 - np.cos(np.pi * t))


def generate_phantom(spec: PhantomSpec, seed: int, age: float | None = None, label: int | None = None) -> Phantom:
    """Deterministic phantom for ``(spec, seed)``.

    ``age`` and ``label`` override the seeded draws; every random draw is made
    regardless, so toggling the label changes nothing outside the class region.
    """
    rng = np.random.default_rng(seed)
    lo, hi = spec.age_range
    u_age = rng.random()
    u_label = int(rng.integers(2))
    contrast = float(rng.standard_normal())
    nuis = rng.standard_normal(2)
    voxel_noise = rng.standard_normal(spec.shape)
    behavior_noise = rng.standard_normal(len(spec.behavior_names))

    age = lo + u_age * (hi - lo) if age is None else float(age)
    label = u_label if label is None else int(label)
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label}")
    a = (age - lo) / (hi - lo)

    z, y, x = _coords(spec.shape)
    r = np.sqrt(z**2 + y**2 + x**2)
    tissue = 0.55 + spec.nuisance_effect * nuis[0]
    vol = tissue * _soft(0.85 - r)

    vent_r = 0.12 + 0.25 * a
    dv = np.sqrt(z**2 + (y / 1.3) ** 2 + (x / 0.8) ** 2)
    vent = _soft(vent_r - dv)
    vol = vol * (1.0 - vent) + 0.1 * vent

    blob_r = 0.28 * (1.0 - 0.35 * a)
    blob_val = 0.8 + spec.contrast_effect * contrast
    for c, direction in zip(_BLOB_CENTERS[: spec.n_blobs], _JITTER_DIRS):
        cz, cy, cx = c + spec.jitter * nuis[1] * direction
        d = np.sqrt((z - cz) ** 2 + (y - cy) ** 2 + (x - cx) ** 2)
        w = _soft(blob_r - d)
        vol = vol * (1.0 - w) + blob_val * w

    vol = vol + label * spec.class_effect * class_region(spec)
    vol = np.clip(vol + spec.noise_sigma * voxel_noise, 0.0, 1.0).astype(np.float32)

    latents = np.array([spec.age_z(age), contrast, nuis[0], nuis[1]])
    weights = np.array(spec.behavior_weights, dtype=float).reshape(-1, len(LATENTS))
    behavior = weights @ latents + spec.behavior_noise * behavior_noise
    return Phantom(vol, age, label, behavior, latents, int(seed), spec.behavior_names)


def build_dataset(spec: PhantomSpec, n: int, seed: int) -> list[Phantom]:
    """``n`` phantoms with labels balanced to within one and stratified uniform ages."""
    if n <= 0:
        raise ValueError(f"dataset size must be positive, got {n}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % 2 == 0).astype(int)
    lo, hi = spec.age_range
    ages = lo + (rng.permutation(n) + rng.random(n)) / n * (hi - lo)
    seeds = np.random.SeedSequence(seed).generate_state(n)
    return [generate_phantom(spec, int(s), age=a, label=l) for s, a, l in zip(seeds, ages, labels)]


def kfold_split(n: int, k: int, seed: int) -> list[np.ndarray]:
    """``k`` disjoint sorted test folds covering ``0..n-1``; larger folds first."""
    if k < 2 or k > n:
        raise ValueError(f"need 2 <= k <= n, got k={k}, n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]


# ---------------------------------------------------------------------------
# persistence: one little-endian float32 blob per phantom plus index.json


def spec_to_dict(spec: PhantomSpec) -> dict:
    d = asdict(spec)
    d["shape"] = list(spec.shape)
    d["age_range"] = list(spec.age_range)
    d["behavior_names"] = list(spec.behavior_names)
    d["behavior_weights"] = [list(r) for r in spec.behavior_weights]
    return d


def save_dataset(phantoms: list[Phantom], directory, spec: PhantomSpec) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, ph in enumerate(phantoms):
        name = f"phantom_{i:05d}.bin"
        (directory / name).write_bytes(ph.volume.astype("<f4").tobytes())
        entries.append(
            {
                "id": i,
                "file": name,
                "shape": list(ph.volume.shape),
                "age": float(ph.age),
                "label": int(ph.label),
                "behavior": [float(b) for b in ph.behavior],
                "latents": [float(v) for v in ph.latents],
                "seed": int(ph.seed),
            }
        )
    index = {"spec": spec_to_dict(spec), "behavior_names": list(spec.behavior_names), "phantoms": entries}
    path = directory / "index.json"
    path.write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
    return path


def load_dataset(directory) -> tuple[PhantomSpec, list[Phantom]]:
    directory = Path(directory)
    index_path = directory / "index.json"
    if not index_path.exists():
        raise FileNotFoundError(f"no dataset index at {index_path}")
    index = json.loads(index_path.read_text())
    spec = PhantomSpec(**index["spec"])
    names = tuple(index["behavior_names"])
    out = []
    for e in index["phantoms"]:
        raw = np.frombuffer((directory / e["file"]).read_bytes(), dtype="<f4")
        if raw.size != int(np.prod(e["shape"])):
            raise ValueError(f"{e['file']}: {raw.size} voxels, index says shape {e['shape']}")
        out.append(
            Phantom(
                raw.reshape(e["shape"]).astype(np.float32),
                e["age"],
                e["label"],
                np.array(e["behavior"]),
                np.array(e["latents"]),
                e["seed"],
                names,
            )
        )
    return spec, out
