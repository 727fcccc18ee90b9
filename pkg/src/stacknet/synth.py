"""Deterministic brain/lesion phantoms with controlled lesion sizes."""

import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import CapacityError, ConfigError
from .preprocess import ManifestEntry, SubjectRecord, Volume
from .volume_io import save_volume

SIZE_RANGES = {"small": (1, 9), "medium": (10, 20), "large": (21, 60)}

# 26-neighbourhood offsets
_NEIGHBOURS = [
    (i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1) if (i, j, k) != (0, 0, 0)
]


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (96, 96, 16)
    n_small: int = 4
    n_medium: int = 3
    n_large: int = 2
    small_range: tuple = SIZE_RANGES["small"]
    medium_range: tuple = SIZE_RANGES["medium"]
    large_range: tuple = SIZE_RANGES["large"]
    brain_intensity: float = 100.0
    flair_contrast: float = 80.0
    t1_contrast: float = -40.0
    noise_sd: float = 5.0
    spacing: tuple = (1.0, 1.0, 3.0)
    seed: int = 0

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ConfigError(f"dims must be three positive extents, got {self.dims}")
        if self.dims[0] % 8 or self.dims[1] % 8:
            raise ConfigError(f"X and Y must be multiples of 8, got {self.dims}")
        if min(self.n_small, self.n_medium, self.n_large) < 0:
            raise ConfigError("lesion counts must be non-negative")
        lo, hi = self.small_range
        if not 1 <= lo <= hi < 10:
            raise ConfigError(f"small range {self.small_range} must lie within [1, 9]")
        lo, hi = self.medium_range
        if not 10 <= lo <= hi <= 20:
            raise ConfigError(f"medium range {self.medium_range} must lie within [10, 20]")
        lo, hi = self.large_range
        if not 21 <= lo <= hi:
            raise ConfigError(f"large range {self.large_range} must start above 20")
        if self.noise_sd < 0:
            raise ConfigError("noise_sd must be non-negative")


def brain_ellipsoid(dims):
    """Axis-aligned ellipsoid, truncated in z so every slice holds brain.

    In-plane semi-axes are 0.95 of the half extents; the z semi-axis is 1.5
    half extents, which leaves roughly 60% of the grid inside.
    """
    x, y, z = dims
    cx, cy, cz = (x - 1) / 2, (y - 1) / 2, (z - 1) / 2
    ax, ay, az = 0.95 * x / 2, 0.95 * y / 2, 1.5 * z / 2
    gx, gy, gz = np.ogrid[:x, :y, :z]
    return ((gx - cx) / ax) ** 2 + ((gy - cy) / ay) ** 2 + ((gz - cz) / az) ** 2 <= 1.0


def grow_lesion(rng, allowed, target_volume, max_seeds=20):
    """Grow a 26-connected voxel set of exactly ``target_volume`` voxels inside ``allowed``.

    Starting from a random allowed voxel, repeatedly add a uniformly chosen
    frontier voxel.  A seed whose reachable region is too small is retried
    (up to ``max_seeds`` times) before giving up.

    Returns
    -------
    np.ndarray
        (target_volume, 3) voxel coordinates.
    """
    if target_volume < 1:
        raise ConfigError(f"target volume must be >= 1, got {target_volume}")
    allowed = np.asarray(allowed, dtype=bool)
    candidates = np.argwhere(allowed)
    if len(candidates) < target_volume:
        raise CapacityError(
            f"region has {len(candidates)} voxels, lesion needs {target_volume}"
        )
    sx, sy, sz = allowed.shape
    for _ in range(max_seeds):
        seed = tuple(candidates[rng.integers(len(candidates))])
        voxels = [seed]
        member = {seed}
        frontier = []
        in_frontier = set()

        def push_neighbours(v):
            for d in _NEIGHBOURS:
                n = (v[0] + d[0], v[1] + d[1], v[2] + d[2])
                if n in member or n in in_frontier:
                    continue
                if not (0 <= n[0] < sx and 0 <= n[1] < sy and 0 <= n[2] < sz) or not allowed[n]:
                    continue
                frontier.append(n)
                in_frontier.add(n)

        push_neighbours(seed)
        while len(voxels) < target_volume and frontier:
            k = int(rng.integers(len(frontier)))
            v = frontier[k]
            frontier[k] = frontier[-1]
            frontier.pop()
            in_frontier.discard(v)
            voxels.append(v)
            member.add(v)
            push_neighbours(v)
        if len(voxels) == target_volume:
            return np.array(voxels, dtype=np.int64)
    raise CapacityError(f"no connected region of {target_volume} voxels found")


def _lesion_plan(spec, rng):
    plan = []
    for cls, n, (lo, hi) in (
        ("large", spec.n_large, spec.large_range),
        ("medium", spec.n_medium, spec.medium_range),
        ("small", spec.n_small, spec.small_range),
    ):
        plan += [(cls, int(rng.integers(lo, hi + 1))) for _ in range(n)]
    return plan


def place_lesions(spec, brain, rng):
    """Lesion mask with every lesion inside the brain and >= 2 background voxels between lesions."""
    inner = ndimage.binary_erosion(brain, iterations=2)
    free = inner.copy()
    lesions = np.zeros(brain.shape, dtype=bool)
    block = np.ones((5, 5, 5), dtype=bool)
    for cls, volume in _lesion_plan(spec, rng):
        try:
            vox = grow_lesion(rng, free, volume)
        except CapacityError as exc:
            raise CapacityError(f"cannot place {cls} lesion of {volume} voxels: {exc}") from exc
        one = np.zeros(brain.shape, dtype=bool)
        one[tuple(vox.T)] = True
        lesions |= one
        free &= ~ndimage.binary_dilation(one, structure=block)
    return lesions


def generate_phantom(spec, subject_id="phantom", center="synthetic"):
    """Build a :class:`SubjectRecord` with FLAIR, T1 and exact ground truth."""
    rng = np.random.default_rng(spec.seed)
    brain = brain_ellipsoid(spec.dims)
    lesions = place_lesions(spec, brain, rng)
    base = spec.brain_intensity * brain
    flair = base + spec.flair_contrast * lesions
    t1 = base + spec.t1_contrast * lesions
    if spec.noise_sd > 0:
        flair = flair + rng.normal(0.0, spec.noise_sd, spec.dims)
        t1 = t1 + rng.normal(0.0, spec.noise_sd, spec.dims)
    return SubjectRecord(
        subject_id=subject_id,
        center=center,
        flair=Volume(flair.astype(np.float32), spec.spacing, "intensity"),
        t1=Volume(t1.astype(np.float32), spec.spacing, "intensity"),
        mask=Volume(lesions.astype(np.uint8), spec.spacing, "binary-mask"),
    )


def generate_cohort(spec, n_subjects, n_centers=3, seed=0):
    """``n_subjects`` phantoms assigned round-robin to ``n_centers`` centers."""
    records = []
    for i in range(n_subjects):
        sub_seed = int(np.random.default_rng([seed, i]).integers(2**63))
        s = PhantomSpec(**{**spec.__dict__, "seed": sub_seed})
        records.append(generate_phantom(s, f"sub-{i:03d}", f"center{i % n_centers}"))
    return records


def write_cohort(records, out_dir):
    """Write NIfTI volumes for each record; returns manifest entries."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for rec in records:
        paths = {}
        for key, vol in (("flair", rec.flair), ("t1", rec.t1), ("mask", rec.mask)):
            if vol is None:
                continue
            path = os.path.join(out_dir, f"{rec.subject_id}_{key}.nii")
            save_volume(vol, path)
            paths[key] = path
        entry = ManifestEntry(
            rec.subject_id, rec.center, paths["flair"], paths["t1"], paths.get("mask"), rec.normalized
        )
        entries.append(entry)
    return entries
