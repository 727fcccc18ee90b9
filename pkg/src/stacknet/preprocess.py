"""Volume containers and the slice preprocessing pipeline.

Volumes are indexed (X, Y, Z); axial slice ``z`` is ``data[:, :, z]`` and
becomes one (H=X, W=Y) network input after crop/pad.
"""

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DegenerateInputError, DimensionError

KINDS = ("intensity", "probability", "binary-mask")
DEFAULT_TARGET = (200, 200)


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    kind: str = "intensity"

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise DimensionError(f"volume data must be 3-D, got shape {self.data.shape}")
        if self.kind not in KINDS:
            raise ConfigError(f"unknown volume kind {self.kind!r}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3:
            raise ConfigError(f"spacing needs 3 entries, got {self.spacing}")

    @property
    def dims(self):
        return self.data.shape

    def validate(self):
        if not np.all(np.isfinite(self.data)):
            raise DegenerateInputError("volume contains non-finite values")
        if self.kind == "binary-mask" and not np.isin(self.data, (0, 1)).all():
            raise DegenerateInputError("binary mask has values outside {0, 1}")
        if self.kind == "probability" and (self.data.min() < 0 or self.data.max() > 1):
            raise DegenerateInputError("probability volume has values outside [0, 1]")
        return self


@dataclass
class SubjectRecord:
    subject_id: str
    center: str
    flair: Volume
    t1: Volume
    mask: Volume = None
    brain: Volume = None
    normalized: bool = False

    def __post_init__(self):
        dims = self.flair.dims
        for name in ("t1", "mask", "brain"):
            vol = getattr(self, name)
            if vol is not None and vol.dims != dims:
                raise DimensionError(
                    f"subject {self.subject_id}: {name} dims {vol.dims} != FLAIR dims {dims}"
                )

    @property
    def dims(self):
        return self.flair.dims

    def offsets(self, target=DEFAULT_TARGET):
        """Crop/pad bookkeeping used to map network slices back to this grid."""
        return slice_offsets(self.dims[:2], target)


# ---------------------------------------------------------------------------
# crop / pad


def slice_offsets(shape, target=DEFAULT_TARGET):
    """Per-axis source index of output row/column 0.

    Positive values mean a centred crop, negative values a zero pad; the
    odd leftover voxel goes to the high side in both cases.
    """
    offs = []
    for n, t in zip(shape, target):
        if n >= t:
            offs.append((n - t) // 2)
        else:
            offs.append(-((t - n) // 2))
    return tuple(offs)


def _overlap(n, t, off):
    # out[i] = src[i + off], valid where 0 <= i < t and 0 <= i + off < n
    lo = max(0, -off)
    hi = min(t, n - off)
    return lo, hi


def crop_or_pad_slice(plane, target=DEFAULT_TARGET):
    """Centre-crop or zero-pad a 2-D slice to ``target``; returns (slice, offsets)."""
    plane = np.asarray(plane)
    if plane.ndim != 2:
        raise DimensionError(f"expected a 2-D slice, got shape {plane.shape}")
    offs = slice_offsets(plane.shape, target)
    out = np.zeros(target, dtype=plane.dtype)
    (r0, r1), (c0, c1) = (_overlap(n, t, o) for n, t, o in zip(plane.shape, target, offs))
    out[r0:r1, c0:c1] = plane[r0 + offs[0] : r1 + offs[0], c0 + offs[1] : c1 + offs[1]]
    return out, offs


def restore_slice(plane, offsets, shape):
    """Inverse of :func:`crop_or_pad_slice`: map back to the original grid, zero elsewhere."""
    plane = np.asarray(plane)
    out = np.zeros(shape, dtype=plane.dtype)
    (r0, r1), (c0, c1) = (
        _overlap(n, t, o) for n, t, o in zip(shape, plane.shape, offsets)
    )
    out[r0 + offsets[0] : r1 + offsets[0], c0 + offsets[1] : c1 + offsets[1]] = plane[r0:r1, c0:c1]
    return out


# ---------------------------------------------------------------------------
# brain mask and normalization


def otsu_threshold(values, bins=256):
    """Otsu's threshold on a 1-D sample; returns the upper edge of the low class.

    Ties in between-class variance go to the lowest split.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = values.min(), values.max()
    if lo == hi:
        return lo
    hist, edges = np.histogram(values, bins=bins, range=(lo, hi))
    centers = (edges[:-1] + edges[1:]) / 2
    w0 = np.cumsum(hist)[:-1].astype(np.float64)
    w1 = values.size - w0
    s0 = np.cumsum(hist * centers)[:-1]
    total = (hist * centers).sum()
    valid = (w0 > 0) & (w1 > 0)
    between = np.zeros_like(w0)
    mu0 = np.divide(s0, w0, out=np.zeros_like(s0), where=valid)
    mu1 = np.divide(total - s0, w1, out=np.zeros_like(s0), where=valid)
    between[valid] = w0[valid] * w1[valid] * (mu0[valid] - mu1[valid]) ** 2
    k = int(np.argmax(between))
    return edges[k + 1]


def fill_holes_axial(mask):
    """Fill background regions not 4-connected to the border, slice by slice."""
    out = np.empty_like(mask, dtype=bool)
    cross = ndimage.generate_binary_structure(2, 1)
    for z in range(mask.shape[2]):
        out[:, :, z] = ndimage.binary_fill_holes(mask[:, :, z], structure=cross)
    return out


def brain_mask(flair, threshold=None):
    """Brain mask by global thresholding plus per-slice hole filling.

    ``threshold=None`` picks Otsu's threshold over the volume's voxels;
    voxels strictly above it are foreground.  A fixed ``threshold`` may be
    given instead.
    """
    data = np.asarray(flair.data, dtype=np.float64)
    if not np.any(data):
        raise DegenerateInputError("cannot build a brain mask from an all-zero volume")
    if threshold is None:
        if data.min() == data.max():
            fg = data != 0
        else:
            fg = data > otsu_threshold(data)
    else:
        fg = data > threshold
    fg = fill_holes_axial(fg)
    if not fg.any():
        raise DegenerateInputError("brain mask is empty")
    return Volume(fg.astype(np.uint8), flair.spacing, "binary-mask")


def gaussian_normalize(vol, mask):
    """Z-score ``vol`` with statistics taken inside ``mask``; zero outside."""
    if vol.dims != mask.dims:
        raise DimensionError(f"volume dims {vol.dims} != mask dims {mask.dims}")
    inside = np.asarray(mask.data) > 0
    if not inside.any():
        raise DegenerateInputError("normalization mask is empty")
    vals = np.asarray(vol.data, dtype=np.float64)[inside]
    mu = vals.mean()
    sd = vals.std()
    if not sd > 1e-8:
        raise DegenerateInputError(f"within-mask standard deviation {sd:g} is degenerate")
    out = np.zeros(vol.dims, dtype=np.float64)
    out[inside] = (vals - mu) / sd
    return Volume(out, vol.spacing, "intensity")


def prepare_subject(record, threshold=None):
    """Brain-mask the FLAIR and normalize both modalities within that mask."""
    if record.normalized:
        return record
    brain = brain_mask(record.flair, threshold)
    return replace(
        record,
        flair=gaussian_normalize(record.flair, brain),
        t1=gaussian_normalize(record.t1, brain),
        brain=brain,
        normalized=True,
    )


# ---------------------------------------------------------------------------
# slices <-> volumes


def _volume_to_slices(data, target):
    x, y, z = data.shape
    out = np.empty((z,) + tuple(target), dtype=data.dtype)
    for k in range(z):
        out[k], _ = crop_or_pad_slice(data[:, :, k], target)
    return out


def stack_modalities(record, target=DEFAULT_TARGET, dtype=np.float32):
    """Network batch (Z, 2, H, W): channel 0 FLAIR, channel 1 T1, one item per axial slice."""
    if record.flair.dims != record.t1.dims:
        raise DimensionError(
            f"FLAIR dims {record.flair.dims} != T1 dims {record.t1.dims}"
        )
    flair = _volume_to_slices(np.asarray(record.flair.data, dtype=dtype), target)
    t1 = _volume_to_slices(np.asarray(record.t1.data, dtype=dtype), target)
    return np.stack([flair, t1], axis=1)


def mask_slices(record, target=DEFAULT_TARGET, dtype=np.float32):
    """Ground-truth mask as (Z, 1, H, W)."""
    if record.mask is None:
        raise ConfigError(f"subject {record.subject_id} has no ground-truth mask")
    return _volume_to_slices(np.asarray(record.mask.data, dtype=dtype), target)[:, None]


def slices_to_volume(slices, dims, spacing=(1.0, 1.0, 1.0), kind="probability"):
    """Reassemble (Z, H, W) or (Z, 1, H, W) slices onto the original (X, Y, Z) grid."""
    slices = np.asarray(slices)
    if slices.ndim == 4:
        if slices.shape[1] != 1:
            raise DimensionError(f"expected one channel, got {slices.shape[1]}")
        slices = slices[:, 0]
    x, y, z = dims
    if slices.shape[0] != z:
        raise DimensionError(f"{slices.shape[0]} slices for a volume with Z={z}")
    offs = slice_offsets((x, y), slices.shape[1:])
    data = np.zeros((x, y, z), dtype=slices.dtype)
    for k in range(z):
        data[:, :, k] = restore_slice(slices[k], offs, (x, y))
    return Volume(data, spacing, kind)


# ---------------------------------------------------------------------------
# manifests


@dataclass
class ManifestEntry:
    subject_id: str
    center: str
    flair_path: str
    t1_path: str
    mask_path: str = None
    preprocessed: bool = False
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = {
            "subject_id": self.subject_id,
            "center": self.center,
            "flair_path": self.flair_path,
            "t1_path": self.t1_path,
        }
        if self.mask_path is not None:
            d["mask_path"] = self.mask_path
        if self.preprocessed:
            d["preprocessed"] = True
        d.update(self.extra)
        return d


def read_manifest(path):
    """Parse a subject manifest; relative paths resolve against the manifest's directory."""
    with open(path, encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, list):
        raise ConfigError(f"{path}: manifest must be a JSON array")
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    for i, item in enumerate(raw):
        try:
            known = dict(item)
            sid = str(known.pop("subject_id"))
            center = str(known.pop("center"))
            flair = known.pop("flair_path")
            t1 = known.pop("t1_path")
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: entry {i} is missing a required field ({exc})") from exc
        mask = known.pop("mask_path", None)
        pre = bool(known.pop("preprocessed", False))
        resolve = lambda p: p if p is None or os.path.isabs(p) else os.path.join(base, p)  # noqa: E731
        entries.append(
            ManifestEntry(sid, center, resolve(flair), resolve(t1), resolve(mask), pre, known)
        )
    ids = [e.subject_id for e in entries]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"{path}: duplicate subject ids")
    return entries


def write_manifest(entries, path):
    base = os.path.dirname(os.path.abspath(path))
    out = []
    for e in entries:
        d = e.to_dict()
        for key in ("flair_path", "t1_path", "mask_path"):
            if d.get(key) is not None:
                d[key] = os.path.relpath(os.path.abspath(d[key]), base)
        out.append(d)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(out, f, indent=2)
        f.write("\n")


def load_subject(entry):
    """Read the volumes named by a manifest entry."""
    from .volume_io import load_volume  # deferred: volume_io imports this module

    flair = load_volume(entry.flair_path, "intensity")
    t1 = load_volume(entry.t1_path, "intensity")
    mask = None
    if entry.mask_path is not None:
        mask = load_volume(entry.mask_path, "binary-mask")
        mask.data = (mask.data > 0).astype(np.uint8)
    return SubjectRecord(
        entry.subject_id, entry.center, flair, t1, mask, normalized=entry.preprocessed
    )


def subjects_by_center(entries):
    out = {}
    for e in entries:
        out.setdefault(e.center, []).append(e.subject_id)
    return out
