"""Voxel- and lesion-level evaluation, size binning and the paired Z-test."""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DegenerateInputError, DimensionError, UndefinedMetricError

SMALL_MAX = 10  # small: volume < 10
LARGE_MIN = 20  # large: volume > 20; 10..20 inclusive is medium


def _as_mask(m):
    data = m.data if hasattr(m, "data") else m
    return np.asarray(data) > 0


def dice_score(g, p):
    """2|G & P| / (|G| + |P|); two empty masks score 1."""
    g, p = _as_mask(g), _as_mask(p)
    if g.shape != p.shape:
        raise DimensionError(f"mask shapes differ: {g.shape} vs {p.shape}")
    denom = int(g.sum()) + int(p.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(g, p).sum()) / denom


@dataclass
class LesionComponents:
    labels: np.ndarray
    count: int
    sizes: np.ndarray
    connectivity: int = 26

    def overlapping(self, mask):
        """Boolean array: which components share at least one voxel with ``mask``."""
        hit = np.zeros(self.count + 1, dtype=bool)
        hit[np.unique(self.labels[_as_mask(mask)])] = True
        return hit[1:]


_RANK = {6: 1, 18: 2, 26: 3}


def label_components_3d(mask, connectivity=26):
    """Label 3-D connected components.

    Labels run 1..count in order of first appearance in a C-order raster
    scan of the (X, Y, Z) array.
    """
    if connectivity not in _RANK:
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    m = _as_mask(mask)
    if m.ndim != 3:
        raise DimensionError(f"mask must be 3-D, got shape {m.shape}")
    structure = ndimage.generate_binary_structure(3, _RANK[connectivity])
    labels, count = ndimage.label(m, structure=structure)
    if count:
        # enforce raster first-visit order independent of the labeller's internals
        flat = labels.ravel()
        fg = np.flatnonzero(flat)
        _, first = np.unique(flat[fg], return_index=True)
        order = np.argsort(first)
        remap = np.zeros(count + 1, dtype=labels.dtype)
        remap[order + 1] = np.arange(1, count + 1, dtype=labels.dtype)
        labels = remap[labels]
    sizes = np.bincount(labels.ravel(), minlength=count + 1)[1:]
    return LesionComponents(labels, int(count), sizes, connectivity)


def detection_counts(g_comps, p_comps):
    """(N_G, N_P, N_F): GT lesions, detected GT lesions, predicted lesions with no GT overlap."""
    if g_comps.labels.shape != p_comps.labels.shape:
        raise DimensionError("component label volumes differ in shape")
    n_p = int(g_comps.overlapping(p_comps.labels).sum())
    n_f = int(p_comps.count - p_comps.overlapping(g_comps.labels).sum())
    return g_comps.count, n_p, n_f


def lesion_recall(g_comps, p_comps):
    n_g, n_p, _ = detection_counts(g_comps, p_comps)
    if n_g == 0:
        raise UndefinedMetricError("lesion recall is undefined without ground-truth lesions")
    return n_p / n_g


def lesion_f1(g_comps, p_comps, mode="paper-literal"):
    """Lesion-level F1.

    ``"paper-literal"`` returns N_P / (N_P + N_F).  ``"harmonic"`` returns
    the harmonic mean of lesion precision (predicted components touching
    GT over all predicted components) and lesion recall.
    """
    n_g, n_p, n_f = detection_counts(g_comps, p_comps)
    if mode == "paper-literal":
        if p_comps.count == 0:
            raise UndefinedMetricError("lesion F1 is undefined for an empty prediction")
        return n_p / (n_p + n_f)
    if mode == "harmonic":
        if n_g == 0:
            raise UndefinedMetricError("lesion recall is undefined without ground-truth lesions")
        rec = n_p / n_g
        prec = 0.0 if p_comps.count == 0 else (p_comps.count - n_f) / p_comps.count
        return 0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec)
    raise ValueError(f"unknown F1 mode {mode!r}")


def size_class(volume):
    if volume < SMALL_MAX:
        return "small"
    if volume > LARGE_MIN:
        return "large"
    return "medium"


def size_histogram(comps, select=None):
    """Count components per size class; ``select`` optionally masks components."""
    sizes = comps.sizes if select is None else comps.sizes[np.asarray(select, dtype=bool)]
    hist = {"small": 0, "medium": 0, "large": 0}
    for v in sizes:
        hist[size_class(int(v))] += 1
    return hist


@dataclass
class MetricsReport:
    dice: float
    lesion_recall: float
    lesion_f1: float
    n_g: int
    n_p: int
    n_f: int
    sizes: dict = field(default_factory=dict)
    detected_sizes: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "dice": float(self.dice),
            "lesion_recall": float(self.lesion_recall),
            "lesion_f1": float(self.lesion_f1),
            "n_g": int(self.n_g),
            "n_p": int(self.n_p),
            "n_f": int(self.n_f),
            "sizes": {k: int(self.sizes[k]) for k in ("small", "medium", "large")},
            "detected_sizes": {
                k: int(self.detected_sizes[k]) for k in ("small", "medium", "large")
            },
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def evaluate(g, p, connectivity=26, f1_mode="paper-literal"):
    """Full report for one (ground truth, prediction) pair.

    An empty prediction gets lesion F1 = 0 in the report (the standalone
    :func:`lesion_f1` raises instead).
    """
    g_comps = label_components_3d(g, connectivity)
    p_comps = label_components_3d(p, connectivity)
    n_g, n_p, n_f = detection_counts(g_comps, p_comps)
    recall = lesion_recall(g_comps, p_comps)
    f1 = lesion_f1(g_comps, p_comps, f1_mode) if p_comps.count else 0.0
    detected = g_comps.overlapping(p_comps.labels)
    return MetricsReport(
        dice=dice_score(g, p),
        lesion_recall=recall,
        lesion_f1=f1,
        n_g=n_g,
        n_p=n_p,
        n_f=n_f,
        sizes=size_histogram(g_comps),
        detected_sizes=size_histogram(g_comps, detected),
    )


def mean_report(reports):
    """Average rates over subjects; counts and histograms are summed."""
    if not reports:
        raise UndefinedMetricError("no reports to average")
    n = len(reports)
    keys = ("small", "medium", "large")
    return {
        "n_subjects": n,
        "dice": math.fsum(r.dice for r in reports) / n,
        "lesion_recall": math.fsum(r.lesion_recall for r in reports) / n,
        "lesion_f1": math.fsum(r.lesion_f1 for r in reports) / n,
        "n_g": sum(r.n_g for r in reports),
        "n_p": sum(r.n_p for r in reports),
        "n_f": sum(r.n_f for r in reports),
        "sizes": {k: sum(r.sizes[k] for r in reports) for k in keys},
        "detected_sizes": {k: sum(r.detected_sizes[k] for r in reports) for k in keys},
    }


def normal_cdf(x):
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def paired_z_test(a, b):
    """Paired Z-test on per-subject values.

    Returns
    -------
    z : float
        mean(d) / (sd(d) / sqrt(n)) with d = a - b and sample sd.
    p : float
        Two-sided p-value 2 (1 - Phi(|z|)).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"paired samples must be equal-length 1-D, got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise DegenerateInputError("paired Z-test needs at least two pairs")
    d = a - b
    if np.all(d == d[0]):
        raise DegenerateInputError("differences have zero variance")
    sd = float(np.std(d, ddof=1))
    z = float(np.mean(d)) / (sd / math.sqrt(n))
    # erfc keeps precision in the tail where 1 - Phi(|z|) would cancel
    p = math.erfc(abs(z) / math.sqrt(2.0))
    return z, p
