"""Per-model probability volumes, mean fusion and thresholding."""

from dataclasses import dataclass

import numpy as np

from . import model as sn
from .errors import ConfigError, DimensionError
from .preprocess import DEFAULT_TARGET, Volume, prepare_subject, slices_to_volume, stack_modalities

DEFAULT_THRESHOLD = 0.4


@dataclass
class EnsembleSpec:
    models: list
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        if len(self.models) < 1:
            raise ConfigError("an ensemble needs at least one model")
        if not 0 < self.threshold < 1:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")


def predict_volume(model, record, target=None, batch_size=16):
    """Slice-wise inference reassembled onto the subject's original grid.

    ``target`` defaults to the model's configured input size.  Voxels outside
    the cropped field of view get probability 0.
    """
    if model.config.in_channels != 2:
        raise ConfigError(
            f"model expects {model.config.in_channels} input channels; subjects provide 2"
        )
    if target is None:
        target = (model.config.height, model.config.width)
    record = prepare_subject(record)
    batch = stack_modalities(record, target, dtype=model.dtype)
    probs = np.empty((len(batch), 1) + tuple(target), dtype=model.dtype)
    for start in range(0, len(batch), batch_size):
        probs[start : start + batch_size] = sn.forward(
            model, batch[start : start + batch_size], cache=False
        )
    return slices_to_volume(probs, record.dims, record.flair.spacing, "probability")


def aggregate_probs(volumes):
    """Voxelwise arithmetic mean, summed in list order then divided by n."""
    if not volumes:
        raise ConfigError("cannot aggregate an empty list of volumes")
    dims = volumes[0].dims
    for v in volumes[1:]:
        if v.dims != dims:
            raise DimensionError(f"volume dims differ: {dims} vs {v.dims}")
    acc = np.array(volumes[0].data, dtype=np.float64)
    for v in volumes[1:]:
        acc += v.data
    return Volume(acc / len(volumes), volumes[0].spacing, "probability")


def binarize(prob, threshold=DEFAULT_THRESHOLD):
    """Voxel is foreground iff probability >= threshold."""
    return Volume((np.asarray(prob.data) >= threshold).astype(np.uint8), prob.spacing, "binary-mask")


def ensemble_predict(models, record, threshold=DEFAULT_THRESHOLD, target=None):
    """Run every model, fuse, threshold; returns (fused probability, binary mask)."""
    EnsembleSpec(list(models), threshold)
    probs = [predict_volume(m, record, target) for m in models]
    fused = aggregate_probs(probs)
    return fused, binarize(fused, threshold)
