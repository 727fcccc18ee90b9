"""Stack-Net: convolutional-stack encoder-decoders and multi-scale aggregation
for white-matter lesion segmentation, with the lesion-level evaluation suite."""

from .aggregate import EnsembleSpec, aggregate_probs, binarize, predict_volume
from .errors import (
    CapacityError,
    ConfigError,
    DegenerateInputError,
    DimensionError,
    ParseError,
    StateError,
    UndefinedMetricError,
)
from .metrics import (
    LesionComponents,
    MetricsReport,
    dice_score,
    label_components_3d,
    lesion_f1,
    lesion_recall,
    paired_z_test,
    size_histogram,
)
from .model import StackNet, StackNetConfig, backward, build_stacknet, forward, layer_count
from .preprocess import SubjectRecord, Volume
from .training import TrainConfig, soft_dice_loss, split_folds, train

__version__ = "0.1.0"
