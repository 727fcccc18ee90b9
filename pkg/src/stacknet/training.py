"""Loss, optimizer, augmentation, subject-wise folds and the epoch loop."""

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy import ndimage

from . import model as sn
from .errors import ConfigError, DimensionError

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 30
    learning_rate: float = 0.0002
    rotation_deg: float = 15.0
    shear: float = 0.1
    zoom: float = 0.1
    augment: bool = True
    smooth: float = 1.0
    squared_denominator: bool = True
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.smooth < 0:
            raise ConfigError(f"smooth must be >= 0, got {self.smooth}")
        if self.rotation_deg < 0 or self.shear < 0 or not 0 <= self.zoom < 1:
            raise ConfigError("augmentation ranges must be non-negative (zoom < 1)")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# loss


def soft_dice_loss(pred, target, smooth=1.0, squared=True):
    """Soft Dice loss over the whole batch.

    ``loss = 1 - (2 sum(p g) + s) / (sum(p^2) + sum(g^2) + s)``, or with plain
    sums in the denominator when ``squared`` is False.

    Returns
    -------
    loss : float
    grad : np.ndarray
        d(loss)/d(pred), same shape and dtype as ``pred``.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise DimensionError(f"pred shape {pred.shape} != target shape {target.shape}")
    p = pred.astype(np.float64, copy=False)
    g = target.astype(np.float64, copy=False)
    inter = float(np.sum(p * g))
    if squared:
        denom = float(np.sum(p * p) + np.sum(g * g)) + smooth
    else:
        denom = float(np.sum(p) + np.sum(g)) + smooth
    if denom == 0:
        # s = 0 and both empty: perfect agreement
        return 0.0, np.zeros_like(pred)
    num = 2.0 * inter + smooth
    loss = 1.0 - num / denom
    d_denom = 2.0 * p if squared else np.ones_like(p)
    grad = -(2.0 * g * denom - num * d_denom) / (denom * denom)
    return loss, grad.astype(pred.dtype if np.issubdtype(pred.dtype, np.floating) else np.float64)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params):
        return cls(
            m=[np.zeros_like(p.value) for p in params],
            v=[np.zeros_like(p.value) for p in params],
        )


def adam_step(params, state, lr):
    """Bias-corrected Adam update in place, using each ``Parameter.grad``."""
    if len(params) != len(state.m):
        raise DimensionError("parameter list does not match optimizer state")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, m, v in zip(params, state.m, state.v):
        if m.shape != p.value.shape:
            raise DimensionError(f"moment shape {m.shape} != parameter {p.value.shape}")
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        p.value -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.value.dtype)
    return params, state


# ---------------------------------------------------------------------------
# augmentation


def affine_matrix(rotation_deg, shear, zoom):
    """Forward 2x2 matrix in (row, col) coordinates: rotation @ shear @ zoom."""
    th = math.radians(rotation_deg)
    c, s = math.cos(th), math.sin(th)
    rot = np.array([[c, -s], [s, c]])
    sh = np.array([[1.0, shear], [0.0, 1.0]])
    return rot @ sh @ (zoom * np.eye(2))


def apply_affine(plane, matrix, order):
    """Resample a 2-D plane under ``matrix`` about the plane centre; zero fill."""
    plane = np.asarray(plane)
    h, w = plane.shape
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    inv = np.linalg.inv(matrix)
    # output coord o maps to input coord inv @ (o - centre) + centre
    offset = centre - inv @ centre
    if np.array_equal(inv, np.eye(2)):
        return plane.copy()
    if order == 0:
        rows, cols = np.indices((h, w), dtype=np.float64)
        src_r = inv[0, 0] * rows + inv[0, 1] * cols + offset[0]
        src_c = inv[1, 0] * rows + inv[1, 1] * cols + offset[1]
        ri = np.floor(src_r + 0.5).astype(np.int64)
        ci = np.floor(src_c + 0.5).astype(np.int64)
        ok = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
        out = np.zeros_like(plane)
        out[ok] = plane[ri[ok], ci[ok]]
        return out
    return ndimage.affine_transform(
        plane, inv, offset=offset, order=order, mode="constant", cval=0.0
    ).astype(plane.dtype, copy=False)


def draw_affine(rng, config):
    rot = rng.uniform(-config.rotation_deg, config.rotation_deg)
    shear = rng.uniform(-config.shear, config.shear)
    zoom = rng.uniform(1.0 - config.zoom, 1.0 + config.zoom)
    return rot, shear, zoom


def augment_sample(image, mask, rng, config=None, params=None):
    """Apply one random affine identically to image channels (bilinear) and mask (nearest).

    ``image`` is (C, H, W), ``mask`` is (H, W) or (1, H, W).  ``params`` may
    force ``(rotation_deg, shear, zoom)`` instead of drawing from ``rng``.
    """
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.shape[-2:] != mask.shape[-2:]:
        raise DimensionError(f"image {image.shape} and mask {mask.shape} differ spatially")
    if params is None:
        params = draw_affine(rng, config or TrainConfig())
    mat = affine_matrix(*params)
    img_out = np.stack([apply_affine(ch, mat, order=1) for ch in image.reshape(-1, *image.shape[-2:])])
    msk_out = apply_affine(mask.reshape(mask.shape[-2:]), mat, order=0)
    return img_out.reshape(image.shape), msk_out.reshape(mask.shape)


# ---------------------------------------------------------------------------
# folds


def split_folds(subjects_by_center, k=5, seed=0):
    """Subject-wise k-fold split, stratified by acquisition center.

    Parameters
    ----------
    subjects_by_center : dict
        center id -> list of subject ids.

    Returns
    -------
    list of (train_ids, test_ids)
    """
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    chunks = {}
    for i, center in enumerate(sorted(subjects_by_center)):
        ids = list(subjects_by_center[center])
        if len(set(ids)) != len(ids):
            raise ConfigError(f"center {center!r} lists duplicate subject ids")
        if len(ids) % k:
            raise ConfigError(
                f"center {center!r} has {len(ids)} subjects, not divisible by k={k}"
            )
        order = np.random.default_rng([seed, i]).permutation(len(ids))
        per = len(ids) // k
        chunks[center] = [[ids[j] for j in order[f * per : (f + 1) * per]] for f in range(k)]
    folds = []
    for f in range(k):
        test, train = [], []
        for center in sorted(chunks):
            for g, chunk in enumerate(chunks[center]):
                (test if g == f else train).extend(chunk)
        folds.append((train, test))
    return folds


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)

    def to_jsonl(self):
        return "".join(
            json.dumps({"epoch": e, "mean_loss": l}) + "\n" for e, l in self.epochs
        )


def _gather(dataset, subject_ids=None):
    ids = sorted(dataset) if subject_ids is None else list(subject_ids)
    images, masks = [], []
    for sid in ids:
        img, msk = dataset[sid]
        img, msk = np.asarray(img), np.asarray(msk)
        if msk.ndim == 3:
            msk = msk[:, None]
        if img.shape[0] != msk.shape[0] or img.shape[2:] != msk.shape[2:]:
            raise DimensionError(f"subject {sid}: slices {img.shape} vs masks {msk.shape}")
        images.append(img)
        masks.append(msk)
    if not images or sum(len(i) for i in images) == 0:
        raise ConfigError("training dataset is empty")
    return np.concatenate(images), np.concatenate(masks)


def train_step(model, images, masks, state, config):
    """One forward / loss / backward / Adam update on a prepared batch."""
    model.zero_grad()
    pred = sn.forward(model, images)
    loss, grad = soft_dice_loss(pred, masks, config.smooth, config.squared_denominator)
    sn.backward(model, grad)
    adam_step(model.parameters(), state, config.learning_rate)
    return loss


def train(model, dataset, config, subject_ids=None, state=None, callback=None):
    """Train ``model`` in place.

    Parameters
    ----------
    dataset : dict
        subject id -> (slices (Z, C, H, W), masks (Z, 1, H, W)).
    subject_ids : list, optional
        Restrict training to these subjects (e.g. one fold's train split).

    Returns
    -------
    model, TrainHistory
    """
    config.validate()
    images, masks = _gather(dataset, subject_ids)
    images = images.astype(model.dtype, copy=False)
    masks = masks.astype(model.dtype, copy=False)
    state = state or AdamState.for_params(model.parameters())
    history = TrainHistory()
    n = len(images)
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            bx = np.empty((len(idx),) + images.shape[1:], dtype=model.dtype)
            by = np.empty((len(idx),) + masks.shape[1:], dtype=model.dtype)
            for j, i in enumerate(idx):
                if config.augment:
                    rng = np.random.default_rng([config.seed, epoch, int(i)])
                    bx[j], by[j] = augment_sample(images[i], masks[i], rng, config)
                else:
                    bx[j], by[j] = images[i], masks[i]
            loss = train_step(model, bx, by, state, config)
            losses.append(loss)
            history.step_losses.append(loss)
        mean_loss = float(np.mean(losses))
        history.epochs.append((epoch, mean_loss))
        log.info("epoch %d mean loss %.6f", epoch, mean_loss)
        if callback is not None:
            callback(epoch, mean_loss)
    return model, history
