"""Glue between manifests, training, inference and evaluation."""

import logging
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import metrics
from . import model as sn
from .aggregate import aggregate_probs, binarize, predict_volume
from .errors import ConfigError
from .preprocess import (
    load_subject,
    mask_slices,
    prepare_subject,
    stack_modalities,
    subjects_by_center,
)
from .training import split_folds, train
from .volume_io import load_volume

log = logging.getLogger(__name__)


def map_ordered(fn, items, threads=1):
    """``[fn(x) for x in items]``, optionally on a thread pool; order preserved."""
    items = list(items)
    if threads is None or threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def load_records(entries, threads=1):
    return map_ordered(lambda e: prepare_subject(load_subject(e)), entries, threads)


def build_dataset(records, target):
    """subject id -> (slices, masks) for every record carrying ground truth."""
    out = {}
    for rec in records:
        if rec.mask is None:
            continue
        out[rec.subject_id] = (stack_modalities(rec, target), mask_slices(rec, target))
    if not out:
        raise ConfigError("no subjects with ground-truth masks")
    return out


def select_fold(entries, fold=None, k=5, seed=0):
    """Split manifest entries into (train, test) entry lists.

    ``fold=None`` trains and tests on everything.
    """
    if fold is None:
        return list(entries), list(entries)
    folds = split_folds(subjects_by_center(entries), k=k, seed=seed)
    if not 0 <= fold < k:
        raise ConfigError(f"fold must be in [0, {k}), got {fold}")
    train_ids, test_ids = folds[fold]
    by_id = {e.subject_id: e for e in entries}
    return [by_id[i] for i in train_ids], [by_id[i] for i in test_ids]


def train_model(model_config, train_config, records):
    model = sn.build_stacknet(model_config)
    dataset = build_dataset(records, (model_config.height, model_config.width))
    model, history = train(model, dataset, train_config)
    return model, history


def predict_records(models, records, threshold=0.4, threads=1):
    """Per subject: (fused probability volume, binary mask)."""

    def one(rec):
        fused = aggregate_probs([predict_volume(m, rec) for m in models])
        return fused, binarize(fused, threshold)

    return map_ordered(one, records, threads)


def evaluate_pairs(records, masks, connectivity=26, f1_mode="paper-literal", threads=1):
    def one(pair):
        rec, pred = pair
        if rec.mask is None:
            raise ConfigError(f"subject {rec.subject_id} has no ground-truth mask")
        return metrics.evaluate(rec.mask, pred, connectivity, f1_mode)

    return map_ordered(one, zip(records, masks), threads)


def run_depth_sweep(entries, depths, model_config, train_config, fold=0, k=5,
                    threshold=0.4, threads=1):
    """Train one model per stack depth on the same split and evaluate on its test subjects.

    Returns a report whose ``rows`` map each depth (as a string key) to its
    layer count and the test-set means of Dice, lesion recall and lesion F1.
    """
    if not depths:
        raise ConfigError("depth sweep needs at least one depth")
    if len(set(depths)) != len(depths):
        raise ConfigError(f"duplicate depths in {list(depths)}")
    train_entries, test_entries = select_fold(entries, fold, k, train_config.seed)
    train_records = load_records(train_entries, threads)
    test_records = load_records(test_entries, threads)
    rows = {}
    for depth in depths:
        cfg = sn.StackNetConfig(**{**model_config.to_dict(), "stack_depth": int(depth)})
        model, history = train_model(cfg, train_config, train_records)
        n_layers = sn.layer_count(model)
        log.info("depth %d: %d layers", depth, n_layers)
        preds = predict_records([model], test_records, threshold, threads)
        reports = evaluate_pairs(test_records, [m for _, m in preds], threads=threads)
        summary = metrics.mean_report(reports)
        rows[str(depth)] = {
            "depth": int(depth),
            "layer_count": n_layers,
            "dice": summary["dice"],
            "lesion_recall": summary["lesion_recall"],
            "lesion_f1": summary["lesion_f1"],
            "final_train_loss": history.epochs[-1][1] if history.epochs else None,
        }
    return {
        "fold": fold,
        "k": k,
        "test_subjects": [r.subject_id for r in test_records],
        "rows": rows,
    }


def prediction_paths(out_dir, subject_id):
    return (
        os.path.join(out_dir, f"{subject_id}_prob.nii"),
        os.path.join(out_dir, f"{subject_id}_mask.nii"),
    )


def binary_from_files(out_dir, subject_id, threshold=0.4):
    """Load a subject's predicted mask, falling back to thresholding its probability map."""
    prob_path, mask_path = prediction_paths(out_dir, subject_id)
    if os.path.exists(mask_path):
        vol = load_volume(mask_path, "binary-mask")
        vol.data = (vol.data > 0).astype(np.uint8)
        return vol
    if os.path.exists(prob_path):
        return binarize(load_volume(prob_path, "probability"), threshold)
    raise FileNotFoundError(f"no prediction for subject {subject_id} in {out_dir}")
