"""Command-line entry point: ``stacknet <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""

import argparse
import json
import logging
import os
import sys

from . import metrics
from . import model as sn
from . import pipeline
from .errors import (
    CapacityError,
    ConfigError,
    DegenerateInputError,
    DimensionError,
    ParseError,
    UndefinedMetricError,
)
from .preprocess import ManifestEntry, read_manifest, write_manifest
from .synth import PhantomSpec, generate_cohort, write_cohort
from .training import TrainConfig
from .volume_io import save_volume, write_metrics_json

EXIT_CONFIG = 2
EXIT_DATA = 3

log = logging.getLogger("stacknet")


def _load_json(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return data


def _dump_json(obj, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2)
        f.write("\n")


def _overrides(args, mapping):
    return {key: getattr(args, attr) for attr, key in mapping.items() if getattr(args, attr, None) is not None}


def _model_config(args):
    d = _load_json(getattr(args, "model_config", None))
    d.update(
        _overrides(
            args,
            {"kernel": "kernel_r", "depth": "stack_depth", "model_seed": "seed"},
        )
    )
    if getattr(args, "widths", None):
        d["channel_widths"] = tuple(args.widths)
    if getattr(args, "size", None):
        d["height"], d["width"] = args.size
    try:
        return sn.StackNetConfig(**d)
    except TypeError as exc:
        raise ConfigError(f"bad model config: {exc}") from exc


def _train_config(args):
    d = _load_json(getattr(args, "config", None))
    d.update(
        _overrides(
            args,
            {"epochs": "epochs", "batch_size": "batch_size", "lr": "learning_rate", "seed": "seed"},
        )
    )
    if getattr(args, "no_augment", False):
        d["augment"] = False
    return TrainConfig.from_dict(d)


def _entries(args):
    entries = read_manifest(args.manifest)
    if getattr(args, "subjects", None):
        wanted = set(args.subjects)
        entries = [e for e in entries if e.subject_id in wanted]
    fold = getattr(args, "fold", None)
    if fold is not None:
        train_e, test_e = pipeline.select_fold(entries, fold, args.k, args.split_seed)
        entries = train_e if getattr(args, "split_side", "test") == "train" else test_e
    if not entries:
        raise ConfigError("no subjects selected")
    return entries


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    d = _load_json(args.config)
    d.update(
        _overrides(
            args,
            {"n_small": "n_small", "n_medium": "n_medium", "n_large": "n_large", "noise_sd": "noise_sd"},
        )
    )
    if args.dims:
        d["dims"] = tuple(args.dims)
    for key in ("dims", "small_range", "medium_range", "large_range", "spacing"):
        if key in d:
            d[key] = tuple(d[key])
    try:
        spec = PhantomSpec(**d)
    except TypeError as exc:
        raise ConfigError(f"bad phantom config: {exc}") from exc
    records = generate_cohort(spec, args.n_subjects, args.centers, args.seed)
    entries = write_cohort(records, args.out)
    manifest = os.path.join(args.out, "manifest.json")
    write_manifest(entries, manifest)
    print(manifest)


def cmd_preprocess(args):
    entries = _entries(args)
    records = pipeline.load_records(entries, args.threads)
    os.makedirs(args.out, exist_ok=True)
    out_entries = []
    for rec in records:
        paths = {}
        for key, vol in (("flair", rec.flair), ("t1", rec.t1), ("brain", rec.brain), ("mask", rec.mask)):
            if vol is None:
                continue
            paths[key] = os.path.join(args.out, f"{rec.subject_id}_{key}.nii")
            save_volume(vol, paths[key])
        entry = ManifestEntry(
            rec.subject_id, rec.center, paths["flair"], paths["t1"], paths.get("mask"),
            preprocessed=True, extra={"brain_path": os.path.basename(paths["brain"])},
        )
        out_entries.append(entry)
    write_manifest(out_entries, os.path.join(args.out, "manifest.json"))


def cmd_train(args):
    model_cfg = _model_config(args)
    train_cfg = _train_config(args)
    args.split_side = "train"
    entries = _entries(args)
    records = pipeline.load_records(entries, args.threads)
    model, history = pipeline.train_model(model_cfg, train_cfg, records)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    sn.write_checkpoint(model, args.out)
    if args.history:
        with open(args.history, "w", encoding="utf-8") as f:
            f.write(history.to_jsonl())
    log.info("wrote %s (%d layers)", args.out, sn.layer_count(model))


def _predict(args, checkpoints):
    models = [sn.read_checkpoint(p) for p in checkpoints]
    args.split_side = "test"
    records = pipeline.load_records(_entries(args), args.threads)
    results = pipeline.predict_records(models, records, args.threshold, args.threads)
    os.makedirs(args.out, exist_ok=True)
    for rec, (prob, mask) in zip(records, results):
        prob_path, mask_path = pipeline.prediction_paths(args.out, rec.subject_id)
        save_volume(prob, prob_path, "float32")
        save_volume(mask, mask_path, "uint8")


def cmd_predict(args):
    _predict(args, [args.model])


def cmd_ensemble(args):
    _predict(args, args.models)


def cmd_evaluate(args):
    args.split_side = "test"
    entries = _entries(args)
    records = pipeline.load_records(entries, args.threads)
    preds = [pipeline.binary_from_files(args.pred_dir, r.subject_id, args.threshold) for r in records]
    reports = pipeline.evaluate_pairs(records, preds, args.connectivity, args.f1_mode, args.threads)
    os.makedirs(args.out, exist_ok=True)
    for rec, rep in zip(records, reports):
        write_metrics_json(rep, os.path.join(args.out, f"{rec.subject_id}_metrics.json"))
    summary = metrics.mean_report(reports)
    summary["subjects"] = [r.subject_id for r in records]
    _dump_json(summary, os.path.join(args.out, "summary.json"))


def cmd_depth_sweep(args):
    entries = read_manifest(args.manifest)
    report = pipeline.run_depth_sweep(
        entries,
        args.depths,
        _model_config(args),
        _train_config(args),
        fold=args.fold,
        k=args.k,
        threshold=args.threshold,
        threads=args.threads,
    )
    _dump_json(report, args.out)


def _read_values(path, key):
    """Per-subject values from a JSON array/object file or a directory of metrics reports."""
    if os.path.isdir(path):
        out = {}
        for name in sorted(os.listdir(path)):
            if name.endswith("_metrics.json"):
                with open(os.path.join(path, name), encoding="utf-8") as f:
                    out[name[: -len("_metrics.json")]] = json.load(f)[key]
        return out
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    if isinstance(data, list):
        return {str(i): v for i, v in enumerate(data)}
    if isinstance(data, dict):
        return {k: (v[key] if isinstance(v, dict) else v) for k, v in data.items()}
    raise ConfigError(f"{path}: expected a JSON array or object")


def cmd_ztest(args):
    a = _read_values(args.a, args.key)
    b = _read_values(args.b, args.key)
    if set(a) != set(b):
        raise ConfigError("the two samples do not cover the same subjects")
    keys = sorted(a)
    z, p = metrics.paired_z_test([a[k] for k in keys], [b[k] for k in keys])
    result = {"n": len(keys), "key": args.key, "z": z, "p_two_sided": p}
    if args.out:
        _dump_json(result, args.out)
    print(json.dumps(result))


# ---------------------------------------------------------------------------
# parser


def _add_model_args(p):
    p.add_argument("--model-config", help="JSON file with StackNetConfig fields")
    p.add_argument("--kernel", type=int, help="stack kernel size r")
    p.add_argument("--depth", type=int, help="stack depth L")
    p.add_argument("--widths", type=int, nargs=4, metavar="C", help="channel widths c1..c4")
    p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"), help="network input size")
    p.add_argument("--model-seed", type=int, help="weight initialisation seed")


def _add_train_args(p):
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-augment", action="store_true")


def _add_selection_args(p):
    p.add_argument("--manifest", required=True)
    p.add_argument("--subjects", nargs="+", help="restrict to these subject ids")
    p.add_argument("--fold", type=int, help="use one fold of a subject-wise k-fold split")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--split-seed", type=int, default=0)


def build_parser():
    parser = argparse.ArgumentParser(prog="stacknet", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=1, help="max worker threads")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a phantom cohort and manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--n-subjects", type=int, default=12)
    p.add_argument("--centers", type=int, default=3)
    p.add_argument("--dims", type=int, nargs=3, metavar=("X", "Y", "Z"))
    p.add_argument("--n-small", type=int)
    p.add_argument("--n-medium", type=int)
    p.add_argument("--n-large", type=int)
    p.add_argument("--noise-sd", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON file with PhantomSpec fields")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="brain-mask and normalize a cohort")
    _add_selection_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train one Stack-Net")
    _add_selection_args(p)
    _add_model_args(p)
    _add_train_args(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--history", help="write per-epoch JSON lines here")
    p.set_defaults(func=cmd_train)

    for name, helptext in (("predict", "probability maps from one model"),
                           ("ensemble", "fused probability maps from several models")):
        p = sub.add_parser(name, help=helptext)
        _add_selection_args(p)
        if name == "predict":
            p.add_argument("--model", required=True)
            p.set_defaults(func=cmd_predict)
        else:
            p.add_argument("--models", required=True, nargs="+")
            p.set_defaults(func=cmd_ensemble)
        p.add_argument("--threshold", type=float, default=0.4)
        p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="per-subject metrics and summary")
    _add_selection_args(p)
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--threshold", type=float, default=0.4)
    p.add_argument("--connectivity", type=int, choices=(6, 18, 26), default=26)
    p.add_argument("--f1-mode", choices=("paper-literal", "harmonic"), default="paper-literal")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("depth-sweep", help="train and evaluate one model per stack depth")
    p.add_argument("--manifest", required=True)
    p.add_argument("--depths", type=int, nargs="+", default=[1, 2, 3, 4, 5, 6])
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--threshold", type=float, default=0.4)
    _add_model_args(p)
    _add_train_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_depth_sweep)

    p = sub.add_parser("ztest", help="paired Z-test between two per-subject samples")
    p.add_argument("--a", required=True, help="JSON values or metrics directory")
    p.add_argument("--b", required=True)
    p.add_argument("--key", default="lesion_recall")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ztest)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, DimensionError, DegenerateInputError, UndefinedMetricError,
            CapacityError, OSError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
