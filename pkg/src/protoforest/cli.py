"""Command-line pipeline: train, distances, select, evaluate, sweep, explain.

Every stage reads the previous stage's files from ``--out DIR`` and records
what it did in ``DIR/manifest.json``. Exit codes: 0 ok, 2 usage, 3 data,
4 incompatible or corrupt artifact.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
import warnings
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .data import ingest_csv
from .errors import ArtifactError, DataError, ParameterError, ProtoForestError
from .evaluation import (
    DEFAULT_FEATURE_GRID,
    SWEEP_COLUMNS,
    evaluate,
    load_split,
    save_split,
    stratified_split,
    sweep,
)
from .forest import load_model, resolve_features_per_split, save_model, train_forest
from .proximity import ProvenanceWarning, build_distance_matrix, distances_to, export_csv, load_matrix, save_matrix
from .selection import ALGORITHMS, load_prototypes, save_prototypes, select

log = logging.getLogger("protoforest")

MODEL_FILE = "model.json"
SPLIT_FILE = "split.json"
MATRIX_FILE = "distances.pfdm"
PROTO_FILE = "prototypes.json"
METRICS_FILE = "metrics.json"
METRICS_CSV = "metrics.csv"
MANIFEST_FILE = "manifest.json"

# built-in defaults, applied after config file and flags
DEFAULTS = {
    "seed": 0,
    "trees": 1000,
    "features": "sqrt",
    "jobs": 1,
    "on": "test",
    "m": 3,
    "features_grid": ",".join(str(v) for v in DEFAULT_FEATURE_GRID),
    "algorithms": "sm-a,sm-wa,a-pete",
    "k_max": 20,
    "alphas": "0.05",
}


class UsageError(ParameterError):
    pass


def _atomic_json(path: str, obj) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _manifest_path(out: str) -> str:
    return os.path.join(out, MANIFEST_FILE)


def read_manifest(out: str) -> dict:
    path = _manifest_path(out)
    if not os.path.exists(path):
        return {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"corrupt manifest {path}: {exc}", reason="corrupt") from exc


def update_manifest(out: str, stage: str, record: dict, **top) -> None:
    manifest = read_manifest(out)
    manifest.update(top)
    manifest["versions"] = {
        "protoforest": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    manifest.setdefault("stages", {})[stage] = dict(
        record, completed_at=datetime.now(timezone.utc).isoformat(timespec="seconds")
    )
    _atomic_json(_manifest_path(out), manifest)


def _resolve(args, name, manifest=None):
    """Flag value, else config-file value, else manifest value, else built-in default."""
    value = getattr(args, name, None)
    if value is None:
        value = args.config_values.get(name)
    if value is None and manifest is not None:
        value = manifest.get(name)
    if value is None:
        value = DEFAULTS.get(name)
    return value


def _dataset(args, manifest):
    path = _resolve(args, "data", manifest)
    label = _resolve(args, "label", manifest)
    if not path or not label:
        raise UsageError("--data and --label are required (or a manifest from a previous train run)")
    return ingest_csv(path, label), path, label


def _require(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise ArtifactError(f"missing {what}: {path} (run the earlier pipeline stage first)", reason="missing")
    return path


def _load_pipeline(args):
    out = args.out
    manifest = read_manifest(out)
    data, _, _ = _dataset(args, manifest)
    model = load_model(_require(os.path.join(out, MODEL_FILE), "model"))
    split = load_split(_require(os.path.join(out, SPLIT_FILE), "split"))
    try:
        split.check_partition(data.n)
    except DataError as exc:
        raise ArtifactError(f"split file does not match the dataset: {exc}", reason="split") from exc
    if model.n_features != data.p:
        raise ArtifactError(f"model expects {model.n_features} features, dataset has {data.p}",
                            reason="dimension")
    train = data.take(split.train)
    return manifest, data, model, split, train, model.leaf_matrix(train.features)


def _matrix_for(args, model, leaves):
    """Distance matrix for the training leaves, cached by model digest."""
    digest = model.digest()
    cache_dir = os.path.join(args.out, "cache")
    cached = os.path.join(cache_dir, f"{digest}.pfdm")
    if not getattr(args, "no_cache", False) and os.path.exists(cached):
        return _load_checked(cached, leaves.digest()), digest, True
    dm = build_distance_matrix(leaves)
    os.makedirs(cache_dir, exist_ok=True)
    save_matrix(dm, cached)
    return dm, digest, False


def _load_checked(path, expected):
    with warnings.catch_warnings():
        warnings.simplefilter("error", ProvenanceWarning)
        try:
            return load_matrix(path, expected_source=expected)
        except ProvenanceWarning as exc:
            raise ArtifactError(f"incompatible distance matrix: {exc}", reason="source-hash") from exc


def cmd_train(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    data, path, label = _dataset(args, None)
    seed = int(_resolve(args, "seed"))
    trees = int(_resolve(args, "trees"))
    features = _resolve(args, "features")
    fps = resolve_features_per_split(str(features), data.p)
    split_file = _resolve(args, "split_file")
    if split_file:
        split = load_split(split_file)
        split.check_partition(data.n)
    else:
        split = stratified_split(data, seed)
    model = train_forest(data.take(split.train), trees, fps, seed, n_jobs=int(_resolve(args, "jobs")))
    save_split(split, os.path.join(args.out, SPLIT_FILE))
    digest = save_model(model, os.path.join(args.out, MODEL_FILE))
    update_manifest(
        args.out, "train",
        {"trees": trees, "features": str(features), "features_per_split": fps, "seed": seed,
         "model_digest": digest, "split": split_file or "stratified-60-20-20",
         "train_size": int(split.train.size)},
        data=os.path.abspath(path), label=label, seed=seed,
    )
    print(f"trained {trees} trees, featuresPerSplit={fps}, model digest {digest[:16]}")
    return 0


def cmd_distances(args) -> int:
    _, _, model, _, _, leaves = _load_pipeline(args)
    dm, digest, hit = _matrix_for(args, model, leaves)
    save_matrix(dm, os.path.join(args.out, MATRIX_FILE))
    if args.csv:
        export_csv(dm, args.csv)
    update_manifest(args.out, "distances",
                    {"n": dm.n, "source_hash": dm.source_hash, "model_digest": digest, "cache_hit": hit})
    print(f"distance matrix n={dm.n} ({'cached' if hit else 'built'}), source {dm.source_hash[:16]}")
    return 0


def cmd_select(args) -> int:
    algorithm = _resolve(args, "algorithm")
    if not algorithm:
        raise UsageError("--algorithm is required")
    name = algorithm.upper().replace("_", "-")
    k, alpha, cap = _resolve(args, "k"), _resolve(args, "alpha"), _resolve(args, "max_prototypes")
    # validate the combination before any expensive work
    if name in ("SM-A", "SM-WA") and (alpha is not None or cap is not None):
        raise UsageError(f"{name} takes --k only; --alpha/--max-prototypes apply to a-pete")
    if name == "A-PETE" and k is not None:
        raise UsageError("a-pete chooses the number of prototypes itself; --k conflicts with it")
    _, _, model, _, train, leaves = _load_pipeline(args)
    matrix_path = os.path.join(args.out, MATRIX_FILE)
    if os.path.exists(matrix_path) and not args.no_cache:
        dm = _load_checked(matrix_path, leaves.digest())
    else:
        dm, _, _ = _matrix_for(args, model, leaves)
        save_matrix(dm, matrix_path)
    protos = select(name, dm, train.labels, k=None if k is None else int(k),
                    alpha=None if alpha is None else float(alpha),
                    max_prototypes=None if cap is None else int(cap))
    save_prototypes(protos, os.path.join(args.out, PROTO_FILE))
    update_manifest(args.out, "select",
                    {"algorithm": protos.algorithm, "k": protos.k, "alpha": protos.alpha,
                     "max_prototypes": protos.max_prototypes, "prototype_count": len(protos),
                     "stop_reason": protos.stop_reason, "source_hash": dm.source_hash})
    print(f"{protos.algorithm}: {len(protos)} prototypes, stop reason {protos.stop_reason}")
    return 0


def cmd_evaluate(args) -> int:
    _, data, model, split, _, leaves = _load_pipeline(args)
    protos = load_prototypes(_require(os.path.join(args.out, PROTO_FILE), "prototypes"))
    if len(protos) == 0:
        raise ArtifactError("prototype file is empty; nothing to evaluate", reason="empty")
    if protos.source_hash and protos.source_hash != leaves.digest():
        raise ArtifactError("prototypes were selected on a different model/training split",
                            reason="source-hash")
    if max(protos.indices) >= leaves.n:
        raise ArtifactError("prototype index beyond the training split", reason="corrupt")
    part = _resolve(args, "on")
    idx = split.part(part)
    if idx.size == 0:
        raise DataError(f"the {part} split is empty", reason="empty")
    hp = {"algorithm": protos.algorithm, "k": protos.k, "alpha": protos.alpha,
          "features_per_split": model.features_per_split, "num_trees": model.t, "seed": model.seed}
    report = evaluate(model, protos, leaves, data.take(idx), evaluated_on=part, hyperparameters=hp)
    _atomic_json(os.path.join(args.out, METRICS_FILE), report.to_dict())
    with open(os.path.join(args.out, METRICS_CSV), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["algorithm", "evaluated_on", "prototype_count", "weighted_accuracy",
                         "balanced_accuracy", "fidelity", "forest_weighted_accuracy",
                         "forest_balanced_accuracy"])
        writer.writerow([report.algorithm, part, report.prototype_count, report.weighted_accuracy,
                         report.balanced_accuracy, report.fidelity_to_forest,
                         report.forest_weighted_accuracy, report.forest_balanced_accuracy])
    update_manifest(args.out, "evaluate", {"on": part, "prototype_count": report.prototype_count})
    print(f"RF {report.forest_weighted_accuracy:.2f} | {report.algorithm} {report.table_cell()}"
          f" | fidelity {report.fidelity_to_forest:.2f} | balanced {report.balanced_accuracy:.2f}")
    return 0


def _csv_list(text):
    return [part.strip() for part in str(text).split(",") if part.strip()]


def _grid_value(text: str):
    try:
        return int(text)
    except ValueError:
        try:
            return float(text)
        except ValueError:
            return text


def cmd_sweep(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    manifest = read_manifest(args.out)
    data, path, label = _dataset(args, manifest)
    seed = int(_resolve(args, "seed"))
    split_file = _resolve(args, "split_file")
    if split_file:
        split = load_split(split_file)
    else:
        split = stratified_split(data, seed)
    k_grid = [int(v) for v in _csv_list(args.k_grid)] if args.k_grid else \
        list(range(1, int(_resolve(args, "k_max")) + 1))
    cap = _resolve(args, "max_prototypes")
    result = sweep(
        data, split,
        algorithms=_csv_list(_resolve(args, "algorithms")),
        feature_grid=[_grid_value(v) for v in _csv_list(_resolve(args, "features_grid"))],
        k_grid=k_grid,
        alpha_grid=[float(v) for v in _csv_list(_resolve(args, "alphas"))],
        seed=seed,
        num_trees=int(_resolve(args, "trees")),
        max_prototypes=None if cap is None else int(cap),
        n_jobs=int(_resolve(args, "jobs")),
    )
    save_split(split, os.path.join(args.out, "sweep_split.json"))
    _atomic_json(os.path.join(args.out, "sweep.json"), result.to_dict())
    with open(os.path.join(args.out, "sweep.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
        writer.writerows(result.rows)
    update_manifest(args.out, "sweep", {"cells": len(result.rows), "seed": seed},
                    data=os.path.abspath(path), label=label)
    print(result.table())
    return 0


def explain_instance(model, protos, train_leaves, train_rows, x, class_id: int, m: int) -> dict:
    """Up to ``m`` nearest prototypes of ``class_id`` and of every other class."""
    leaf_row = model.leaf_matrix(np.asarray(x, dtype=np.float64)[None, :]).matrix
    ref = train_leaves.matrix[np.asarray(protos.indices)]
    dist = distances_to(leaf_row, ref)[0]
    forest_class = int(model.predict(np.asarray(x, dtype=np.float64)[None, :])[0])
    # stable sort keeps selection order among equal distances
    order = np.argsort(dist, kind="stable")
    surrogate = int(protos.classes[order[0]])
    entries = [
        {"prototype": int(protos.indices[i]), "row": int(train_rows[protos.indices[i]]),
         "class": model.class_names[protos.classes[i]], "class_id": int(protos.classes[i]),
         "distance": float(dist[i])}
        for i in order
    ]
    same = [e for e in entries if e["class_id"] == class_id][:m]
    other = [e for e in entries if e["class_id"] != class_id][:m]
    return {
        "forest_prediction": model.class_names[forest_class],
        "surrogate_prediction": model.class_names[surrogate],
        "same_class": same,
        "other_class": other,
    }


def cmd_explain(args) -> int:
    _, data, model, split, _, leaves = _load_pipeline(args)
    protos = load_prototypes(_require(os.path.join(args.out, PROTO_FILE), "prototypes"))
    if len(protos) == 0:
        raise ArtifactError("prototype file is empty", reason="empty")
    if not 0 <= args.instance < data.n:
        raise DataError(f"unknown instance id {args.instance}; dataset has rows 0..{data.n - 1}",
                        reason="instance")
    m = int(_resolve(args, "m"))
    if m < 1:
        raise UsageError("--m must be at least 1")
    explanation = explain_instance(model, protos, leaves, split.train,
                                   data.features[args.instance], int(data.labels[args.instance]), m)
    explanation = {"instance": args.instance, "true_class": data.class_names[data.labels[args.instance]],
                   **explanation}
    text = json.dumps(explanation, indent=2, sort_keys=True)
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protoforest", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default="out", help="artifact directory (default: out)")
    common.add_argument("--config", help="JSON file of option values; flags override it")
    common.add_argument("--data", help="CSV file with a header row")
    common.add_argument("--label", help="name of the label column")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="split the data and train a forest")
    p.add_argument("--trees", type=int)
    p.add_argument("--features", help="sqrt, an integer, or a fraction of p (default sqrt)")
    p.add_argument("--split-file", help="predefined split JSON instead of a stratified split")
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("distances", parents=[common], help="tree-space distance matrix of the training split")
    p.add_argument("--no-cache", action="store_true")
    p.add_argument("--csv", help="also export the matrix as CSV")
    p.set_defaults(func=cmd_distances)

    p = sub.add_parser("select", parents=[common], help="select prototypes")
    p.add_argument("--algorithm", type=str.lower, choices=[a.lower() for a in ALGORITHMS])
    p.add_argument("--k", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--max-prototypes", type=int)
    p.add_argument("--no-cache", action="store_true")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("evaluate", parents=[common], help="score the nearest-prototype surrogate")
    p.add_argument("--on", choices=["train", "valid", "test"])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", parents=[common], help="grid search over feature counts and k/alpha")
    p.add_argument("--trees", type=int)
    p.add_argument("--features-grid", help="comma list, default sqrt,7,0.33,0.5,0.7")
    p.add_argument("--algorithms", help="comma list of sm-a, sm-wa, a-pete")
    p.add_argument("--k-max", type=int, help="k grid is 1..K (default 20)")
    p.add_argument("--k-grid", help="explicit comma list of k values")
    p.add_argument("--alphas", help="comma list of alpha values (default 0.05)")
    p.add_argument("--max-prototypes", type=int)
    p.add_argument("--split-file")
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("explain", parents=[common], help="nearest prototypes for one dataset row")
    p.add_argument("--instance", type=int, required=True, help="row index in the dataset")
    p.add_argument("--m", type=int, help="prototypes per list (default 3)")
    p.add_argument("--output", help="also write the explanation JSON here")
    p.set_defaults(func=cmd_explain)
    return parser


def _load_config(path):
    if not path:
        return {}
    try:
        with open(path) as fh:
            values = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(values, dict):
        raise UsageError("config file must hold a JSON object")
    return {key.replace("-", "_"): value for key, value in values.items()}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.config_values = _load_config(args.config)
        return args.func(args)
    except ProtoForestError as exc:
        print(f"protoforest {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
