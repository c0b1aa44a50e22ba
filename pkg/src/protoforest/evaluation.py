"""Nearest-prototype surrogate evaluation, stratified splits and the tuning sweep."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from .data import Dataset
from .errors import ArtifactError, DataError, ParameterError
from .forest import ForestModel, LeafAssignment, resolve_features_per_split, train_forest
from .proximity import build_distance_matrix
from .selection import A_PETE, ALGORITHMS, SM_A, SM_WA, PrototypeSet, select_a_pete, select_sm_a, select_sm_wa

log = logging.getLogger(__name__)

SPLIT_PROPORTIONS = (0.6, 0.2, 0.2)
DEFAULT_FEATURE_GRID = ("sqrt", 7, 0.33, 0.5, 0.7)
DEFAULT_K_GRID = tuple(range(1, 21))
DEFAULT_ALPHA_GRID = (0.05,)


@dataclass
class SplitPlan:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        self.train = np.asarray(self.train, dtype=np.int64)
        self.valid = np.asarray(self.valid, dtype=np.int64)
        self.test = np.asarray(self.test, dtype=np.int64)

    def part(self, name: str) -> np.ndarray:
        if name not in ("train", "valid", "test"):
            raise ParameterError(f"unknown split part {name!r}")
        return getattr(self, name)

    def check_partition(self, n: int) -> None:
        joined = np.concatenate([self.train, self.valid, self.test])
        if joined.size != n or not np.array_equal(np.sort(joined), np.arange(n)):
            raise DataError(f"split does not partition the {n} dataset rows exactly once", reason="split")

    def to_dict(self) -> dict:
        return {"seed": self.seed, "train": self.train.tolist(),
                "valid": self.valid.tolist(), "test": self.test.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        try:
            return cls(d["train"], d["valid"], d["test"], d.get("seed"))
        except (KeyError, TypeError, ValueError) as exc:
            raise ArtifactError(f"malformed split file: {exc}", reason="corrupt") from exc


def save_split(plan: SplitPlan, path) -> None:
    with open(path, "w") as fh:
        json.dump(plan.to_dict(), fh, sort_keys=True)
        fh.write("\n")


def load_split(path) -> SplitPlan:
    try:
        with open(path) as fh:
            return SplitPlan.from_dict(json.load(fh))
    except OSError as exc:
        raise ArtifactError(f"cannot read split file: {exc}", reason="missing") from exc
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"corrupt split file {path}: {exc}", reason="corrupt") from exc


def _allocate(m: int, proportions) -> list[int]:
    """Largest-remainder allocation of ``m`` items, then every part gets at least one."""
    quotas = [m * p for p in proportions]
    sizes = [int(np.floor(x)) for x in quotas]
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[: m - sum(sizes)]:
        sizes[i] += 1
    for i in range(len(sizes)):
        if sizes[i] == 0:
            donor = max(range(len(sizes)), key=lambda j: (sizes[j], -j))
            sizes[donor] -= 1
            sizes[i] += 1
    return sizes


def stratified_split(data: Dataset, seed: int, proportions=SPLIT_PROPORTIONS) -> SplitPlan:
    """Per-class shuffle, then a 60/20/20 (by default) allocation within each class."""
    labels = data.labels if isinstance(data, Dataset) else np.asarray(data)
    rng = np.random.default_rng(seed)
    parts: list[list[int]] = [[], [], []]
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if members.size < 3:
            raise DataError(
                f"class {int(c)} has {members.size} instance(s); at least 3 are needed "
                "to appear in train, validation and test",
                reason="class-too-small",
            )
        members = members[rng.permutation(members.size)]
        a, b, _ = _allocate(members.size, proportions)
        parts[0].extend(members[:a])
        parts[1].extend(members[a:a + b])
        parts[2].extend(members[a + b:])
    return SplitPlan(*(np.sort(np.array(p, dtype=np.int64)) for p in parts), seed=seed)


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray

    @classmethod
    def from_predictions(cls, y_true, y_pred, q: int) -> "ConfusionMatrix":
        cm = np.zeros((q, q), dtype=np.int64)
        np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
        return cls(cm)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def per_class_recall(self) -> np.ndarray:
        support = self.counts.sum(axis=1)
        diag = np.diag(self.counts).astype(np.float64)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(support > 0, diag / np.maximum(support, 1), 0.0)


def weighted_accuracy(cm: ConfusionMatrix) -> float:
    """Per-class recall weighted by class frequency in the evaluated set.

    Evaluated in exact rational arithmetic and rounded once.
    """
    total = cm.total
    if total == 0:
        raise DataError("empty confusion matrix", reason="empty")
    acc = Fraction(0)
    for c, support in enumerate(cm.counts.sum(axis=1).tolist()):
        if support:
            acc += Fraction(support, total) * Fraction(int(cm.counts[c, c]), support)
    return float(acc)


def balanced_accuracy(cm: ConfusionMatrix) -> float:
    """Unweighted mean recall over the classes present in the evaluated set."""
    supports = cm.counts.sum(axis=1).tolist()
    present = [c for c, s in enumerate(supports) if s > 0]
    if not present:
        raise DataError("empty confusion matrix", reason="empty")
    acc = sum(Fraction(int(cm.counts[c, c]), supports[c]) for c in present)
    return float(acc / len(present))


def surrogate_predict(model: ForestModel, protos: PrototypeSet, train_leaves: LeafAssignment, X) -> np.ndarray:
    """Class of the tree-space nearest prototype for each row of ``X``.

    Ties go to the prototype selected first.
    """
    if len(protos) == 0:
        raise ParameterError("empty prototype set")
    rows = model.leaf_matrix(np.atleast_2d(X)).matrix
    ref = train_leaves.matrix[np.asarray(protos.indices)]
    # maximise shared leaves (integer) instead of minimising 1 - shared/t: exact ties
    shared = (rows[:, None, :] == ref[None, :, :]).sum(axis=2)
    return np.asarray(protos.classes, dtype=np.int64)[np.argmax(shared, axis=1)]


def nearest_prototype_classify(model: ForestModel, protos: PrototypeSet,
                               train_leaves: LeafAssignment, instance) -> int:
    x = np.asarray(instance, dtype=np.float64)
    if x.ndim != 1:
        raise DataError(f"expected a single feature vector, got shape {x.shape}", reason="dimension")
    return int(surrogate_predict(model, protos, train_leaves, x[None, :])[0])


def fidelity_to_forest(model: ForestModel, protos: PrototypeSet, train_leaves: LeafAssignment,
                       eval_data: Dataset) -> float:
    X = eval_data.features if isinstance(eval_data, Dataset) else np.asarray(eval_data)
    if X.shape[0] == 0:
        raise DataError("empty evaluation set", reason="empty")
    return float(np.mean(surrogate_predict(model, protos, train_leaves, X) == model.predict(X)))


@dataclass
class MetricsReport:
    algorithm: str
    weighted_accuracy: float
    balanced_accuracy: float
    fidelity_to_forest: float
    prototype_count: int
    per_class_accuracy: list[float]
    forest_weighted_accuracy: float
    forest_balanced_accuracy: float
    evaluated_on: str = "test"
    hyperparameters: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def table_cell(self) -> str:
        return f"{self.weighted_accuracy:.2f} ({self.prototype_count})"


def evaluate(model: ForestModel, protos: PrototypeSet, train_leaves: LeafAssignment, eval_data: Dataset,
             evaluated_on: str = "test", hyperparameters: dict | None = None) -> MetricsReport:
    if eval_data.n == 0:
        raise DataError("empty evaluation set", reason="empty")
    y = eval_data.labels
    forest_pred = model.predict(eval_data.features)
    sur_pred = surrogate_predict(model, protos, train_leaves, eval_data.features)
    cm = ConfusionMatrix.from_predictions(y, sur_pred, eval_data.q)
    cm_forest = ConfusionMatrix.from_predictions(y, forest_pred, eval_data.q)
    return MetricsReport(
        algorithm=protos.algorithm,
        weighted_accuracy=weighted_accuracy(cm),
        balanced_accuracy=balanced_accuracy(cm),
        fidelity_to_forest=float(np.mean(sur_pred == forest_pred)),
        prototype_count=len(protos),
        per_class_accuracy=cm.per_class_recall().tolist(),
        forest_weighted_accuracy=weighted_accuracy(cm_forest),
        forest_balanced_accuracy=balanced_accuracy(cm_forest),
        evaluated_on=evaluated_on,
        hyperparameters=dict(hyperparameters or {}),
    )


def cell_seed(seed: int, cell_index: int) -> int:
    """64-bit seed for sweep cell ``cell_index``; independent of execution order."""
    words = np.random.SeedSequence(entropy=seed, spawn_key=(cell_index,)).generate_state(2, np.uint32)
    return int(words[0]) | (int(words[1]) << 32)


def resolve_grid(feature_grid, p: int) -> list[tuple[str, int]]:
    """(label, featuresPerSplit) pairs; integer entries above ``p`` are skipped, duplicates dropped."""
    cells, seen = [], set()
    for entry in feature_grid:
        label = str(entry)
        if isinstance(entry, str) and entry.strip().isdigit():
            entry = int(entry)
        if isinstance(entry, (int, np.integer)) and not isinstance(entry, bool) and entry > p:
            log.info("skipping feature count %s > p=%d", entry, p)
            continue
        m = resolve_features_per_split(entry, p)
        if m not in seen:
            seen.add(m)
            cells.append((label, m))
    return cells


SWEEP_COLUMNS = (
    "algorithm", "feature_grid", "features_per_split", "k", "alpha", "prototype_count",
    "valid_weighted_accuracy", "valid_balanced_accuracy", "valid_fidelity",
    "test_weighted_accuracy", "test_balanced_accuracy", "test_fidelity",
    "forest_valid_weighted_accuracy", "forest_test_weighted_accuracy",
)


@dataclass
class SweepResult:
    rows: list[dict]
    best: dict[str, MetricsReport]
    forest: MetricsReport

    def to_dict(self) -> dict:
        return {
            "forest": self.forest.to_dict(),
            "best": {name: rep.to_dict() for name, rep in self.best.items()},
            "cells": self.rows,
        }

    def table(self) -> str:
        lines = [f"RF      {self.forest.weighted_accuracy:.2f}"]
        for name, rep in self.best.items():
            lines.append(f"{name:<7} {rep.table_cell()}")
        return "\n".join(lines)


def _score(y, pred, q):
    cm = ConfusionMatrix.from_predictions(y, pred, q)
    return weighted_accuracy(cm), balanced_accuracy(cm), cm


def sweep(data: Dataset, split: SplitPlan, algorithms=ALGORITHMS, feature_grid=DEFAULT_FEATURE_GRID,
          k_grid=DEFAULT_K_GRID, alpha_grid=DEFAULT_ALPHA_GRID, seed: int = 0, num_trees: int = 1000,
          max_prototypes: int | None = None, n_jobs: int = 1) -> SweepResult:
    """Grid search over forest feature counts and selection parameters.

    Every cell trains a forest on the training part, selects prototypes on it
    and scores the surrogate on the validation part. The best cell per
    algorithm (highest validation weighted accuracy, then fewer prototypes,
    then grid order) is reported with its test-part scores.
    """
    algorithms = [a.upper().replace("_", "-") for a in algorithms]
    unknown = [a for a in algorithms if a not in ALGORITHMS]
    if unknown:
        raise ParameterError(f"unknown algorithm(s): {unknown}")
    k_grid = sorted({int(k) for k in k_grid})
    alpha_grid = [float(a) for a in alpha_grid]
    if not algorithms or not list(feature_grid):
        raise ParameterError("sweep grids must be non-empty")
    if any(a in (SM_A, SM_WA) for a in algorithms) and (not k_grid or k_grid[0] < 1):
        raise ParameterError("k grid must hold positive integers")
    if A_PETE in algorithms and not alpha_grid:
        raise ParameterError("alpha grid must be non-empty for A-PETE")
    split.check_partition(data.n)
    cells = resolve_grid(feature_grid, data.p)
    if not cells:
        raise ParameterError("feature grid exhausted: every entry was skipped")

    train, valid, test = data.take(split.train), data.take(split.valid), data.take(split.test)
    q = data.q
    rows: list[dict] = []
    reports: dict[str, list[tuple[tuple, MetricsReport]]] = {a: [] for a in algorithms}
    forest_reports: list[tuple[tuple, MetricsReport]] = []

    for cell_index, (label, m) in enumerate(cells):
        forest = train_forest(train, num_trees, m, cell_seed(seed, cell_index), n_jobs=n_jobs)
        train_leaves = forest.leaf_matrix(train.features)
        dist = build_distance_matrix(train_leaves)
        valid_rows = forest.leaf_matrix(valid.features).matrix
        test_rows = forest.leaf_matrix(test.features).matrix
        f_valid = forest.predict(valid.features)
        f_test = forest.predict(test.features)
        fv_w, _, _ = _score(valid.labels, f_valid, q)
        ft_w, ft_b, _ = _score(test.labels, f_test, q)
        hp_forest = {"feature_grid": label, "features_per_split": m, "num_trees": num_trees,
                     "seed": forest.seed}
        forest_reports.append(((-fv_w, cell_index), MetricsReport(
            "RF", ft_w, ft_b, 1.0, 0, [], ft_w, ft_b, "test", hp_forest)))
        log.info("cell %d: features=%s (%d) forest valid=%.4f", cell_index, label, m, fv_w)

        def nearest(rows_, protos):
            ref = train_leaves.matrix[np.asarray(protos.indices)]
            shared = (rows_[:, None, :] == ref[None, :, :]).sum(axis=2)
            return np.asarray(protos.classes)[np.argmax(shared, axis=1)]

        def record(protos: PrototypeSet, k, alpha, order):
            pv = nearest(valid_rows, protos)
            pt = nearest(test_rows, protos)
            vw, vb, _ = _score(valid.labels, pv, q)
            tw, tb, cm_t = _score(test.labels, pt, q)
            row = {
                "algorithm": protos.algorithm, "feature_grid": label, "features_per_split": m,
                "k": k, "alpha": alpha, "prototype_count": len(protos),
                "valid_weighted_accuracy": vw, "valid_balanced_accuracy": vb,
                "valid_fidelity": float(np.mean(pv == f_valid)),
                "test_weighted_accuracy": tw, "test_balanced_accuracy": tb,
                "test_fidelity": float(np.mean(pt == f_test)),
                "forest_valid_weighted_accuracy": fv_w, "forest_test_weighted_accuracy": ft_w,
            }
            rows.append(row)
            hp = dict(hp_forest, k=k, alpha=alpha, prototypes=list(protos.indices),
                      stop_reason=protos.stop_reason)
            report = MetricsReport(protos.algorithm, tw, tb, row["test_fidelity"], len(protos),
                                   cm_t.per_class_recall().tolist(), ft_w, ft_b, "test", hp)
            reports[protos.algorithm].append(((-vw, len(protos), order), report))

        for algorithm in algorithms:
            if algorithm in (SM_A, SM_WA):
                run = select_sm_a if algorithm == SM_A else select_sm_wa
                kmax = min(k_grid[-1], train.n)
                full = run(dist, train.labels, kmax)
                # greedy is prefix-stable, so one run at kmax covers the whole k grid
                for k in k_grid:
                    if k > kmax:
                        break
                    prefix = PrototypeSet(full.indices[:k], full.classes[:k], algorithm,
                                          full.trace[:k], k=k, stop_reason=full.stop_reason)
                    record(prefix, k, None, len(rows))
            else:
                for alpha in alpha_grid:
                    protos = select_a_pete(dist, train.labels, alpha, max_prototypes)
                    record(protos, None, alpha, len(rows))

    best = {a: min(reports[a], key=lambda item: item[0])[1] for a in algorithms}
    forest_best = min(forest_reports, key=lambda item: item[0])[1]
    return SweepResult(rows, best, forest_best)
