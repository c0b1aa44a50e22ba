"""Random-forest classifier grown from scratch, with per-tree leaf assignments.

Trees are stored as flat node arrays so that the model serialises to plain
JSON and traversal vectorises over many instances at once.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import ArtifactError, DataError, FormatVersionError, ParameterError

MODEL_MAGIC = "proto-forest-model"
MODEL_VERSION = 1
# relative slack when comparing split scores for ties
_SPLIT_TIE_RTOL = 1e-12


@dataclass(frozen=True)
class DecisionTree:
    """One fitted tree as parallel node arrays.

    Internal nodes have ``feature >= 0``; samples with
    ``x[feature] <= threshold`` go to ``left``. Leaves have ``feature == -1``
    and a dense ``leaf_id`` that indexes ``leaf_counts`` (tau x q).
    Nodes are stored in depth-first preorder, left child first.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_id: np.ndarray
    leaf_counts: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    @property
    def n_leaves(self) -> int:
        return self.leaf_counts.shape[0]

    @property
    def leaf_prediction(self) -> np.ndarray:
        # np.argmax returns the first maximum, i.e. the lowest class id on ties
        return np.argmax(self.leaf_counts, axis=1)

    @property
    def leaf_proba(self) -> np.ndarray:
        counts = self.leaf_counts.astype(np.float64)
        return counts / counts.sum(axis=1, keepdims=True)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf id reached by every row of ``X``."""
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = np.arange(X.shape[0])
        while active.size:
            cur = node[active]
            feat = self.feature[cur]
            internal = feat >= 0
            active, cur, feat = active[internal], cur[internal], feat[internal]
            if not active.size:
                break
            go_left = X[active, feat] <= self.threshold[cur]
            node[active] = np.where(go_left, self.left[cur], self.right[cur])
        return self.leaf_id[node]

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "leaf_id": self.leaf_id.tolist(),
            "leaf_counts": self.leaf_counts.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict, n_features: int, n_classes: int) -> "DecisionTree":
        try:
            tree = cls(
                feature=np.asarray(d["feature"], dtype=np.int64),
                threshold=np.asarray(d["threshold"], dtype=np.float64),
                left=np.asarray(d["left"], dtype=np.int64),
                right=np.asarray(d["right"], dtype=np.int64),
                leaf_id=np.asarray(d["leaf_id"], dtype=np.int64),
                leaf_counts=np.asarray(d["leaf_counts"], dtype=np.int64).reshape(-1, n_classes),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ArtifactError(f"malformed tree record: {exc}", reason="corrupt") from exc
        tree.validate(n_features)
        return tree

    def validate(self, n_features: int) -> None:
        m = self.n_nodes
        arrays = (self.threshold, self.left, self.right, self.leaf_id)
        if m == 0 or any(a.shape != (m,) for a in arrays):
            raise ArtifactError("tree node arrays have inconsistent lengths", reason="corrupt")
        is_leaf = self.feature < 0
        internal = ~is_leaf
        if np.any(self.feature[internal] >= n_features) or np.any(self.feature[is_leaf] != -1):
            raise ArtifactError("tree references an unknown feature", reason="corrupt")
        ids = np.arange(m)
        # preorder storage: children always come after their parent
        for child in (self.left, self.right):
            if np.any(child[internal] <= ids[internal]) or np.any(child[internal] >= m):
                raise ArtifactError("tree child pointers out of order", reason="corrupt")
        children = np.concatenate([self.left[internal], self.right[internal]])
        if children.size != np.unique(children).size or children.size != m - 1 or 0 in children:
            raise ArtifactError("tree is not a single rooted binary tree", reason="corrupt")
        leaves = self.leaf_id[is_leaf]
        if not np.array_equal(np.sort(leaves), np.arange(self.n_leaves)):
            raise ArtifactError("leaf ids are not dense 0..tau-1", reason="corrupt")
        if np.any(self.leaf_id[internal] != -1):
            raise ArtifactError("internal node carries a leaf id", reason="corrupt")
        if np.any(self.leaf_counts < 0) or np.any(self.leaf_counts.sum(axis=1) == 0):
            raise ArtifactError("leaf with empty or negative class counts", reason="corrupt")
        if not np.all(np.isfinite(self.threshold)):
            raise ArtifactError("non-finite split threshold", reason="corrupt")


@dataclass(frozen=True)
class LeafAssignment:
    """(n, t) matrix of leaf ids; column j lies in ``[0, leaves_per_tree[j])``."""

    matrix: np.ndarray
    leaves_per_tree: np.ndarray

    def __post_init__(self):
        mat = np.ascontiguousarray(self.matrix, dtype=np.int64)
        tau = np.ascontiguousarray(self.leaves_per_tree, dtype=np.int64)
        if mat.ndim != 2 or tau.shape != (mat.shape[1],):
            raise ParameterError("leaf matrix must be (n, t) with one leaf count per tree")
        if mat.size and (mat.min() < 0 or np.any(mat >= tau[None, :])):
            raise ParameterError("leaf id out of range for its tree")
        mat.setflags(write=False)
        tau.setflags(write=False)
        object.__setattr__(self, "matrix", mat)
        object.__setattr__(self, "leaves_per_tree", tau)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def t(self) -> int:
        return self.matrix.shape[1]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray(self.matrix.shape, dtype="<i8").tobytes())
        h.update(self.matrix.astype("<i8").tobytes())
        h.update(self.leaves_per_tree.astype("<i8").tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class ForestModel:
    trees: list[DecisionTree]
    features_per_split: int
    seed: int
    class_names: list[str]
    n_features: int
    feature_names: list[str] = field(default_factory=list)

    @property
    def t(self) -> int:
        return len(self.trees)

    @property
    def q(self) -> int:
        return len(self.class_names)

    def _check_dim(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise DataError(
                f"dimension mismatch: model expects {self.n_features} features, got shape {X.shape}",
                reason="dimension",
            )
        return X

    def leaf_matrix(self, X) -> LeafAssignment:
        X = self._check_dim(X)
        mat = np.empty((X.shape[0], self.t), dtype=np.int64)
        for j, tree in enumerate(self.trees):
            mat[:, j] = tree.apply(X)
        return LeafAssignment(mat, np.array([tr.n_leaves for tr in self.trees], dtype=np.int64))

    def predict_proba(self, X) -> np.ndarray:
        X = self._check_dim(X)
        acc = np.zeros((X.shape[0], self.q), dtype=np.float64)
        for tree in self.trees:
            acc += tree.leaf_proba[tree.apply(X)]
        return acc / self.t

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)

    def to_dict(self) -> dict:
        return {
            "magic": MODEL_MAGIC,
            "version": MODEL_VERSION,
            "seed": int(self.seed),
            "features_per_split": int(self.features_per_split),
            "n_features": int(self.n_features),
            "feature_names": list(self.feature_names),
            "class_names": list(self.class_names),
            "trees": [tree.to_dict() for tree in self.trees],
        }

    def to_json(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")

    def digest(self) -> str:
        return hashlib.sha256(self.to_json()).hexdigest()


def resolve_features_per_split(value, p: int) -> int:
    """Turn a grid entry into a feature count.

    Accepts ``"sqrt"``, an integer count, or a fraction in (0, 1] of ``p``.
    Fractional and sqrt values round up and are clamped to ``[1, p]``;
    explicit integers must already lie in that range.
    """
    if isinstance(value, str):
        text = value.strip().lower()
        if text == "sqrt":
            return min(p, max(1, math.ceil(math.sqrt(p) - 1e-9)))
        try:
            value = int(text)
        except ValueError:
            try:
                value = float(text)
            except ValueError:
                raise ParameterError(f"unrecognised feature count {value!r}") from None
    if isinstance(value, (bool, np.bool_)):
        raise ParameterError(f"unrecognised feature count {value!r}")
    if isinstance(value, (int, np.integer)):
        if not 1 <= value <= p:
            raise ParameterError(f"featuresPerSplit must be in [1, {p}], got {value}")
        return int(value)
    value = float(value)
    if not 0.0 < value <= 1.0:
        raise ParameterError(f"feature fraction must be in (0, 1], got {value}")
    return min(p, max(1, math.ceil(value * p - 1e-9)))


def tree_rng(seed: int, tree_index: int) -> np.random.Generator:
    """Independent stream for tree ``tree_index``; unaffected by worker layout."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(tree_index,)))


def _best_split(Xs: np.ndarray, ys: np.ndarray, features: np.ndarray, q: int):
    """Best Gini split among ``features`` (sorted ascending) for one node.

    Returns ``(feature, threshold)``. ``features`` must all be non-constant on
    ``Xs`` so at least one valid split exists.
    """
    s = ys.shape[0]
    V = Xs[:, features]
    order = np.argsort(V, axis=0, kind="stable")
    Vs = np.take_along_axis(V, order, axis=0)
    onehot = np.zeros((s, q), dtype=np.float64)
    onehot[np.arange(s), ys] = 1.0
    CL = np.cumsum(onehot[order], axis=0)[:-1]  # (s-1, k, q): left counts after each position
    total = onehot.sum(axis=0)
    CR = total - CL
    nL = np.arange(1, s, dtype=np.float64)[:, None]
    nR = s - nL
    # minimising weighted Gini == maximising sum(cL^2)/nL + sum(cR^2)/nR
    score = (CL * CL).sum(axis=2) / nL + (CR * CR).sum(axis=2) / nR
    valid = Vs[:-1] < Vs[1:]
    score = np.where(valid, score, -np.inf)
    best = score.max()
    # feature-major scan: first hit is the lowest feature index, then the lowest threshold
    cand = np.flatnonzero((score >= best - _SPLIT_TIE_RTOL * abs(best)).T.ravel())[0]
    k_idx, pos = divmod(int(cand), s - 1)
    lo, hi = Vs[pos, k_idx], Vs[pos + 1, k_idx]
    thr = (lo + hi) / 2.0
    if not lo <= thr < hi:
        thr = lo
    return int(features[k_idx]), float(thr)


def grow_tree(X: np.ndarray, y: np.ndarray, q: int, features_per_split: int,
              rng: np.random.Generator, bootstrap: bool = True) -> DecisionTree:
    n, p = X.shape
    sample = rng.integers(0, n, size=n) if bootstrap else np.arange(n)
    Xb, yb = X[sample], y[sample]

    feature, threshold, left, right, leaf_id, leaf_counts = [], [], [], [], [], []
    # stack of (node slot, sample rows); pushing right before left yields preorder, left first
    stack = [(None, None, np.arange(n))]
    while stack:
        parent, side, rows = stack.pop()
        node = len(feature)
        if parent is not None:
            (left if side == 0 else right)[parent] = node
        ys = yb[rows]
        counts = np.bincount(ys, minlength=q)
        split = None
        if np.count_nonzero(counts) > 1:
            Xs = Xb[rows]
            movable = np.flatnonzero(Xs.max(axis=0) > Xs.min(axis=0))
            if movable.size:
                # constant features are not counted against featuresPerSplit
                perm = rng.permutation(p)
                chosen = perm[np.isin(perm, movable)][:features_per_split]
                split = _best_split(Xs, ys, np.sort(chosen), q)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        leaf_id.append(-1)
        if split is None:
            leaf_id[node] = len(leaf_counts)
            leaf_counts.append(counts)
            continue
        f, thr = split
        feature[node] = f
        threshold[node] = thr
        go_left = Xb[rows, f] <= thr
        stack.append((node, 1, rows[~go_left]))
        stack.append((node, 0, rows[go_left]))

    return DecisionTree(
        feature=np.array(feature, dtype=np.int64),
        threshold=np.array(threshold, dtype=np.float64),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        leaf_id=np.array(leaf_id, dtype=np.int64),
        leaf_counts=np.array(leaf_counts, dtype=np.int64).reshape(-1, q),
    )


def _grow_range(X, y, q, features_per_split, seed, start, stop):
    return [grow_tree(X, y, q, features_per_split, tree_rng(seed, i)) for i in range(start, stop)]


def train_forest(data: Dataset, num_trees: int, features_per_split: int, seed: int,
                 n_jobs: int = 1) -> ForestModel:
    """Grow ``num_trees`` unpruned CART trees on bootstrap samples.

    Each tree draws its bootstrap and its per-node feature subsets from its own
    stream derived from ``(seed, tree index)``, so the result does not depend
    on ``n_jobs``.
    """
    if isinstance(num_trees, bool) or not isinstance(num_trees, (int, np.integer)) or num_trees < 1:
        raise ParameterError(f"numTrees must be a positive integer, got {num_trees!r}")
    if isinstance(features_per_split, bool) or not isinstance(features_per_split, (int, np.integer)):
        raise ParameterError(f"featuresPerSplit must be an integer, got {features_per_split!r}")
    if not 1 <= features_per_split <= data.p:
        raise ParameterError(f"featuresPerSplit must be in [1, {data.p}], got {features_per_split}")
    if not 0 <= int(seed) < 2**64:
        raise ParameterError(f"seed must be an unsigned 64-bit integer, got {seed}")
    seed = int(seed)
    X, y, q = data.features, data.labels, data.q
    if n_jobs == 1 or num_trees == 1:
        trees = _grow_range(X, y, q, int(features_per_split), seed, 0, num_trees)
    else:
        from joblib import Parallel, delayed, effective_n_jobs

        workers = max(1, min(effective_n_jobs(n_jobs), num_trees))
        bounds = np.linspace(0, num_trees, workers + 1).astype(int)
        chunks = Parallel(n_jobs=workers)(
            delayed(_grow_range)(X, y, q, int(features_per_split), seed, a, b)
            for a, b in zip(bounds[:-1], bounds[1:])
        )
        trees = [tree for chunk in chunks for tree in chunk]
    return ForestModel(
        trees=trees,
        features_per_split=int(features_per_split),
        seed=seed,
        class_names=list(data.class_names),
        n_features=data.p,
        feature_names=list(data.feature_names),
    )


def predict(model: ForestModel, instance) -> int:
    """Class id for a single feature vector."""
    x = np.asarray(instance, dtype=np.float64)
    if x.ndim != 1:
        raise DataError(f"expected a single feature vector, got shape {x.shape}", reason="dimension")
    return int(model.predict(x[None, :])[0])


def apply_leaves(model: ForestModel, data) -> LeafAssignment:
    X = data.features if isinstance(data, Dataset) else data
    return model.leaf_matrix(X)


def save_model(model: ForestModel, path) -> str:
    """Write the model atomically; returns its sha256 digest."""
    payload = model.to_json()
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".model-", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return hashlib.sha256(payload).hexdigest()


def model_from_dict(d: dict) -> ForestModel:
    if not isinstance(d, dict) or d.get("magic") != MODEL_MAGIC:
        raise ArtifactError("not a proto-forest model file (bad magic field)", reason="corrupt")
    if d.get("version") != MODEL_VERSION:
        raise FormatVersionError(
            f"unsupported model format version {d.get('version')!r}; this build reads version {MODEL_VERSION}",
            reason="version",
        )
    try:
        class_names = [str(c) for c in d["class_names"]]
        n_features = int(d["n_features"])
        fps = int(d["features_per_split"])
        seed = int(d["seed"])
        raw_trees = d["trees"]
        feature_names = [str(f) for f in d.get("feature_names", [])]
    except (KeyError, TypeError, ValueError) as exc:
        raise ArtifactError(f"model file missing field: {exc}", reason="corrupt") from exc
    if not raw_trees:
        raise ArtifactError("model has no trees", reason="corrupt")
    trees = [DecisionTree.from_dict(t, n_features, len(class_names)) for t in raw_trees]
    return ForestModel(trees, fps, seed, class_names, n_features, feature_names)


def load_model(path) -> ForestModel:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ArtifactError(f"cannot read model file: {exc}", reason="missing") from exc
    try:
        d = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"corrupt model file {path}: {exc}", reason="corrupt") from exc
    return model_from_dict(d)
