"""Dataset container and CSV ingestion."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class Dataset:
    """Numeric feature matrix with dense integer class labels.

    ``features`` is (n, p) float64 and ``labels`` holds ids in ``[0, q)``
    where ``q = len(class_names)``.
    """

    features: np.ndarray
    labels: np.ndarray
    feature_names: list[str] = field(default_factory=list)
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        X = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        if X.ndim != 2:
            raise DataError("features must be a 2-d matrix", reason="shape")
        n, p = X.shape
        if y.shape != (n,):
            raise DataError(f"expected {n} labels, got shape {y.shape}", reason="shape")
        if p < 1:
            raise DataError("dataset needs at least one feature", reason="shape")
        if n < 2:
            raise DataError("dataset needs at least two rows", reason="empty-rows")
        if not np.all(np.isfinite(X)):
            raise DataError("non-finite feature values", reason="non-finite")
        names = list(self.feature_names) or [f"x{j}" for j in range(p)]
        if len(names) != p:
            raise DataError("feature_names length does not match p", reason="shape")
        classes = list(self.class_names) or [str(c) for c in range(int(y.max()) + 1)]
        q = len(classes)
        if q < 2:
            raise DataError("need at least two classes", reason="single-class")
        if y.min() < 0 or y.max() >= q:
            raise DataError("class ids out of range", reason="labels")
        if np.unique(y).size != q:
            raise DataError("every class must appear at least once", reason="single-class")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "feature_names", names)
        object.__setattr__(self, "class_names", classes)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    @property
    def q(self) -> int:
        return len(self.class_names)

    def take(self, indices) -> "Dataset":
        """Row subset that keeps the full class list (a class may be absent)."""
        idx = np.asarray(indices, dtype=np.int64)
        return _unchecked_subset(self, idx)


def _unchecked_subset(data: Dataset, idx: np.ndarray) -> Dataset:
    # Subsets skip the "every class present" rule: evaluation splits may lack a class.
    sub = object.__new__(Dataset)
    X = data.features[idx]
    y = data.labels[idx]
    X.setflags(write=False)
    y.setflags(write=False)
    object.__setattr__(sub, "features", X)
    object.__setattr__(sub, "labels", y)
    object.__setattr__(sub, "feature_names", list(data.feature_names))
    object.__setattr__(sub, "class_names", list(data.class_names))
    return sub


def _parse_float(value: str) -> float | None:
    try:
        return float(value)
    except ValueError:
        return None


def ingest_csv(path, label_column: str) -> Dataset:
    """Read a header-first, comma-separated file into a :class:`Dataset`.

    Columns whose every value parses as a float are numeric; any other column
    is ordinal-encoded in order of first appearance. Labels are mapped to class
    ids the same way. Row order is preserved.
    """
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise DataError(f"no such file: {path}", reason="missing-file")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file, header row required", reason="empty-rows")
    header = [h.strip() for h in rows[0]]
    if label_column not in header:
        raise DataError(
            f"{path}: label column {label_column!r} not in header {header}",
            reason="missing-label",
        )
    body = rows[1:]
    width = len(header)
    for lineno, row in enumerate(body, start=2):
        if not row or all(not cell.strip() for cell in row):
            raise DataError(f"{path}:{lineno}: empty row", reason="empty-rows")
        if len(row) != width:
            raise DataError(
                f"{path}:{lineno}: expected {width} fields, found {len(row)}",
                reason="empty-rows",
            )
        for name, cell in zip(header, row):
            if not cell.strip():
                raise DataError(f"{path}:{lineno}: empty value in column {name!r}", reason="empty-rows")
    if len(body) < 2:
        raise DataError(f"{path}: need at least two data rows", reason="empty-rows")

    label_pos = header.index(label_column)
    label_codes: dict[str, int] = {}
    labels = [label_codes.setdefault(row[label_pos].strip(), len(label_codes)) for row in body]
    if len(label_codes) < 2:
        raise DataError(
            f"{path}: single-class data, label column {label_column!r} has one distinct value",
            reason="single-class",
        )

    columns = []
    feature_names = []
    for j, name in enumerate(header):
        if j == label_pos:
            continue
        raw = [row[j].strip() for row in body]
        parsed = [_parse_float(v) for v in raw]
        if all(v is not None for v in parsed):
            bad = [i for i, v in enumerate(parsed) if not math.isfinite(v)]
            if bad:
                raise DataError(
                    f"{path}:{bad[0] + 2}: non-finite value {raw[bad[0]]!r} in column {name!r}",
                    reason="non-finite",
                )
            columns.append(parsed)
        else:
            codes: dict[str, int] = {}
            columns.append([float(codes.setdefault(v, len(codes))) for v in raw])
        feature_names.append(name)
    if not columns:
        raise DataError(f"{path}: no feature columns besides the label", reason="shape")

    return Dataset(
        features=np.array(columns, dtype=np.float64).T,
        labels=np.array(labels, dtype=np.int64),
        feature_names=feature_names,
        class_names=list(label_codes),
    )
