"""Tree-space proximity and the derived distance matrix.

Two instances are close when they fall into the same leaf in many trees:
``proximity = shared_leaves / t`` and ``distance = 1 - proximity``.
"""
from __future__ import annotations

import csv
import os
import struct
import tempfile
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .errors import ArtifactError, FormatVersionError, ParameterError
from .forest import LeafAssignment

MATRIX_MAGIC = b"PFDM"
MATRIX_VERSION = 1
_HEADER = struct.Struct("<4sBI")
_DIGEST_BYTES = 32


class ProvenanceWarning(UserWarning):
    """A distance matrix was built from different leaf assignments than expected."""


@dataclass(frozen=True)
class DistanceMatrix:
    values: np.ndarray
    source_hash: str = ""

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ParameterError(f"distance matrix must be square, got {v.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[0]


def pair_proximity(leaves: LeafAssignment, i: int, j: int) -> float:
    n = leaves.n
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"instance index out of range for n={n}: ({i}, {j})")
    shared = int(np.count_nonzero(leaves.matrix[i] == leaves.matrix[j]))
    return shared / leaves.t


def cooccurrence_counts(leaves: LeafAssignment) -> np.ndarray:
    """Integer (n, n) matrix of how many trees put each pair in the same leaf.

    Each (tree, leaf) pair is one bucket; an instance-by-bucket incidence
    matrix B gives the counts as ``B @ B.T``, which only touches pairs that
    share a bucket.
    """
    n, t = leaves.matrix.shape
    offsets = np.concatenate([[0], np.cumsum(leaves.leaves_per_tree)[:-1]])
    buckets = (leaves.matrix + offsets[None, :]).ravel()
    rows = np.repeat(np.arange(n), t)
    B = sparse.csr_matrix(
        (np.ones(n * t, dtype=np.int64), (rows, buckets)),
        shape=(n, int(leaves.leaves_per_tree.sum())),
    )
    return np.asarray((B @ B.T).toarray(), dtype=np.int64)


def build_distance_matrix(leaves: LeafAssignment) -> DistanceMatrix:
    counts = cooccurrence_counts(leaves)
    values = 1.0 - counts / leaves.t
    np.fill_diagonal(values, 0.0)
    return DistanceMatrix(values, leaves.digest())


def distances_to(leaf_rows: np.ndarray, reference_rows: np.ndarray) -> np.ndarray:
    """Distances between each row of ``leaf_rows`` (m, t) and ``reference_rows`` (r, t).

    Used for out-of-sample instances against prototypes, where no full matrix is built.
    """
    leaf_rows = np.atleast_2d(leaf_rows)
    reference_rows = np.atleast_2d(reference_rows)
    if leaf_rows.shape[1] != reference_rows.shape[1]:
        raise ParameterError("leaf rows come from forests of different sizes")
    shared = (leaf_rows[:, None, :] == reference_rows[None, :, :]).sum(axis=2)
    return 1.0 - shared / leaf_rows.shape[1]


def save_matrix(dm: DistanceMatrix, path) -> None:
    """Binary layout: magic, version byte, uint32 n, n*n float64 row-major, then
    an optional 32-byte sha256 of the source leaf assignment. All little-endian.
    """
    path = os.fspath(path)
    payload = _HEADER.pack(MATRIX_MAGIC, MATRIX_VERSION, dm.n) + dm.values.astype("<f8").tobytes()
    if dm.source_hash:
        payload += bytes.fromhex(dm.source_hash)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".matrix-", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_matrix(path, expected_source: str | None = None) -> DistanceMatrix:
    """Read a matrix file.

    If ``expected_source`` is given and differs from the stored digest a
    :class:`ProvenanceWarning` is issued; the matrix is still returned.
    """
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ArtifactError(f"cannot read matrix file: {exc}", reason="missing") from exc
    if len(raw) < _HEADER.size:
        raise ArtifactError(f"{path}: truncated header", reason="corrupt")
    magic, version, n = _HEADER.unpack_from(raw)
    if magic != MATRIX_MAGIC:
        raise ArtifactError(f"{path}: bad magic {magic!r}", reason="corrupt")
    if version != MATRIX_VERSION:
        raise FormatVersionError(f"{path}: unsupported matrix version {version}", reason="version")
    body = len(raw) - _HEADER.size
    expected = 8 * n * n
    if body == expected:
        digest = ""
    elif body == expected + _DIGEST_BYTES:
        digest = raw[_HEADER.size + expected:].hex()
    else:
        raise ArtifactError(
            f"{path}: size mismatch, header declares n={n} ({n * n} entries) "
            f"but payload holds {body / 8:g} entries",
            reason="size-mismatch",
        )
    values = np.frombuffer(raw, dtype="<f8", count=n * n, offset=_HEADER.size).reshape(n, n)
    dm = DistanceMatrix(values.astype(np.float64), digest)
    if expected_source is not None and digest != expected_source:
        warnings.warn(
            f"{path}: matrix was built from leaf assignments {digest[:12] or '<unknown>'}, "
            f"expected {expected_source[:12]}",
            ProvenanceWarning,
            stacklevel=2,
        )
    return dm


def export_csv(dm: DistanceMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in dm.values:
            writer.writerow([repr(float(v)) for v in row])
