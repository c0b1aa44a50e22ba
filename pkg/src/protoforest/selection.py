"""Greedy per-class facility-location prototype selection.

The objective sums, over every training instance, the distance to the nearest
selected prototype *of the same class*. One phantom exemplar per class sits at
distance 1 from everything, so an uncovered instance costs exactly 1 and the
empty selection costs ``n``. Three stopping rules are offered:

* ``select_sm_a``   fixed number of greedy steps
* ``select_sm_wa``  same, with each class term weighted by ``n / (q * |class|)``
* ``select_a_pete`` stop once consecutive marginal reductions stop changing by
  more than a relative ``alpha``
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ArtifactError, ParameterError
from .proximity import DistanceMatrix

PHANTOM_DISTANCE = 1.0
# gains closer than this are ties and resolve to the lowest index
TIE_TOL = 1e-9

SM_A = "SM-A"
SM_WA = "SM-WA"
A_PETE = "A-PETE"
ALGORITHMS = (SM_A, SM_WA, A_PETE)

STOP_K = "k-reached"
STOP_RELATIVE = "relative-change"
STOP_EXHAUSTED = "objective-exhausted"
STOP_CAP = "cap"


@dataclass(frozen=True)
class PhantomSet:
    """One placeholder exemplar per class, never emitted as a prototype."""

    n_classes: int
    distance: float = PHANTOM_DISTANCE


@dataclass
class TraceStep:
    index: int
    class_id: int
    objective: float
    reduction: float
    relative_change: float | None


@dataclass
class PrototypeSet:
    indices: list[int]
    classes: list[int]
    algorithm: str
    trace: list[TraceStep] = field(default_factory=list)
    alpha: float | None = None
    k: int | None = None
    max_prototypes: int | None = None
    stop_reason: str = ""
    source_hash: str = ""

    def __len__(self) -> int:
        return len(self.indices)

    def to_dict(self) -> dict:
        by_index = {s.index: s.reduction for s in self.trace}
        return {
            "algorithm": self.algorithm,
            "alpha": self.alpha,
            "k": self.k,
            "max_prototypes": self.max_prototypes,
            "stop_reason": self.stop_reason,
            "source_hash": self.source_hash,
            "prototypes": [
                {"index": i, "class": c, "reduction": by_index.get(i)}
                for i, c in zip(self.indices, self.classes)
            ],
            "trace": [
                {
                    "step": s + 1,
                    "index": st.index,
                    "class": st.class_id,
                    "objective": st.objective,
                    "reduction": st.reduction,
                    "relative_change": st.relative_change,
                }
                for s, st in enumerate(self.trace)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PrototypeSet":
        try:
            algorithm = d["algorithm"]
            if algorithm not in ALGORITHMS:
                raise ValueError(f"unknown algorithm {algorithm!r}")
            protos = d["prototypes"]
            trace = [
                TraceStep(int(s["index"]), int(s["class"]), float(s["objective"]),
                          float(s["reduction"]),
                          None if s["relative_change"] is None else float(s["relative_change"]))
                for s in d["trace"]
            ]
            out = cls(
                indices=[int(p["index"]) for p in protos],
                classes=[int(p["class"]) for p in protos],
                algorithm=algorithm,
                trace=trace,
                alpha=d.get("alpha"),
                k=d.get("k"),
                max_prototypes=d.get("max_prototypes"),
                stop_reason=d.get("stop_reason", ""),
                source_hash=d.get("source_hash", ""),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ArtifactError(f"malformed prototype file: {exc}", reason="corrupt") from exc
        if len(set(out.indices)) != len(out.indices):
            raise ArtifactError("prototype file lists an index twice", reason="corrupt")
        return out


def save_prototypes(protos: PrototypeSet, path) -> None:
    with open(path, "w") as fh:
        json.dump(protos.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_prototypes(path) -> PrototypeSet:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except OSError as exc:
        raise ArtifactError(f"cannot read prototype file: {exc}", reason="missing") from exc
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"corrupt prototype file {path}: {exc}", reason="corrupt") from exc
    return PrototypeSet.from_dict(d)


def _as_matrix(dist) -> np.ndarray:
    D = dist.values if isinstance(dist, DistanceMatrix) else np.asarray(dist, dtype=np.float64)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ParameterError(f"distance matrix must be square, got {D.shape}")
    return D


def class_weights(labels: np.ndarray) -> np.ndarray:
    """Per-instance weight ``n / (q * |class|)`` (q counts classes present)."""
    labels = np.asarray(labels)
    _, inverse, sizes = np.unique(labels, return_inverse=True, return_counts=True)
    return labels.size / (sizes.size * sizes[inverse].astype(np.float64))


class GreedyState:
    """Current per-instance cover distance under phantoms plus selected prototypes."""

    def __init__(self, dist, labels, weights=None):
        self.D = _as_matrix(dist)
        self.labels = np.asarray(labels, dtype=np.int64)
        n = self.D.shape[0]
        if self.labels.shape != (n,):
            raise ParameterError(f"need {n} labels for an {n}x{n} matrix, got {self.labels.shape}")
        self.weights = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
        same = self.labels[:, None] == self.labels[None, :]
        # column x of this matrix weights the rows that a prototype x can serve
        self._serve = np.where(same, self.weights[:, None], 0.0)
        self.cover = np.full(n, PHANTOM_DISTANCE)
        self.selected: list[int] = []
        self._taken = np.zeros(n, dtype=bool)

    @property
    def n(self) -> int:
        return self.D.shape[0]

    def objective(self) -> float:
        return float(np.dot(self.weights, self.cover))

    def gains(self) -> np.ndarray:
        improvement = np.maximum(self.cover[:, None] - self.D, 0.0)
        g = (improvement * self._serve).sum(axis=0)
        g[self._taken] = -np.inf
        return g

    def best(self) -> tuple[int, float]:
        if self._taken.all():
            raise ParameterError("no candidates remain: every instance is already a prototype")
        g = self.gains()
        top = g.max()
        x = int(np.flatnonzero(g >= top - TIE_TOL)[0])
        return x, float(max(g[x], 0.0))

    def add(self, x: int) -> None:
        if not 0 <= x < self.n:
            raise ParameterError(f"prototype index {x} out of range for n={self.n}")
        if self._taken[x]:
            raise ParameterError(f"instance {x} is already a prototype")
        mine = self.labels == self.labels[x]
        self.cover[mine] = np.minimum(self.cover[mine], self.D[mine, x])
        self.selected.append(x)
        self._taken[x] = True


def _check_indices(P, n: int) -> list[int]:
    P = [int(i) for i in P]
    for i in P:
        if not 0 <= i < n:
            raise ParameterError(f"prototype index {i} out of range for n={n}")
    if len(set(P)) != len(P):
        raise ParameterError("prototype indices must be unique")
    return P


def objective_f(dist, labels, P, phantoms: PhantomSet | None = None, weights=None) -> float:
    """Sum over instances of the distance to the nearest same-class prototype,
    where every class also owns a phantom at distance 1."""
    D = _as_matrix(dist)
    labels = np.asarray(labels, dtype=np.int64)
    P = _check_indices(P, D.shape[0])
    ceiling = PHANTOM_DISTANCE if phantoms is None else phantoms.distance
    cover = np.full(D.shape[0], ceiling)
    for p in P:
        mine = labels == labels[p]
        cover[mine] = np.minimum(cover[mine], D[mine, p])
    w = np.ones(D.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    return float(np.dot(w, cover))


def greedy_step(dist, labels, P, phantoms: PhantomSet | None = None, weights=None) -> tuple[int, float]:
    """Candidate with the largest objective reduction given prototypes ``P``."""
    state = GreedyState(dist, labels, weights)
    for p in _check_indices(P, state.n):
        state.add(p)
    return state.best()


def _relative_change(previous: float, current: float) -> float | None:
    if current <= 0.0:
        return None
    return abs(previous - current) / current


def _run_fixed_k(dist, labels, k: int, weights, algorithm: str) -> PrototypeSet:
    D = _as_matrix(dist)
    n = D.shape[0]
    if isinstance(k, bool) or not isinstance(k, (int, np.integer)) or not 1 <= k <= n:
        raise ParameterError(f"k must be an integer in [1, {n}], got {k!r}")
    state = GreedyState(D, labels, weights)
    trace = []
    previous = 0.0
    for _ in range(int(k)):
        x, reduction = state.best()
        state.add(x)
        trace.append(TraceStep(x, int(state.labels[x]), state.objective(), reduction,
                               _relative_change(previous, reduction)))
        previous = reduction
    return PrototypeSet(
        indices=list(state.selected),
        classes=[int(state.labels[i]) for i in state.selected],
        algorithm=algorithm,
        trace=trace,
        k=int(k),
        stop_reason=STOP_K,
        source_hash=getattr(dist, "source_hash", ""),
    )


def select_sm_a(dist, labels, k: int) -> PrototypeSet:
    """Exactly ``k`` greedy steps on the unweighted objective."""
    return _run_fixed_k(dist, labels, k, None, SM_A)


def select_sm_wa(dist, labels, k: int) -> PrototypeSet:
    """Exactly ``k`` greedy steps with inverse-class-frequency weights."""
    return _run_fixed_k(dist, labels, k, class_weights(labels), SM_WA)


def select_a_pete(dist, labels, alpha: float = 0.05, max_prototypes: int | None = None) -> PrototypeSet:
    """Greedy selection that chooses its own number of prototypes.

    After each added prototype the reduction it brought is compared with the
    previous step's reduction; once ``|prev - cur| / cur < alpha`` the loop
    stops, keeping the prototype just added. It also stops when no candidate
    reduces the objective (that candidate is not added) or when
    ``min(max_prototypes, n)`` prototypes are selected.
    """
    D = _as_matrix(dist)
    n = D.shape[0]
    if isinstance(alpha, bool) or not 0.0 < float(alpha) < 1.0:
        raise ParameterError(f"alpha must lie strictly between 0 and 1, got {alpha!r}")
    if max_prototypes is None:
        cap = n
    elif isinstance(max_prototypes, bool) or not isinstance(max_prototypes, (int, np.integer)) \
            or max_prototypes < 1:
        raise ParameterError(f"maxPrototypes must be a positive integer, got {max_prototypes!r}")
    else:
        cap = min(int(max_prototypes), n)
    alpha = float(alpha)

    state = GreedyState(D, labels)
    trace = []
    previous = 0.0
    reason = STOP_CAP
    while len(state.selected) < cap:
        x, reduction = state.best()
        if reduction <= 0.0:
            reason = STOP_EXHAUSTED
            break
        state.add(x)
        rel = _relative_change(previous, reduction)
        trace.append(TraceStep(x, int(state.labels[x]), state.objective(), reduction, rel))
        if rel < alpha:
            reason = STOP_RELATIVE
            break
        previous = reduction
    return PrototypeSet(
        indices=list(state.selected),
        classes=[int(state.labels[i]) for i in state.selected],
        algorithm=A_PETE,
        trace=trace,
        alpha=alpha,
        max_prototypes=None if max_prototypes is None else int(max_prototypes),
        stop_reason=reason,
        source_hash=getattr(dist, "source_hash", ""),
    )


def select(algorithm: str, dist, labels, k: int | None = None, alpha: float | None = None,
           max_prototypes: int | None = None) -> PrototypeSet:
    """Dispatch by algorithm name; rejects parameters that do not belong to it."""
    name = algorithm.upper().replace("_", "-")
    if name in (SM_A, SM_WA):
        if alpha is not None or max_prototypes is not None:
            raise ParameterError(f"{name} takes k only; alpha/maxPrototypes apply to A-PETE")
        if k is None:
            raise ParameterError(f"{name} requires k")
        return (select_sm_a if name == SM_A else select_sm_wa)(dist, labels, k)
    if name == A_PETE:
        if k is not None:
            raise ParameterError("A-PETE chooses k itself; pass alpha (and optionally maxPrototypes)")
        return select_a_pete(dist, labels, 0.05 if alpha is None else alpha, max_prototypes)
    raise ParameterError(f"unknown algorithm {algorithm!r}; expected one of {', '.join(ALGORITHMS)}")
