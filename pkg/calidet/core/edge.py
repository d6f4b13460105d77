import csv
import hashlib
import json
import logging
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import DIAGONAL_VALUE, FLAT_VALUE, PERCENTILES
from .errors import EdgeValidationError

logger = logging.getLogger(__name__)


class LabelSet:
    """
    Set of class indices present in one image.
    """

    def __init__(self, present: Iterable[int] = ()):
        present = [int(c) for c in present]
        if any(c < 0 for c in present):
            raise EdgeValidationError(f"Class indices must be non-negative, got {sorted(present)}.")
        self._present = frozenset(present)

    def validate(self, k: int) -> "LabelSet":
        out_of_range = [c for c in self._present if c >= k]
        if out_of_range:
            raise EdgeValidationError(
                f"Class indices {sorted(out_of_range)} out of range for k={k}."
            )
        return self

    def indicator(self, k: int) -> np.ndarray:
        self.validate(k)
        y = np.zeros(k, dtype=np.int64)
        y[list(self._present)] = 1
        return y

    def __iter__(self) -> Iterator[int]:
        return iter(sorted(self._present))

    def __len__(self) -> int:
        return len(self._present)

    def __contains__(self, item) -> bool:
        return item in self._present

    def __eq__(self, other) -> bool:
        if isinstance(other, LabelSet):
            return self._present == other._present
        return self._present == frozenset(other)

    def __hash__(self) -> int:
        return hash(self._present)

    def __repr__(self) -> str:
        return f"LabelSet({sorted(self._present)})"


class EdgeMatrix:
    """
    K x K matrix of conditional probabilities, entry (i, j) = P(i | j).

    Column j holds how likely every class i is given that class j is present.
    The matrix is not symmetric in general. `class_ids[i]` is the external
    category id of index i.
    """

    def __init__(self, values: np.ndarray | Sequence, class_ids: Sequence[int] | None = None):
        values = np.array(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != values.shape[1] or values.shape[0] == 0:
            raise EdgeValidationError(f"Edge values must be a non-empty square matrix, got {values.shape}.")
        k = values.shape[0]
        if class_ids is None:
            class_ids = range(k)
        class_ids = tuple(int(c) for c in class_ids)
        if len(class_ids) != k:
            raise EdgeValidationError(f"Expected {k} class ids, got {len(class_ids)}.")
        if any(a >= b for a, b in zip(class_ids, class_ids[1:])):
            raise EdgeValidationError("Class ids must be strictly increasing.")
        if not np.isfinite(values).all():
            raise EdgeValidationError("Edge values must be finite.")
        if values.min() < 0.0 or values.max() > 1.0:
            raise EdgeValidationError("Edge values must lie in [0, 1].")
        if not np.all(np.diag(values) == DIAGONAL_VALUE):
            raise EdgeValidationError("Edge diagonal must be exactly 1.")
        values.setflags(write=False)
        self._values = values
        self._class_ids = class_ids

    @property
    def k(self) -> int:
        return self._values.shape[0]

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def class_ids(self) -> tuple[int, ...]:
        return self._class_ids

    def column(self, j: int) -> np.ndarray:
        return self._values[:, j]

    def digest(self) -> str:
        h = hashlib.sha256(self._values.tobytes())
        h.update(repr(self._class_ids).encode())
        return h.hexdigest()

    def __eq__(self, other) -> bool:
        if not isinstance(other, EdgeMatrix):
            return NotImplemented
        return self._class_ids == other._class_ids and np.array_equal(self._values, other._values)

    def __repr__(self) -> str:
        return f"EdgeMatrix(k={self.k}, class_ids={list(self._class_ids)})"

    def to_dict(self) -> dict:
        return {"k": self.k, "class_ids": list(self._class_ids), "values": self._values.tolist()}

    @classmethod
    def from_dict(cls, document: dict) -> "EdgeMatrix":
        try:
            k = int(document["k"])
            values = document["values"]
            class_ids = document["class_ids"]
        except (KeyError, TypeError) as e:
            raise EdgeValidationError(f"Edge document is missing a field: {e}") from e
        edge = cls(values, class_ids)
        if edge.k != k:
            raise EdgeValidationError(f"Edge document declares k={k} but holds a {edge.k}x{edge.k} matrix.")
        return edge

    def save(self, path: str | Path) -> None:
        # json writes floats with repr, which round-trips all 17 significant digits
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "EdgeMatrix":
        try:
            document = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise EdgeValidationError(f"{path} is not valid JSON: {e}") from e
        return cls.from_dict(document)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(self._class_ids)
            for row in self._values:
                writer.writerow([repr(float(v)) for v in row])


class DeltaEdge:
    """
    Difference to the flat prior, E - E0. Entries in [-0.5, 0.5], zero diagonal.
    """

    def __init__(self, values: np.ndarray | Sequence):
        values = np.array(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise EdgeValidationError(f"Delta values must be a square matrix, got {values.shape}.")
        if not np.isfinite(values).all():
            raise EdgeValidationError("Delta values must be finite.")
        if np.abs(values).max(initial=0.0) > FLAT_VALUE:
            raise EdgeValidationError("Delta values must lie in [-0.5, 0.5].")
        if not np.all(np.diag(values) == 0.0):
            raise EdgeValidationError("Delta diagonal must be exactly 0.")
        values.setflags(write=False)
        self._values = values

    @property
    def k(self) -> int:
        return self._values.shape[0]

    @property
    def values(self) -> np.ndarray:
        return self._values

    def digest(self) -> str:
        return hashlib.sha256(self._values.tobytes()).hexdigest()

    def __eq__(self, other) -> bool:
        if not isinstance(other, DeltaEdge):
            return NotImplemented
        return np.array_equal(self._values, other._values)

    @classmethod
    def zeros(cls, k: int) -> "DeltaEdge":
        return cls(np.zeros((k, k)))


@dataclass(frozen=True)
class EdgeComparison:
    mae: float
    percentiles: dict[int, float]

    @property
    def max(self) -> float:
        return self.percentiles[100]


def _check_k(k: int) -> int:
    if int(k) < 1:
        raise EdgeValidationError(f"Class count must be positive, got {k}.")
    return int(k)


def flat_prior(k: int, class_ids: Sequence[int] | None = None) -> EdgeMatrix:
    """
    The no-knowledge edge E0: ones on the diagonal, 0.5 everywhere else.
    """
    k = _check_k(k)
    values = np.full((k, k), FLAT_VALUE)
    np.fill_diagonal(values, DIAGONAL_VALUE)
    return EdgeMatrix(values, class_ids)


def presence_matrix(k: int, samples: Iterable[LabelSet | Iterable[int]]) -> np.ndarray:
    """
    Stacks label sets into an (n, k) integer indicator matrix.
    """
    rows = []
    for sample in samples:
        if not isinstance(sample, LabelSet):
            sample = LabelSet(sample)
        rows.append(sample.indicator(k))
    if not rows:
        return np.zeros((0, k), dtype=np.int64)
    return np.stack(rows)


def cooccurrence_counts(presence: np.ndarray) -> np.ndarray:
    """
    Integer counts C(i, j) = #samples containing both i and j; C(j, j) = #samples containing j.
    """
    presence = presence.astype(np.int64)
    return presence.T @ presence


def edge_from_counts(counts: np.ndarray, class_ids: Sequence[int] | None = None) -> EdgeMatrix:
    """
    Divides co-occurrence counts by the per-column occurrence count. Columns of
    classes that never occur fall back to the flat prior.
    """
    counts = np.asarray(counts, dtype=np.float64)
    occurrences = np.diag(counts)[None, :]
    values = np.divide(
        counts,
        occurrences,
        out=np.full(counts.shape, FLAT_VALUE),
        where=occurrences > 0,
    )
    np.fill_diagonal(values, DIAGONAL_VALUE)
    return EdgeMatrix(values, class_ids)


def edge_from_label_sets(
    k: int,
    samples: Iterable[LabelSet | Iterable[int]],
    class_ids: Sequence[int] | None = None,
) -> EdgeMatrix:
    """
    Conditional probability statistics over a collection of label sets.

    One sample gives the single-image edge E_x, a mini-batch gives E_b and the
    whole training set gives E_t.
    """
    k = _check_k(k)
    presence = presence_matrix(k, samples)
    return edge_from_counts(cooccurrence_counts(presence), class_ids)


def flip_edge(e: EdgeMatrix) -> EdgeMatrix:
    """
    Maps every off-diagonal v to 1 - v, so 0 and 1 swap and 0.5 stays put.
    """
    values = 1.0 - e.values
    np.fill_diagonal(values, DIAGONAL_VALUE)
    return EdgeMatrix(values, e.class_ids)


def delta(e: EdgeMatrix) -> DeltaEdge:
    values = e.values - flat_prior(e.k).values
    np.fill_diagonal(values, 0.0)
    return DeltaEdge(values)


def edge_mae(a: EdgeMatrix, b: EdgeMatrix) -> EdgeComparison:
    """
    Mean absolute error between two edges plus percentiles of |a - b|.
    """
    if a.k != b.k:
        raise EdgeValidationError(f"Cannot compare edges of size {a.k} and {b.k}.")
    if a.class_ids != b.class_ids:
        raise EdgeValidationError("Cannot compare edges over different class ids.")
    diff = np.abs(a.values - b.values)
    percentiles = np.percentile(diff, PERCENTILES)
    return EdgeComparison(
        mae=float(diff.sum() / diff.size),
        percentiles={p: float(v) for p, v in zip(PERCENTILES, percentiles)},
    )


def clip_edge(values: np.ndarray, class_ids: Sequence[int] | None = None) -> EdgeMatrix:
    """
    Clips arbitrary values into a valid edge: [0, 1] entries, unit diagonal.
    """
    values = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    np.fill_diagonal(values, DIAGONAL_VALUE)
    return EdgeMatrix(values, class_ids)


def sign_structure(e_x: EdgeMatrix) -> np.ndarray:
    """
    sign(E_x - E0) with sign(0) = 0, so the diagonal and flat-prior columns carry nothing.
    """
    return np.sign(e_x.values - FLAT_VALUE) * (1 - np.eye(e_x.k))


def alignment(e: EdgeMatrix, e_x: EdgeMatrix) -> np.ndarray:
    """
    Per-column agreement of an injected edge with a sample's true edge:
    m_j = (1/K) sum_i sign(E_x - E0)(i, j) * (E - E0)(i, j).
    """
    if e.k != e_x.k:
        raise EdgeValidationError(f"Cannot align edges of size {e.k} and {e_x.k}.")
    return (sign_structure(e_x) * delta(e).values).sum(axis=0) / e.k
