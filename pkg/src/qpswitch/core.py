"""Queue, arrival and departure matrices, matchings, and the per-slot update law.

Indices are 0-based everywhere in code and in every external format.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

_INT_MAX = np.iinfo(np.int64).max


class PreconditionError(ValueError):
    """An operation was called with inputs violating its precondition."""


def _as_count_grid(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.int64, copy=True)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValueError(f"{name} must be a square N x N grid, got shape {arr.shape}")
    if arr.size and arr.min() < 0:
        raise ValueError(f"{name} entries must be nonnegative")
    arr.setflags(write=False)
    return arr


class _CountMatrix:
    """Immutable square grid of nonnegative integers with cached marginals."""

    _label = "matrix"

    def __init__(self, values) -> None:
        self._m = _as_count_grid(values, self._label)

    @classmethod
    def zeros(cls, n: int):
        return cls(np.zeros((n, n), dtype=np.int64))

    @property
    def n(self) -> int:
        return self._m.shape[0]

    @property
    def array(self) -> np.ndarray:
        """Read-only view of the underlying int64 grid."""
        return self._m

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self._m.copy() if copy else self._m
        return self._m.astype(dtype)

    def __getitem__(self, idx):
        return self._m[idx]

    def __eq__(self, other) -> bool:
        if not isinstance(other, _CountMatrix):
            return NotImplemented
        return type(self) is type(other) and np.array_equal(self._m, other._m)

    def __hash__(self) -> int:
        return hash((type(self).__name__, self._m.tobytes()))

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self._m.tolist()})"

    @cached_property
    def row_sums(self) -> np.ndarray:
        out = self._m.sum(axis=1)
        out.setflags(write=False)
        return out

    @cached_property
    def col_sums(self) -> np.ndarray:
        out = self._m.sum(axis=0)
        out.setflags(write=False)
        return out

    @cached_property
    def total(self) -> int:
        return int(self._m.sum())

    @cached_property
    def dagger(self) -> np.ndarray:
        """Cross sums: row_sum(i) + col_sum(j) - m[i, j] for every (i, j)."""
        out = self.row_sums[:, None] + self.col_sums[None, :] - self._m
        out.setflags(write=False)
        return out


class QueueMatrix(_CountMatrix):
    """VOQ lengths ``q[i, j]``: packets at input ``i`` destined to output ``j``."""

    _label = "queue matrix"


class ArrivalMatrix(_CountMatrix):
    """Packets arriving to each VOQ during one slot."""

    _label = "arrival matrix"


class DepartureMatrix(_CountMatrix):
    """0/1 grid of packets leaving each VOQ during one slot."""

    _label = "departure matrix"

    def __init__(self, values) -> None:
        super().__init__(values)
        m = self._m
        if m.size and m.max() > 1:
            raise ValueError("departure entries must be 0 or 1")
        if m.size and (m.sum(axis=1).max() > 1 or m.sum(axis=0).max() > 1):
            raise ValueError("at most one departure per input and per output")


@dataclass(frozen=True)
class Matching:
    """A crossbar schedule: set of (input, output) pairs.

    Construction does not validate; use :func:`is_matching`. Schedulers may emit
    pairs whose VOQ is empty.
    """

    pairs: frozenset[tuple[int, int]] = frozenset()

    def __init__(self, pairs: Iterable[tuple[int, int]] = ()) -> None:
        object.__setattr__(self, "pairs", frozenset((int(i), int(j)) for i, j in pairs))

    def __iter__(self) -> Iterator[tuple[int, int]]:
        return iter(sorted(self.pairs))

    def __len__(self) -> int:
        return len(self.pairs)

    def __contains__(self, pair) -> bool:
        return tuple(pair) in self.pairs

    @classmethod
    def from_array(cls, match_in: np.ndarray) -> "Matching":
        """Build from an input->output array where -1 marks an unmatched input."""
        return cls((i, int(j)) for i, j in enumerate(match_in) if j >= 0)

    def to_array(self, n: int) -> np.ndarray:
        out = np.full(n, -1, dtype=np.int64)
        for i, j in self.pairs:
            out[i] = j
        return out

    def weight(self, q) -> int:
        qa = np.asarray(q)
        return int(sum(qa[i, j] for i, j in self.pairs))


def _grid(m) -> np.ndarray:
    return np.asarray(m.array if isinstance(m, _CountMatrix) else m, dtype=np.int64)


def apply_slot(q: QueueMatrix, d: DepartureMatrix, a: ArrivalMatrix) -> QueueMatrix:
    """Return ``Q(t+1) = Q(t) - D(t) + A(t)``."""
    qa, da, aa = _grid(q), _grid(d), _grid(a)
    if not (qa.shape == da.shape == aa.shape):
        raise ValueError(f"dimension mismatch: {qa.shape}, {da.shape}, {aa.shape}")
    if np.any(da > qa):
        raise PreconditionError("departure from an empty VOQ")
    if aa.size and int(aa.max()) > _INT_MAX - int(qa.max()):
        raise OverflowError("VOQ length overflow")
    return QueueMatrix(qa - da + aa)


def neighborhood_sum(m, i: int, j: int) -> int:
    """Total over row ``i`` and column ``j``, counting ``m[i, j]`` once."""
    ma = _grid(m)
    n = ma.shape[0]
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"({i}, {j}) out of range for N={n}")
    return int(ma[i, :].sum() + ma[:, j].sum() - ma[i, j])


def is_matching(m: Matching) -> bool:
    ins = [i for i, _ in m.pairs]
    outs = [j for _, j in m.pairs]
    return len(set(ins)) == len(ins) and len(set(outs)) == len(outs)


def is_maximal(m: Matching, q) -> bool:
    """True iff no nonempty VOQ joins an unmatched input to an unmatched output."""
    qa = _grid(q)
    n = qa.shape[0]
    free_in = np.ones(n, dtype=bool)
    free_out = np.ones(n, dtype=bool)
    for i, j in m.pairs:
        free_in[i] = False
        free_out[j] = False
    return not np.any((qa > 0) & free_in[:, None] & free_out[None, :])


def departures_from(m: Matching, q) -> DepartureMatrix:
    qa = _grid(q)
    d = np.zeros_like(qa)
    for i, j in m.pairs:
        if qa[i, j] > 0:
            d[i, j] = 1
    return DepartureMatrix(d)


def read_matrix_csv(source: str | Path | io.TextIOBase) -> np.ndarray:
    """Parse a row-major CSV grid of nonnegative integers."""
    if isinstance(source, (str, Path)):
        text = Path(source).read_text()
    else:
        text = source.read()
    rows = [[int(x) for x in row] for row in csv.reader(io.StringIO(text)) if row]
    arr = np.array(rows, dtype=np.int64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValueError(f"CSV grid must be square, got shape {arr.shape}")
    if arr.size and arr.min() < 0:
        raise ValueError("CSV grid entries must be nonnegative")
    return arr


def write_matrix_csv(m, dest: str | Path | io.TextIOBase) -> None:
    ma = _grid(m)
    text = "".join(",".join(str(int(x)) for x in row) + "\n" for row in ma)
    if isinstance(dest, (str, Path)):
        Path(dest).write_text(text)
    else:
        dest.write(text)
