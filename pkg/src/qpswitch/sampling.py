"""Queue-proportional sampling of one output port for one input port.

``ProportionalSampler`` keeps the VOQ lengths of an input port in a binary
indexed tree: sample and update are both O(log N). ``LinearScanSampler`` is the
O(N) reference used to check it. Both map the same uniform draw onto the same
cumulative weights, so equal seeds give equal sample sequences.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import _kernels as K


class ProportionalSampler:
    """Draws index ``j`` with probability ``weights[j] / total``."""

    def __init__(self, weights: Sequence[int]) -> None:
        w = np.array(weights, dtype=np.int64)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("weights must be a non-empty 1-D sequence")
        if w.min() < 0:
            raise ValueError("weights must be nonnegative")
        self._w = w
        self._tree = np.zeros(w.size + 1, dtype=np.int64)
        K.fen_build(w, self._tree)
        self._total = int(w.sum())

    @property
    def n(self) -> int:
        return self._w.size

    @property
    def total(self) -> int:
        return self._total

    @property
    def weights(self) -> np.ndarray:
        return self._w.copy()

    def cumulative(self, index: int) -> int:
        """Inclusive prefix sum up to ``index``, read from the tree."""
        k, s = index + 1, 0
        while k > 0:
            s += int(self._tree[k])
            k -= k & -k
        return s

    def sample(self, rng: np.random.Generator) -> int | None:
        if self._total == 0:
            return None
        return int(K.fen_find(self._tree, self.n, K.draw_target(rng, self._total)))

    def find(self, target: int) -> int:
        """Index selected by the integer draw ``target`` in ``[0, total)``."""
        if not 0 <= target < self._total:
            raise ValueError(f"target {target} outside [0, {self._total})")
        return int(K.fen_find(self._tree, self.n, target))

    def update(self, index: int, new_weight: int) -> None:
        if not 0 <= index < self.n:
            raise IndexError(f"index {index} out of range for {self.n} weights")
        if new_weight < 0:
            raise ValueError("weights must be nonnegative")
        delta = int(new_weight) - int(self._w[index])
        if delta:
            K.fen_add(self._tree, self.n, index, delta)
            self._w[index] = new_weight
            self._total += delta


class LinearScanSampler:
    """Naive cumulative scan with the same interface; the test oracle."""

    def __init__(self, weights: Sequence[int]) -> None:
        self._w = np.array(weights, dtype=np.int64)
        if self._w.ndim != 1 or self._w.size == 0 or self._w.min() < 0:
            raise ValueError("weights must be a non-empty sequence of nonnegative ints")

    @property
    def total(self) -> int:
        return int(self._w.sum())

    def sample(self, rng: np.random.Generator) -> int | None:
        total = self.total
        if total == 0:
            return None
        return self.find(int(K.draw_target(rng, total)))

    def find(self, target: int) -> int:
        acc = 0
        for k, w in enumerate(self._w):
            acc += int(w)
            if acc > target:
                return k
        raise ValueError(f"target {target} outside [0, {acc})")

    def update(self, index: int, new_weight: int) -> None:
        if not 0 <= index < self._w.size:
            raise IndexError(f"index {index} out of range")
        if new_weight < 0:
            raise ValueError("weights must be nonnegative")
        self._w[index] = new_weight
