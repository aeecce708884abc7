"""Crossbar schedulers: QPS-r, iSLIP, maximum weight matching, greedy maximal.

All schedulers share one interface, ``schedule(q) -> Matching``. QPS, iSLIP and
greedy also expose a compiled kernel that the simulator drives directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import _kernels as K
from .core import Matching, _grid

__all__ = [
    "Scheduler",
    "QpsScheduler",
    "IslipScheduler",
    "IslipPointers",
    "MwmScheduler",
    "GreedyMaximalScheduler",
    "qps_r_schedule",
    "islip_schedule",
    "mwm_schedule",
    "greedy_maximal_schedule",
    "default_islip_iterations",
    "parse_scheduler",
]


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


class _Scratch:
    """Per-size work arrays reused across calls."""

    def __init__(self, n: int) -> None:
        self.match_in = np.full(n, -1, dtype=np.int64)
        self.match_out = np.full(n, -1, dtype=np.int64)
        self.best_val = np.zeros(n, dtype=np.int64)
        self.best_in = np.zeros(n, dtype=np.int64)
        self.nties = np.zeros(n, dtype=np.int64)
        self.edges = np.zeros(n * n, dtype=np.int64)
        self.tree = np.zeros((n, n + 1), dtype=np.int64)


class Scheduler:
    """Base class. Subclasses implement :meth:`match_array`."""

    kernel_kind = K.SCHED_EXTERNAL
    name = "external"

    def schedule(self, q) -> Matching:
        return Matching.from_array(self.match_array(_grid(q)))

    def match_array(self, q: np.ndarray) -> np.ndarray:
        """Input->output assignment for queue grid ``q`` (-1 = unmatched)."""
        raise NotImplementedError

    def bind(self, n: int) -> None:
        """Prepare per-switch state before a simulation over ``n`` ports."""

    @property
    def kernel_param(self) -> int:
        return 0

    @property
    def rng(self) -> np.random.Generator:
        return _NO_RNG


_NO_RNG = np.random.default_rng(0)


class QpsScheduler(Scheduler):
    kernel_kind = K.SCHED_QPS

    def __init__(self, r: int = 3, rng=None) -> None:
        if r < 1:
            raise ValueError("QPS needs at least one iteration")
        self.r = int(r)
        self._rng = _as_rng(rng)
        self._scratch: _Scratch | None = None

    @property
    def name(self) -> str:
        return f"qps:r={self.r}"

    @property
    def rng(self) -> np.random.Generator:
        return self._rng

    @property
    def kernel_param(self) -> int:
        return self.r

    def match_array(self, q: np.ndarray) -> np.ndarray:
        n = q.shape[0]
        if self._scratch is None or self._scratch.match_in.size != n:
            self._scratch = _Scratch(n)
        sc = self._scratch
        q = np.ascontiguousarray(q, dtype=np.int64)
        for i in range(n):
            K.fen_build(q[i], sc.tree[i])
        row_tot = q.sum(axis=1)
        K.qps_match(q, sc.tree, row_tot, self.r, self._rng, sc.match_in, sc.match_out,
                    sc.best_val, sc.best_in, sc.nties)
        return sc.match_in.copy()

    def departure_counts(self, q, trials: int) -> np.ndarray:
        """How often each nonempty VOQ is served over ``trials`` independent decisions on ``q``."""
        qa = np.ascontiguousarray(_grid(q), dtype=np.int64)
        n = qa.shape[0]
        sc = _Scratch(n)
        for i in range(n):
            K.fen_build(qa[i], sc.tree[i])
        counts = np.zeros((n, n), dtype=np.int64)
        K.qps_departure_counts(qa, sc.tree, qa.sum(axis=1), self.r, int(trials), self._rng, counts,
                               sc.match_in, sc.match_out, sc.best_val, sc.best_in, sc.nties)
        return counts


@dataclass
class IslipPointers:
    """Round-robin pointers: one grant pointer per output, one accept pointer per input."""

    grant_ptr: np.ndarray
    accept_ptr: np.ndarray

    @classmethod
    def initial(cls, n: int) -> "IslipPointers":
        return cls(np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64))

    def __post_init__(self) -> None:
        self.grant_ptr = np.asarray(self.grant_ptr, dtype=np.int64)
        self.accept_ptr = np.asarray(self.accept_ptr, dtype=np.int64)
        n = self.grant_ptr.size
        if self.accept_ptr.size != n:
            raise ValueError("pointer arrays must have equal length")
        if n and (self.grant_ptr.min() < 0 or self.grant_ptr.max() >= n
                  or self.accept_ptr.min() < 0 or self.accept_ptr.max() >= n):
            raise ValueError("pointers must lie in [0, N)")


def default_islip_iterations(n: int) -> int:
    return max(1, math.ceil(math.log2(n))) if n > 1 else 1


class IslipScheduler(Scheduler):
    kernel_kind = K.SCHED_ISLIP

    def __init__(self, iterations: int | None = None, pointers: IslipPointers | None = None) -> None:
        if iterations is not None and iterations < 1:
            raise ValueError("iSLIP needs at least one iteration")
        self._iterations = iterations
        self.pointers = pointers
        self._scratch: _Scratch | None = None

    @property
    def name(self) -> str:
        return "islip" if self._iterations is None else f"islip:iters={self._iterations}"

    def iterations_for(self, n: int) -> int:
        return self._iterations if self._iterations is not None else default_islip_iterations(n)

    @property
    def kernel_param(self) -> int:
        return self.iterations_for(self.pointers.grant_ptr.size)

    def bind(self, n: int) -> None:
        if self.pointers is None or self.pointers.grant_ptr.size != n:
            self.pointers = IslipPointers.initial(n)

    def match_array(self, q: np.ndarray) -> np.ndarray:
        n = q.shape[0]
        self.bind(n)
        if self._scratch is None or self._scratch.match_in.size != n:
            self._scratch = _Scratch(n)
        sc = self._scratch
        K.islip_match(np.ascontiguousarray(q, dtype=np.int64), self.iterations_for(n),
                      self.pointers.grant_ptr, self.pointers.accept_ptr,
                      sc.match_in, sc.match_out, sc.best_in, sc.best_val, sc.nties)
        return sc.match_in.copy()


def _lex_bonus_fits(q: np.ndarray) -> bool:
    n = q.shape[0]
    scale = float(n) ** n
    return n <= 8 and (float(q.max(initial=0)) + 1.0) * scale * n < 2.0 ** 52


class MwmScheduler(Scheduler):
    """Maximum weight matching with VOQ length as the weight.

    Ties are broken towards the lexicographically smallest full assignment
    ``(sigma(0), sigma(1), ...)`` whenever that preference fits exactly in
    double precision (N <= 8); larger instances use the solver's own
    deterministic choice. Zero-weight pairs are dropped from the result.
    """

    name = "mwm"

    def match_array(self, q: np.ndarray) -> np.ndarray:
        qa = np.asarray(q, dtype=np.int64)
        n = qa.shape[0]
        if n == 0:
            return np.zeros(0, dtype=np.int64)
        if _lex_bonus_fits(qa):
            scale = float(n) ** n
            place = float(n) ** (n - 1 - np.arange(n, dtype=np.float64))
            bonus = (n - 1 - np.arange(n, dtype=np.float64))[None, :] * place[:, None]
            w = qa.astype(np.float64) * scale + bonus
        else:
            w = qa.astype(np.float64)
        rows, cols = linear_sum_assignment(w, maximize=True)
        out = np.full(n, -1, dtype=np.int64)
        keep = qa[rows, cols] > 0
        out[rows[keep]] = cols[keep]
        return out


class GreedyMaximalScheduler(Scheduler):
    """Scans nonempty VOQs in uniformly random order, adding every feasible edge."""

    kernel_kind = K.SCHED_GREEDY
    name = "greedy"

    def __init__(self, rng=None) -> None:
        self._rng = _as_rng(rng)
        self._scratch: _Scratch | None = None

    @property
    def rng(self) -> np.random.Generator:
        return self._rng

    def match_array(self, q: np.ndarray) -> np.ndarray:
        n = q.shape[0]
        if self._scratch is None or self._scratch.match_in.size != n:
            self._scratch = _Scratch(n)
        sc = self._scratch
        K.greedy_match(np.ascontiguousarray(q, dtype=np.int64), self._rng,
                       sc.match_in, sc.match_out, sc.edges)
        return sc.match_in.copy()


def qps_r_schedule(q, r: int, rng) -> Matching:
    return QpsScheduler(r, _as_rng(rng)).schedule(q)


def islip_schedule(q, iterations: int, state: IslipPointers) -> Matching:
    """One iSLIP decision; ``state`` pointers are advanced in place."""
    return IslipScheduler(iterations, state).schedule(q)


def mwm_schedule(q) -> Matching:
    return MwmScheduler().schedule(q)


def greedy_maximal_schedule(q, rng) -> Matching:
    return GreedyMaximalScheduler(_as_rng(rng)).schedule(q)


def _parse_opts(body: str, spec: str) -> dict[str, str]:
    opts: dict[str, str] = {}
    for part in filter(None, body.split(";")):
        key, sep, value = part.partition("=")
        if not sep:
            raise ValueError(f"bad option {part!r} in scheduler spec {spec!r}")
        opts[key.strip()] = value.strip()
    return opts


def parse_scheduler(spec: str, rng=None) -> Scheduler:
    """Build a scheduler from ``"qps:r=3"``, ``"islip:iters=6"``, ``"mwm"`` or ``"greedy"``."""
    kind, _, body = spec.strip().partition(":")
    opts = _parse_opts(body, spec)
    kind = kind.lower()
    try:
        if kind == "qps":
            sched: Scheduler = QpsScheduler(int(opts.pop("r", 3)), rng)
        elif kind == "islip":
            iters = opts.pop("iters", None)
            sched = IslipScheduler(None if iters is None else int(iters))
        elif kind == "mwm":
            sched = MwmScheduler()
        elif kind == "greedy":
            sched = GreedyMaximalScheduler(rng)
        else:
            raise ValueError(f"unknown scheduler kind {kind!r}")
    except ValueError as exc:
        raise ValueError(f"invalid scheduler spec {spec!r}: {exc}") from None
    if opts:
        raise ValueError(f"unknown option(s) {sorted(opts)} in scheduler spec {spec!r}")
    return sched
