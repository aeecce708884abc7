"""Traffic rate matrices, the four standard patterns, and arrival sources.

Sources emit one :class:`~qpswitch.core.ArrivalMatrix` per slot from their own
``numpy.random.Generator``; the simulator drives the same compiled generators
through :meth:`ArrivalSource.kernel_fields`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from . import _kernels as K
from .core import ArrivalMatrix

PATTERNS = ("uniform", "quasi-diagonal", "log-diagonal", "diagonal")
_NORM_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class TrafficRateMatrix:
    """Normalized mean arrival rates ``lam[i, j]`` per VOQ."""

    lam: np.ndarray

    def __post_init__(self) -> None:
        lam = np.array(self.lam, dtype=np.float64, copy=True)
        if lam.ndim != 2 or lam.shape[0] != lam.shape[1]:
            raise ValueError(f"rate matrix must be square, got shape {lam.shape}")
        if lam.size and (lam.min() < 0.0 or lam.max() > 1.0):
            raise ValueError("every rate must lie in [0, 1]")
        lam.setflags(write=False)
        object.__setattr__(self, "lam", lam)

    @property
    def n(self) -> int:
        return self.lam.shape[0]

    @cached_property
    def row_sums(self) -> np.ndarray:
        return self.lam.sum(axis=1)

    @cached_property
    def col_sums(self) -> np.ndarray:
        return self.lam.sum(axis=0)

    @cached_property
    def dagger(self) -> np.ndarray:
        """Neighborhood rate sums ``Lambda_i* + Lambda_*j - lambda_ij``."""
        return self.row_sums[:, None] + self.col_sums[None, :] - self.lam

    @cached_property
    def rho(self) -> float:
        return max_load_factor(self.lam)

    @property
    def total(self) -> float:
        return float(self.lam.sum())

    def is_normalized(self, tol: float = _NORM_TOL) -> bool:
        return bool(np.allclose(self.row_sums, 1.0, atol=tol, rtol=0)
                    and np.allclose(self.col_sums, 1.0, atol=tol, rtol=0))


def max_load_factor(lam) -> float:
    """Largest row or column sum of a rate matrix."""
    arr = lam.lam if isinstance(lam, TrafficRateMatrix) else np.asarray(lam, dtype=np.float64)
    if arr.size == 0:
        return 0.0
    return float(max(arr.sum(axis=1).max(), arr.sum(axis=0).max()))


def pattern_matrix(kind: str, n: int) -> TrafficRateMatrix:
    """Doubly stochastic pattern: uniform, quasi-diagonal, log-diagonal or diagonal."""
    if n < 2:
        raise ValueError("patterns need n >= 2")
    idx = np.arange(n)
    offset = (idx[None, :] - idx[:, None]) % n  # cyclic distance from the diagonal
    if kind == "uniform":
        lam = np.full((n, n), 1.0 / n)
    elif kind == "quasi-diagonal":
        lam = np.full((n, n), 1.0 / (2 * (n - 1)))
        np.fill_diagonal(lam, 0.5)
    elif kind == "log-diagonal":
        # diagonal gets 2^(n-1)/(2^n-1); each next output (cyclically) half the previous
        head = 1.0 / (2.0 - 2.0 ** (1 - n))
        lam = head * np.exp2(-offset.astype(np.float64))
    elif kind == "diagonal":
        lam = np.where(offset == 0, 2.0 / 3.0, np.where(offset == 1, 1.0 / 3.0, 0.0))
    else:
        raise ValueError(f"unknown traffic pattern {kind!r}; expected one of {PATTERNS}")
    return TrafficRateMatrix(lam)


def rate_matrix(pattern: TrafficRateMatrix, offered_load: float) -> TrafficRateMatrix:
    if not 0.0 < offered_load <= 1.0:
        raise ValueError(f"offered load must be in (0, 1], got {offered_load}")
    if not pattern.is_normalized():
        raise ValueError("pattern must have every row and column summing to 1")
    return TrafficRateMatrix(pattern.lam * offered_load)


def _row_cum(lam: np.ndarray) -> np.ndarray:
    """Per-row cumulative destination law; entries from the last positive rate on are +inf."""
    n = lam.shape[0]
    out = np.full((n, n), np.inf)
    for i in range(n):
        row = lam[i]
        tot = row.sum()
        if tot <= 0:
            continue
        last = int(np.flatnonzero(row > 0)[-1])
        out[i, :last] = np.cumsum(row[:last]) / tot
    return out


@dataclass
class MomentProfile:
    """Sample mean, variance and lag-k autocovariance of each VOQ's arrivals."""

    mean: np.ndarray
    sigma2: np.ndarray
    theta: np.ndarray  # shape (n, n, max_lag); theta[..., k-1] is lag k
    slots: int


class ArrivalSource:
    """Base class for per-slot arrival generators."""

    kind = K.SRC_NONE
    a_max = 0

    def __init__(self, n: int, rng=None) -> None:
        self.n = n
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self._ai = np.zeros(n * n, dtype=np.int64)
        self._aj = np.zeros(n * n, dtype=np.int64)
        self._ac = np.zeros(n * n, dtype=np.int64)

    @property
    def rates(self) -> TrafficRateMatrix:
        return TrafficRateMatrix(np.zeros((self.n, self.n)))

    @property
    def spec(self) -> str:
        return "none"

    def kernel_fields(self) -> tuple:
        f1 = np.zeros(1)
        f2 = np.zeros((1, 1))
        f4 = np.zeros((1, 1, 1, 1))
        i1 = np.zeros(1, dtype=np.int64)
        i2 = np.zeros((1, 1), dtype=np.int64)
        i3 = np.zeros((1, 1, 1), dtype=np.int64)
        return (f1, f2, f2, f4, i1, i1, i1, i2, i2, i3, np.zeros(2))

    def next(self) -> ArrivalMatrix:
        """Advance one slot and return its arrivals."""
        m = K.gen_arrivals(self.kind, *self.kernel_fields(), self.rng, self._ai, self._aj, self._ac)
        a = np.zeros((self.n, self.n), dtype=np.int64)
        np.add.at(a, (self._ai[:m], self._aj[:m]), self._ac[:m])
        return ArrivalMatrix(a)


class ZeroSource(ArrivalSource):
    """No arrivals, ever."""


class BernoulliSource(ArrivalSource):
    """Each VOQ independently receives one packet w.p. ``lambda_ij`` per slot."""

    kind = K.SRC_BERNOULLI
    a_max = 1

    def __init__(self, rates: TrafficRateMatrix, rng=None) -> None:
        super().__init__(rates.n, rng)
        self._rates = rates
        lam = rates.lam
        always = lam >= 1.0
        with np.errstate(divide="ignore"):
            step = np.where(always, 0.0, np.log1p(-np.where(always, 0.0, lam)))
        self._logsurv = np.cumsum(step, axis=1)
        width = max(1, int(always.sum(axis=1).max(initial=0)))
        self._always = np.full((self.n, width), -1, dtype=np.int64)
        for i in range(self.n):
            cols = np.flatnonzero(always[i])
            self._always[i, : cols.size] = cols

    @property
    def rates(self) -> TrafficRateMatrix:
        return self._rates

    @property
    def spec(self) -> str:
        return "bernoulli"

    def kernel_fields(self) -> tuple:
        f1, _, _, f4, i1, _, _, i2, _, i3, fpar = super().kernel_fields()
        return (f1, self._logsurv, self._logsurv, f4, i1, i1, i1, self._always, i2, i3, fpar)


class OnOffSource(ArrivalSource):
    """Two-phase bursty source.

    Every input receives one packet per slot w.p. its row load in both phases.
    In OFF the destination follows the row's destination law; entering ON
    draws one destination from the same law and every packet of the burst
    goes there. Phase lengths are geometric on {0, 1, ...} with means
    ``burst`` (ON) and ``off_mean`` (OFF, defaults to ``burst``).
    """

    kind = K.SRC_ONOFF
    a_max = 1

    def __init__(self, rates: TrafficRateMatrix, burst: float, rng=None,
                 off_mean: float | None = None) -> None:
        super().__init__(rates.n, rng)
        if burst < 1:
            raise ValueError("mean burst length must be >= 1")
        off_mean = burst if off_mean is None else off_mean
        if off_mean < 0:
            raise ValueError("mean OFF length must be >= 0")
        self._rates = rates
        self.burst = float(burst)
        self.off_mean = float(off_mean)
        self.p_on = 1.0 / (self.burst + 1.0)
        self.p_off = 1.0 / (self.off_mean + 1.0)
        self._row_load = np.minimum(rates.row_sums, 1.0)
        self._row_cum = _row_cum(rates.lam)
        n = rates.n
        frac_on = self.burst / (self.burst + self.off_mean)
        self.phase = (self.rng.random(n) < frac_on).astype(np.int64)
        self.remaining = np.zeros(n, dtype=np.int64)
        self.dest = np.zeros(n, dtype=np.int64)
        for i in range(n):
            if self._row_load[i] <= 0:
                continue
            p = self.p_on if self.phase[i] else self.p_off
            self.remaining[i] = self.rng.geometric(p) - 1
            if self.phase[i]:
                self.dest[i] = K._row_sample(self._row_cum[i], self.rng.random())
        self._fpar = np.array([self.p_on, self.p_off])

    @property
    def rates(self) -> TrafficRateMatrix:
        return self._rates

    @property
    def spec(self) -> str:
        if self.off_mean == self.burst:
            return f"onoff:burst={self.burst:g}"
        return f"onoff:burst={self.burst:g};off_mean={self.off_mean:g}"

    @property
    def mean_on_duration(self) -> float:
        return (1.0 - self.p_on) / self.p_on

    def kernel_fields(self) -> tuple:
        _, f2, _, f4, _, _, _, i2, _, i3, _ = super().kernel_fields()
        return (self._row_load, f2, self._row_cum, f4, self.phase, self.remaining, self.dest,
                i2, i2, i3, self._fpar)


@dataclass(frozen=True, eq=False)
class ChainSpec:
    """Finite DTMC with an integer emission per state."""

    transition: np.ndarray
    emission: np.ndarray

    def __post_init__(self) -> None:
        p = np.array(self.transition, dtype=np.float64)
        e = np.array(self.emission, dtype=np.int64)
        if p.ndim != 2 or p.shape[0] != p.shape[1] or p.shape[0] == 0:
            raise ValueError("transition matrix must be square and non-empty")
        if e.shape != (p.shape[0],):
            raise ValueError("need exactly one emission per state")
        if p.min() < 0 or not np.allclose(p.sum(axis=1), 1.0, atol=1e-9, rtol=0):
            raise ValueError("transition rows must be nonnegative and sum to 1")
        if e.min() < 0:
            raise ValueError("emissions must be nonnegative")
        object.__setattr__(self, "transition", p)
        object.__setattr__(self, "emission", e)

    @property
    def states(self) -> int:
        return self.emission.size

    @cached_property
    def stationary(self) -> np.ndarray:
        s = self.states
        a = np.vstack([self.transition.T - np.eye(s), np.ones(s)])
        b = np.zeros(s + 1)
        b[-1] = 1.0
        pi, *_ = np.linalg.lstsq(a, b, rcond=None)
        pi = np.clip(pi, 0.0, None)
        return pi / pi.sum()

    @property
    def rate(self) -> float:
        return float(self.stationary @ self.emission)

    @property
    def variance(self) -> float:
        pi, e = self.stationary, self.emission.astype(np.float64)
        return float(pi @ e**2 - (pi @ e) ** 2)

    def autocovariance(self, lag: int) -> float:
        """Exact steady-state ``E[a(t+k) a(t)] - rate^2``."""
        pi, e = self.stationary, self.emission.astype(np.float64)
        pk = np.linalg.matrix_power(self.transition, lag)
        return float((pi * e) @ pk @ e - (pi @ e) ** 2)


class MarkovSource(ArrivalSource):
    """``a_ij(t) = eta(x_ij(t))`` for independent per-VOQ chains started in steady state."""

    kind = K.SRC_MARKOV

    def __init__(self, chains, rng=None, a_max: int | None = None, spec: str | None = None) -> None:
        grid = np.asarray(chains, dtype=object)
        if grid.ndim != 2 or grid.shape[0] != grid.shape[1]:
            raise ValueError("need an N x N grid of chain specs")
        n = grid.shape[0]
        super().__init__(n, rng)
        smax = max(c.states for c in grid.flat)
        emax = max(int(c.emission.max()) for c in grid.flat)
        self.a_max = emax if a_max is None else int(a_max)
        if emax > self.a_max:
            raise ValueError(f"emission {emax} exceeds declared a_max {self.a_max}")
        self.chains = grid
        self._spec = spec or "markov"
        self._trans_cum = np.full((n, n, smax, smax), np.inf)
        self._emission = np.zeros((n, n, smax), dtype=np.int64)
        self._nstates = np.zeros((n, n), dtype=np.int64)
        self.state = np.zeros((n, n), dtype=np.int64)
        for i in range(n):
            for j in range(n):
                c = grid[i, j]
                s = c.states
                self._trans_cum[i, j, :s, :s] = _row_cum(c.transition)
                self._emission[i, j, :s] = c.emission
                self._nstates[i, j] = s
                cum = np.cumsum(c.stationary)
                self.state[i, j] = min(int(np.searchsorted(cum, self.rng.random(), side="right")), s - 1)
        self._rates = TrafficRateMatrix(np.array([[c.rate for c in row] for row in grid]))

    @classmethod
    def shared(cls, chain: ChainSpec, n: int, rng=None, a_max: int | None = None,
               spec: str | None = None) -> "MarkovSource":
        return cls([[chain] * n for _ in range(n)], rng, a_max, spec)

    @property
    def rates(self) -> TrafficRateMatrix:
        return self._rates

    @property
    def spec(self) -> str:
        return self._spec

    def kernel_fields(self) -> tuple:
        f1, f2, _, _, i1, _, _, _, _, _, fpar = super().kernel_fields()
        return (f1, f2, f2, self._trans_cum, i1, i1, i1, self._nstates, self.state,
                self._emission, fpar)


def load_chain_spec(path: str | Path, n: int, rng=None, spec: str | None = None) -> MarkovSource:
    """Read a JSON chain-spec file.

    Either ``{"shared": {"transition": [[...]], "emission": [...]}}`` applied to
    every VOQ, or ``{"voqs": [[{...}, ...], ...]}`` with one chain per VOQ.
    An optional ``"a_max"`` declares the emission bound.
    """
    doc = json.loads(Path(path).read_text())
    a_max = doc.get("a_max")
    if "shared" in doc:
        c = doc["shared"]
        return MarkovSource.shared(ChainSpec(c["transition"], c["emission"]), n, rng, a_max, spec)
    if "voqs" in doc:
        grid = [[ChainSpec(c["transition"], c["emission"]) for c in row] for row in doc["voqs"]]
        if len(grid) != n or any(len(row) != n for row in grid):
            raise ValueError(f"chain spec grid must be {n} x {n}")
        return MarkovSource(grid, rng, a_max, spec)
    raise ValueError("chain spec needs a 'shared' or 'voqs' entry")


def _parse_opts(body: str, spec: str) -> dict[str, str]:
    opts: dict[str, str] = {}
    for part in filter(None, body.split(";")):
        key, sep, value = part.partition("=")
        if not sep:
            raise ValueError(f"bad option {part!r} in source spec {spec!r}")
        opts[key.strip()] = value.strip()
    return opts


def parse_source(spec: str, rates: TrafficRateMatrix, rng=None) -> ArrivalSource:
    """Build a source from ``"bernoulli"``, ``"onoff:burst=256"``, ``"markov:file=..."`` or ``"none"``."""
    kind, _, body = spec.strip().partition(":")
    opts = _parse_opts(body, spec)
    kind = kind.lower()
    if kind == "bernoulli":
        src: ArrivalSource = BernoulliSource(rates, rng)
    elif kind == "onoff":
        if "burst" not in opts:
            raise ValueError(f"source spec {spec!r} needs burst=<mean ON length>")
        off = opts.pop("off_mean", None)
        src = OnOffSource(rates, float(opts.pop("burst")), rng,
                          None if off is None else float(off))
    elif kind == "markov":
        if "file" not in opts:
            raise ValueError(f"source spec {spec!r} needs file=<chain spec>")
        src = load_chain_spec(opts.pop("file"), rates.n, rng, spec.strip())
    elif kind == "none":
        src = ZeroSource(rates.n, rng)
    else:
        raise ValueError(f"unknown source kind {kind!r}")
    if opts:
        raise ValueError(f"unknown option(s) {sorted(opts)} in source spec {spec!r}")
    return src


def arrival_batches(src: ArrivalSource, batches: int, slots_per_batch: int) -> np.ndarray:
    """Per-VOQ arrival totals for consecutive batches of slots, shape (batches, n, n)."""
    out = np.zeros((batches, src.n, src.n), dtype=np.int64)
    K.batched_arrival_counts(src.kind, *src.kernel_fields(), src.rng, src._ai, src._aj, src._ac,
                             int(slots_per_batch), out)
    return out


def estimate_moments(src: ArrivalSource, slots: int, max_lag: int = 10) -> MomentProfile:
    """Sample variance and autocovariance at lags 1..max_lag for every VOQ."""
    if slots < 10_000:
        raise ValueError("moment estimates need at least 10^4 slots")
    n = src.n
    series = np.empty((slots, n, n), dtype=np.int32)
    for t in range(slots):
        series[t] = src.next().array
    x = series.astype(np.float64)
    mean = x.mean(axis=0)
    xc = x - mean
    sigma2 = (xc**2).mean(axis=0)
    theta = np.empty((n, n, max_lag))
    for k in range(1, max_lag + 1):
        theta[..., k - 1] = (xc[k:] * xc[:-k]).sum(axis=0) / slots
    return MomentProfile(mean=mean, sigma2=sigma2, theta=theta, slots=slots)
