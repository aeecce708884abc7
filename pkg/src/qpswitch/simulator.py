"""Time-slotted switch simulation, the batch-means stopping rule and the knee search.

Each slot: the scheduler matches on Q(t); every matched nonempty VOQ sends its
head-of-line packet; then the slot's arrivals join, stamped with ``t``. A packet
arriving in slot ``t`` can leave in slot ``t + 1`` at the earliest, so the
reported delay ``depart_slot - arrival_slot`` is at least 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import stats as st

from . import _kernels as K
from .core import QueueMatrix, _grid
from .schedulers import Scheduler, parse_scheduler
from .traffic import ArrivalSource, parse_source, pattern_matrix, rate_matrix

# knee probe constants
GROWTH_THRESHOLD = 1.2
AMBIGUOUS_BAND = (1.1, 1.3)


@dataclass(frozen=True)
class SimConfig:
    n: int
    scheduler: str = "qps:r=1"
    source: str = "bernoulli"
    pattern: str = "uniform"
    load: float = 0.5
    seed: int = 0
    min_slots_factor: float = 500.0
    relative_precision: float = 0.01
    confidence: float = 0.98
    max_slots: int | None = None
    discard_warmup: bool = False
    track_delay: bool = True
    check_property1: bool = False
    batches: int = 30

    def __post_init__(self) -> None:
        if self.n < 2:
            raise ValueError("n must be >= 2")
        if not 0.0 < self.load < 1.0:
            raise ValueError(f"load must lie in (0, 1), got {self.load}")
        if self.relative_precision <= 0:
            raise ValueError("relative precision must be positive")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must lie in (0, 1)")
        if self.batches < 2:
            raise ValueError("batch means need at least 2 batches")
        if self.max_slots is not None and self.max_slots < 1:
            raise ValueError("max_slots must be positive")

    @property
    def min_slots(self) -> int:
        """Mandatory run length, ``min_slots_factor * n^2``."""
        return int(math.ceil(self.min_slots_factor * self.n * self.n))

    @property
    def slot_cap(self) -> int:
        if self.max_slots is not None:
            return max(self.max_slots, 1)
        return 10 * self.min_slots * (2 if self.discard_warmup else 1)


@dataclass(frozen=True)
class SimResult:
    mean_delay: float
    delay_ci_halfwidth: float
    mean_total_queue_length: float
    queue_ci_halfwidth: float
    slots_run: int
    measured_slots: int
    packets_arrived: int
    packets_departed: int
    final_backlog: int
    arrival_rate: float  # packets per slot over the measured window, whole switch
    throughput: float  # departures per slot per port over the measured window
    converged: bool
    property1_violations: int
    fifo_violations: int


@dataclass(frozen=True)
class KneeResult:
    """Outcome of a bisection on offered load."""

    knee: float
    lo: float
    hi: float
    probes: tuple  # (load, ratio, sustainable) per probe
    flagged: bool  # some probe stayed ambiguous after the retry

    def __float__(self) -> float:
        return self.knee


def batch_means(num: np.ndarray, den: np.ndarray, batches: int, confidence: float):
    """Ratio estimate ``sum(num)/sum(den)`` with a batch-means CI half-width."""
    total = float(den.sum())
    if total == 0:
        return 0.0, 0.0
    mean = float(num.sum()) / total
    if num.size < batches:
        return mean, math.inf
    nb = np.array([c.sum() for c in np.array_split(num, batches)])
    db = np.array([c.sum() for c in np.array_split(den, batches)])
    if np.any(db == 0):
        if not np.any(nb):
            return mean, 0.0
        return mean, math.inf
    ratios = nb / db
    tq = st.t.ppf(0.5 + confidence / 2.0, batches - 1)
    return mean, float(tq * ratios.std(ddof=1) / math.sqrt(batches))


class Simulation:
    """Mutable switch state driven slot by slot by the compiled engine."""

    def __init__(self, n: int, scheduler: Scheduler, source: ArrivalSource, *,
                 initial_queue=None, track_delay: bool = True,
                 check_property1: bool = False, measure_from: int = 0,
                 stat_block: int = 1024) -> None:
        if source.n != n:
            raise ValueError(f"source is for N={source.n}, switch has N={n}")
        self.n = n
        self.scheduler = scheduler
        self.source = source
        self.track_delay = track_delay
        self.check_property1 = check_property1
        self.measure_from = int(measure_from)
        self.stat_block = max(1, int(stat_block))
        self.t = 0
        scheduler.bind(n)

        q0 = np.zeros((n, n), dtype=np.int64) if initial_queue is None else _grid(initial_queue).copy()
        if q0.shape != (n, n) or (q0.size and q0.min() < 0):
            raise ValueError("initial queue must be an N x N grid of nonnegative counts")
        self._q = np.ascontiguousarray(q0)
        self._row_tot = self._q.sum(axis=1)
        self._col_tot = self._q.sum(axis=0)
        self._tree = np.zeros((n, n + 1), dtype=np.int64)
        for i in range(n):
            K.fen_build(self._q[i], self._tree[i])
        self._counters = np.zeros(K.N_COUNTERS, dtype=np.int64)
        self._counters[K.C_TOTAL_Q] = int(self._q.sum())
        self._counters[K.C_FREE_HEAD] = -1
        self._initial_total = int(self._q.sum())

        self._headroom = n * n * max(1, source.a_max) + 1
        self._pool_data = np.zeros((0, K.BLOCK), dtype=np.int64)
        self._pool_next = np.zeros(0, dtype=np.int64)
        self._voq_ptr = np.full((n * n, 4), -1, dtype=np.int64)
        self._voq_ptr[:, 1] = 0
        self._voq_ptr[:, 3] = 0
        self._last_ts = np.full(n * n, np.iinfo(np.int64).min // 2, dtype=np.int64)
        if track_delay:
            need = int(sum(-(-int(c) // K.BLOCK) for c in q0.flat)) + 2 * self._headroom
            self._grow_pool(max(1024, need))
            for v in np.flatnonzero(q0.ravel()):
                for _ in range(int(q0.flat[v])):
                    K.fifo_push(self._pool_data, self._pool_next, self._voq_ptr,
                                self._counters, v, -1)
        else:
            self._grow_pool(1)
        self._stats = np.zeros((64, K.N_STATS))

        self._grant_ptr = np.zeros(n, dtype=np.int64)
        self._accept_ptr = np.zeros(n, dtype=np.int64)
        pointers = getattr(scheduler, "pointers", None)
        if pointers is not None:
            self._grant_ptr = pointers.grant_ptr
            self._accept_ptr = pointers.accept_ptr
        self._ext = np.full(n, -1, dtype=np.int64)
        self._match_in = np.full(n, -1, dtype=np.int64)
        self._match_out = np.full(n, -1, dtype=np.int64)
        self._best_val = np.zeros(n, dtype=np.int64)
        self._best_in = np.zeros(n, dtype=np.int64)
        self._nties = np.zeros(n, dtype=np.int64)
        self._edges = np.zeros(n * n, dtype=np.int64)
        self._ai = np.zeros(n * n, dtype=np.int64)
        self._aj = np.zeros(n * n, dtype=np.int64)
        self._ac = np.zeros(n * n, dtype=np.int64)

    # ------------------------------------------------------------ state
    @property
    def q(self) -> QueueMatrix:
        return QueueMatrix(self._q)

    @property
    def packets_arrived(self) -> int:
        """Arrivals since slot 0, counting the initial backlog."""
        return int(self._counters[K.C_ARRIVED]) + self._initial_total

    @property
    def packets_departed(self) -> int:
        return int(self._counters[K.C_DEPARTED])

    @property
    def backlog(self) -> int:
        return int(self._counters[K.C_TOTAL_Q])

    @property
    def property1_violations(self) -> int:
        return int(self._counters[K.C_P1_VIOL])

    @property
    def fifo_violations(self) -> int:
        return int(self._counters[K.C_FIFO_VIOL])

    @property
    def stats(self) -> np.ndarray:
        """Per stat-block rows of (delay sum, departed, queue sum, arrived, slots)."""
        if self.t <= self.measure_from:
            return self._stats[:0]
        rows = (self.t - 1 - self.measure_from) // self.stat_block + 1
        return self._stats[:rows]

    # ----------------------------------------------------------- engine
    def _grow_pool(self, extra: int) -> None:
        old = self._pool_next.size
        self._pool_data = np.concatenate([self._pool_data, np.zeros((extra, K.BLOCK), dtype=np.int64)])
        nxt = np.empty(old + extra, dtype=np.int64)
        nxt[:old] = self._pool_next
        nxt[old:-1] = np.arange(old + 1, old + extra)
        nxt[-1] = self._counters[K.C_FREE_HEAD]
        self._pool_next = nxt
        self._counters[K.C_FREE_HEAD] = old
        self._counters[K.C_FREE_COUNT] += extra

    def _ensure_stat_rows(self, t_end: int) -> None:
        if t_end <= self.measure_from:
            return
        rows = (t_end - 1 - self.measure_from) // self.stat_block + 1
        if rows > self._stats.shape[0]:
            grown = np.zeros((max(rows, 2 * self._stats.shape[0]), K.N_STATS))
            grown[: self._stats.shape[0]] = self._stats
            self._stats = grown

    def _call(self, nslots: int) -> int:
        src = self.source
        sch = self.scheduler
        return K.advance(
            nslots, self.t, self.measure_from, self.stat_block, self._headroom,
            self._q, self._row_tot, self._col_tot, self._tree,
            self._pool_data, self._pool_next, self._voq_ptr, self._counters, self._last_ts,
            self._stats, self.track_delay, self.check_property1,
            sch.kernel_kind, sch.kernel_param, self._grant_ptr, self._accept_ptr, self._ext, sch.rng,
            src.kind, *src.kernel_fields(), src.rng,
            self._match_in, self._match_out, self._best_val, self._best_in, self._nties,
            self._edges, self._ai, self._aj, self._ac,
        )

    def _external_match(self) -> None:
        m = np.asarray(self.scheduler.match_array(self._q.copy()), dtype=np.int64)
        used = m[m >= 0]
        if m.shape != (self.n,) or used.max(initial=-1) >= self.n or len(set(used.tolist())) != used.size:
            raise ValueError(f"scheduler {self.scheduler.name!r} returned an invalid matching")
        self._ext[:] = m

    def advance(self, nslots: int) -> None:
        """Simulate ``nslots`` more slots."""
        end = self.t + int(nslots)
        self._ensure_stat_rows(end)
        external = self.scheduler.kernel_kind == K.SCHED_EXTERNAL
        while self.t < end:
            want = 1 if external else end - self.t
            if external:
                self._external_match()
            done = self._call(want)
            self.t += done
            if done < want:
                self._grow_pool(max(self._pool_next.size, 2 * self._headroom))

    def queue_series(self) -> np.ndarray:
        """Mean total queue length per measured stat block."""
        s = self.stats
        with np.errstate(invalid="ignore", divide="ignore"):
            return s[:, K.S_QUEUE_SUM] / s[:, K.S_SLOTS]


def _rngs(seed: int):
    sched_seq, src_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(sched_seq), np.random.default_rng(src_seq)


def build_simulation(config: SimConfig, *, initial_queue=None, measure_from: int | None = None,
                     stat_block: int | None = None) -> Simulation:
    """Wire scheduler, source and state for one run of ``config``."""
    sched_rng, src_rng = _rngs(config.seed)
    scheduler = parse_scheduler(config.scheduler, sched_rng)
    rates = rate_matrix(pattern_matrix(config.pattern, config.n), config.load)
    source = parse_source(config.source, rates, src_rng)
    if measure_from is None:
        measure_from = config.min_slots if config.discard_warmup else 0
    if stat_block is None:
        stat_block = max(1, config.min_slots // (8 * config.batches))
    return Simulation(config.n, scheduler, source, initial_queue=initial_queue,
                      track_delay=config.track_delay, check_property1=config.check_property1,
                      measure_from=measure_from, stat_block=stat_block)


def _summarize(sim: Simulation, config: SimConfig, converged: bool) -> SimResult:
    s = sim.stats
    delay, delay_hw = batch_means(s[:, K.S_DELAY_SUM], s[:, K.S_DEPARTED], config.batches,
                                  config.confidence)
    queue, queue_hw = batch_means(s[:, K.S_QUEUE_SUM], s[:, K.S_SLOTS], config.batches,
                                  config.confidence)
    measured = int(s[:, K.S_SLOTS].sum())
    arrivals = float(s[:, K.S_ARRIVED].sum())
    departures = float(s[:, K.S_DEPARTED].sum())
    if not config.track_delay:
        delay, delay_hw = math.nan, math.nan
    return SimResult(
        mean_delay=delay,
        delay_ci_halfwidth=delay_hw,
        mean_total_queue_length=queue,
        queue_ci_halfwidth=queue_hw,
        slots_run=sim.t,
        measured_slots=measured,
        packets_arrived=sim.packets_arrived,
        packets_departed=sim.packets_departed,
        final_backlog=sim.backlog,
        arrival_rate=arrivals / measured if measured else 0.0,
        throughput=departures / (measured * config.n) if measured else 0.0,
        converged=converged,
        property1_violations=sim.property1_violations,
        fifo_violations=sim.fifo_violations,
    )


def _precision(sim: Simulation, config: SimConfig) -> tuple[float, float]:
    s = sim.stats
    if config.track_delay:
        return batch_means(s[:, K.S_DELAY_SUM], s[:, K.S_DEPARTED], config.batches, config.confidence)
    return batch_means(s[:, K.S_QUEUE_SUM], s[:, K.S_SLOTS], config.batches, config.confidence)


def run(config: SimConfig, initial_queue=None) -> SimResult:
    """Simulate until the stopping rule is met or the slot cap is reached.

    At least ``config.min_slots`` measured slots are run (after an equally long
    discarded warm-up when ``discard_warmup`` is set); the run then extends
    until the batch-means CI half-width of the mean delay is within
    ``relative_precision`` of the mean at the configured confidence.
    """
    sim = build_simulation(config, initial_queue=initial_queue)
    cap = config.slot_cap
    sim.advance(min(cap, sim.measure_from + config.min_slots))
    min_step = sim.stat_block * config.batches
    while True:
        mean, hw = _precision(sim, config)
        target = config.relative_precision * abs(mean)
        if hw <= target:
            return _summarize(sim, config, True)
        if sim.t >= cap:
            return _summarize(sim, config, False)
        measured = sim.t - sim.measure_from
        ratio = hw / target if target > 0 and math.isfinite(hw) else 2.0
        wanted = int(math.ceil(measured * min(ratio * ratio * 1.1, 4.0)))
        sim.advance(min(cap, max(sim.t + min_step, sim.measure_from + wanted)) - sim.t)


def growth_ratio(sim: Simulation) -> float:
    """Mean total queue over the last third of the measured slots over the middle third."""
    s = sim.stats
    slots = s[:, K.S_SLOTS]
    total = slots.sum()
    edges = np.cumsum(slots)
    mid = (edges > total / 3) & (edges <= 2 * total / 3)
    last = edges > 2 * total / 3
    q_mid = s[mid, K.S_QUEUE_SUM].sum() / max(slots[mid].sum(), 1)
    q_last = s[last, K.S_QUEUE_SUM].sum() / max(slots[last].sum(), 1)
    if q_mid == 0:
        return 1.0 if q_last == 0 else math.inf
    return float(q_last / q_mid)


def default_probe_slots(n: int) -> int:
    return max(150_000, 60 * n * n)


def probe_sustainable(template: SimConfig, load: float, probe_slots: int | None = None):
    """Run one growth-trend probe; returns (sustainable, ratio, ambiguous)."""
    slots = probe_slots or default_probe_slots(template.n)
    ratio = 0.0
    for attempt in range(2):
        length = slots * (2**attempt)
        cfg = replace(template, load=load, track_delay=False, check_property1=False)
        sim = build_simulation(cfg, measure_from=0, stat_block=max(1, length // 300))
        sim.advance(length)
        ratio = growth_ratio(sim)
        lo, hi = AMBIGUOUS_BAND
        if not lo < ratio <= hi:
            return ratio <= GROWTH_THRESHOLD, ratio, False
    return ratio <= GROWTH_THRESHOLD, ratio, True


def throughput_search(template: SimConfig, lo: float = 0.5, hi: float = 0.99,
                      tolerance: float = 0.005, probe_slots: int | None = None) -> KneeResult:
    """Bisect on offered load for the boundary of sustainable (no growth trend) loads."""
    if not 0.0 < lo < hi < 1.0:
        raise ValueError(f"need 0 < lo < hi < 1, got lo={lo}, hi={hi}")
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    probes = []
    flagged = False
    a, b = lo, hi
    while b - a > tolerance:
        mid = 0.5 * (a + b)
        ok, ratio, ambiguous = probe_sustainable(template, mid, probe_slots)
        probes.append((mid, ratio, ok))
        flagged |= ambiguous
        if ok:
            a = mid
        else:
            b = mid
    return KneeResult(knee=0.5 * (a + b), lo=a, hi=b, probes=tuple(probes), flagged=flagged)


def littles_law_check(result: SimResult, lambda_total: float | None = None) -> float:
    """Relative gap ``|L - lambda W| / L``; 0 when both sides vanish."""
    lam = result.arrival_rate if lambda_total is None else lambda_total
    rhs = lam * result.mean_delay
    lhs = result.mean_total_queue_length
    if lhs == 0:
        return 0.0 if rhs == 0 else math.inf
    return abs(lhs - rhs) / lhs
