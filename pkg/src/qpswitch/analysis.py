"""Lyapunov function, exact QPS-1 expectations, departure-inequality checks and bounds."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import stats as st

from .core import DepartureMatrix, QueueMatrix, _grid, departures_from
from .traffic import MomentProfile, TrafficRateMatrix

ORACLE_MAX_N = 6
WEAK_TOL = 1e-9
RHO_TOL = 1e-12  # load factors this close to 1/2 are treated as 1/2


def lyapunov(q) -> int:
    """``sum_ij q_ij * Qdagger_ij``."""
    qm = q if isinstance(q, QueueMatrix) else QueueMatrix(q)
    return int((qm.array * qm.dagger).sum())


@dataclass(frozen=True)
class QpsOracleResult:
    expected_departures: np.ndarray  # E[d_ij | Q]
    acceptance_prob: np.ndarray  # P(accepted | i proposes to j); 0 where q_ij = 0
    weighted_dagger_sum: float  # sum_ij q_ij E[Ddagger_ij | Q]
    outcome_count: int  # proposal vectors times tie-break branches


def _proposal_options(qa: np.ndarray):
    """Per input, the list of (output or -1, numerator, denominator) choices."""
    opts = []
    for row in qa:
        tot = int(row.sum())
        if tot == 0:
            opts.append([(-1, 1, 1)])
        else:
            opts.append([(j, int(v), tot) for j, v in enumerate(row) if v > 0])
    return opts


def _exact_expectation(qa: np.ndarray):
    n = qa.shape[0]
    exp_d = [[Fraction(0)] * n for _ in range(n)]
    outcomes = 0
    for combo in itertools.product(*_proposal_options(qa)):
        p = Fraction(1)
        for _, num, den in combo:
            p *= Fraction(num, den)
        branches = 1
        for j in range(n):
            props = [i for i, (jj, _, _) in enumerate(combo) if jj == j]
            if not props:
                continue
            best = max(qa[i, j] for i in props)
            tied = [i for i in props if qa[i, j] == best]
            branches *= len(tied)
            for i in tied:
                exp_d[i][j] += p / len(tied)
        outcomes += branches
    return exp_d, outcomes


def _float_expectation(qa: np.ndarray):
    n = qa.shape[0]
    opts = _proposal_options(qa)
    combos = np.array(list(itertools.product(*[[c[0] for c in o] for o in opts])), dtype=np.int64)
    probs = np.array(list(itertools.product(*[[c[1] / c[2] for c in o] for o in opts])))
    prob = probs.prod(axis=1)
    rows = np.arange(n)[None, :]
    vals = np.where(combos >= 0, qa[rows, np.maximum(combos, 0)], -1)
    exp_d = np.zeros((n, n))
    branches = np.ones(combos.shape[0], dtype=np.int64)
    for j in range(n):
        prop = combos == j
        v = np.where(prop, vals, -1)
        best = v.max(axis=1)
        tied = prop & (v == best[:, None])
        cnt = tied.sum(axis=1)
        branches *= np.maximum(cnt, 1)
        share = np.divide(prob, cnt, out=np.zeros_like(prob), where=cnt > 0)
        exp_d[:, j] = (tied * share[:, None]).sum(axis=0)
    return exp_d, int(branches.sum())


def exact_qps1_expectation(q, exact: bool = False) -> QpsOracleResult:
    """Exact E[d_ij | Q] for one QPS iteration by enumerating every proposal vector.

    Each input with a nonempty row proposes to ``j`` w.p. ``q_ij / Q_i*``; each
    output accepts the longest proposing VOQ, ties split uniformly. With
    ``exact=True`` all arithmetic is done in rationals and the returned arrays
    hold ``Fraction`` objects.
    """
    qa = _grid(q)
    n = qa.shape[0]
    if n > ORACLE_MAX_N:
        raise ValueError(f"enumeration oracle supports n <= {ORACLE_MAX_N}, got {n}")
    if exact:
        d, outcomes = _exact_expectation(qa)
        exp_d = np.array(d, dtype=object)
        alpha = np.empty((n, n), dtype=object)
        for i in range(n):
            tot = int(qa[i].sum())
            for j in range(n):
                alpha[i, j] = exp_d[i, j] / Fraction(int(qa[i, j]), tot) if qa[i, j] else Fraction(0)
        row = exp_d.sum(axis=1) if n else np.zeros(0, dtype=object)
        col = exp_d.sum(axis=0) if n else np.zeros(0, dtype=object)
        wsum = sum((int(qa[i, j]) * (row[i] + col[j] - exp_d[i, j])
                    for i in range(n) for j in range(n)), Fraction(0))
        return QpsOracleResult(exp_d, alpha, wsum, outcomes)
    exp_d, outcomes = _float_expectation(qa)
    tot = qa.sum(axis=1, keepdims=True)
    prop = np.divide(qa, tot, out=np.zeros(qa.shape), where=tot > 0)
    alpha = np.divide(exp_d, prop, out=np.zeros(qa.shape), where=prop > 0)
    dagger = exp_d.sum(axis=1)[:, None] + exp_d.sum(axis=0)[None, :] - exp_d
    return QpsOracleResult(exp_d, alpha, float((qa * dagger).sum()), outcomes)


@dataclass(frozen=True)
class InequalityCheck:
    lhs: float
    rhs: float
    holds: bool


def verify_weak_departure_inequality(q, tol: float = WEAK_TOL) -> InequalityCheck:
    """``sum_ij q_ij E[Ddagger_ij | Q] >= ||Q||_1`` for one QPS iteration."""
    res = exact_qps1_expectation(q)
    rhs = float(_grid(q).sum())
    return InequalityCheck(res.weighted_dagger_sum, rhs, res.weighted_dagger_sum >= rhs - tol)


def verify_strong_departure(q, d) -> bool:
    """True iff ``q_ij * Ddagger_ij >= q_ij`` for every VOQ."""
    qa = _grid(q)
    dm = d if isinstance(d, DepartureMatrix) else DepartureMatrix(d)
    return bool(np.all(qa * dm.dagger >= qa))


def _rates(lam) -> TrafficRateMatrix:
    return lam if isinstance(lam, TrafficRateMatrix) else TrafficRateMatrix(lam)


def iid_queue_bound(lam, sigma2=None) -> float:
    """Mean total queue bound for i.i.d. arrivals; ``sigma2`` defaults to Bernoulli ``lam - lam^2``."""
    r = _rates(lam)
    if r.rho >= 0.5 - RHO_TOL:
        raise ValueError(f"bound undefined for load factor {r.rho} >= 1/2")
    s2 = r.lam - r.lam**2 if sigma2 is None else np.asarray(sigma2, dtype=np.float64)
    if s2.shape != r.lam.shape or not np.all(np.isfinite(s2)) or np.any(s2 < 0):
        raise ValueError("sigma2 must be a finite nonnegative N x N grid")
    return float((s2 - r.lam * r.dagger + r.lam).sum() / (2.0 * (1.0 - 2.0 * r.rho)))


def bernoulli_delay_bound(rho: float) -> float:
    """Mean delay bound ``1 / (1 - 2 rho)`` for Bernoulli arrivals."""
    if not 0.0 <= rho < 0.5:
        raise ValueError(f"bound needs 0 <= rho < 1/2, got {rho}")
    return 1.0 / (1.0 - 2.0 * rho)


@dataclass(frozen=True)
class MarkovBoundInputs:
    lam: TrafficRateMatrix
    sigma2: np.ndarray
    theta: np.ndarray  # (n, n, >= k); theta[..., k-1] is the lag-k autocovariance
    xi: float
    k: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "lam", _rates(self.lam))
        s2 = np.asarray(self.sigma2, dtype=np.float64)
        th = np.asarray(self.theta, dtype=np.float64)
        n = self.lam.n
        if s2.shape != (n, n):
            raise ValueError("sigma2 must be N x N")
        if th.ndim != 3 or th.shape[:2] != (n, n) or th.shape[2] < self.k:
            raise ValueError("theta must have shape (N, N, >= k)")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0.0 <= self.xi < 1.0:
            raise ValueError(f"xi must lie in [0, 1), got {self.xi}")
        object.__setattr__(self, "sigma2", s2)
        object.__setattr__(self, "theta", th)

    @classmethod
    def from_profile(cls, profile: MomentProfile, xi: float, k: int) -> "MarkovBoundInputs":
        """Use a profile's sample means, variances and autocovariances."""
        return cls(TrafficRateMatrix(profile.mean), profile.sigma2, profile.theta, xi, k)


def markovian_queue_bound(inputs: MarkovBoundInputs) -> float:
    """Mean total queue bound for independent Markov-modulated VOQ arrivals."""
    lam = inputs.lam.lam
    ld = lam * inputs.lam.dagger
    head = (inputs.sigma2 + ld + lam).sum()
    lags = inputs.k * ld.sum() + inputs.theta[..., : inputs.k].sum()
    return float((head + 2.0 * lags) / (2.0 * (1.0 - inputs.xi)))


@dataclass(frozen=True)
class DriftEstimate:
    mean_drift: float
    ci: float  # half-width at the requested confidence
    samples: int


def drift_estimate(q, scheduler, source, samples: int, confidence: float = 0.98) -> DriftEstimate:
    """Monte Carlo one-slot drift ``E[L(Q(t+1)) - L(Q(t)) | Q(t) = q]``."""
    if samples < 1000:
        raise ValueError("drift estimates need at least 10^3 samples")
    qm = q if isinstance(q, QueueMatrix) else QueueMatrix(q)
    base = lyapunov(qm)
    qa = qm.array
    out = np.empty(samples)
    for s in range(samples):
        d = departures_from(scheduler.schedule(qm), qa).array
        nxt = qa - d + source.next().array
        out[s] = lyapunov(QueueMatrix(nxt)) - base
    hw = st.t.ppf(0.5 + confidence / 2.0, samples - 1) * out.std(ddof=1) / math.sqrt(samples)
    return DriftEstimate(float(out.mean()), float(hw), samples)


def drift_bound(q, lam) -> float:
    """Upper bound on the one-slot drift of QPS-1 under Bernoulli arrivals.

    The cross term is bounded with the weak departure inequality and the
    quadratic term with ``E[a Adagger] + E[d Ddagger]``, the latter at most N.
    """
    qa = _grid(q)
    r = _rates(lam)
    cross = 2.0 * float((qa * r.dagger).sum()) - 2.0 * float(qa.sum())
    quad = float((r.lam * (1.0 + r.dagger - r.lam)).sum()) + r.n
    return cross + quad
