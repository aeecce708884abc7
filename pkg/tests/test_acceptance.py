"""End-to-end acceptance criteria; each test prints one PASS/FAIL line."""

import itertools
import time

import numpy as np
import pytest

from qpswitch import cli
from qpswitch.analysis import (
    bernoulli_delay_bound,
    exact_qps1_expectation,
    iid_queue_bound,
    verify_weak_departure_inequality,
)
from qpswitch.schedulers import MwmScheduler, QpsScheduler
from qpswitch.simulator import (
    SimConfig,
    build_simulation,
    littles_law_check,
    probe_sustainable,
    run,
    throughput_search,
)
from qpswitch.traffic import PATTERNS, pattern_matrix, rate_matrix

pytestmark = pytest.mark.acceptance

_RESULTS = {}  # SimConfig -> (SimResult, seconds)


def _run(cfg):
    if cfg not in _RESULTS:
        start = time.perf_counter()
        res = run(cfg)
        _RESULTS[cfg] = (res, time.perf_counter() - start)
    return _RESULTS[cfg]


def _clean_bound_config(rho):
    return SimConfig(n=16, scheduler="qps:r=1", source="bernoulli", pattern="uniform",
                     load=rho, seed=11)


BOUND_LOADS = (0.3, 0.4, 0.45)
KNEES = {"uniform": 0.634, "quasi-diagonal": 0.645, "log-diagonal": 0.681, "diagonal": 0.751}
R_SWEEP = (1, 2, 3, 4)
BURSTS = (64, 256, 1024)


def _r_config(r):
    return SimConfig(n=64, scheduler=f"qps:r={r}", pattern="quasi-diagonal", load=0.6, seed=21)


def _burst_config(scheduler, burst):
    # the slot cap keeps iSLIP at N=64 within budget; convergence is reported, not required
    return SimConfig(n=64, scheduler=scheduler, source=f"onoff:burst={burst}", pattern="diagonal",
                     load=0.75, seed=31, max_slots=3 * 500 * 64 * 64)


def test_criterion_01_clean_delay_bound(criterion):
    ok, parts = True, []
    for rho in BOUND_LOADS:
        res, secs = _run(_clean_bound_config(rho))
        bound = bernoulli_delay_bound(rho)
        upper = res.mean_delay + res.delay_ci_halfwidth
        good = upper < bound and secs <= 60
        ok &= good
        parts.append(f"rho={rho}: {res.mean_delay:.3f}+{res.delay_ci_halfwidth:.3f} < {bound:g} "
                     f"({secs:.0f}s)")
    assert criterion(1, ok, "; ".join(parts))


def test_criterion_02_queue_length_bound(criterion):
    ok, parts = True, []
    for rho in BOUND_LOADS:
        res, _ = _run(_clean_bound_config(rho))
        bound = iid_queue_bound(rate_matrix(pattern_matrix("uniform", 16), rho))
        upper = res.mean_total_queue_length + res.queue_ci_halfwidth
        ok &= upper <= bound
        parts.append(f"rho={rho}: {upper:.2f} <= {bound:.2f}")
    assert criterion(2, ok, "; ".join(parts))


def test_criterion_03_throughput_knees(criterion):
    start = time.perf_counter()
    ok, parts = True, []
    for pattern, target in KNEES.items():
        res = throughput_search(SimConfig(n=64, scheduler="qps:r=1", pattern=pattern, seed=7),
                                lo=0.5, hi=0.9, tolerance=0.005)
        good = abs(res.knee - target) <= 0.02
        ok &= good
        parts.append(f"{pattern} {res.knee:.4f} vs {target}{' (flagged)' if res.flagged else ''}")
    secs = time.perf_counter() - start
    ok &= secs <= 30 * 60
    assert criterion(3, ok, "; ".join(parts) + f"; {secs:.0f}s")


def test_criterion_04_stability_region(criterion):
    ok, parts = True, []
    for pattern in PATTERNS:
        stable, ratio, _ = probe_sustainable(SimConfig(n=32, scheduler="qps:r=1", pattern=pattern,
                                                       seed=13), 0.49)
        ok &= stable
        parts.append(f"{pattern}@0.49 ratio {ratio:.3f}")
    stable, ratio, _ = probe_sustainable(SimConfig(n=32, scheduler="qps:r=1", seed=13), 0.70)
    ok &= not stable
    parts.append(f"uniform@0.70 ratio {ratio:.3f} (growth)")
    assert criterion(4, ok, "; ".join(parts))


def test_criterion_05_weak_inequality_sweep(criterion):
    rng = np.random.default_rng(5)
    start = time.perf_counter()
    worst, failures = np.inf, 0
    for t in range(10_000):
        n = (2, 3, 4)[t % 3]
        q = rng.integers(0, 10, size=(n, n))
        q[rng.random((n, n)) < 0.3] = 0
        chk = verify_weak_departure_inequality(q, tol=1e-9)
        worst = min(worst, chk.lhs - chk.rhs)
        failures += not chk.holds
    secs = time.perf_counter() - start
    ok = failures == 0 and secs <= 120
    assert criterion(5, ok, f"10^4 instances, {failures} failures, min slack {worst:.3g}, {secs:.1f}s")


def test_criterion_06_property1_greedy(criterion):
    sim = build_simulation(SimConfig(n=16, scheduler="greedy", pattern="uniform", load=0.9, seed=17,
                                     check_property1=True))
    sim.advance(100_000)
    mean_q = sim.stats[:, 2].sum() / sim.stats[:, 4].sum()
    ok = sim.property1_violations == 0 and mean_q > 0
    assert criterion(6, ok, f"10^5 slots, {sim.property1_violations} violations, "
                            f"mean backlog {mean_q:.1f}")


def test_criterion_07_oracle_vs_monte_carlo(criterion):
    rng = np.random.default_rng(7)
    sched = QpsScheduler(1, rng)
    trials = 1_000_000
    worst_z, bad = 0.0, 0
    for _ in range(20):
        q = rng.integers(0, 6, size=(3, 3))
        q[rng.random((3, 3)) < 0.25] = 0
        e = exact_qps1_expectation(q).expected_departures
        freq = sched.departure_counts(q, trials) / trials
        sigma = np.sqrt(e * (1 - e) / trials)
        dev = np.abs(freq - e)
        degenerate = sigma == 0
        bad += int(np.sum(dev[degenerate] > 0))
        z = dev[~degenerate] / sigma[~degenerate]
        bad += int(np.sum(z > 3))
        worst_z = max(worst_z, float(z.max(initial=0)))
    assert criterion(7, bad == 0, f"20 instances x 10^6 trials, {bad} cells outside 3 sigma, "
                                  f"max |z| {worst_z:.2f}")


def test_criterion_08_mwm_optimal(criterion):
    rng = np.random.default_rng(8)
    mwm = MwmScheduler()
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(1, 7))
        q = rng.integers(0, 20, size=(n, n))
        best = max(sum(q[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))
        mismatches += mwm.schedule(q).weight(q) != best
    assert criterion(8, mismatches == 0, f"10^3 instances, {mismatches} mismatches")


def test_criterion_09_r_sweep(criterion):
    res = [_run(_r_config(r))[0] for r in R_SWEEP]
    delays = [x.mean_delay for x in res]
    hws = [x.delay_ci_halfwidth for x in res]
    monotone = all(delays[k + 1] <= delays[k] + hws[k] + hws[k + 1] for k in range(3))
    marginal = abs(delays[3] - delays[2]) <= 0.10 * delays[2]
    detail = ", ".join(f"r={r}: {d:.3f}+-{h:.3f}" for r, d, h in zip(R_SWEEP, delays, hws))
    assert criterion(9, monotone and marginal, detail)


def test_criterion_10_bursty_direction(criterion):
    ok, parts = True, []
    for burst in BURSTS:
        qps, _ = _run(_burst_config("qps:r=3", burst))
        islip, _ = _run(_burst_config("islip", burst))
        ok &= qps.mean_delay <= islip.mean_delay
        parts.append(f"B={burst}: qps3 {qps.mean_delay:.1f} vs islip {islip.mean_delay:.1f}")
    assert criterion(10, ok, "; ".join(parts))


def _all_configs():
    return ([_clean_bound_config(r) for r in BOUND_LOADS] + [_r_config(r) for r in R_SWEEP]
            + [_burst_config(s, b) for b in BURSTS for s in ("qps:r=3", "islip")])


def test_criterion_11_littles_law(criterion):
    checked, worst, ok = 0, 0.0, True
    for cfg in _all_configs():
        res, _ = _run(cfg)
        if not res.converged:
            continue
        gap = littles_law_check(res)
        checked += 1
        worst = max(worst, gap)
        ok &= gap <= 0.02
    assert criterion(11, ok and checked > 0, f"{checked} converged runs, worst gap {worst:.2e}")


def test_criterion_12_conservation_and_determinism(criterion, tmp_path):
    conserved = all(res.packets_arrived == res.packets_departed + res.final_backlog
                    for res, _ in (_run(c) for c in _all_configs()))
    cfg = _clean_bound_config(0.4)
    repeat = run(cfg)
    same_result = repeat == _run(cfg)[0]
    ini = tmp_path / "e.ini"
    ini.write_text("[experiment]\nscheduler = qps:r=1\nn = 8\nload = 0.4\n[sweep]\nseed = 1, 2\n")
    outs = []
    for k in range(2):
        out = tmp_path / f"o{k}.csv"
        cli.main(["run", "--config", str(ini), "--out", str(out), "--jobs", "1"])
        outs.append(out.read_bytes())
    same_csv = outs[0] == outs[1] and len(outs[0]) > 0
    ok = conserved and same_result and same_csv
    assert criterion(12, ok, f"conservation {conserved}, repeated run identical {same_result}, "
                             f"CSV byte-identical {same_csv}")
