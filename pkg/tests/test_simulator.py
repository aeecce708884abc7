from collections import deque

import numpy as np
import pytest
from scipy import stats

from qpswitch.core import QueueMatrix, apply_slot, departures_from
from qpswitch.schedulers import MwmScheduler, Scheduler, parse_scheduler
from qpswitch.simulator import (
    SimConfig,
    Simulation,
    _rngs,
    batch_means,
    build_simulation,
    littles_law_check,
    probe_sustainable,
    run,
    throughput_search,
)
from qpswitch.traffic import PATTERNS, ZeroSource, parse_source, pattern_matrix, rate_matrix


def reference_run(n, sched_spec, src_spec, pattern, load, seed, slots):
    """Slot loop over the public Python objects with per-VOQ deques of arrival slots."""
    sched_rng, src_rng = _rngs(seed)
    sched = parse_scheduler(sched_spec, sched_rng)
    sched.bind(n)
    src = parse_source(src_spec, rate_matrix(pattern_matrix(pattern, n), load), src_rng)
    q = QueueMatrix.zeros(n)
    fifo = [[deque() for _ in range(n)] for _ in range(n)]
    delay_sum = departed = arrived = 0
    for t in range(slots):
        d = departures_from(sched.schedule(q), q)
        for i, j in zip(*np.nonzero(d.array)):
            delay_sum += t - fifo[i][j].popleft()
            departed += 1
        a = src.next()
        for i, j in zip(*np.nonzero(a.array)):
            fifo[i][j].extend([t] * int(a.array[i, j]))
        arrived += a.total
        q = apply_slot(q, d, a)
    return q, delay_sum, departed, arrived


@pytest.mark.parametrize("sched,src,pattern,load", [
    ("qps:r=1", "bernoulli", "uniform", 0.8),
    ("qps:r=3", "onoff:burst=8", "diagonal", 0.9),
    ("islip", "bernoulli", "log-diagonal", 0.9),
    ("greedy", "bernoulli", "quasi-diagonal", 0.95),
    ("mwm", "bernoulli", "uniform", 0.95),
])
def test_engine_matches_reference(sched, src, pattern, load):
    n, slots, seed = 5, 1500, 42
    cfg = SimConfig(n=n, scheduler=sched, source=src, pattern=pattern, load=load, seed=seed)
    sim = build_simulation(cfg, stat_block=100)
    sim.advance(slots)
    q, delay_sum, departed, arrived = reference_run(n, sched, src, pattern, load, seed, slots)
    assert sim.q == q
    assert sim.packets_departed == departed and sim.packets_arrived == arrived
    s = sim.stats
    assert s[:, 0].sum() == delay_sum and s[:, 1].sum() == departed
    assert sim.fifo_violations == 0


def test_min_slots():
    assert SimConfig(n=8).min_slots == 32_000


def test_config_validation():
    for bad in (dict(n=1), dict(n=4, load=1.0), dict(n=4, load=0.0), dict(n=4, confidence=1.0),
                dict(n=4, relative_precision=0.0)):
        with pytest.raises(ValueError):
            SimConfig(**bad)


def test_zero_arrivals_drain():
    rng = np.random.default_rng(3)
    q0 = rng.integers(0, 5, size=(6, 6))
    sim = Simulation(6, parse_scheduler("qps:r=1", rng), ZeroSource(6, rng), initial_queue=q0)
    total = int(q0.sum())
    for _ in range(total):
        before = sim.backlog
        if before == 0:
            break
        sim.advance(1)
        assert sim.backlog < before
    assert sim.backlog == 0
    assert sim.packets_arrived == sim.packets_departed == total
    # initial packets are stamped as arriving just before slot 0
    s = sim.stats
    assert s[:, 0].sum() >= s[:, 1].sum()


def test_conservation_fifo_and_determinism():
    cfg = SimConfig(n=8, scheduler="qps:r=2", source="onoff:burst=16", pattern="diagonal",
                    load=0.6, seed=9, max_slots=40_000)
    a, b = run(cfg), run(cfg)
    assert a == b
    assert a.packets_arrived == a.packets_departed + a.final_backlog
    assert a.fifo_violations == 0


def test_pool_grows_under_overload():
    cfg = SimConfig(n=16, scheduler="qps:r=1", load=0.99, seed=1)
    tracked = build_simulation(cfg)
    tracked.advance(20_000)
    untracked = build_simulation(SimConfig(n=16, scheduler="qps:r=1", load=0.99, seed=1,
                                           track_delay=False))
    untracked.advance(20_000)
    assert tracked.backlog > 50_000
    assert tracked.q == untracked.q
    assert tracked.fifo_violations == 0
    assert tracked.packets_arrived == tracked.packets_departed + tracked.backlog


def test_clean_bound_and_littles_law_small_switch():
    res = run(SimConfig(n=16, scheduler="qps:r=1", load=0.3, seed=5))
    assert res.converged
    assert res.mean_delay + res.delay_ci_halfwidth <= 1 / (1 - 2 * 0.3)
    assert littles_law_check(res) <= 0.02
    assert littles_law_check(res, 0.3 * 16) <= 0.03


def test_littles_law_edge_cases():
    res = run(SimConfig(n=4, source="none", seed=0))
    assert res.mean_total_queue_length == 0 and littles_law_check(res) == 0
    truncated = run(SimConfig(n=16, load=0.95, seed=1, max_slots=100))
    assert not truncated.converged
    assert littles_law_check(truncated) > 0.02


def test_discard_warmup():
    cfg = SimConfig(n=4, load=0.5, seed=2, discard_warmup=True)
    res = run(cfg)
    assert res.measured_slots >= cfg.min_slots
    assert res.slots_run == res.measured_slots + cfg.min_slots


def test_property1_debug_mode():
    greedy = run(SimConfig(n=8, scheduler="greedy", load=0.9, seed=3, check_property1=True,
                           max_slots=20_000))
    assert greedy.property1_violations == 0
    qps = run(SimConfig(n=8, scheduler="qps:r=1", load=0.9, seed=3, check_property1=True,
                        max_slots=20_000))
    assert qps.property1_violations > 0


class _Collide(Scheduler):
    name = "collide"

    def match_array(self, q):
        return np.zeros(q.shape[0], dtype=np.int64)


def test_invalid_external_matching_rejected():
    src = parse_source("bernoulli", rate_matrix(pattern_matrix("uniform", 3), 0.5), 0)
    sim = Simulation(3, _Collide(), src)
    with pytest.raises(ValueError):
        sim.advance(1)


def test_batch_means_against_t_interval():
    rng = np.random.default_rng(0)
    x = rng.normal(3.0, 1.0, size=300)
    mean, hw = batch_means(x, np.ones(300), 30, 0.98)
    bm = x.reshape(30, 10).mean(axis=1)
    lo, hi = stats.t.interval(0.98, 29, loc=bm.mean(), scale=stats.sem(bm))
    assert mean == pytest.approx(bm.mean())
    assert hw == pytest.approx((hi - lo) / 2)
    assert batch_means(np.zeros(5), np.zeros(5), 30, 0.98) == (0.0, 0.0)
    assert batch_means(np.ones(5), np.ones(5), 30, 0.98)[1] == np.inf


def test_probe_detects_growth():
    cfg = SimConfig(n=8, scheduler="qps:r=1")
    assert probe_sustainable(cfg, 0.3, 30_000)[0]
    assert not probe_sustainable(cfg, 0.95, 30_000)[0]


def test_throughput_search_validation():
    with pytest.raises(ValueError):
        throughput_search(SimConfig(n=4), lo=0.8, hi=0.6)
    with pytest.raises(ValueError):
        throughput_search(SimConfig(n=4), lo=0.0, hi=0.6)


def test_throughput_search_small_switch():
    res = throughput_search(SimConfig(n=8, scheduler="qps:r=1"), 0.5, 0.95, 0.02, 40_000)
    assert 0.5 < res.knee < 0.95 and res.hi - res.lo <= 0.02
    assert float(res) == res.knee
    assert len(res.probes) >= 4


@pytest.mark.parametrize("sched", ["qps:r=1", "qps:r=3", "islip", "mwm", "greedy"])
def test_stability_below_half_load(sched):
    for pattern in PATTERNS:
        ok, ratio, _ = probe_sustainable(SimConfig(n=32, scheduler=sched, pattern=pattern, seed=1),
                                         0.45, 60_000)
        assert ok, (pattern, ratio)


def test_mwm_sustains_high_load():
    ok, ratio, _ = probe_sustainable(SimConfig(n=16, scheduler="mwm", seed=2), 0.95, 100_000)
    assert ok, ratio


def test_mwm_through_external_path_is_deterministic():
    cfg = SimConfig(n=4, scheduler="mwm", load=0.8, seed=3, max_slots=8_000)
    assert run(cfg) == run(cfg)
    assert isinstance(parse_scheduler("mwm"), MwmScheduler)
