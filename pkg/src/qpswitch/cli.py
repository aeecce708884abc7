"""Command-line runner: experiment sweeps, knee search, verification and bounds.

Exit codes: 0 success, 1 usage or config error, 2 verification failure,
3 at least one run hit its slot cap without meeting the stopping rule.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import itertools
import math
import os
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import stats as st

from .analysis import (
    MarkovBoundInputs,
    bernoulli_delay_bound,
    exact_qps1_expectation,
    iid_queue_bound,
    markovian_queue_bound,
    verify_strong_departure,
    verify_weak_departure_inequality,
)
from .core import departures_from
from .sampling import ProportionalSampler
from .schedulers import QpsScheduler, Scheduler, parse_scheduler
from .simulator import SimConfig, littles_law_check, run, throughput_search
from .traffic import (
    BernoulliSource,
    MarkovSource,
    estimate_moments,
    parse_source,
    pattern_matrix,
    rate_matrix,
)

CSV_VERSION = 1
RUN_COLUMNS = ["scheduler", "pattern", "n", "load", "burst", "seed", "slots",
               "mean_delay", "ci", "mean_queue", "converged"]
KNEE_COLUMNS = ["scheduler", "pattern", "n", "seed", "knee", "lo", "hi", "flagged"]
VERIFY_COLUMNS = ["check", "n", "lhs", "rhs", "holds"]

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_NONCONVERGED = 0, 1, 2, 3


class ConfigError(ValueError):
    """Config file problem, with a location prefix in the message."""


# ------------------------------------------------------------------ config

_EXPERIMENT_KEYS = {"scheduler", "source", "pattern", "n", "load", "seed", "burst", "r"}
_STOPPING_KEYS = {"min_slots_factor", "relative_precision", "confidence", "max_slots",
                  "discard_warmup", "batches"}
_THROUGHPUT_KEYS = {"lo", "hi", "tolerance", "probe_slots"}


@dataclass
class ExperimentPoint:
    index: int
    config: SimConfig
    burst: float | None


@dataclass
class ExperimentConfig:
    points: list[ExperimentPoint]
    knee_lo: float = 0.5
    knee_hi: float = 0.99
    knee_tolerance: float = 0.005
    probe_slots: int | None = None
    output: str | None = None


def _key_lines(text: str) -> dict[tuple[str, str], int]:
    lines: dict[tuple[str, str], int] = {}
    section = ""
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        m = re.match(r"^\[(.+)\]$", line)
        if m:
            section = m.group(1).strip()
            continue
        m = re.match(r"^([^=:#;\s][^=:]*?)\s*[=:]", line)
        if m and section:
            lines[(section, m.group(1).strip().lower())] = no
    return lines


def _split_list(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def _convert(kind, raw: str, where: str):
    try:
        if kind is bool:
            low = raw.lower()
            if low in {"1", "true", "yes", "on"}:
                return True
            if low in {"0", "false", "no", "off"}:
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_config(text: str, source_name: str = "<config>", overrides: dict | None = None,
                 default_axes: dict | None = None, seed_base: int = 0) -> ExperimentConfig:
    """Expand an INI experiment description into concrete run points.

    ``[experiment]`` holds scalar defaults, ``[sweep]`` comma-separated axes
    (expanded as a Cartesian product in file order), ``[stopping]`` the
    stopping rule and ``[throughput]`` the knee search bounds.
    """
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source_name)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    lines = _key_lines(text)

    def where(section: str, key: str) -> str:
        no = lines.get((section, key))
        loc = f"{source_name}:{no}" if no else source_name
        return f"{loc}: [{section}] {key}"

    for section in cp.sections():
        allowed = {"experiment": _EXPERIMENT_KEYS, "sweep": _EXPERIMENT_KEYS,
                   "stopping": _STOPPING_KEYS, "throughput": _THROUGHPUT_KEYS,
                   "output": {"path"}}.get(section)
        if allowed is None:
            raise ConfigError(f"{source_name}: unknown section [{section}]")
        for key in cp[section]:
            if key not in allowed:
                raise ConfigError(f"{where(section, key)}: unknown field")

    base = dict(cp["experiment"]) if cp.has_section("experiment") else {}
    axes: dict[str, list[str]] = {}
    for key, vals in (default_axes or {}).items():
        axes[key] = [str(v) for v in vals]
    if cp.has_section("sweep"):
        for key, value in cp["sweep"].items():
            axes[key] = _split_list(value)
    for key, value in (overrides or {}).items():
        base[key] = str(value)

    types = {"n": int, "load": float, "seed": int, "burst": float, "r": int}
    stopping: dict = {}
    if cp.has_section("stopping"):
        st_types = {"min_slots_factor": float, "relative_precision": float, "confidence": float,
                    "max_slots": int, "discard_warmup": bool, "batches": int}
        for key, value in cp["stopping"].items():
            stopping[key] = _convert(st_types[key], value, where("stopping", key))

    points: list[ExperimentPoint] = []
    names = list(axes)
    for index, combo in enumerate(itertools.product(*(axes[k] for k in names))):
        values = dict(base)
        values.update(zip(names, combo))
        section_of = {k: ("sweep" if k in axes else "experiment") for k in values}
        typed = {}
        for key, raw in values.items():
            kind = types.get(key, str)
            typed[key] = _convert(kind, raw, where(section_of[key], key))
        if "n" not in typed:
            raise ConfigError(f"{source_name}: [experiment] n is required")
        scheduler = typed.get("scheduler", "qps:r=1")
        if "r" in typed:
            scheduler = f"qps:r={typed['r']}"
        source = typed.get("source", "bernoulli")
        burst = typed.get("burst")
        if burst is not None:
            source = f"onoff:burst={burst:g}"
        elif source.startswith("onoff"):
            m = re.search(r"burst=([0-9.eE+-]+)", source)
            burst = float(m.group(1)) if m else None
        try:
            cfg = SimConfig(
                n=typed["n"], scheduler=scheduler, source=source,
                pattern=typed.get("pattern", "uniform"), load=typed.get("load", 0.5),
                seed=typed.get("seed", 0) + seed_base, **stopping,
            )
            # fail early on malformed specs rather than inside a worker
            parse_scheduler(cfg.scheduler)
            rates = rate_matrix(pattern_matrix(cfg.pattern, cfg.n), cfg.load)
            if not cfg.source.startswith("markov"):
                parse_source(cfg.source, rates, 0)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{source_name}: point {index}: {exc}") from None
        points.append(ExperimentPoint(index, cfg, burst))

    exp = ExperimentConfig(points)
    if cp.has_section("throughput"):
        sec = cp["throughput"]
        if "lo" in sec:
            exp.knee_lo = _convert(float, sec["lo"], where("throughput", "lo"))
        if "hi" in sec:
            exp.knee_hi = _convert(float, sec["hi"], where("throughput", "hi"))
        if "tolerance" in sec:
            exp.knee_tolerance = _convert(float, sec["tolerance"], where("throughput", "tolerance"))
        if "probe_slots" in sec:
            exp.probe_slots = _convert(int, sec["probe_slots"], where("throughput", "probe_slots"))
    if cp.has_section("output") and "path" in cp["output"]:
        exp.output = cp["output"]["path"]
    return exp


def load_config(path: str | Path, **kwargs) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    return parse_config(text, str(p), **kwargs)


# --------------------------------------------------------------------- CSV


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_csv(columns: list[str], rows: list[dict], kind: str) -> str:
    buf = io.StringIO()
    buf.write(f"# qpswitch {kind} v{CSV_VERSION}: {','.join(columns)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in columns])
    return buf.getvalue()


def read_csv(text: str) -> list[dict]:
    """Parse emitted CSV back into typed rows."""
    body = [line for line in text.splitlines() if not line.startswith("#")]
    out = []
    for row in csv.DictReader(body):
        parsed = {}
        for key, value in row.items():
            if value == "":
                parsed[key] = None
            elif value in ("true", "false"):
                parsed[key] = value == "true"
            elif key in {"n", "seed", "slots"}:
                parsed[key] = int(value)
            else:
                try:
                    parsed[key] = float(value)
                except ValueError:
                    parsed[key] = value
        out.append(parsed)
    return out


def _write(text: str, out: str | None) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
        return
    p = Path(out)
    if not p.parent.exists():
        raise ConfigError(f"output directory {p.parent} does not exist")
    p.write_text(text)


# -------------------------------------------------------------- execution


def _run_point(point: ExperimentPoint) -> dict:
    cfg = point.config
    res = run(cfg)
    return {
        "scheduler": cfg.scheduler, "pattern": cfg.pattern, "n": cfg.n, "load": cfg.load,
        "burst": point.burst, "seed": cfg.seed, "slots": res.slots_run,
        "mean_delay": res.mean_delay, "ci": res.delay_ci_halfwidth,
        "mean_queue": res.mean_total_queue_length, "converged": res.converged,
    }


def _map(func, items: list, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [func(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(func, items))


def run_experiment(exp: ExperimentConfig, jobs: int = 1) -> list[dict]:
    """Execute every point; rows come back in expansion order."""
    return _map(_run_point, exp.points, jobs)


@dataclass(frozen=True)
class _KneeJob:
    config: SimConfig
    lo: float
    hi: float
    tolerance: float
    probe_slots: int | None


def _run_knee(job: _KneeJob) -> dict:
    cfg = job.config
    res = throughput_search(cfg, job.lo, job.hi, job.tolerance, job.probe_slots)
    return {"scheduler": cfg.scheduler, "pattern": cfg.pattern, "n": cfg.n, "seed": cfg.seed,
            "knee": res.knee, "lo": res.lo, "hi": res.hi, "flagged": res.flagged}


def knee_experiment(exp: ExperimentConfig, jobs: int = 1) -> list[dict]:
    if not 0.0 < exp.knee_lo < exp.knee_hi < 1.0:
        raise ConfigError(f"knee search needs 0 < lo < hi < 1, got lo={exp.knee_lo}, hi={exp.knee_hi}")
    seen, jobs_list = set(), []
    for p in exp.points:
        key = (p.config.scheduler, p.config.pattern, p.config.n, p.config.source, p.config.seed)
        if key in seen:
            continue
        seen.add(key)
        jobs_list.append(_KneeJob(p.config, exp.knee_lo, exp.knee_hi, exp.knee_tolerance,
                                  exp.probe_slots))
    return _map(_run_knee, jobs_list, jobs)


# ----------------------------------------------------------------- verify


@dataclass
class CheckRecord:
    check: str
    n: int
    lhs: float
    rhs: float
    holds: bool

    def __post_init__(self) -> None:
        self.lhs, self.rhs, self.holds = float(self.lhs), float(self.rhs), bool(self.holds)


def _random_queue(rng: np.random.Generator, n: int, max_len: int = 6) -> np.ndarray:
    q = rng.integers(0, max_len + 1, size=(n, n))
    q[rng.random((n, n)) < 0.3] = 0
    return q


def verify_suite(n_max: int = 4, trials: int = 10_000, seed: int = 0,
                 scheduler: Scheduler | None = None, mc_samples: int = 2000) -> list[CheckRecord]:
    """Oracle sweep, strong and weak checks on ``scheduler``, sampler and Little's-law checks.

    One aggregate record per check family; ``holds`` is False if any instance failed.
    """
    if not 2 <= n_max <= 6:
        raise ValueError("n-max must lie in [2, 6]")
    rng = np.random.default_rng(seed)
    sizes = list(range(2, n_max + 1))
    sched = scheduler if scheduler is not None else parse_scheduler("greedy", rng.spawn(1)[0])
    records: list[CheckRecord] = []
    if trials == 0:
        return records

    # weak inequality, exact oracle, plus oracle self-consistency
    worst_gap, ok, consistent = math.inf, True, True
    for t in range(trials):
        n = sizes[t % len(sizes)]
        q = _random_queue(rng, n)
        chk = verify_weak_departure_inequality(q)
        worst_gap = min(worst_gap, chk.lhs - chk.rhs)
        ok &= chk.holds
        res = exact_qps1_expectation(q)
        tot = q.sum(axis=1, keepdims=True)
        prop = np.divide(q, tot, out=np.zeros(q.shape), where=tot > 0)
        col_exact = 1.0 - np.prod(1.0 - prop, axis=0)
        consistent &= bool(np.allclose(res.expected_departures.sum(axis=0), col_exact, atol=1e-9))
        consistent &= bool(np.all(res.expected_departures.sum(axis=1) <= 1 + 1e-9))
    records.append(CheckRecord("weak-inequality-oracle", n_max, worst_gap, 0.0, ok))
    records.append(CheckRecord("oracle-consistency", n_max, float(consistent), 1.0, consistent))

    # oracle vs compiled QPS-1 kernel
    qps = QpsScheduler(1, rng.spawn(1)[0])
    worst_z = 0.0
    for _ in range(3):
        q = _random_queue(rng, 3)
        exp_d = exact_qps1_expectation(q).expected_departures
        counts = np.zeros((3, 3))
        for _ in range(20_000):
            m = qps.match_array(q)
            for i, j in enumerate(m):
                if j >= 0:
                    counts[i, j] += 1
        freq = counts / 20_000
        se = np.sqrt(np.maximum(exp_d * (1 - exp_d), 1e-12) / 20_000)
        worst_z = max(worst_z, float(np.max(np.abs(freq - exp_d) / se)))
    records.append(CheckRecord("oracle-vs-kernel", 3, worst_z, 4.0, worst_z <= 4.0))

    # strong (per-instance) departure property of the scheduler under test
    ok, fails = True, 0
    for t in range(min(trials, 2000)):
        n = sizes[t % len(sizes)]
        q = _random_queue(rng, n)
        if not q.any():
            continue
        d = departures_from(sched.schedule(q), q)
        if not verify_strong_departure(q, d):
            ok, fails = False, fails + 1
    records.append(CheckRecord(f"strong-property[{sched.name}]", n_max, float(fails), 0.0, ok))

    # weak inequality in Monte Carlo for the scheduler under test
    ok, worst = True, math.inf
    for t in range(min(trials, 20)):
        n = sizes[t % len(sizes)]
        q = _random_queue(rng, n)
        q[0, 0] += 1
        vals = np.empty(mc_samples)
        for s in range(mc_samples):
            d = departures_from(sched.schedule(q), q)
            vals[s] = float((q * d.dagger).sum())
        se = vals.std(ddof=1) / math.sqrt(mc_samples)
        gap = (vals.mean() + 4 * se) - q.sum()
        worst = min(worst, gap)
        ok &= gap >= 0
    records.append(CheckRecord(f"weak-inequality-mc[{sched.name}]", n_max, worst, 0.0, ok))

    # proportional sampler distribution, chi-square
    weights = rng.integers(1, 20, size=8)
    sampler = ProportionalSampler(weights)
    draws = 50_000
    counts = np.bincount([sampler.sample(rng) for _ in range(draws)], minlength=8)
    pval = float(st.chisquare(counts, weights / weights.sum() * draws).pvalue)
    records.append(CheckRecord("sampler-chi-square", 8, pval, 1e-4, pval > 1e-4))

    # Little's law on a short converged run
    res = run(SimConfig(n=8, scheduler="qps:r=1", load=0.3, seed=seed))
    gap = littles_law_check(res)
    records.append(CheckRecord("littles-law", 8, gap, 0.02, res.converged and gap <= 0.02))
    return records


# ----------------------------------------------------------------- bounds


def bounds_report(pattern: str, n: int, load: float, source: str = "bernoulli",
                  xi: float | None = None, k: int | None = None, slots: int = 100_000,
                  seed: int = 0) -> tuple[str, dict]:
    """Human-readable bound table plus a dict of values (``None`` where undefined)."""
    rates = rate_matrix(pattern_matrix(pattern, n), load)
    src = parse_source(source, rates, seed)
    lam_r = src.rates
    lam = lam_r.lam
    if isinstance(src, BernoulliSource):
        sigma2, theta_fn = lam - lam**2, (lambda kk: np.zeros((n, n, kk)))
    elif isinstance(src, MarkovSource):
        chains = src.chains
        sigma2 = np.array([[c.variance for c in row] for row in chains])

        def theta_fn(kk):
            return np.array([[[c.autocovariance(l) for l in range(1, kk + 1)] for c in row]
                             for row in chains])
    else:
        prof = estimate_moments(src, slots, max_lag=max(k or 1, 1))
        sigma2 = prof.sigma2

        def theta_fn(kk):
            return prof.theta[..., :kk]

    out = io.StringIO()
    values: dict = {"rho": lam_r.rho}
    out.write(f"source: {src.spec}   pattern: {pattern}   n: {n}\n")
    out.write(f"lambda: total {lam.sum():.6g}, min {lam.min():.6g}, max {lam.max():.6g}\n")
    out.write(f"rho: {lam_r.rho:.6g}\n")
    out.write("neighborhood rate sums:\n")
    for row in lam_r.dagger:
        out.write("  " + " ".join(f"{v:.4f}" for v in row) + "\n")

    try:
        values["iid_queue_bound"] = iid_queue_bound(lam_r, sigma2)
        out.write(f"i.i.d. queue bound: {values['iid_queue_bound']:.6g}\n")
    except ValueError:
        values["iid_queue_bound"] = None
        out.write("i.i.d. queue bound: undefined (rho >= 1/2)\n")
    if isinstance(src, BernoulliSource):
        try:
            values["delay_bound"] = bernoulli_delay_bound(lam_r.rho)
            out.write(f"delay bound: {values['delay_bound']:.6g}\n")
        except ValueError:
            values["delay_bound"] = None
            out.write("delay bound: undefined (rho >= 1/2)\n")
    if xi is not None or k is not None:
        try:
            if xi is None or k is None:
                raise ValueError("Markov bound needs both --xi and --k")
            inputs = MarkovBoundInputs(lam_r, sigma2, theta_fn(k), xi, k)
            values["markov_queue_bound"] = markovian_queue_bound(inputs)
            out.write(f"Markov queue bound (xi={xi:g}, K={k}): {values['markov_queue_bound']:.6g}\n")
        except ValueError as exc:
            values["markov_queue_bound"] = None
            out.write(f"Markov queue bound: undefined ({exc})\n")
    return out.getvalue(), values


# -------------------------------------------------------------------- main


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="INI experiment file")
    p.add_argument("--out", help="CSV destination (default: stdout or [output] path)")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker processes")
    p.add_argument("--seed-base", type=int, default=0, help="added to every configured seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qpswitch", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("run", "simulate every expanded config point"),
        ("throughput", "bisect for the sustainable-load knee per (scheduler, pattern, n)"),
        ("sweep-burst", "run over mean burst sizes 16..1024 (ON-OFF source)"),
        ("sweep-n", "run over switch sizes 8..512"),
        ("sweep-r", "run QPS over r = 1..4"),
    ]:
        _add_common(sub.add_parser(name, help=help_text))

    v = sub.add_parser("verify", help="oracle sweep and departure-property checks")
    v.add_argument("--n-max", type=int, default=4)
    v.add_argument("--trials", type=int, default=10_000)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--scheduler", default="greedy", help="scheduler for the strong/weak checks")
    v.add_argument("--out", help="optional CSV of check values")

    b = sub.add_parser("bounds", help="evaluate the queue and delay bounds for a traffic spec")
    b.add_argument("--pattern", default="uniform")
    b.add_argument("--n", type=int, required=True)
    b.add_argument("--load", type=float, required=True)
    b.add_argument("--source", default="bernoulli")
    b.add_argument("--xi", type=float)
    b.add_argument("--k", type=int)
    b.add_argument("--slots", type=int, default=100_000, help="samples for empirical moments")
    b.add_argument("--seed", type=int, default=0)
    return parser


_SWEEP_AXES = {
    "sweep-burst": {"burst": [16, 32, 64, 128, 256, 512, 1024]},
    "sweep-n": {"n": [8, 16, 32, 64, 128, 256, 512]},
    "sweep-r": {"r": [1, 2, 3, 4]},
}


def _cmd_experiment(args) -> int:
    axes = _SWEEP_AXES.get(args.command)
    exp = load_config(args.config, default_axes=axes, seed_base=args.seed_base)
    out = args.out or exp.output
    if out and out != "-" and not Path(out).parent.exists():
        raise ConfigError(f"output directory {Path(out).parent} does not exist")
    if args.command == "throughput":
        rows = knee_experiment(exp, args.jobs)
        _write(render_csv(KNEE_COLUMNS, rows, "throughput"), out)
        return EXIT_OK
    rows = run_experiment(exp, args.jobs)
    _write(render_csv(RUN_COLUMNS, rows, "runs"), out)
    if any(not r["converged"] for r in rows):
        print("warning: some runs did not converge before max_slots", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def _cmd_verify(args) -> int:
    if args.trials < 0:
        raise ConfigError("--trials must be >= 0")
    scheduler = parse_scheduler(args.scheduler, np.random.default_rng(args.seed + 1))
    records = verify_suite(args.n_max, args.trials, args.seed, scheduler)
    if not records:
        print("warning: trials=0, nothing checked (vacuous pass)", file=sys.stderr)
    for r in records:
        status = "PASS" if r.holds else "FAIL"
        print(f"{status} {r.check}: lhs={r.lhs!r} rhs={r.rhs!r}")
    if args.out:
        _write(render_csv(VERIFY_COLUMNS, [vars(r) for r in records], "verify"), args.out)
    return EXIT_OK if all(r.holds for r in records) else EXIT_VERIFY


def _cmd_bounds(args) -> int:
    text, _ = bounds_report(args.pattern, args.n, args.load, args.source, args.xi, args.k,
                            args.slots, args.seed)
    sys.stdout.write(text)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        if args.command == "verify":
            return _cmd_verify(args)
        if args.command == "bounds":
            return _cmd_bounds(args)
        return _cmd_experiment(args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
