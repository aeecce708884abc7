"""Input-queued switch scheduling with queue-proportional sampling (QPS).

Queue and traffic model, the QPS-r, iSLIP, maximum-weight and greedy
schedulers, a slot-level simulator, and analytical bound evaluators.
"""

from .analysis import (
    MarkovBoundInputs,
    QpsOracleResult,
    bernoulli_delay_bound,
    drift_estimate,
    exact_qps1_expectation,
    iid_queue_bound,
    lyapunov,
    markovian_queue_bound,
    verify_strong_departure,
    verify_weak_departure_inequality,
)
from .core import (
    ArrivalMatrix,
    DepartureMatrix,
    Matching,
    PreconditionError,
    QueueMatrix,
    apply_slot,
    departures_from,
    is_matching,
    is_maximal,
    neighborhood_sum,
)
from .sampling import LinearScanSampler, ProportionalSampler
from .schedulers import (
    GreedyMaximalScheduler,
    IslipPointers,
    IslipScheduler,
    MwmScheduler,
    QpsScheduler,
    greedy_maximal_schedule,
    islip_schedule,
    mwm_schedule,
    parse_scheduler,
    qps_r_schedule,
)
from .simulator import SimConfig, SimResult, littles_law_check, run, throughput_search
from .traffic import (
    BernoulliSource,
    MarkovSource,
    OnOffSource,
    TrafficRateMatrix,
    estimate_moments,
    max_load_factor,
    parse_source,
    pattern_matrix,
    rate_matrix,
)

__version__ = "0.1.0"
