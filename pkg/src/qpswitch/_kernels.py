"""Compiled inner loops shared by the schedulers, sources and the simulator.

Every function takes plain arrays plus a ``numpy.random.Generator`` so the
Python-facing objects and the slot engine consume identical random streams.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

# scheduler kinds understood by ``advance``
SCHED_QPS = 0
SCHED_ISLIP = 1
SCHED_GREEDY = 2
SCHED_EXTERNAL = 3

# source kinds
SRC_NONE = 0
SRC_BERNOULLI = 1
SRC_ONOFF = 2
SRC_MARKOV = 3

# layout of the int64 ``counters`` array
C_ARRIVED = 0
C_DEPARTED = 1
C_P1_VIOL = 2
C_FIFO_VIOL = 3
C_FREE_HEAD = 4
C_FREE_COUNT = 5
C_TOTAL_Q = 6
N_COUNTERS = 7

# columns of the float64 ``stats`` array (one row per stat block of slots)
S_DELAY_SUM = 0
S_DEPARTED = 1
S_QUEUE_SUM = 2
S_ARRIVED = 3
S_SLOTS = 4
N_STATS = 5

BLOCK = 16  # timestamps per FIFO pool block


# ---------------------------------------------------------------- sampling


@njit(cache=True)
def top_power(n):
    p = 1
    while p * 2 <= n:
        p *= 2
    return p


@njit(cache=True)
def fen_build(weights, tree):
    """Fill ``tree[1..n]`` as a binary indexed tree over ``weights[0..n-1]``."""
    n = weights.shape[0]
    tree[0] = 0
    for k in range(1, n + 1):
        tree[k] = weights[k - 1]
    for k in range(1, n + 1):
        parent = k + (k & -k)
        if parent <= n:
            tree[parent] += tree[k]


@njit(cache=True)
def fen_add(tree, n, index, delta):
    k = index + 1
    while k <= n:
        tree[k] += delta
        k += k & -k


@njit(cache=True)
def fen_find(tree, n, target):
    """Smallest 0-based index whose inclusive prefix sum exceeds ``target``."""
    pos = 0
    rem = target
    step = top_power(n)
    while step > 0:
        nxt = pos + step
        if nxt <= n and tree[nxt] <= rem:
            pos = nxt
            rem -= tree[nxt]
        step >>= 1
    return pos


@njit(cache=True)
def draw_target(rng, total):
    t = np.int64(rng.random() * total)
    if t >= total:
        t = total - 1
    return t


@njit(cache=True)
def linear_find(weights, target):
    acc = 0
    for k in range(weights.shape[0]):
        acc += weights[k]
        if acc > target:
            return k
    return weights.shape[0] - 1


# -------------------------------------------------------------- schedulers


@njit(cache=True)
def qps_match(q, tree, row_tot, r, rng, match_in, match_out, best_val, best_in, nties):
    """Run ``r`` QPS iterations; fills ``match_in``/``match_out`` (-1 = unmatched)."""
    n = q.shape[0]
    match_in[:] = -1
    match_out[:] = -1
    for _ in range(r):
        best_in[:] = -1
        best_val[:] = -1
        nties[:] = 0
        proposed = False
        for i in range(n):
            if match_in[i] >= 0 or row_tot[i] == 0:
                continue
            j = fen_find(tree[i], n, draw_target(rng, row_tot[i]))
            proposed = True
            if match_out[j] >= 0:
                continue
            v = q[i, j]
            if v > best_val[j]:
                best_val[j] = v
                best_in[j] = i
                nties[j] = 1
            elif v == best_val[j]:
                nties[j] += 1
                if rng.random() * nties[j] < 1.0:
                    best_in[j] = i
        if not proposed:
            break
        for j in range(n):
            i = best_in[j]
            if i >= 0:
                match_out[j] = i
                match_in[i] = j


@njit(cache=True)
def islip_match(q, iters, grant_ptr, accept_ptr, match_in, match_out, grant, free_in, best_d):
    """Request/grant/accept rounds; pointers move only on first-iteration accepts."""
    n = q.shape[0]
    match_in[:] = -1
    match_out[:] = -1
    for it in range(iters):
        nf = 0
        for i in range(n):
            if match_in[i] < 0:
                free_in[nf] = i
                nf += 1
        if nf == 0:
            break
        any_grant = False
        for j in range(n):
            grant[j] = -1
            if match_out[j] >= 0:
                continue
            # first unmatched input at or after the grant pointer, wrapping
            g = grant_ptr[j]
            lo = 0
            hi = nf
            while lo < hi:
                mid = (lo + hi) // 2
                if free_in[mid] < g:
                    lo = mid + 1
                else:
                    hi = mid
            for k in range(nf):
                idx = lo + k
                if idx >= nf:
                    idx -= nf
                i = free_in[idx]
                if q[i, j] > 0:
                    grant[j] = i
                    any_grant = True
                    break
        if not any_grant:
            break
        for k in range(nf):
            best_d[free_in[k]] = n
        for j in range(n):
            i = grant[j]
            if i >= 0:
                d = j - accept_ptr[i]
                if d < 0:
                    d += n
                if d < best_d[i]:
                    best_d[i] = d
        for k in range(nf):
            i = free_in[k]
            if best_d[i] == n:
                continue
            j = accept_ptr[i] + best_d[i]
            if j >= n:
                j -= n
            match_in[i] = j
            match_out[j] = i
            if it == 0:
                accept_ptr[i] = j + 1 if j + 1 < n else 0
                grant_ptr[j] = i + 1 if i + 1 < n else 0


@njit(cache=True)
def greedy_match(q, rng, match_in, match_out, edges):
    """Random-order greedy maximal matching over nonempty VOQs."""
    n = q.shape[0]
    match_in[:] = -1
    match_out[:] = -1
    m = 0
    for i in range(n):
        for j in range(n):
            if q[i, j] > 0:
                edges[m] = i * n + j
                m += 1
    for k in range(m - 1, 0, -1):
        s = np.int64(rng.random() * (k + 1))
        if s > k:
            s = k
        tmp = edges[k]
        edges[k] = edges[s]
        edges[s] = tmp
    for k in range(m):
        i = edges[k] // n
        j = edges[k] - i * n
        if match_in[i] < 0 and match_out[j] < 0:
            match_in[i] = j
            match_out[j] = i


# ----------------------------------------------------------------- sources


@njit(cache=True)
def _first_below(row, lo, target):
    """Smallest k >= lo with row[k] < target for a non-increasing row, else n."""
    n = row.shape[0]
    if lo >= n or row[n - 1] >= target:
        return n
    hi = n - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if row[mid] < target:
            hi = mid
        else:
            lo = mid + 1
    return lo


@njit(cache=True)
def bernoulli_arrivals(logsurv, always, rng, ai, aj, ac):
    """Independent Bernoulli(lambda_ij) per VOQ via skip sampling along each row.

    ``logsurv[i, k]`` is the cumulative log survival ``sum_{l<=k} log(1-lambda_il)``
    over entries with rate < 1; ``always[i]`` lists the columns with rate 1,
    padded with -1.
    """
    n = logsurv.shape[0]
    m = 0
    for i in range(n):
        row = logsurv[i]
        base = 0.0
        k = 0
        while True:
            u = rng.random()
            if u <= 0.0:
                break
            target = base + math.log(u)
            k = _first_below(row, k, target)
            if k >= n:
                break
            ai[m] = i
            aj[m] = k
            ac[m] = 1
            m += 1
            base = row[k]
            k += 1
        for k in range(always.shape[1]):
            j = always[i, k]
            if j < 0:
                break
            ai[m] = i
            aj[m] = j
            ac[m] = 1
            m += 1
    return m


@njit(cache=True)
def _geometric0(rng, p):
    return rng.geometric(p) - 1


@njit(cache=True)
def _row_sample(cum, u):
    n = cum.shape[0]
    lo = 0
    hi = n - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if cum[mid] > u:
            hi = mid
        else:
            lo = mid + 1
    return lo


@njit(cache=True)
def onoff_arrivals(row_load, row_cum, p_on, p_off, phase, remaining, dest, rng, ai, aj, ac):
    """Per input: one packet w.p. row load; ON phases pin the destination."""
    n = row_load.shape[0]
    m = 0
    for i in range(n):
        if row_load[i] <= 0.0:
            continue
        while remaining[i] == 0:
            if phase[i] == 1:
                phase[i] = 0
                remaining[i] = _geometric0(rng, p_off)
            else:
                phase[i] = 1
                dest[i] = _row_sample(row_cum[i], rng.random())
                remaining[i] = _geometric0(rng, p_on)
        if rng.random() < row_load[i]:
            if phase[i] == 1:
                j = dest[i]
            else:
                j = _row_sample(row_cum[i], rng.random())
            ai[m] = i
            aj[m] = j
            ac[m] = 1
            m += 1
        remaining[i] -= 1
    return m


@njit(cache=True)
def markov_arrivals(trans_cum, emission, nstates, state, rng, ai, aj, ac):
    """Emit eta(x_ij(t)) per VOQ, then step every chain once."""
    n = state.shape[0]
    m = 0
    for i in range(n):
        for j in range(n):
            s = state[i, j]
            e = emission[i, j, s]
            if e > 0:
                ai[m] = i
                aj[m] = j
                ac[m] = e
                m += 1
            ns = nstates[i, j]
            if ns > 1:
                state[i, j] = _row_sample(trans_cum[i, j, s, :ns], rng.random())
    return m


@njit(cache=True)
def gen_arrivals(src_kind, f1, f2a, f2b, f4, i1a, i1b, i1c, i2a, i2b, i3, fpar, rng, ai, aj, ac):
    if src_kind == SRC_BERNOULLI:
        return bernoulli_arrivals(f2a, i2a, rng, ai, aj, ac)
    if src_kind == SRC_ONOFF:
        return onoff_arrivals(f1, f2b, fpar[0], fpar[1], i1a, i1b, i1c, rng, ai, aj, ac)
    if src_kind == SRC_MARKOV:
        return markov_arrivals(f4, i3, i2a, i2b, rng, ai, aj, ac)
    return 0


# ------------------------------------------------------------ FIFO pool


@njit(cache=True)
def _pool_alloc(pool_next, counters):
    blk = counters[C_FREE_HEAD]
    counters[C_FREE_HEAD] = pool_next[blk]
    counters[C_FREE_COUNT] -= 1
    pool_next[blk] = -1
    return blk


@njit(cache=True)
def _pool_free(pool_next, counters, blk):
    pool_next[blk] = counters[C_FREE_HEAD]
    counters[C_FREE_HEAD] = blk
    counters[C_FREE_COUNT] += 1


@njit(cache=True)
def fifo_push(pool_data, pool_next, voq_ptr, counters, v, ts):
    # voq_ptr columns: head block, head offset, tail block, tail offset
    tail = voq_ptr[v, 2]
    if tail < 0:
        blk = _pool_alloc(pool_next, counters)
        voq_ptr[v, 0] = blk
        voq_ptr[v, 1] = 0
        voq_ptr[v, 2] = blk
        voq_ptr[v, 3] = 0
        tail = blk
    elif voq_ptr[v, 3] == BLOCK:
        blk = _pool_alloc(pool_next, counters)
        pool_next[tail] = blk
        voq_ptr[v, 2] = blk
        voq_ptr[v, 3] = 0
        tail = blk
    pool_data[tail, voq_ptr[v, 3]] = ts
    voq_ptr[v, 3] += 1


@njit(cache=True)
def fifo_pop(pool_data, pool_next, voq_ptr, counters, v, remaining_after):
    head = voq_ptr[v, 0]
    ts = pool_data[head, voq_ptr[v, 1]]
    voq_ptr[v, 1] += 1
    if remaining_after == 0:
        _pool_free(pool_next, counters, head)
        voq_ptr[v, 0] = -1
        voq_ptr[v, 1] = 0
        voq_ptr[v, 2] = -1
        voq_ptr[v, 3] = 0
    elif voq_ptr[v, 1] == BLOCK:
        nxt = pool_next[head]
        _pool_free(pool_next, counters, head)
        voq_ptr[v, 0] = nxt
        voq_ptr[v, 1] = 0
    return ts


# ------------------------------------------------------------------ engine


@njit(cache=True)
def advance(
    nslots, t0, measure_from, stat_block, headroom,
    q, row_tot, col_tot, tree,
    pool_data, pool_next, voq_ptr, counters, last_ts, stats,
    track_delay, check_p1,
    sched_kind, sched_param, grant_ptr, accept_ptr, ext_match, sched_rng,
    src_kind, f1, f2a, f2b, f4, i1a, i1b, i1c, i2a, i2b, i3, fpar, src_rng,
    match_in, match_out, best_val, best_in, nties, edges, ai, aj, ac,
):
    """Simulate up to ``nslots`` slots starting at slot ``t0``.

    Per slot: schedule on Q(t), depart head-of-line packets of matched nonempty
    VOQs, then add arrivals stamped ``t``. Returns the number of slots done;
    fewer than ``nslots`` means the FIFO pool needs more free blocks.
    """
    n = q.shape[0]
    for s in range(nslots):
        t = t0 + s
        if track_delay and counters[C_FREE_COUNT] < headroom:
            return s
        measure = t >= measure_from
        b = (t - measure_from) // stat_block if measure else 0
        if measure:
            stats[b, S_QUEUE_SUM] += counters[C_TOTAL_Q]
            stats[b, S_SLOTS] += 1

        if sched_kind == SCHED_QPS:
            qps_match(q, tree, row_tot, sched_param, sched_rng, match_in, match_out,
                      best_val, best_in, nties)
        elif sched_kind == SCHED_ISLIP:
            islip_match(q, sched_param, grant_ptr, accept_ptr, match_in, match_out, best_in,
                        best_val, nties)
        elif sched_kind == SCHED_GREEDY:
            greedy_match(q, sched_rng, match_in, match_out, edges)
        else:
            for i in range(n):
                match_in[i] = ext_match[i]

        if check_p1:
            # q_ij * Ddagger_ij >= q_ij on Q(t) and D(t)
            for i in range(n):
                best_val[i] = 0
            for i in range(n):
                j = match_in[i]
                if j >= 0 and q[i, j] > 0:
                    nties[i] = 1
                    best_val[j] = 1
                else:
                    nties[i] = 0
            for i in range(n):
                for j in range(n):
                    if q[i, j] > 0:
                        dij = 1 if match_in[i] == j and nties[i] == 1 else 0
                        if nties[i] + best_val[j] - dij < 1:
                            counters[C_P1_VIOL] += 1

        for i in range(n):
            j = match_in[i]
            if j < 0 or q[i, j] == 0:
                continue
            q[i, j] -= 1
            row_tot[i] -= 1
            col_tot[j] -= 1
            counters[C_TOTAL_Q] -= 1
            counters[C_DEPARTED] += 1
            fen_add(tree[i], n, j, -1)
            if track_delay:
                v = i * n + j
                ts = fifo_pop(pool_data, pool_next, voq_ptr, counters, v, q[i, j])
                if ts < last_ts[v]:
                    counters[C_FIFO_VIOL] += 1
                last_ts[v] = ts
                if measure:
                    stats[b, S_DELAY_SUM] += t - ts
                    stats[b, S_DEPARTED] += 1
            elif measure:
                stats[b, S_DEPARTED] += 1

        m = gen_arrivals(src_kind, f1, f2a, f2b, f4, i1a, i1b, i1c, i2a, i2b, i3, fpar,
                         src_rng, ai, aj, ac)
        for k in range(m):
            i = ai[k]
            j = aj[k]
            c = ac[k]
            q[i, j] += c
            row_tot[i] += c
            col_tot[j] += c
            counters[C_TOTAL_Q] += c
            counters[C_ARRIVED] += c
            fen_add(tree[i], n, j, c)
            if track_delay:
                v = i * n + j
                for _ in range(c):
                    fifo_push(pool_data, pool_next, voq_ptr, counters, v, t)
            if measure:
                stats[b, S_ARRIVED] += c
    return nslots


# ------------------------------------------------------------ Monte Carlo


@njit(cache=True)
def qps_departure_counts(q, tree, row_tot, r, trials, rng, counts,
                         match_in, match_out, best_val, best_in, nties):
    """Add one to ``counts[i, j]`` whenever a trial matches nonempty VOQ (i, j)."""
    n = q.shape[0]
    for _ in range(trials):
        qps_match(q, tree, row_tot, r, rng, match_in, match_out, best_val, best_in, nties)
        for i in range(n):
            j = match_in[i]
            if j >= 0 and q[i, j] > 0:
                counts[i, j] += 1


@njit(cache=True)
def batched_arrival_counts(src_kind, f1, f2a, f2b, f4, i1a, i1b, i1c, i2a, i2b, i3, fpar,
                           rng, ai, aj, ac, slots_per_batch, out):
    """``out[b]`` gets the per-VOQ arrival totals of batch ``b``."""
    for b in range(out.shape[0]):
        for _ in range(slots_per_batch):
            m = gen_arrivals(src_kind, f1, f2a, f2b, f4, i1a, i1b, i1c, i2a, i2b, i3, fpar,
                             rng, ai, aj, ac)
            for k in range(m):
                out[b, ai[k], aj[k]] += ac[k]
