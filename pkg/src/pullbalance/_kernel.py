"""Compiled slot loop.

Mirrors ``system.step`` + ``stats.accumulate`` + ``CollapseDiagnostics.record``
draw for draw; tests compare the two paths slot by slot.
"""
import numpy as np
from numba import njit

# functional columns of the per-batch sums
SUM_Q, SUM_Q_SQ, T_EPS, UNUSED, UNUSED_SQ, T1, T2, T3, LHS = range(9)
N_FUNCTIONALS = 9
FUNCTIONAL_NAMES = ("sum_q", "sum_q_sq", "t_eps", "unused", "unused_sq", "T1", "T2", "T3", "lhs")

# integer counters
C_TASKS, C_DISPATCH, C_MEM_NONEMPTY, C_REPORTS, C_SLOTS, C_OVERFLOW, C_MAX_D2 = range(7)
N_COUNTERS = 7

RULE_CODES = {"random": 0, "jsq": 1, "pod": 2, "jbt": 3}
SEMANTICS_CODES = {"level": 0, "report-once": 1}
TIE_CODES = {"uniform": 0, "lowest": 1}


@njit(cache=True)
def _lookup(cdf, length, u):
    # branchless count for short tables; a data-dependent loop exit mispredicts
    if length <= 16:
        k = 0
        for j in range(length - 1):
            k += u >= cdf[j]
        return k
    return np.searchsorted(cdf[: length - 1], u, side="right")


@njit(cache=True)
def _lookup_row(cdf, row, length, u):
    if length <= 16:
        k = 0
        for j in range(length - 1):
            k += u >= cdf[row, j]
        return k
    return np.searchsorted(cdf[row, : length - 1], u, side="right")


@njit(cache=True)
def _pick_cum(cum, n, u):
    target = u * cum[n - 1]
    k = 0
    for j in range(n - 1):
        k += target >= cum[j]
    return k


@njit(cache=True)
def run_kernel(
    Q, mem, r, semantics, rule, d, tie, mu, mu_cum,
    a_kind, a_param, a_cdf, a_len,
    s_kind, s_param, s_cdf, s_len,
    rng_a, rng_s, rng_r,
    n_slots, warmup, batch_size,
    diag_r, hist, sums, counters, fstats,
    trace_n, tr_a, tr_dest, tr_S, tr_U, tr_Qn, tr_mem, tr_reports,
):
    if n_slots - warmup > batch_size * sums.shape[0]:
        raise ValueError("post-warm-up slots exceed batches x batch_size")
    N = Q.shape[0]
    S = np.zeros(N, np.int64)
    U = np.zeros(N, np.int64)
    A = np.zeros(N, np.int64)
    Qn = np.zeros(N, np.int64)
    idx = np.zeros(N, np.int64)
    hist_size = hist.shape[0]
    prev_d = -1.0
    for t in range(n_slots):
        # (i) arrivals
        # generators are only touched here in the loop body; passing them into
        # helpers costs a refcount round trip per call
        if a_kind == 0:
            a = _lookup(a_cdf, a_len, rng_a.random())
        elif a_kind == 1:
            a = rng_a.poisson(a_param)
        else:
            a = rng_a.geometric(a_param) - 1
        # (ii) dispatch
        dest = -1
        mem_count = 0
        for n in range(N):
            mem_count += mem[n]
        if a > 0:
            if rule == 0:
                dest = _pick_cum(mu_cum, N, rng_r.random())
            elif rule == 1:
                qmin = Q[0]
                for n in range(1, N):
                    if Q[n] < qmin:
                        qmin = Q[n]
                nt = 0
                for n in range(N):
                    if Q[n] == qmin:
                        idx[nt] = n
                        nt += 1
                if nt == 1 or tie == 1:
                    dest = idx[0]
                else:
                    dest = idx[int(rng_r.random() * nt)]
            elif rule == 2:
                dd = d if d < N else N
                for n in range(N):
                    idx[n] = n
                for i in range(dd):
                    j = i + int(rng_r.random() * (N - i))
                    tmp = idx[i]
                    idx[i] = idx[j]
                    idx[j] = tmp
                dest = idx[0]
                for i in range(1, dd):
                    c = idx[i]
                    if Q[c] < Q[dest] or (tie == 1 and Q[c] == Q[dest] and c < dest):
                        dest = c
            else:
                u = rng_r.random()
                if mem_count > 0:
                    total = 0.0
                    for n in range(N):
                        if mem[n]:
                            total += mu[n]
                    target = u * total
                    c = 0.0
                    last = -1
                    for n in range(N):
                        if mem[n]:
                            c += mu[n]
                            last = n
                            if target < c:
                                dest = n
                                break
                    if dest < 0:
                        dest = last
                    mem[dest] = 0
                else:
                    dest = _pick_cum(mu_cum, N, u)
        # (iii) service
        for n in range(N):
            if s_kind[n] == 0:
                S[n] = _lookup_row(s_cdf, n, s_len[n], rng_s.random())
            elif s_kind[n] == 1:
                S[n] = rng_s.poisson(s_param[n])
            else:
                S[n] = rng_s.geometric(s_param[n]) - 1
        # (iv) queue dynamics
        for n in range(N):
            A[n] = a if n == dest else 0
            x = Q[n] + A[n] - S[n]
            if x < 0:
                U[n] = -x
                Qn[n] = 0
            else:
                U[n] = 0
                Qn[n] = x
        # (v) memory
        reports = 0
        if r > 0:
            if semantics == 0:
                for n in range(N):
                    below = 1 if Qn[n] < r else 0
                    if below and mem[n] == 0:
                        reports += 1
                    mem[n] = below
            else:
                for n in range(N):
                    if Qn[n] < r and Q[n] >= r:
                        reports += 1
                        mem[n] = 1
        measured = t >= warmup
        if measured:
            b = (t - warmup) // batch_size
            sq = 0
            sqn = 0
            su = 0
            for n in range(N):
                sq += Q[n]
                sqn += Qn[n]
                su += U[n]
            t1 = 0.0
            t2 = 0.0
            t3 = 0.0
            lhs = 0.0
            for i in range(N):
                for j in range(i + 1, N):
                    t1 += 2.0 * (Q[i] - Q[j]) * (A[i] - A[j])
                    x = A[i] - A[j] - S[i] + S[j]
                    t2 += x * x
                    y = U[i] - U[j]
                    t3 += y * y
                    lhs += 2.0 * (Qn[i] * U[j] + Qn[j] * U[i])
            sums[b, 0] += sq
            sums[b, 1] += float(sq) * sq
            sums[b, 2] += float(sqn) * su
            sums[b, 3] += su
            sums[b, 4] += float(su) * su
            sums[b, 5] += t1
            sums[b, 6] += t2
            sums[b, 7] += t3
            sums[b, 8] += lhs
            counters[C_TASKS] += a
            counters[C_SLOTS] += 1
            counters[C_REPORTS] += reports
            if a > 0:
                counters[C_DISPATCH] += 1
                if mem_count > 0:
                    counters[C_MEM_NONEMPTY] += 1
            if diag_r > 0:
                lo = 0
                up = 0
                for n in range(N):
                    x = Q[n] - diag_r
                    if x > 0:
                        lo += x * x
                    else:
                        up += x * x
                d2 = lo if lo < up else up
                if d2 < hist_size:
                    hist[d2] += 1
                else:
                    counters[C_OVERFLOW] += 1
                if d2 > counters[C_MAX_D2]:
                    counters[C_MAX_D2] = d2
                dcur = np.sqrt(float(d2))
                if prev_d >= 0.0:
                    jump = abs(dcur - prev_d)
                    if jump > fstats[0]:
                        fstats[0] = jump
                prev_d = dcur
        if t < trace_n:
            tr_a[t] = a
            tr_dest[t] = dest
            tr_reports[t] = reports
            for n in range(N):
                tr_S[t, n] = S[n]
                tr_U[t, n] = U[n]
                tr_Qn[t, n] = Qn[n]
                tr_mem[t, n] = mem[n]
        for n in range(N):
            Q[n] = Qn[n]
