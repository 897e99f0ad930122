"""Per-slot dynamics of the dispatcher + N queues.

Within a slot: sample A_sigma -> dispatch the whole batch to one server ->
sample S_n -> apply Q_n(t+1) = max(Q_n + A_n - S_n, 0) -> update memory.

``step`` is the readable reference; ``simulate`` runs the same dynamics in
compiled code and accumulates the steady-state functionals on the fly.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import _kernel
from .geometry import CollapseDiagnostics, DEFAULT_THETAS
from .policies import PolicySpec, decide
from .processes import ProcessSpec, SystemParams, sample
from .stats import EstimatorState


class Streams(NamedTuple):
    """Three independent generators: arrivals, services, routing decisions."""

    arrival: np.random.Generator
    service: np.random.Generator
    routing: np.random.Generator

    @classmethod
    def from_seed(cls, seed) -> "Streams":
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        a, s, r = ss.spawn(3)
        return cls(np.random.default_rng(a), np.random.default_rng(s), np.random.default_rng(r))

    @classmethod
    def from_parts(cls, traffic: np.random.SeedSequence, routing: np.random.SeedSequence) -> "Streams":
        a, s = traffic.spawn(2)
        return cls(np.random.default_rng(a), np.random.default_rng(s), np.random.default_rng(routing))


@dataclass
class SystemState:
    Q: np.ndarray
    memory: frozenset = frozenset()
    slot: int = 0

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=np.int64)
        if np.any(self.Q < 0):
            raise ValueError("queue lengths must be nonnegative")
        self.memory = frozenset(int(m) for m in self.memory)
        if any(not 0 <= m < self.Q.size for m in self.memory):
            raise ValueError("memory holds an index outside 0..N-1")


@dataclass(frozen=True)
class SlotObservation:
    a_total: int
    dest: Optional[int]
    A: np.ndarray
    S: np.ndarray
    U: np.ndarray
    Q_next: np.ndarray
    report_msgs: int
    memory_nonempty: bool = False


def update_memory(prev_memory, Q, Q_next, r: Optional[int], semantics: str, removed: Optional[int] = None):
    """Memory after the slot; returns ``(memory, reports)``.

    level:       {n : Q_next[n] < r}
    report-once: (prev - {removed}) | {n : Q_next[n] < r <= Q[n]}
    """
    if r is None:
        return frozenset(), 0
    kept = set(prev_memory)
    kept.discard(removed)
    Q_next = np.asarray(Q_next)
    if semantics == "level":
        new = {int(n) for n in np.flatnonzero(Q_next < r)}
        return frozenset(new), len(new - kept)
    if semantics == "report-once":
        Q = np.asarray(Q)
        crossed = {int(n) for n in np.flatnonzero((Q_next < r) & (Q >= r))}
        return frozenset(kept | crossed), len(crossed)
    raise ValueError(f"unknown memory semantics {semantics!r}")


def reset(params: SystemParams, r: Optional[int] = None, initial=None) -> SystemState:
    """Empty system (``initial=None``) or a custom starting vector."""
    if initial is None:
        Q0 = np.zeros(params.N, dtype=np.int64)
    else:
        Q0 = np.asarray(initial)
        if Q0.shape != (params.N,):
            raise ValueError(f"initial queue vector must have length {params.N}")
        if np.any(Q0 < 0):
            raise ValueError("initial queue lengths must be nonnegative")
    memory = frozenset() if r is None else frozenset(int(n) for n in np.flatnonzero(Q0 < r))
    return SystemState(Q0, memory, 0)


def step(state: SystemState, params: SystemParams, policy: PolicySpec, streams: Streams, r: Optional[int] = None):
    """Advance one slot.  ``r`` is the resolved threshold (None: no memory)."""
    Q = state.Q
    N = Q.size
    a = sample(params.arrival, streams.arrival)
    memory = state.memory
    nonempty = bool(memory)
    dest = None
    removed = None
    if a > 0:
        dest = decide(policy, Q, memory if r is not None else frozenset(), params.mu, streams.routing)
        if policy.rule == "jbt" and nonempty:
            removed = dest
    S = np.array([sample(s, streams.service) for s in params.service], dtype=np.int64)
    A = np.zeros(N, dtype=np.int64)
    if dest is not None:
        A[dest] = a
    x = Q + A - S
    U = np.maximum(-x, 0)
    Q_next = np.maximum(x, 0)
    new_memory, reports = update_memory(memory, Q, Q_next, r, policy.semantics, removed)
    obs = SlotObservation(int(a), dest, A, S, U, Q_next, reports, nonempty)
    return SystemState(Q_next, new_memory, state.slot + 1), obs


def run_trace(params, policy, streams, n_slots, r=None, state=None):
    """List of SlotObservation from the reference stepper (debugging, tests)."""
    state = state or reset(params, r)
    out = []
    for _ in range(n_slots):
        q_prev = state.Q
        state, obs = step(state, params, policy, streams, r)
        out.append((q_prev, obs))
    return state, out


TRACE_FIELDS = ("slot", "a_total", "dest", "A", "S", "U", "Q_next", "report_msgs")


def dump_trace(trace, path) -> None:
    """CSV, one row per slot; vector fields are space-separated integers."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_FIELDS)
        for t, (_, o) in enumerate(trace):
            vec = lambda v: " ".join(str(int(x)) for x in v)  # noqa: E731
            w.writerow([t, o.a_total, "" if o.dest is None else o.dest, vec(o.A), vec(o.S), vec(o.U), vec(o.Q_next), o.report_msgs])


# ---------------------------------------------------------------------------
# compiled fast path


def _process_arrays(spec: ProcessSpec):
    if spec.finite_support:
        cdf = spec.cdf_table()
        return 0, 0.0, cdf
    if spec.family == "truncated-poisson":
        return 1, spec.params["rate"], np.ones(1)
    return 2, spec.params["p"], np.ones(1)


@dataclass
class RunResult:
    estimator: EstimatorState
    diagnostics: Optional[CollapseDiagnostics]
    counters: dict
    max_distance_jump: float
    state: SystemState
    trace: Optional[dict] = None
    extra: dict = field(default_factory=dict)


def simulate(
    params: SystemParams,
    policy: PolicySpec,
    streams: Streams,
    horizon: int,
    warmup: int,
    batches: int = 32,
    r: Optional[int] = "auto",
    diag_r: Optional[int] = None,
    theta_grid=DEFAULT_THETAS,
    state: Optional[SystemState] = None,
    trace_slots: int = 0,
) -> RunResult:
    """Run ``warmup + batches * batch_size`` slots (at most ``horizon``) in compiled code.

    ``r="auto"`` resolves the policy's own threshold at ``params.epsilon``.
    ``diag_r`` is the region threshold for the collapse diagnostics (None
    disables them).
    """
    if r == "auto":
        r = policy.threshold(params.epsilon)
    if warmup < 0 or horizon - warmup < batches:
        raise ValueError(f"horizon {horizon} leaves fewer than {batches} post-warm-up slots after warmup {warmup}")
    batch_size = (horizon - warmup) // batches
    n_slots = warmup + batch_size * batches
    state = state or reset(params, r)
    N = params.N

    Q = state.Q.astype(np.int64).copy()
    mem = np.zeros(N, dtype=np.uint8)
    for m in state.memory:
        mem[m] = 1
    mu = params.mu.astype(float)
    mu_cum = np.cumsum(mu)
    a_kind, a_param, a_cdf = _process_arrays(params.arrival)
    s_parts = [_process_arrays(s) for s in params.service]
    s_len = np.array([p[2].size for p in s_parts], dtype=np.int64)
    s_cdf = np.ones((N, int(s_len.max())))
    for n, p in enumerate(s_parts):
        s_cdf[n, : p[2].size] = p[2]
    s_kind = np.array([p[0] for p in s_parts], dtype=np.int64)
    s_param = np.array([p[1] for p in s_parts], dtype=float)

    est = EstimatorState(warmup=warmup, batch_size=batch_size, n_batches=batches, N=N)
    # d^2 <= ||min(q - r, 0)||^2 <= N r^2, so this table cannot overflow
    hist = np.zeros(N * diag_r**2 + 1 if diag_r else 1, dtype=np.int64)
    counters = np.zeros(_kernel.N_COUNTERS, dtype=np.int64)
    fstats = np.zeros(1)
    tn = int(min(trace_slots, n_slots))
    tr = {
        "a_total": np.zeros(tn, np.int64),
        "dest": np.zeros(tn, np.int64),
        "S": np.zeros((tn, N), np.int64),
        "U": np.zeros((tn, N), np.int64),
        "Q_next": np.zeros((tn, N), np.int64),
        "memory": np.zeros((tn, N), np.uint8),
        "reports": np.zeros(tn, np.int64),
    }
    _kernel.run_kernel(
        Q, mem, int(r or 0), _kernel.SEMANTICS_CODES[policy.semantics], _kernel.RULE_CODES[policy.rule],
        int(policy.d), _kernel.TIE_CODES[policy.tie_break], mu, mu_cum,
        a_kind, float(a_param), a_cdf, a_cdf.size,
        s_kind, s_param, s_cdf, s_len,
        streams.arrival, streams.service, streams.routing,
        n_slots, warmup, batch_size,
        int(diag_r or 0), hist, est.sums, counters, fstats,
        tn, tr["a_total"], tr["dest"], tr["S"], tr["U"], tr["Q_next"], tr["memory"], tr["reports"],
    )
    est.t = n_slots
    if counters[_kernel.C_OVERFLOW]:
        raise RuntimeError(f"{counters[_kernel.C_OVERFLOW]} distance samples fell outside the histogram")
    diag = None
    if diag_r:
        diag = CollapseDiagnostics(tuple(theta_grid))
        diag.record_squared_histogram(hist)
    counts = {
        "tasks": int(counters[_kernel.C_TASKS]),
        "dispatches": int(counters[_kernel.C_DISPATCH]),
        "dispatch_memory_nonempty": int(counters[_kernel.C_MEM_NONEMPTY]),
        "reports": int(counters[_kernel.C_REPORTS]),
        "slots": int(counters[_kernel.C_SLOTS]),
    }
    est.counters.update(counts)
    final = SystemState(Q, frozenset(int(n) for n in np.flatnonzero(mem)), state.slot + n_slots)
    return RunResult(est, diag, counts, float(fstats[0]), final, tr if tn else None)
