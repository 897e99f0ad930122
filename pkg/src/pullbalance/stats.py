"""Steady-state estimation: batch means over the post-warm-up slots.

Per slot, with Q = Q(t), Q+ = Q(t+1) and U = U(t):

    sum_q      ||Q||_1
    t_eps      ||Q+||_1 * ||U||_1
    unused     ||U||_1
    T1         2 sum_{i<j} (Q_i - Q_j)(A_i - A_j)
    T2         sum_{i<j} (A_i - A_j - S_i + S_j)^2
    T3         sum_{i<j} (U_i - U_j)^2
    lhs        2 sum_{i<j} (Q+_i U_j + Q+_j U_i)

In steady state with homogeneous servers, E[lhs] = T1 + T2 - T3.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats as sps

from ._kernel import FUNCTIONAL_NAMES, N_FUNCTIONALS

COL = {name: k for k, name in enumerate(FUNCTIONAL_NAMES)}
PAIRWISE = ("T1", "T2", "T3", "lhs")


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class Estimate:
    mean: float
    ci_half: float
    n_effective: int

    @property
    def interval(self):
        return self.mean - self.ci_half, self.mean + self.ci_half


@dataclass
class EstimatorState:
    warmup: int
    batch_size: int
    n_batches: int = 32
    N: int = 2
    t: int = 0
    sums: np.ndarray = None
    counters: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.sums is None:
            self.sums = np.zeros((self.n_batches, N_FUNCTIONALS))

    @property
    def measured_slots(self) -> int:
        return max(0, min(self.t - self.warmup, self.batch_size * self.n_batches))

    @property
    def complete_batches(self) -> int:
        return self.measured_slots // self.batch_size


def slot_functionals(q_prev, obs) -> np.ndarray:
    """The nine per-slot values, in column order."""
    Q = np.asarray(q_prev, dtype=np.int64)
    A, S, U, Qn = obs.A, obs.S, obs.U, obs.Q_next
    sq, sqn, su = int(Q.sum()), int(Qn.sum()), int(U.sum())
    i, j = np.triu_indices(Q.size, 1)
    t1 = 2.0 * np.sum((Q[i] - Q[j]) * (A[i] - A[j]))
    t2 = float(np.sum((A[i] - A[j] - S[i] + S[j]) ** 2))
    t3 = float(np.sum((U[i] - U[j]) ** 2))
    lhs = 2.0 * np.sum(Qn[i] * U[j] + Qn[j] * U[i])
    return np.array([sq, float(sq) * sq, float(sqn) * su, su, float(su) * su, t1, t2, t3, lhs])


def accumulate(est: EstimatorState, obs, q_prev) -> EstimatorState:
    """Fold one slot into ``est`` (in place; also returned)."""
    t = est.t
    est.t += 1
    if t < est.warmup:
        return est
    b = (t - est.warmup) // est.batch_size
    if b >= est.n_batches:
        return est
    est.sums[b] += slot_functionals(q_prev, obs)
    c = est.counters
    c["tasks"] = c.get("tasks", 0) + obs.a_total
    c["slots"] = c.get("slots", 0) + 1
    c["reports"] = c.get("reports", 0) + obs.report_msgs
    if obs.a_total > 0:
        c["dispatches"] = c.get("dispatches", 0) + 1
        if obs.memory_nonempty:
            c["dispatch_memory_nonempty"] = c.get("dispatch_memory_nonempty", 0) + 1
    return est


def batch_means_ci(batch_means, level: float = 0.95) -> Estimate:
    x = np.asarray(batch_means, dtype=float)
    B = x.size
    if B < 2:
        raise InsufficientDataError(f"need at least 2 batches for a confidence interval, got {B}")
    s = x.std(ddof=1)
    half = float(sps.t.ppf(0.5 + level / 2, B - 1) * s / math.sqrt(B)) if s > 0 else 0.0
    return Estimate(float(x.mean()), half, B)


def batch_matrix(est: EstimatorState) -> np.ndarray:
    """Per-batch means of every functional, shape (batches, 9)."""
    nb = est.complete_batches
    if nb < 2:
        raise InsufficientDataError(
            f"need at least 2 complete post-warm-up batches of {est.batch_size} slots, got {nb}"
        )
    return est.sums[:nb] / est.batch_size


def finalize(est: EstimatorState, epsilon: float, homogeneous: bool = True, zeta_eps: Optional[float] = None) -> dict:
    """Point estimates with 95% batch-means intervals.

    Pairwise functionals are None on heterogeneous systems.  With
    ``zeta_eps`` (= sigma^2 + nu^2 + eps^2) the steady-state identity
    eps E||Q||_1 = zeta_eps/2 + t_eps - E||U||_1^2 / 2 is also checked.
    """
    m = batch_matrix(est)
    ci = {name: batch_means_ci(m[:, k]) for name, k in COL.items()}
    out = {
        "mean_sum_q": ci["sum_q"].mean,
        "ci_half": ci["sum_q"].ci_half,
        "scaled_mean": epsilon * ci["sum_q"].mean,
        "scaled_ci_half": epsilon * ci["sum_q"].ci_half,
        "mean_sum_q_sq": ci["sum_q_sq"].mean,
        "t_eps": ci["t_eps"].mean,
        "t_eps_ci": ci["t_eps"].ci_half,
        "unused_mean": ci["unused"].mean,
        "unused_ci": ci["unused"].ci_half,
        "n_batches": m.shape[0],
    }
    if homogeneous:
        for name in PAIRWISE:
            out[name] = ci[name].mean
            out[f"{name}_ci"] = ci[name].ci_half
        res = m[:, COL["lhs"]] - (m[:, COL["T1"]] + m[:, COL["T2"]] - m[:, COL["T3"]])
        r = batch_means_ci(res)
        out["lemma5_residual"] = r.mean
        out["lemma5_residual_ci"] = r.ci_half
    else:
        for name in PAIRWISE:
            out[name] = None
            out[f"{name}_ci"] = None
        out["lemma5_residual"] = None
        out["lemma5_residual_ci"] = None
    if zeta_eps is not None:
        res = epsilon * m[:, COL["sum_q"]] - (zeta_eps / 2 + m[:, COL["t_eps"]] - m[:, COL["unused_sq"]] / 2)
        r = batch_means_ci(res)
        out["lemma4_residual"] = r.mean
        out["lemma4_residual_ci"] = r.ci_half
    return out


def replication_ci(values, level: float = 0.95) -> Estimate:
    """t-interval treating replication means as i.i.d."""
    return batch_means_ci(values, level)


def welch_interval(a, b, level: float = 0.95):
    """(diff, half-width) for mean(a) - mean(b) with Welch-Satterthwaite dof."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    va = a.var(ddof=1) / a.size
    vb = b.var(ddof=1) / b.size
    se2 = va + vb
    diff = float(a.mean() - b.mean())
    if se2 == 0:
        return diff, 0.0
    dof = se2**2 / ((va**2 / (a.size - 1) if va else 0.0) + (vb**2 / (b.size - 1) if vb else 0.0))
    return diff, float(sps.t.ppf(0.5 + level / 2, dof) * math.sqrt(se2))


def lower_bound_floor(zeta_half: float, s_max: float, epsilon: float, rel: float = 0.05) -> float:
    """Finite-eps floor for the scaled mean: zeta/2 (1 - rel) - S_max eps.

    The pairwise unused-service term is O(eps S_max) and Monte Carlo error
    is a few percent at desk-scale horizons; both are absorbed here.
    """
    return zeta_half * (1.0 - rel) - s_max * epsilon
