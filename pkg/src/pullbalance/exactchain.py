"""Exact stationary analysis of the truncated (Q, memory) chain for small N.

Each queue is clipped at the buffer cap B; the probability of transitions
that would have exceeded B is recorded as ``clipped_mass`` rather than
redistributed.  Under level semantics memory is a function of Q and is not
stored; under report-once it is carried as an N-bit mask.

Every per-slot functional is evaluated as pi . g where g(z) is its exact
one-step conditional expectation from state z.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import breadth_first_order
from scipy.sparse.linalg import splu

from .policies import PolicySpec
from .processes import SystemParams

MAX_STATES = 5_000_000
DIRECT_LIMIT = 20_000
# sparse LU stays cheap well past DIRECT_LIMIT on these banded grids
LU_LIMIT = 400_000
FUNCTIONALS = (
    "sum_q", "sum_q_sq", "t_eps", "unused_l1", "unused_l1_sq", "T1", "T2", "T3", "lhs_lemma5",
)
HOMOGENEOUS_ONLY = ("T1", "T2", "T3", "lhs_lemma5")


class StateSpaceTooLarge(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


class HomogeneityError(ValueError):
    pass


@dataclass
class TruncatedChain:
    N: int
    B: int
    P: sp.csr_matrix
    Q: np.ndarray                 # (states, N) queue vectors
    mem: Optional[np.ndarray]     # (states, N) memory bits, None under level semantics
    g: dict = field(default_factory=dict)   # functional -> (states,) one-step expectations
    clipped_mass: Optional[np.ndarray] = None
    r: Optional[int] = None
    semantics: str = "level"
    homogeneous: bool = True
    meta: dict = field(default_factory=dict)

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @classmethod
    def from_matrix(cls, P, Q=None) -> "TruncatedChain":
        """Wrap an arbitrary row-stochastic matrix (toy chains, tests)."""
        P = sp.csr_matrix(P, dtype=float)
        n = P.shape[0]
        Q = np.zeros((n, 1), np.int64) if Q is None else np.asarray(Q)
        return cls(N=Q.shape[1], B=0, P=P, Q=Q, mem=None, clipped_mass=np.zeros(n))


@dataclass(frozen=True)
class StationaryDistribution:
    pi: np.ndarray
    residual: float
    boundary_mass: float
    method: str = "direct"
    iterations: int = 0


def _pmf(spec):
    if spec.pmf is None:
        raise ValueError(f"oracle requires finite support; {spec.family} with no cap is unbounded")
    pmf = np.asarray(spec.pmf, dtype=float)
    support = np.flatnonzero(pmf > 0)
    return support, pmf[support]


def _pick_proportional_rows(mask: np.ndarray, mu: np.ndarray) -> np.ndarray:
    w = mask * mu
    tot = w.sum(axis=1, keepdims=True)
    fallback = np.broadcast_to(mu / mu.sum(), w.shape)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(tot > 0, w / np.where(tot > 0, tot, 1.0), fallback)


def dispatch_matrix(policy: PolicySpec, Q: np.ndarray, mem: Optional[np.ndarray], mu: np.ndarray) -> np.ndarray:
    """P(dest = n | state) for every state at once, shape (states, N)."""
    S, N = Q.shape
    mu = np.asarray(mu, dtype=float)
    if policy.rule == "random":
        return np.broadcast_to(mu / mu.sum(), (S, N)).copy()
    if policy.rule == "jsq":
        tie = Q == Q.min(axis=1, keepdims=True)
        if policy.tie_break == "lowest":
            out = np.zeros((S, N))
            out[np.arange(S), tie.argmax(axis=1)] = 1.0
            return out
        return tie / tie.sum(axis=1, keepdims=True)
    if policy.rule == "pod":
        d = min(policy.d, N)
        subsets = list(itertools.combinations(range(N), d))
        out = np.zeros((S, N))
        for s in subsets:
            sub = Q[:, s]
            tie = sub == sub.min(axis=1, keepdims=True)
            if policy.tie_break == "lowest":
                w = np.zeros_like(sub, dtype=float)
                w[np.arange(S), tie.argmax(axis=1)] = 1.0
            else:
                w = tie / tie.sum(axis=1, keepdims=True)
            out[:, s] += w / len(subsets)
        return out
    return _pick_proportional_rows(mem.astype(float), mu)


def _encode(Q, mem, B):
    N = Q.shape[1]
    radix = (B + 1) ** np.arange(N)
    idx = Q @ radix
    if mem is not None:
        idx = idx * (1 << N) + mem @ (1 << np.arange(N))
    return idx


def build_chain(params: SystemParams, policy: PolicySpec, B: int, semantics: Optional[str] = None, r: Optional[int] = None) -> TruncatedChain:
    """Enumerate (arrival, destination, service vector) outcomes from every reachable state."""
    if not params.finite_support:
        raise ValueError("oracle requires finite support arrival and service processes")
    semantics = semantics or policy.semantics
    N = params.N
    if r is None:
        r = policy.threshold(params.epsilon) if policy.rule == "jbt" else None
    carry_mem = policy.rule == "jbt" and semantics == "report-once"
    n_mem = (1 << N) if carry_mem else 1
    total = (B + 1) ** N * n_mem
    if total > MAX_STATES:
        raise StateSpaceTooLarge(f"(B+1)^N x memory configurations = {total} exceeds {MAX_STATES}")

    grid = np.array(list(itertools.product(range(B + 1), repeat=N)), dtype=np.int64)[:, ::-1]
    if carry_mem:
        bits = np.array(list(itertools.product((0, 1), repeat=N)), dtype=np.int64)[:, ::-1]
        Qs = np.repeat(grid, len(bits), axis=0)
        mems = np.tile(bits, (len(grid), 1))
    else:
        Qs = grid
        mems = None
    order = np.argsort(_encode(Qs, mems, B))
    Qs = Qs[order]
    mems = mems[order] if mems is not None else None
    n = Qs.shape[0]

    if policy.rule == "jbt" and not carry_mem:
        mem_now = (Qs < r).astype(np.int64)
    else:
        mem_now = mems
    D = dispatch_matrix(policy, Qs, mem_now, params.mu)
    a_sup, a_p = _pmf(params.arrival)
    s_parts = [_pmf(s) for s in params.service]
    homogeneous = params.homogeneous
    i_idx, j_idx = np.triu_indices(N, 1)

    rows, cols, vals = [], [], []
    clipped = np.zeros(n)
    g = {k: np.zeros(n) for k in FUNCTIONALS}
    sq = Qs.sum(axis=1).astype(float)
    for a, pa in zip(a_sup, a_p):
        dests = range(N) if a > 0 else [None]
        for dest in dests:
            w_dest = pa * (D[:, dest] if dest is not None else np.ones(n))
            A = np.zeros(N, np.int64)
            if dest is not None:
                A[dest] = a
            for combo in itertools.product(*[range(len(sup)) for sup, _ in s_parts]):
                S = np.array([s_parts[k][0][c] for k, c in enumerate(combo)], dtype=np.int64)
                ps = math.prod(s_parts[k][1][c] for k, c in enumerate(combo))
                w = w_dest * ps
                live = w > 0
                if not live.any():
                    continue
                x = Qs + A - S
                U = np.maximum(-x, 0)
                Qn_raw = np.maximum(x, 0)
                over = (Qn_raw > B).any(axis=1)
                Qn = np.minimum(Qn_raw, B)
                clipped += np.where(over, w, 0.0)
                if carry_mem:
                    m = mems.copy()
                    if dest is not None:
                        had = m.any(axis=1)
                        m[had, dest] = 0
                    m |= ((Qn < r) & (Qs >= r)).astype(np.int64)
                    nxt = _encode(Qn, m, B)
                else:
                    nxt = _encode(Qn, None, B)
                rows.append(np.flatnonzero(live))
                cols.append(nxt[live])
                vals.append(w[live])
                su = U.sum(axis=1).astype(float)
                g["sum_q"] += w * sq
                g["sum_q_sq"] += w * sq * sq
                g["t_eps"] += w * Qn.sum(axis=1) * su
                g["unused_l1"] += w * su
                g["unused_l1_sq"] += w * su * su
                if homogeneous:
                    Qi, Qj = Qs[:, i_idx], Qs[:, j_idx]
                    g["T1"] += w * 2.0 * ((Qi - Qj) * (A[i_idx] - A[j_idx])).sum(axis=1)
                    g["T2"] += w * float(((A[i_idx] - A[j_idx] - S[i_idx] + S[j_idx]) ** 2).sum())
                    g["T3"] += w * ((U[:, i_idx] - U[:, j_idx]) ** 2).sum(axis=1)
                    g["lhs_lemma5"] += w * 2.0 * (Qn[:, i_idx] * U[:, j_idx] + Qn[:, j_idx] * U[:, i_idx]).sum(axis=1)

    # full-space indices -> positions in the sorted state arrays
    keys = _encode(Qs, mems, B)
    rows = np.concatenate(rows)
    cols = np.searchsorted(keys, np.concatenate(cols))
    P = sp.csr_matrix((np.concatenate(vals), (rows, cols)), shape=(n, n))
    P.sum_duplicates()

    start = 0 if not carry_mem else int(np.searchsorted(keys, _encode(np.zeros((1, N), np.int64), np.ones((1, N), np.int64), B)[0]))
    reach = np.sort(breadth_first_order(P, start, directed=True, return_predecessors=False))
    P = P[reach][:, reach].tocsr()
    chain = TruncatedChain(
        N=N, B=B, P=P, Q=Qs[reach], mem=mems[reach] if carry_mem else None,
        g={k: v[reach] for k, v in g.items()} if homogeneous else {k: v[reach] for k, v in g.items() if k not in HOMOGENEOUS_ONLY},
        clipped_mass=clipped[reach], r=r, semantics=semantics, homogeneous=homogeneous,
        meta={"policy": policy.tag, "full_states": total, "epsilon": params.epsilon},
    )
    return chain


def _residual(pi, P) -> float:
    return float(np.abs(P.T @ pi - pi).sum())


def stationary(chain: TruncatedChain, tol: float = 1e-12, max_iter: int = 10_000_000) -> StationaryDistribution:
    """Direct sparse solve for small chains, lazy power iteration otherwise."""
    P = chain.P
    n = P.shape[0]
    if n == 1:
        pi = np.ones(1)
        return StationaryDistribution(pi, 0.0, _boundary(chain, pi), "trivial")
    method = "direct"
    it = 0
    if n <= LU_LIMIT:
        A = (P.T - sp.identity(n, format="csr")).tolil()
        A[n - 1, :] = np.ones(n)
        b = np.zeros(n)
        b[-1] = 1.0
        pi = splu(A.tocsc()).solve(b)
        pi = np.maximum(pi, 0.0)
        pi /= pi.sum()
        if n > DIRECT_LIMIT:
            method = "lu"
    else:
        method = "power"
        pi = np.full(n, 1.0 / n)
        PT = ((P + sp.identity(n, format="csr")) * 0.5).T.tocsr()
        while it < max_iter:
            for _ in range(100):
                pi = PT @ pi
            it += 100
            pi /= pi.sum()
            if _residual(pi, P) <= tol:
                break
        else:
            raise ConvergenceError(f"power iteration stopped after {it} steps with residual {_residual(pi, P):.3e}")
    res = _residual(pi, P)
    if res > 1e-10:
        raise ConvergenceError(f"stationary solve residual {res:.3e} exceeds 1e-10")
    return StationaryDistribution(pi, res, _boundary(chain, pi), method, it)


def _boundary(chain, pi) -> float:
    if chain.B == 0:
        return 0.0
    return float(pi[(chain.Q == chain.B).any(axis=1)].sum())


def _region_distance(Q, r):
    x = Q - r
    lo = (np.maximum(x, 0) ** 2).sum(axis=1)
    up = (np.minimum(x, 0) ** 2).sum(axis=1)
    return np.sqrt(np.minimum(lo, up))


def exact_expectation(dist: StationaryDistribution, chain: TruncatedChain, functional: str, theta: float = 0.1, r: Optional[int] = None, probs=(0.5, 0.9, 0.99)):
    """Stationary expectation of a named functional.

    ``dist_mgf`` and ``dist_quantiles`` use the region threshold ``r``
    (default: the chain's own threshold).
    """
    if functional in HOMOGENEOUS_ONLY and not chain.homogeneous:
        raise HomogeneityError(f"{functional} is only defined for homogeneous servers")
    if functional in chain.g:
        return float(dist.pi @ chain.g[functional])
    if functional in ("dist_mgf", "dist_quantiles"):
        r = r or chain.r
        if not r:
            raise ValueError("distance functionals need a region threshold r")
        d = _region_distance(chain.Q, r)
        if functional == "dist_mgf":
            return float(dist.pi @ np.exp(theta * d))
        order = np.argsort(d, kind="stable")
        cum = np.cumsum(dist.pi[order])
        return {p: float(d[order][min(np.searchsorted(cum, p - 1e-12), d.size - 1)]) for p in probs}
    raise ValueError(f"unknown functional {functional!r}")


def report(params: SystemParams, policy: PolicySpec, B: int, semantics: Optional[str] = None) -> dict:
    """Everything the ``exact`` command prints for one configuration."""
    chain = build_chain(params, policy, B, semantics)
    dist = stationary(chain)
    out = {
        "policy": policy.tag,
        "semantics": chain.semantics,
        "N": params.N,
        "epsilon": params.epsilon,
        "r": chain.r,
        "B": B,
        "states": chain.n_states,
        "residual": dist.residual,
        "boundary_mass": dist.boundary_mass,
        "clipped_mass": float(dist.pi @ chain.clipped_mass),
        "solver": dist.method,
    }
    for f in FUNCTIONALS:
        if f in chain.g:
            out[f] = exact_expectation(dist, chain, f)
        else:
            out[f] = None
    if chain.homogeneous:
        out["lemma5_residual"] = out["lhs_lemma5"] - (out["T1"] + out["T2"] - out["T3"])
    else:
        out["lemma5_residual"] = None
    out["scaled_mean"] = params.epsilon * out["sum_q"]
    return out
