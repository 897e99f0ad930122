"""The threshold region R(r) = R_l(r) u R_u(r) and distances to it.

R_l is the box {0 <= x_n <= r}, R_u the translated orthant {x_n >= r}.
Both are convex, so Euclidean projection is a componentwise clamp; the
union is not convex and its distance is the smaller of the two.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

DEFAULT_THETAS = (0.05, 0.1, 0.2, 0.4)


class DomainError(ValueError):
    pass


class EmptyDiagnosticsError(RuntimeError):
    pass


@dataclass(frozen=True)
class RegionSpec:
    r: int
    N: int

    def __post_init__(self):
        if self.r < 1 or self.N < 1:
            raise ValueError(f"region needs r >= 1 and N >= 1, got r={self.r}, N={self.N}")


def _as_point(q, region: RegionSpec) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape[-1] != region.N:
        raise DomainError(f"point has dimension {q.shape[-1]}, region has N={region.N}")
    if np.any(q < 0):
        raise DomainError("queue vectors live in the nonnegative orthant")
    return q


def _norm(v: np.ndarray):
    return np.sqrt(np.sum(v * v, axis=-1))


def dist_lower(q, region: RegionSpec):
    q = _as_point(q, region)
    return _norm(np.maximum(q - region.r, 0.0))


def dist_upper(q, region: RegionSpec):
    q = _as_point(q, region)
    return _norm(np.minimum(q - region.r, 0.0))


def dist_region(q, region: RegionSpec):
    q = _as_point(q, region)
    shifted = q - region.r
    lo = np.sum(np.maximum(shifted, 0.0) ** 2, axis=-1)
    up = np.sum(np.minimum(shifted, 0.0) ** 2, axis=-1)
    return np.sqrt(np.minimum(lo, up))


def in_region(q, region: RegionSpec):
    q = np.asarray(q)
    return np.all(q <= region.r, axis=-1) | np.all(q >= region.r, axis=-1)


class Decomposition(NamedTuple):
    parallel: np.ndarray       # projection onto the region, original coordinates
    perpendicular: np.ndarray  # q - parallel


def perp_decompose(q, region: RegionSpec, which: str) -> Decomposition:
    """Split ``q`` into its projection on R_l or R_u and the remainder.

    In shifted coordinates q' = q - r*1 the projections are min(q', 0)
    (lower) and max(q', 0) (upper); the two pieces are orthogonal there.
    """
    q = _as_point(q, region)
    shifted = q - region.r
    if which == "upper":
        par = np.maximum(shifted, 0.0)
    elif which == "lower":
        par = np.clip(shifted, -region.r, 0.0)
    else:
        raise ValueError("which must be 'lower' or 'upper'")
    return Decomposition(par + region.r, shifted - par)


def distance_bound_per_slot(N: int, a_max: float, s_max: float) -> float:
    """Largest possible one-slot change of the region distance."""
    return math.sqrt(N) * max(a_max, s_max)


def drift_constant(N: int, a_max: float, s_max: float) -> float:
    """L = N max(A_max, S_max)^2, the second-moment term in the distance drift bound."""
    return N * max(a_max, s_max) ** 2


def drift_gap(mu: Sequence[float]) -> float:
    """Minimum shift of dispatch probability toward the extreme queues outside R(r).

    delta = mu_min mu_min2 / (mu_sigma (mu_sigma - mu_min)); needs N >= 2.
    """
    mu = np.sort(np.asarray(mu, dtype=float))
    if mu.size < 2:
        raise ValueError("needs at least two servers")
    total = mu.sum()
    return float(mu[0] * mu[1] / (total * (total - mu[0])))


def collapse_epsilon_limit(mu: Sequence[float]) -> float:
    """Largest epsilon for which the negative distance drift is guaranteed."""
    mu = np.asarray(mu, dtype=float)
    delta = drift_gap(mu)
    return float(mu.sum() * delta / (2 * mu.size + delta))


@dataclass
class CollapseDiagnostics:
    """Distance samples kept as an exact value -> count table.

    Queue vectors are integer, so squared distances are integers and the
    table stays small; quantiles and MGF values are computed exactly from it.
    """

    theta_grid: tuple = DEFAULT_THETAS
    counts: Counter = field(default_factory=Counter)

    @property
    def n(self) -> int:
        return sum(self.counts.values())

    def record(self, q, region: RegionSpec) -> None:
        d = dist_region(q, region)
        for v in np.atleast_1d(d):
            self.counts[float(v)] += 1

    def record_squared_histogram(self, hist: np.ndarray) -> None:
        """Add a histogram indexed by integer squared distance."""
        nz = np.flatnonzero(hist)
        for k in nz:
            self.counts[math.sqrt(int(k))] += int(hist[k])

    def merge(self, other: "CollapseDiagnostics") -> "CollapseDiagnostics":
        out = CollapseDiagnostics(tuple(self.theta_grid), Counter(self.counts))
        out.counts.update(other.counts)
        return out

    def quantile(self, p: float) -> float:
        if not self.counts:
            raise EmptyDiagnosticsError("no distance samples recorded")
        values = np.array(sorted(self.counts))
        cum = np.cumsum([self.counts[v] for v in values])
        k = int(np.searchsorted(cum, p * cum[-1] - 1e-9 * cum[-1], side="left"))
        return float(values[min(k, values.size - 1)])

    def mgf(self, theta: float) -> float:
        if not self.counts:
            raise EmptyDiagnosticsError("no distance samples recorded")
        values = np.array(list(self.counts))
        w = np.array([self.counts[v] for v in values], dtype=float)
        if theta == 0:
            return 1.0
        return float(np.dot(w, np.exp(theta * values)) / w.sum())

    def summarize(self) -> dict:
        if not self.counts:
            raise EmptyDiagnosticsError("summarize called before any record")
        out = {
            "p50": self.quantile(0.5),
            "p90": self.quantile(0.9),
            "p99": self.quantile(0.99),
            "max": float(max(self.counts)),
        }
        for th in self.theta_grid:
            out[f"mgf_{th:g}"] = self.mgf(th)
        return out
