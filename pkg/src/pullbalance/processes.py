"""Integer-valued i.i.d. count processes for arrivals and per-server service.

Every family is described by an exact probability table when its support is
finite, so moments are finite sums and sampling is an inverse-CDF scan over
one uniform draw.  The two exponential-tail families (``truncated-poisson``
and ``geometric-truncated``) become infinite-support when ``cap`` is None.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.stats import poisson as _poisson

FAMILIES = (
    "bernoulli",
    "bernoulli-batch",
    "binomial",
    "truncated-poisson",
    "geometric-truncated",
    "deterministic",
)
ROLES = ("arrival", "service")

MEAN_TOL = 1e-12


class ParameterError(ValueError):
    """A process or system cannot be parameterized as requested."""


def _pmf_table(family: str, params: dict) -> Optional[np.ndarray]:
    if family == "bernoulli":
        p = params["p"]
        return np.array([1.0 - p, p])
    if family == "bernoulli-batch":
        a, p = params["a"], params["p"]
        t = np.zeros(a + 1)
        t[0] += 1.0 - p
        t[a] += p
        return t
    if family == "binomial":
        K, p = params["K"], params["p"]
        k = np.arange(K + 1)
        return np.array([math.comb(K, int(i)) for i in k], dtype=float) * p**k * (1.0 - p) ** (K - k)
    if family == "truncated-poisson":
        rate, cap = params["rate"], params["cap"]
        if cap is None:
            return None
        w = _poisson.pmf(np.arange(cap + 1), rate) if rate > 0 else np.eye(1, cap + 1)[0]
        return w / w.sum()
    if family == "geometric-truncated":
        p, cap = params["p"], params["cap"]
        if cap is None:
            return None
        w = (1.0 - p) ** np.arange(cap + 1)
        return w / w.sum()
    if family == "deterministic":
        c = params["c"]
        t = np.zeros(c + 1)
        t[c] = 1.0
        return t
    raise ParameterError(f"unknown family {family!r}; expected one of {FAMILIES}")


def _check_params(family: str, params: dict) -> None:
    def prob(name):
        v = params[name]
        if not 0.0 <= v <= 1.0:
            raise ParameterError(f"{family}: {name}={v} must lie in [0, 1]")

    def count(name, low=0):
        v = params[name]
        if int(v) != v or v < low:
            raise ParameterError(f"{family}: {name}={v} must be an integer >= {low}")

    if family == "bernoulli":
        prob("p")
    elif family == "bernoulli-batch":
        count("a", 1)
        prob("p")
    elif family == "binomial":
        count("K", 1)
        prob("p")
    elif family == "truncated-poisson":
        if params["rate"] < 0:
            raise ParameterError("truncated-poisson: rate must be >= 0")
        if params["cap"] is not None:
            count("cap", 1)
    elif family == "geometric-truncated":
        p = params["p"]
        if not 0.0 < p <= 1.0:
            raise ParameterError(f"geometric-truncated: p={p} must lie in (0, 1]")
        if params["cap"] is not None:
            count("cap", 1)
    elif family == "deterministic":
        count("c", 0)
    else:
        raise ParameterError(f"unknown family {family!r}; expected one of {FAMILIES}")


@dataclass(frozen=True, eq=False)
class ProcessSpec:
    """One i.i.d. integer count distribution.

    ``params`` holds the family's named parameters (``p``, ``a``, ``K``,
    ``rate``, ``cap``, ``c``).  Use the classmethod constructors rather than
    building the dict by hand.
    """

    family: str
    params: dict
    role: str = "service"
    pmf: Optional[np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ParameterError(f"role must be one of {ROLES}, got {self.role!r}")
        _check_params(self.family, self.params)
        table = _pmf_table(self.family, self.params)
        if table is not None:
            table = np.clip(table, 0.0, None)
            table = table / table.sum()
            table.setflags(write=False)
        object.__setattr__(self, "pmf", table)
        if self.role == "arrival" and not self.prob_zero() > 0.0:
            raise ParameterError(
                f"arrival {self.describe()} has P(A=0)=0; arrivals need positive probability of being zero"
            )

    # constructors -----------------------------------------------------------
    @classmethod
    def bernoulli(cls, p, role="service"):
        return cls("bernoulli", {"p": float(p)}, role)

    @classmethod
    def bernoulli_batch(cls, a, p, role="service"):
        return cls("bernoulli-batch", {"a": int(a), "p": float(p)}, role)

    @classmethod
    def binomial(cls, K, p, role="service"):
        return cls("binomial", {"K": int(K), "p": float(p)}, role)

    @classmethod
    def truncated_poisson(cls, rate, cap=None, role="service"):
        return cls("truncated-poisson", {"rate": float(rate), "cap": None if cap is None else int(cap)}, role)

    @classmethod
    def geometric_truncated(cls, p, cap=None, role="service"):
        return cls("geometric-truncated", {"p": float(p), "cap": None if cap is None else int(cap)}, role)

    @classmethod
    def deterministic(cls, c, role="service"):
        return cls("deterministic", {"c": int(c)}, role)

    # moments ----------------------------------------------------------------
    @property
    def finite_support(self) -> bool:
        return self.pmf is not None

    @property
    def exponential_tail(self) -> bool:
        return self.family in ("truncated-poisson", "geometric-truncated") and not self.finite_support

    def mean(self) -> float:
        if self.pmf is not None:
            return float(np.dot(np.arange(self.pmf.size), self.pmf))
        if self.family == "truncated-poisson":
            return self.params["rate"]
        p = self.params["p"]
        return (1.0 - p) / p

    def variance(self) -> float:
        if self.pmf is not None:
            k = np.arange(self.pmf.size)
            m = np.dot(k, self.pmf)
            return float(np.dot((k - m) ** 2, self.pmf))
        if self.family == "truncated-poisson":
            return self.params["rate"]
        p = self.params["p"]
        return (1.0 - p) / p**2

    def max_value(self) -> float:
        """Largest value in the support (``inf`` for infinite support)."""
        if self.pmf is None:
            return math.inf
        return int(np.flatnonzero(self.pmf > 0)[-1])

    def prob(self, k: int) -> float:
        if self.pmf is not None:
            return float(self.pmf[k]) if 0 <= k < self.pmf.size else 0.0
        if self.family == "truncated-poisson":
            return float(_poisson.pmf(k, self.params["rate"]))
        p = self.params["p"]
        return p * (1.0 - p) ** k if k >= 0 else 0.0

    def prob_zero(self) -> float:
        return self.prob(0)

    def cdf_table(self) -> np.ndarray:
        """Cumulative table used by inverse-CDF sampling; last entry is exactly 1."""
        if self.pmf is None:
            raise ParameterError(f"{self.describe()} has infinite support; no cdf table")
        c = np.cumsum(self.pmf)
        c[-1] = 1.0
        return c

    def describe(self) -> str:
        inner = ",".join(f"{k}={v}" for k, v in self.params.items())
        return f"{self.family}({inner})"

    def to_dict(self) -> dict:
        return {"family": self.family, **self.params}

    @classmethod
    def from_dict(cls, d: dict, role="service") -> "ProcessSpec":
        d = dict(d)
        family = d.pop("family")
        ctor = {
            "bernoulli": cls.bernoulli,
            "bernoulli-batch": cls.bernoulli_batch,
            "binomial": cls.binomial,
            "truncated-poisson": cls.truncated_poisson,
            "geometric-truncated": cls.geometric_truncated,
            "deterministic": cls.deterministic,
        }.get(family)
        if ctor is None:
            raise ParameterError(f"unknown family {family!r}; expected one of {FAMILIES}")
        return ctor(role=role, **d)

    def __eq__(self, other):
        return (
            isinstance(other, ProcessSpec)
            and self.family == other.family
            and self.role == other.role
            and self.params == other.params
        )

    def __hash__(self):
        return hash((self.family, self.role, tuple(sorted(self.params.items()))))


def sample(spec: ProcessSpec, rng: np.random.Generator, size=None):
    """Draw from ``spec`` using ``rng``.

    Finite-support families consume exactly one ``rng.random()`` per value
    (inverse CDF); the compiled simulator uses the same rule, so both paths
    produce identical traces from identical generators.
    """
    if spec.finite_support:
        cdf = spec.cdf_table()
        u = rng.random(size)
        return np.minimum(np.searchsorted(cdf, u, side="right"), cdf.size - 1) if size is not None else int(
            min(np.searchsorted(cdf, u, side="right"), cdf.size - 1)
        )
    if spec.family == "truncated-poisson":
        out = rng.poisson(spec.params["rate"], size)
    else:
        out = rng.geometric(spec.params["p"], size) - 1
    return out if size is not None else int(out)


def make_arrival(family: str, target_mean: float, **fixed) -> ProcessSpec:
    """Arrival process of ``family`` whose mean is exactly ``target_mean``.

    ``fixed`` carries the parameters that are not solved for: ``a`` for
    bernoulli-batch, ``K`` for binomial, ``cap`` for the truncated families.
    """
    m = float(target_mean)
    if m < 0:
        raise ParameterError(f"target mean {m} is negative")
    if family == "bernoulli":
        if m > 1:
            raise ParameterError(f"mean exceeds family maximum: bernoulli mean {m} > 1")
        return ProcessSpec.bernoulli(m, role="arrival")
    if family == "bernoulli-batch":
        a = int(fixed["a"])
        if m > a:
            raise ParameterError(f"mean exceeds family maximum: bernoulli-batch(a={a}) mean {m} > {a}")
        return ProcessSpec.bernoulli_batch(a, m / a, role="arrival")
    if family == "binomial":
        K = int(fixed["K"])
        if m > K:
            raise ParameterError(f"mean exceeds family maximum: binomial(K={K}) mean {m} > {K}")
        return ProcessSpec.binomial(K, m / K, role="arrival")
    if family == "deterministic":
        if m != int(m):
            raise ParameterError(f"deterministic family needs an integer mean, got {m}")
        return ProcessSpec.deterministic(int(m), role="arrival")
    if family == "truncated-poisson":
        cap = fixed.get("cap")
        if cap is None:
            return ProcessSpec.truncated_poisson(m, None, role="arrival")
        if m >= cap:
            raise ParameterError(f"mean exceeds family maximum: truncated-poisson(cap={cap}) mean must be < {cap}")
        if m == 0:
            return ProcessSpec.truncated_poisson(0.0, cap, role="arrival")

        def gap(rate):
            return ProcessSpec.truncated_poisson(rate, cap).mean() - m

        hi = max(1.0, 2 * m)
        while gap(hi) < 0:
            hi *= 2
        rate = brentq(gap, 0.0, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
        spec = ProcessSpec.truncated_poisson(rate, cap, role="arrival")
    elif family == "geometric-truncated":
        cap = fixed.get("cap")
        if cap is None:
            return ProcessSpec.geometric_truncated(1.0 / (1.0 + m), None, role="arrival")
        if m >= cap / 2:
            raise ParameterError(
                f"mean exceeds family maximum: geometric-truncated(cap={cap}) mean must be < {cap / 2}"
            )
        if m == 0:
            return ProcessSpec.geometric_truncated(1.0, cap, role="arrival")

        def gap(p):
            return ProcessSpec.geometric_truncated(p, cap).mean() - m

        p = brentq(gap, 1e-12, 1.0, xtol=1e-16, rtol=4 * np.finfo(float).eps, maxiter=500)
        spec = ProcessSpec.geometric_truncated(p, cap, role="arrival")
    else:
        raise ParameterError(f"unknown family {family!r}; expected one of {FAMILIES}")
    if abs(spec.mean() - m) > MEAN_TOL:
        raise ParameterError(f"could not hit mean {m} for {family} to {MEAN_TOL}: got {spec.mean()}")
    return spec


@dataclass(frozen=True)
class SystemParams:
    """N servers, their service processes, one arrival process and epsilon."""

    N: int
    service: tuple
    arrival: ProcessSpec
    epsilon: float

    def __post_init__(self):
        service = tuple(self.service)
        object.__setattr__(self, "service", service)
        if self.N < 1 or len(service) != self.N:
            raise ParameterError(f"need {self.N} service specs, got {len(service)}")
        if self.arrival.role != "arrival":
            raise ParameterError("arrival spec must have role='arrival'")
        if any(s.role != "service" for s in service):
            raise ParameterError("service specs must have role='service'")
        if self.epsilon < 0:
            raise ParameterError("epsilon must be >= 0")
        if abs(self.arrival.mean() - (self.mu_sigma - self.epsilon)) > MEAN_TOL:
            raise ParameterError(
                f"arrival mean {self.arrival.mean()} != mu_sigma - epsilon = {self.mu_sigma - self.epsilon}"
            )
        if self.idle_slot_probability() == 0.0:
            warnings.warn(
                "P(no arrival and all servers offer the same positive service) is 0; "
                "the heavy-traffic lower-bound argument does not apply, simulation is still well defined",
                stacklevel=2,
            )

    @classmethod
    def heavy_traffic(cls, service: Sequence[ProcessSpec], arrival_family: str, epsilon: float, **fixed):
        """Solve the arrival parameter so that lambda = mu_sigma - epsilon."""
        service = tuple(service)
        mu = sum(s.mean() for s in service)
        arrival = make_arrival(arrival_family, mu - epsilon, **fixed)
        return cls(len(service), service, arrival, float(epsilon))

    @property
    def mu(self) -> np.ndarray:
        return np.array([s.mean() for s in self.service])

    @property
    def mu_sigma(self) -> float:
        return float(sum(s.mean() for s in self.service))

    @property
    def nu2_sigma(self) -> float:
        return float(sum(s.variance() for s in self.service))

    @property
    def lam(self) -> float:
        return self.arrival.mean()

    @property
    def sigma2(self) -> float:
        return self.arrival.variance()

    @property
    def a_max(self) -> float:
        return self.arrival.max_value()

    @property
    def s_max(self) -> float:
        return max(s.max_value() for s in self.service)

    @property
    def homogeneous(self) -> bool:
        return all(s == self.service[0] for s in self.service)

    @property
    def finite_support(self) -> bool:
        return self.arrival.finite_support and all(s.finite_support for s in self.service)

    def idle_slot_probability(self) -> float:
        """max over d >= 1 of P(A=0, every S_n = d); zero means the condition fails."""
        s_max = self.s_max
        top = int(min(s_max, 64)) if math.isfinite(s_max) else 64
        best = 0.0
        for d in range(1, top + 1):
            best = max(best, float(np.prod([s.prob(d) for s in self.service])))
        return self.arrival.prob_zero() * best

    def with_epsilon(self, epsilon: float, arrival_family: Optional[str] = None, **fixed) -> "SystemParams":
        family = arrival_family or self.arrival.family
        if not fixed:
            fixed = {k: v for k, v in self.arrival.params.items() if k in ("a", "K", "cap")}
        return SystemParams.heavy_traffic(self.service, family, epsilon, **fixed)


def zeta(params: SystemParams) -> float:
    """Resource-pooled variance sigma_sigma^2 + nu_sigma^2 at the current epsilon."""
    return params.sigma2 + params.nu2_sigma


def homogeneous_bernoulli(N: int, p: float = 0.5):
    return tuple(ProcessSpec.bernoulli(p) for _ in range(N))
