"""Routing rules and threshold schedules.

Rules: proportionally random, JSQ, Power-of-d and Join-Below-Threshold
(JBT).  JIQ is JBT with the constant threshold 1.

``decide`` draws routing randomness from a single generator in a fixed
order; the compiled simulator replicates that order exactly.
"""
from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass
from typing import Optional

import numpy as np

RULES = ("random", "jsq", "pod", "jbt")
SEMANTICS = ("level", "report-once")
TIE_BREAKS = ("uniform", "lowest")


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class ThresholdSchedule:
    """r(epsilon) for one of three growth laws.

    constant:    r0
    logarithmic: max(floor, ceil(K ln(1/eps)))
    polynomial:  ceil((1/eps)^(1+alpha))
    """

    kind: str
    r0: int = 1
    K: float = 4.0
    floor: int = 1
    alpha: float = 0.5

    def __post_init__(self):
        if self.kind not in ("constant", "log", "poly"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "constant" and self.r0 < 1:
            raise ValueError("constant threshold must be >= 1")
        if self.kind == "log" and (self.K <= 0 or self.floor < 1):
            raise ValueError("log schedule needs K > 0 and floor >= 1")
        if self.kind == "poly" and self.alpha <= 0:
            raise ValueError("poly schedule needs alpha > 0")

    @classmethod
    def constant(cls, r0: int):
        return cls("constant", r0=int(r0))

    @classmethod
    def logarithmic(cls, K: float = 4.0, floor: int = 1):
        return cls("log", K=float(K), floor=int(floor))

    @classmethod
    def polynomial(cls, alpha: float = 0.5):
        return cls("poly", alpha=float(alpha))

    @property
    def tag(self) -> str:
        if self.kind == "constant":
            return f"const,r={self.r0}"
        if self.kind == "log":
            s = f"log,K={self.K:g}"
            return s if self.floor == 1 else s + f",floor={self.floor}"
        return f"poly,alpha={self.alpha:g}"

    @classmethod
    def parse(cls, text: str) -> "ThresholdSchedule":
        parts = [p.strip() for p in text.split(",") if p.strip()]
        kind = parts[0]
        kw = {}
        for p in parts[1:]:
            k, v = p.split("=")
            kw[k.strip()] = float(v)
        if kind in ("const", "constant"):
            return cls.constant(int(kw.get("r", 1)))
        if kind in ("log", "logarithmic"):
            return cls.logarithmic(kw.get("K", 4.0), int(kw.get("floor", 1)))
        if kind in ("poly", "polynomial"):
            return cls.polynomial(kw.get("alpha", 0.5))
        raise ValueError(f"cannot parse schedule {text!r}")


def threshold_at(schedule: ThresholdSchedule, epsilon: float) -> int:
    if not 0.0 < epsilon < 1.0:
        raise DomainError(f"threshold schedules are defined for epsilon in (0, 1), got {epsilon}")
    if schedule.kind == "constant":
        return schedule.r0
    if schedule.kind == "log":
        return max(schedule.floor, math.ceil(schedule.K * math.log(1.0 / epsilon)))
    # round away float noise before ceil, e.g. 10**1.5 is not an integer but 4**1.5 == 8 must stay 8
    v = (1.0 / epsilon) ** (1.0 + schedule.alpha)
    return max(1, math.ceil(round(v, 9)))


@dataclass(frozen=True)
class PolicySpec:
    rule: str
    d: int = 2
    schedule: Optional[ThresholdSchedule] = None
    semantics: str = "level"
    tie_break: str = "uniform"

    def __post_init__(self):
        if self.rule not in RULES:
            raise ValueError(f"unknown rule {self.rule!r}; expected one of {RULES}")
        if self.semantics not in SEMANTICS:
            raise ValueError(f"unknown memory semantics {self.semantics!r}")
        if self.tie_break not in TIE_BREAKS:
            raise ValueError(f"unknown tie break {self.tie_break!r}")
        if self.rule == "jbt" and self.schedule is None:
            raise ValueError("jbt needs a threshold schedule")
        if self.rule == "pod" and self.d < 1:
            raise ValueError("power-of-d needs d >= 1")

    @classmethod
    def random(cls):
        return cls("random")

    @classmethod
    def jsq(cls, tie_break="uniform"):
        return cls("jsq", tie_break=tie_break)

    @classmethod
    def pod(cls, d=2, tie_break="uniform"):
        return cls("pod", d=int(d), tie_break=tie_break)

    @classmethod
    def jbt(cls, schedule: ThresholdSchedule, semantics="level"):
        return cls("jbt", schedule=schedule, semantics=semantics)

    @classmethod
    def jiq(cls, semantics="level"):
        return cls.jbt(ThresholdSchedule.constant(1), semantics)

    @property
    def is_jiq(self) -> bool:
        return self.rule == "jbt" and self.schedule == ThresholdSchedule.constant(1)

    @property
    def tag(self) -> str:
        if self.rule == "random":
            return "random"
        if self.rule == "jsq":
            base = "jsq"
        elif self.rule == "pod":
            base = f"pod(d={self.d})"
        else:
            base = "jiq" if self.is_jiq else f"jbt({self.schedule.tag})"
            return f"{base}/{self.semantics}"
        return base if self.tie_break == "uniform" else f"{base}/lowest"

    @classmethod
    def parse(cls, text: str) -> "PolicySpec":
        """Inverse of ``tag``: e.g. ``jbt(log,K=4)/level``, ``jiq``, ``pod(d=2)``, ``jsq/lowest``."""
        text = text.strip()
        base, _, suffix = text.partition("/")
        m = re.fullmatch(r"(\w[\w-]*)(?:\((.*)\))?", base)
        if not m:
            raise ValueError(f"cannot parse policy {text!r}")
        name, inner = m.group(1), m.group(2) or ""
        if name in ("random", "random-proportional", "rand"):
            return cls.random()
        if name == "jsq":
            return cls.jsq(tie_break=suffix or "uniform")
        if name in ("pod", "power-of-d"):
            d = int(inner.split("=")[-1]) if inner else 2
            return cls.pod(d, tie_break=suffix or "uniform")
        if name == "jiq":
            return cls.jiq(suffix or "level")
        if name == "jbt":
            return cls.jbt(ThresholdSchedule.parse(inner), suffix or "level")
        raise ValueError(f"cannot parse policy {text!r}")

    def threshold(self, epsilon: float) -> Optional[int]:
        """Resolved memory threshold, or None for rules that keep no memory."""
        if self.rule != "jbt":
            return None
        return threshold_at(self.schedule, epsilon)


def _pick_proportional(weights: np.ndarray, u: float) -> int:
    c = np.cumsum(weights)
    target = u * c[-1]
    k = int(np.searchsorted(c, target, side="right"))
    return min(k, len(weights) - 1)


def decide(policy: PolicySpec, Q, memory, mu, rng: np.random.Generator) -> int:
    """Destination (0-based) for this slot's batch.  Call only when A_sigma > 0.

    For JBT the caller removes the returned ID from memory when memory was
    nonempty; see :func:`pullbalance.system.step`.
    """
    Q = np.asarray(Q)
    mu = np.asarray(mu, dtype=float)
    N = Q.size
    rule = policy.rule
    if rule == "random":
        return _pick_proportional(mu, rng.random())
    if rule == "jsq":
        ties = np.flatnonzero(Q == Q.min())
        if ties.size == 1 or policy.tie_break == "lowest":
            return int(ties[0])
        return int(ties[int(rng.random() * ties.size)])
    if rule == "pod":
        d = min(policy.d, N)
        idx = list(range(N))
        for i in range(d):
            j = i + int(rng.random() * (N - i))
            idx[i], idx[j] = idx[j], idx[i]
        cand = idx[:d]
        best = min(Q[c] for c in cand)
        tied = [c for c in cand if Q[c] == best]
        # sampled order is a uniform permutation, so its first minimizer is a uniform tie-break
        return int(min(tied)) if policy.tie_break == "lowest" else int(tied[0])
    members = sorted(memory)
    if members:
        w = mu[members]
        return int(members[_pick_proportional(w, rng.random())])
    return _pick_proportional(mu, rng.random())


def dispatch_probabilities(policy: PolicySpec, Q, memory, mu) -> np.ndarray:
    """Exact P(dest = n) given the state.  Used by the exact-chain oracle."""
    Q = np.asarray(Q)
    mu = np.asarray(mu, dtype=float)
    N = Q.size
    p = np.zeros(N)
    if policy.rule == "random":
        return mu / mu.sum()
    if policy.rule == "jsq":
        ties = np.flatnonzero(Q == Q.min())
        if policy.tie_break == "lowest":
            p[ties[0]] = 1.0
        else:
            p[ties] = 1.0 / ties.size
        return p
    if policy.rule == "pod":
        d = min(policy.d, N)
        subsets = list(itertools.combinations(range(N), d))
        for s in subsets:
            best = min(Q[c] for c in s)
            tied = [c for c in s if Q[c] == best]
            if policy.tie_break == "lowest":
                p[min(tied)] += 1.0 / len(subsets)
            else:
                for c in tied:
                    p[c] += 1.0 / (len(subsets) * len(tied))
        return p
    members = sorted(memory)
    if members:
        w = mu[members]
        p[members] = w / w.sum()
        return p
    return mu / mu.sum()


def probe_messages(policy: PolicySpec, N: int) -> Optional[float]:
    """Messages per dispatch for sampling rules (d queries plus d replies)."""
    if policy.rule == "pod":
        return 2.0 * min(policy.d, N)
    if policy.rule == "jsq":
        return 2.0 * N
    if policy.rule == "random":
        return 0.0
    return None
