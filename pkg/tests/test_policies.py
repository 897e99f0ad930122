import itertools
import math

import numpy as np
import pytest
from scipy import stats as sps

from pullbalance.exactchain import dispatch_matrix
from pullbalance.policies import (
    DomainError,
    PolicySpec,
    ThresholdSchedule,
    decide,
    dispatch_probabilities,
    probe_messages,
    threshold_at,
)


def empirical(policy, Q, memory, mu, n=100_000, seed=0):
    rng = np.random.default_rng(seed)
    counts = np.zeros(len(Q))
    for _ in range(n):
        counts[decide(policy, Q, memory, mu, rng)] += 1
    return counts


def chi2_ok(counts, probs, alpha=1e-3):
    keep = probs > 0
    assert counts[~keep].sum() == 0
    if keep.sum() < 2:
        return True
    return sps.chisquare(counts[keep], counts.sum() * probs[keep]).pvalue > alpha


# thresholds ----------------------------------------------------------------

def test_threshold_examples():
    assert threshold_at(ThresholdSchedule.constant(1), 0.1) == 1
    assert threshold_at(ThresholdSchedule.logarithmic(4, 1), 0.05) == math.ceil(4 * math.log(20)) == 12
    assert threshold_at(ThresholdSchedule.polynomial(0.5), 0.1) == math.ceil(10**1.5) == 32


def test_sweep_values():
    log = ThresholdSchedule.logarithmic(4)
    poly = ThresholdSchedule.polynomial(0.5)
    eps = (0.3, 0.2, 0.1, 0.05)
    assert [threshold_at(log, e) for e in eps] == [5, 7, 10, 12]
    assert [threshold_at(poly, e) for e in eps] == [7, 12, 32, 90]


def test_poly_exact_power_not_rounded_up():
    assert threshold_at(ThresholdSchedule.polynomial(0.5), 0.25) == 8


@pytest.mark.parametrize("eps", [0.0, 1.0, -0.1, 1.5])
def test_threshold_domain(eps):
    with pytest.raises(DomainError):
        threshold_at(ThresholdSchedule.logarithmic(), eps)


def test_schedules_nonincreasing_and_at_least_one():
    grid = np.linspace(0.999, 0.001, 400)
    for s in (ThresholdSchedule.logarithmic(4), ThresholdSchedule.logarithmic(0.5, 3), ThresholdSchedule.polynomial(0.2)):
        vals = [threshold_at(s, e) for e in grid]
        assert min(vals) >= 1
        assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_log_threshold_times_eps_vanishes():
    s = ThresholdSchedule.logarithmic(4)
    prods = [threshold_at(s, 10.0**-k) * 10.0**-k for k in range(1, 9)]
    assert all(b < a for a, b in zip(prods, prods[1:]))
    assert prods[-1] < 1e-5


def test_tags_round_trip():
    pols = [
        PolicySpec.random(), PolicySpec.jsq(), PolicySpec.jsq("lowest"), PolicySpec.pod(3),
        PolicySpec.jiq(), PolicySpec.jiq("report-once"),
        PolicySpec.jbt(ThresholdSchedule.logarithmic(4)), PolicySpec.jbt(ThresholdSchedule.polynomial(0.5), "report-once"),
        PolicySpec.jbt(ThresholdSchedule.constant(3)),
    ]
    for p in pols:
        assert PolicySpec.parse(p.tag) == p
    assert PolicySpec.jiq().tag == "jiq/level"
    assert PolicySpec.jbt(ThresholdSchedule.constant(1)).is_jiq
    assert PolicySpec.jbt(ThresholdSchedule.logarithmic(4)).tag == "jbt(log,K=4)/level"


def test_policy_validation():
    with pytest.raises(ValueError):
        PolicySpec("jbt")
    with pytest.raises(ValueError):
        PolicySpec("pod", d=0)
    with pytest.raises(ValueError):
        PolicySpec("jsq", tie_break="coin")
    with pytest.raises(ValueError):
        PolicySpec.parse("jbq")


# decisions (spec examples are 1-based; indices here are 0-based) ------------

def test_jsq_unique_minimizer():
    rng = np.random.default_rng(0)
    assert decide(PolicySpec.jsq(), [3, 1, 2], frozenset(), [1, 1, 1], rng) == 1


def test_jbt_singleton_memory():
    rng = np.random.default_rng(0)
    pol = PolicySpec.jbt(ThresholdSchedule.constant(2))
    for Q in ([0, 0, 0], [5, 9, 1], [7, 7, 7]):
        assert decide(pol, Q, frozenset({2}), [1, 1, 1], rng) == 2


def test_random_proportional_frequency():
    counts = empirical(PolicySpec.random(), [0, 0], frozenset(), [1.0, 3.0], n=10**6)
    assert abs(counts[1] / 1e6 - 0.75) <= 4 * 4.3e-4


def test_jbt_full_memory_matches_random():
    mu = np.ones(4)
    jbt = empirical(PolicySpec.jiq(), [0, 0, 0, 0], frozenset(range(4)), mu, seed=1)
    rnd = empirical(PolicySpec.random(), [0, 0, 0, 0], frozenset(), mu, seed=2)
    table = np.vstack([jbt, rnd])
    assert sps.chi2_contingency(table).pvalue > 1e-3


def test_jbt_memory_rate_proportional():
    mu = np.array([1.0, 2.0, 3.0, 4.0])
    memory = frozenset({0, 2, 3})
    counts = empirical(PolicySpec.jiq(), [0, 5, 0, 0], memory, mu)
    assert chi2_ok(counts, np.array([1, 0, 3, 4]) / 8)


def test_jbt_empty_memory_falls_back_to_random():
    mu = np.array([1.0, 3.0])
    counts = empirical(PolicySpec.jiq(), [4, 4], frozenset(), mu)
    assert chi2_ok(counts, mu / 4)


def pod_oracle(Q, d, lowest):
    """P(dest) by enumerating ordered samples without replacement."""
    N = len(Q)
    p = np.zeros(N)
    perms = list(itertools.permutations(range(N), d))
    for s in perms:
        best = min(Q[c] for c in s)
        tied = [c for c in s if Q[c] == best]
        if lowest:
            p[min(tied)] += 1
        else:
            for c in tied:
                p[c] += 1 / len(tied)
    return p / len(perms)


@pytest.mark.parametrize("Q", [[3, 1, 2, 1], [0, 0, 0, 0], [5, 2, 2, 7], [1, 4, 2, 3]])
@pytest.mark.parametrize("d", [1, 2, 3, 4])
def test_pod_distribution(Q, d):
    for tie in ("uniform", "lowest"):
        pol = PolicySpec.pod(d, tie)
        exact = dispatch_probabilities(pol, Q, frozenset(), np.ones(4))
        assert np.allclose(exact, pod_oracle(Q, d, tie == "lowest"), atol=1e-12)
    counts = empirical(PolicySpec.pod(d), Q, frozenset(), np.ones(4), n=40_000)
    assert chi2_ok(counts, pod_oracle(Q, d, False))


def test_jsq_tie_breaks():
    Q = [2, 1, 1, 3, 1]
    counts = empirical(PolicySpec.jsq(), Q, frozenset(), np.ones(5), n=30_000)
    assert chi2_ok(counts, np.array([0, 1, 1, 0, 1]) / 3)
    rng = np.random.default_rng(0)
    assert all(decide(PolicySpec.jsq("lowest"), Q, frozenset(), np.ones(5), rng) == 1 for _ in range(50))


def test_structural_properties_random_states():
    rng = np.random.default_rng(11)
    pols = [PolicySpec.random(), PolicySpec.jsq(), PolicySpec.pod(2), PolicySpec.jiq()]
    for _ in range(2000):
        N = int(rng.integers(2, 6))
        Q = rng.integers(0, 5, N)
        memory = frozenset(int(i) for i in np.flatnonzero(rng.random(N) < 0.4))
        mu = rng.uniform(0.2, 2.0, N)
        for pol in pols:
            dest = decide(pol, Q, memory, mu, rng)
            assert 0 <= dest < N
            if pol.rule == "jsq":
                assert Q[dest] == Q.min()
            if pol.rule == "jbt" and memory:
                assert dest in memory


def test_scale_invariance_of_decision_distribution():
    rng = np.random.default_rng(5)
    for _ in range(200):
        N = int(rng.integers(2, 5))
        Q = rng.integers(0, 4, N)
        memory = frozenset(int(i) for i in np.flatnonzero(rng.random(N) < 0.5))
        mu = rng.uniform(0.1, 1.0, N)
        for pol in (PolicySpec.random(), PolicySpec.jiq(), PolicySpec.pod(2), PolicySpec.jsq()):
            a = dispatch_probabilities(pol, Q, memory, mu)
            b = dispatch_probabilities(pol, Q, memory, 7.3 * mu)
            assert np.allclose(a, b, atol=1e-12)
            assert a.sum() == pytest.approx(1.0)


def test_vectorised_dispatch_matches_per_state():
    rng = np.random.default_rng(9)
    N = 3
    Qs = rng.integers(0, 4, (300, N))
    mems = (rng.random((300, N)) < 0.5).astype(np.int64)
    mu = np.array([0.5, 1.0, 1.5])
    for pol in (PolicySpec.random(), PolicySpec.jsq(), PolicySpec.jsq("lowest"), PolicySpec.pod(2),
                PolicySpec.pod(2, "lowest"), PolicySpec.jiq()):
        D = dispatch_matrix(pol, Qs, mems, mu)
        for k in range(len(Qs)):
            ref = dispatch_probabilities(pol, Qs[k], frozenset(np.flatnonzero(mems[k]).tolist()), mu)
            assert np.allclose(D[k], ref, atol=1e-12)


def test_probe_messages():
    assert probe_messages(PolicySpec.pod(2), 4) == 4
    assert probe_messages(PolicySpec.jsq(), 4) == 8
    assert probe_messages(PolicySpec.random(), 4) == 0
    assert probe_messages(PolicySpec.jiq(), 4) is None
