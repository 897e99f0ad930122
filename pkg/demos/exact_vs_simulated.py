"""
Exact steady state versus simulation
====================================

Two Bernoulli(0.5) servers fed by Bernoulli arrivals at rate 1 - eps.
The truncated chain gives exact stationary means; a few simulated
replications should land inside their confidence band.
"""

import numpy as np

from pullbalance.exactchain import report
from pullbalance.policies import PolicySpec
from pullbalance.processes import SystemParams, homogeneous_bernoulli, zeta
from pullbalance.stats import finalize, replication_ci
from pullbalance.system import Streams, simulate

eps = 0.2
params = SystemParams.heavy_traffic(homogeneous_bernoulli(2), "bernoulli", eps)
print(f"arrival rate {params.lam:.2f}, pooled bound zeta/2 = {zeta(params) / 2:.3f}\n")

# %% exact values from the chain truncated at 50 jobs per queue
print(f"{'policy':24s} {'exact eps*E[sum Q]':>20s} {'simulated':>18s}")
for tag in ("jsq", "jiq/level", "jbt(const,r=3)/report-once", "pod(d=2)", "random"):
    pol = PolicySpec.parse(tag)
    ex = report(params, pol, 50)

    # five replications of 10^6 slots each
    means = []
    for rep in range(5):
        res = simulate(params, pol, Streams.from_seed(rep), 1_000_000, 200_000)
        means.append(finalize(res.estimator, eps)["scaled_mean"])
    est = replication_ci(np.array(means))
    print(f"{tag:24s} {ex['scaled_mean']:20.4f} {est.mean:11.4f} +- {est.ci_half:.4f}")

# %% identities that hold exactly in steady state
ex = report(params, PolicySpec.jiq(), 50)
print(f"\nE|U|_1 = {ex['unused_l1']:.8f} (should equal eps = {eps})")
print(f"pairwise drift identity residual = {ex['lemma5_residual']:.1e}")
