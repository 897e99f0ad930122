"""
Distance to the threshold region
================================

R(r) is the box "all queues <= r" joined with the orthant "all queues >= r".
Under a log-threshold policy the queue vector stays close to it as eps
shrinks; under random routing the queues spread apart.
"""

from pullbalance.geometry import RegionSpec, dist_region, perp_decompose
from pullbalance.policies import PolicySpec, ThresholdSchedule, threshold_at
from pullbalance.processes import SystemParams, homogeneous_bernoulli
from pullbalance.system import Streams, simulate

region = RegionSpec(2, 2)
for q in ([0, 5], [4, 5], [1, 1]):
    par, perp = perp_decompose(q, region, "upper")
    print(f"q={q}: d={dist_region(q, region):.3f}, nearest upper point {par}")

sched = ThresholdSchedule.parse("log,K=4")
print()
for eps in (0.3, 0.1):
    params = SystemParams.heavy_traffic(homogeneous_bernoulli(2), "bernoulli-batch", eps, a=2)
    r = threshold_at(sched, eps)
    horizon = int(5000 / eps**2)
    for tag in ("jbt(log,K=4)/level", "random"):
        res = simulate(params, PolicySpec.parse(tag), Streams.from_seed(0), horizon, horizon // 5, diag_r=r)
        s = res.diagnostics.summarize()
        print(f"eps={eps:<4} r={r:<3} {tag:20s} p99={s['p99']:6.2f}  E[exp(0.2 d)]={s['mgf_0.2']:8.3f}")
