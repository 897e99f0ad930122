"""
Threshold growth along the heavy-traffic sweep
==============================================

A log-growing threshold keeps the scaled queue length near the pooled
bound, a constant one (r=1) does not, and a fast polynomial threshold
drifts toward random routing.  Short horizons here; the bundled E1
config does the full run.
"""

from pullbalance.harness import ExperimentConfig, agg_rows, run

cfg = ExperimentConfig.from_dict(dict(
    name="demo", N=[2], service={"family": "bernoulli", "p": 0.5},
    arrival={"family": "bernoulli-batch", "a": "N"},
    epsilon_list=[0.3, 0.2, 0.1],
    policies=["jsq", "jbt(log,K=4)/level", "jiq/level", "jbt(poly,alpha=0.5)/level", "random"],
    horizon={"rule": "scaled", "c": 5000}, replications=3, base_seed=1,
))
rows = run(cfg)

print(f"{'policy':28s}" + "".join(f"   eps={e:<5g}" for e in cfg.epsilon_list))
for tag in cfg.policies:
    agg = agg_rows(rows, tag)
    print(f"{tag:28s}" + "".join(f"{agg[e].scaled_mean:12.3f}" for e in cfg.epsilon_list))
zh = agg_rows(rows, "jsq")
print(f"{'zeta/2':28s}" + "".join(f"{zh[e].zeta_half:12.3f}" for e in cfg.epsilon_list))

# fraction of dispatches that found a below-threshold server in memory
for tag in ("jbt(log,K=4)/level", "jbt(poly,alpha=0.5)/level"):
    agg = agg_rows(rows, tag)
    print(tag, "memory nonempty:", ", ".join(f"{agg[e].mem_nonempty_frac:.3f}" for e in cfg.epsilon_list))
