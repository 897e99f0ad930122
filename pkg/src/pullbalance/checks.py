"""Cross-checks run by the ``identity-check`` and ``geometry-check`` commands."""
from __future__ import annotations

import itertools

import numpy as np
from scipy.optimize import lsq_linear

from . import exactchain, geometry
from .geometry import RegionSpec


def _nearest_in_box(x, lo, hi):
    """Nearest point of the box [lo, hi] by bounded least squares."""
    N = x.size
    res = lsq_linear(np.eye(N), x, bounds=(lo, hi), method="bvls", tol=1e-14)
    return res.x


def numeric_distances(q, region: RegionSpec):
    """(d_lower, d_upper, nearest_lower, nearest_upper) by optimisation."""
    N, r = region.N, region.r
    pl = _nearest_in_box(q, np.zeros(N), np.full(N, float(r)))
    pu = _nearest_in_box(q, np.full(N, float(r)), np.full(N, np.inf))
    return np.linalg.norm(q - pl), np.linalg.norm(q - pu), pl, pu


def geometry_check(trials: int = 1000, seed: int = 0, tol: float = 1e-9) -> dict:
    """Closed-form distances and projections against the numeric nearest point."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        N = int(rng.integers(1, 6))
        r = int(rng.integers(1, 10))
        region = RegionSpec(r, N)
        q = rng.uniform(0, 3 * r, size=N)
        dl, du, pl, pu = numeric_distances(q, region)
        errs = [
            abs(geometry.dist_lower(q, region) - dl),
            abs(geometry.dist_upper(q, region) - du),
            abs(geometry.dist_region(q, region) - min(dl, du)),
            np.abs(geometry.perp_decompose(q, region, "lower").parallel - pl).max(),
            np.abs(geometry.perp_decompose(q, region, "upper").parallel - pu).max(),
        ]
        worst = max(worst, max(errs))
    grid_bad = []
    for N in (1, 2, 3):
        for r in range(1, 5):
            region = RegionSpec(r, N)
            pts = np.array(list(itertools.product(range(2 * r + 2), repeat=N)))
            d = geometry.dist_region(pts, region)
            inside = np.array([all(x <= r for x in p) or all(x >= r for x in p) for p in pts])
            if np.any((d == 0) != inside):
                grid_bad.append((N, r))
    return {"trials": trials, "max_error": float(worst), "grid_failures": grid_bad,
            "ok": worst <= tol and not grid_bad}


def identity_check(config, B: int, tol: float = 1e-6) -> list:
    """Exact E||U||_1 = eps and the pairwise identity for every (N, eps, policy)."""
    out = []
    for N in config.N:
        for eps in config.epsilon_list:
            params = config.params(N, eps)
            for pol in config.policy_specs():
                rep = exactchain.report(params, pol, B)
                ok_u = abs(rep["unused_l1"] - eps) <= tol
                ok_l = rep["lemma5_residual"] is None or abs(rep["lemma5_residual"]) <= tol
                rep["unused_ok"] = ok_u
                rep["lemma5_ok"] = ok_l
                rep["boundary_ok"] = rep["boundary_mass"] < 1e-6
                rep["ok"] = ok_u and ok_l
                out.append(rep)
    return out
