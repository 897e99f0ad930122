"""Experiment orchestration: configs, epsilon sweeps, replications, seeds, output.

Seeds.  Every run derives its generators from ``SeedSequence(base_seed,
spawn_key=...)``:

    traffic (arrivals + services)  key = (n_idx, eps_idx, rep, 0 if crn else pol_idx + 1, 0)
    routing                        key = (n_idx, eps_idx, rep, pol_idx + 1, 1)

so any row can be re-run alone from (base_seed, its ``seed`` column).
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import __version__
from .geometry import DEFAULT_THETAS
from .policies import PolicySpec, ThresholdSchedule, probe_messages, threshold_at
from .processes import ProcessSpec, SystemParams, zeta
from .stats import finalize, replication_ci, welch_interval
from .system import Streams, simulate

CONFIG_DIR = Path(__file__).with_name("configs")
BUNDLED = ("E1", "E2", "E3")


class ConfigError(ValueError):
    pass


class RunFailure(RuntimeError):
    """A sub-run raised; ``rows`` holds everything finished before it."""

    def __init__(self, message, rows):
        super().__init__(message)
        self.rows = rows


@dataclass
class ExperimentConfig:
    name: str
    N: tuple
    service: object                 # one process dict (homogeneous) or a list of N
    arrival: dict                   # family + fixed params; "N" as a value means the server count
    epsilon_list: tuple
    policies: tuple                 # policy tags, see PolicySpec.parse
    horizon: dict = field(default_factory=lambda: {"rule": "scaled", "c": 100_000})
    warmup_fraction: float = 0.2
    batches: int = 32
    replications: int = 10
    base_seed: int = 0
    theta_grid: tuple = DEFAULT_THETAS
    reference_schedule: Optional[str] = "log,K=4"
    buffer: Optional[int] = None
    crn: bool = True
    record_wall_time: bool = False

    def __post_init__(self):
        self.N = tuple(int(n) for n in np.atleast_1d(self.N))
        self.epsilon_list = tuple(float(e) for e in self.epsilon_list)
        self.theta_grid = tuple(float(t) for t in self.theta_grid)
        self.policies = tuple(self.policies)
        eps = self.epsilon_list
        if not eps:
            raise ConfigError("epsilon_list is empty")
        if any(not 0 < e < 1 for e in eps):
            raise ConfigError("every epsilon must lie in (0, 1)")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise ConfigError("epsilon_list must be strictly decreasing")
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")
        if not 0 <= self.warmup_fraction <= 0.5:
            raise ConfigError("warmup_fraction must lie in [0, 0.5]")
        if self.batches < 2:
            raise ConfigError("batches must be >= 2")
        rule = self.horizon.get("rule")
        if rule not in ("fixed", "scaled"):
            raise ConfigError("horizon.rule must be 'fixed' or 'scaled'")
        for e in eps:
            h = self.horizon_for(e)
            if h - self.warmup_for(e) < 2 * self.batches:
                raise ConfigError(f"horizon {h} at epsilon={e} leaves too few post-warm-up slots for {self.batches} batches")
        for tag in self.policies:
            pol = PolicySpec.parse(tag)
            for e in eps:
                pol.threshold(e)

    def horizon_for(self, epsilon: float) -> int:
        if self.horizon["rule"] == "fixed":
            return int(self.horizon["slots"])
        return int(round(float(self.horizon["c"]) / epsilon**2))

    def warmup_for(self, epsilon: float) -> int:
        return int(self.warmup_fraction * self.horizon_for(epsilon))

    def params(self, N: int, epsilon: float) -> SystemParams:
        if isinstance(self.service, (list, tuple)):
            if len(self.service) != N:
                raise ConfigError(f"service list has {len(self.service)} entries, N={N}")
            service = tuple(ProcessSpec.from_dict(s) for s in self.service)
        else:
            service = tuple(ProcessSpec.from_dict(self.service) for _ in range(N))
        arr = dict(self.arrival)
        family = arr.pop("family")
        fixed = {k: (N if v == "N" else v) for k, v in arr.items()}
        return SystemParams.heavy_traffic(service, family, epsilon, **fixed)

    def policy_specs(self):
        return [PolicySpec.parse(t) for t in self.policies]

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("N", "epsilon_list", "policies", "theta_grid"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        """YAML file, or the name of a bundled config (E1, E2, E3)."""
        p = Path(path)
        if not p.exists() and str(path) in BUNDLED:
            p = CONFIG_DIR / f"{path}.yaml"
        with open(p) as fh:
            return cls.from_dict(yaml.safe_load(fh))


BASE_FIELDS = (
    "experiment", "policy", "semantics", "N", "epsilon", "r", "horizon", "warmup", "replication", "seed",
    "mean_sum_q", "ci_half", "scaled_mean", "zeta_half", "t_eps", "unused_mean", "T1", "T2", "T3",
    "lemma5_residual", "d_p50", "d_p99", "d_max",
)
TAIL_FIELDS = ("msgs_per_arrival", "wall_time_s", "diag_r", "mem_nonempty_frac", "mean_sum_q_sq")


def mgf_field(theta: float) -> str:
    return f"mgf_{theta:g}"


def header(theta_grid=DEFAULT_THETAS) -> list:
    return list(BASE_FIELDS) + [mgf_field(t) for t in theta_grid] + list(TAIL_FIELDS)


@dataclass
class ResultRow:
    experiment: str
    policy: str
    semantics: str
    N: int
    epsilon: float
    r: Optional[int]
    horizon: int
    warmup: int
    replication: object          # int, or "agg"
    seed: str
    mean_sum_q: float
    ci_half: float
    scaled_mean: float
    zeta_half: float
    t_eps: float
    unused_mean: float
    T1: Optional[float]
    T2: Optional[float]
    T3: Optional[float]
    lemma5_residual: Optional[float]
    d_p50: Optional[float] = None
    d_p99: Optional[float] = None
    d_max: Optional[float] = None
    mgf: dict = field(default_factory=dict)
    msgs_per_arrival: Optional[float] = None
    wall_time_s: float = 0.0
    diag_r: Optional[int] = None
    mem_nonempty_frac: Optional[float] = None
    mean_sum_q_sq: Optional[float] = None

    def flat(self) -> dict:
        d = {k: getattr(self, k) for k in BASE_FIELDS + TAIL_FIELDS}
        for th, v in self.mgf.items():
            d[mgf_field(float(th))] = v
        return d

    @classmethod
    def from_flat(cls, d: dict, theta_grid) -> "ResultRow":
        kw = {k: d.get(k) for k in BASE_FIELDS + TAIL_FIELDS}
        kw["mgf"] = {float(t): d.get(mgf_field(t)) for t in theta_grid}
        return cls(**kw)


@dataclass(frozen=True)
class Task:
    n_idx: int
    eps_idx: int
    rep: int
    pol_idx: int


def seed_key(config: ExperimentConfig, task: Task):
    traffic = (task.n_idx, task.eps_idx, task.rep, 0 if config.crn else task.pol_idx + 1, 0)
    routing = (task.n_idx, task.eps_idx, task.rep, task.pol_idx + 1, 1)
    return traffic, routing


def task_streams(config: ExperimentConfig, task: Task) -> Streams:
    traffic, routing = seed_key(config, task)
    return Streams.from_parts(
        np.random.SeedSequence(config.base_seed, spawn_key=traffic),
        np.random.SeedSequence(config.base_seed, spawn_key=routing),
    )


def _diag_r(config, policy: PolicySpec, eps: float) -> Optional[int]:
    r = policy.threshold(eps)
    if r is None and config.reference_schedule:
        r = threshold_at(ThresholdSchedule.parse(config.reference_schedule), eps)
    return r


def run_task(config: ExperimentConfig, task: Task):
    """One (N, epsilon, replication, policy) run -> (row, diagnostics)."""
    N = config.N[task.n_idx]
    eps = config.epsilon_list[task.eps_idx]
    policy = config.policy_specs()[task.pol_idx]
    params = config.params(N, eps)
    horizon, warmup = config.horizon_for(eps), config.warmup_for(eps)
    diag_r = _diag_r(config, policy, eps)
    t0 = time.perf_counter()
    res = simulate(
        params, policy, task_streams(config, task), horizon, warmup, config.batches,
        diag_r=diag_r, theta_grid=config.theta_grid,
    )
    wall = time.perf_counter() - t0 if config.record_wall_time else 0.0
    rep = finalize(res.estimator, eps, params.homogeneous)
    c = res.counters
    if policy.rule == "jbt":
        msgs = c["reports"] / c["tasks"] if c["tasks"] else 0.0
        nonempty = c["dispatch_memory_nonempty"] / c["dispatches"] if c["dispatches"] else 0.0
    else:
        msgs = probe_messages(policy, N)
        nonempty = None
    summ = res.diagnostics.summarize() if res.diagnostics else {}
    traffic, routing = seed_key(config, task)
    row = ResultRow(
        experiment=config.name, policy=policy.tag, semantics=policy.semantics if policy.rule == "jbt" else "",
        N=N, epsilon=eps, r=policy.threshold(eps), horizon=horizon, warmup=warmup,
        replication=task.rep, seed=f"{config.base_seed}:" + ".".join(map(str, traffic)) + "/" + ".".join(map(str, routing)),
        mean_sum_q=rep["mean_sum_q"], ci_half=rep["ci_half"], scaled_mean=rep["scaled_mean"],
        zeta_half=zeta(params) / 2, t_eps=rep["t_eps"], unused_mean=rep["unused_mean"],
        T1=rep["T1"], T2=rep["T2"], T3=rep["T3"], lemma5_residual=rep["lemma5_residual"],
        d_p50=summ.get("p50"), d_p99=summ.get("p99"), d_max=summ.get("max"),
        mgf={th: summ.get(mgf_field(th)) for th in config.theta_grid},
        msgs_per_arrival=msgs, wall_time_s=wall, diag_r=diag_r, mem_nonempty_frac=nonempty,
        mean_sum_q_sq=rep["mean_sum_q_sq"],
    )
    return row, res.diagnostics


def _mean_or_none(vals):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def aggregate(rows, diags) -> ResultRow:
    """Cross-replication row: means of replication means, t-interval over replications."""
    first = rows[0]
    means = [r.mean_sum_q for r in rows]
    ci = replication_ci(means).ci_half if len(rows) >= 2 else float("nan")
    m = float(np.mean(means))
    merged = None
    for d in diags:
        if d is not None:
            merged = d if merged is None else merged.merge(d)
    summ = merged.summarize() if merged else {}
    return ResultRow(
        experiment=first.experiment, policy=first.policy, semantics=first.semantics, N=first.N,
        epsilon=first.epsilon, r=first.r, horizon=first.horizon, warmup=first.warmup,
        replication="agg", seed="", mean_sum_q=m, ci_half=ci, scaled_mean=first.epsilon * m,
        zeta_half=first.zeta_half, t_eps=_mean_or_none(r.t_eps for r in rows),
        unused_mean=_mean_or_none(r.unused_mean for r in rows),
        T1=_mean_or_none(r.T1 for r in rows), T2=_mean_or_none(r.T2 for r in rows),
        T3=_mean_or_none(r.T3 for r in rows), lemma5_residual=_mean_or_none(r.lemma5_residual for r in rows),
        d_p50=summ.get("p50"), d_p99=summ.get("p99"), d_max=summ.get("max"),
        mgf={th: summ.get(mgf_field(th)) for th in first.mgf},
        msgs_per_arrival=_mean_or_none(r.msgs_per_arrival for r in rows),
        wall_time_s=float(sum(r.wall_time_s for r in rows)), diag_r=first.diag_r,
        mem_nonempty_frac=_mean_or_none(r.mem_nonempty_frac for r in rows),
        mean_sum_q_sq=_mean_or_none(r.mean_sum_q_sq for r in rows),
    )


def tasks_for(config: ExperimentConfig):
    return [
        Task(n, e, rep, p)
        for n in range(len(config.N))
        for e in range(len(config.epsilon_list))
        for p in range(len(config.policies))
        for rep in range(config.replications)
    ]


def _describe(config, task):
    return (f"policy={config.policies[task.pol_idx]} N={config.N[task.n_idx]} "
            f"epsilon={config.epsilon_list[task.eps_idx]} replication={task.rep}")


def run(config: ExperimentConfig, workers: int = 1, progress=None) -> list:
    """One row per (N, epsilon, policy, replication) plus one "agg" row per group."""
    tasks = tasks_for(config)
    results = {}
    try:
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futs = {t: pool.submit(run_task, config, t) for t in tasks}
                for t, f in futs.items():
                    try:
                        results[t] = f.result()
                    except Exception as exc:
                        raise RunFailure(f"run failed for {_describe(config, t)}: {exc}", None) from exc
                    if progress:
                        progress(t, results[t][0])
        else:
            for t in tasks:
                try:
                    results[t] = run_task(config, t)
                except Exception as exc:
                    raise RunFailure(f"run failed for {_describe(config, t)}: {exc}", None) from exc
                if progress:
                    progress(t, results[t][0])
    except RunFailure as fail:
        fail.rows = _collect(config, results, partial=True)
        raise
    return _collect(config, results)


def _collect(config, results, partial=False) -> list:
    rows = []
    groups = {}
    for t in sorted(results, key=lambda t: (t.n_idx, t.eps_idx, t.pol_idx, t.rep)):
        groups.setdefault((t.n_idx, t.eps_idx, t.pol_idx), []).append(results[t])
    for key, items in groups.items():
        rows.extend(r for r, _ in items)
        if not partial or len(items) == config.replications:
            rows.append(aggregate([r for r, _ in items], [d for _, d in items]))
    return rows


def compare(rows, policy_a: str, policy_b: str, epsilon: float, N: Optional[int] = None) -> dict:
    """Order two policies by scaled_mean at one epsilon.

    Verdict from the per-side 95% t-intervals over replications:
    ``a_below_b`` / ``a_above_b`` when disjoint, else ``overlap``.  The Welch
    interval for the difference a - b is reported alongside.
    """
    def pick(tag):
        vals = [r.scaled_mean for r in rows
                if r.policy == tag and r.replication != "agg" and math.isclose(r.epsilon, epsilon)
                and (N is None or r.N == N)]
        if len(vals) < 2:
            raise LookupError(f"need >= 2 replications of {tag} at epsilon={epsilon}, found {len(vals)}")
        return np.array(vals)

    a, b = pick(policy_a), pick(policy_b)
    ea, eb = replication_ci(a), replication_ci(b)
    lo_a, hi_a = ea.interval
    lo_b, hi_b = eb.interval
    if hi_a < lo_b:
        verdict = "a_below_b"
    elif hi_b < lo_a:
        verdict = "a_above_b"
    else:
        verdict = "overlap"
    diff, half = welch_interval(a, b)
    return {
        "verdict": verdict,
        "a": (ea.mean, ea.ci_half),
        "b": (eb.mean, eb.ci_half),
        "welch_diff": diff,
        "welch_half": half,
    }


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return str(v)


def _parse(v: str):
    if v == "":
        return None
    for conv in (int, float):
        try:
            return conv(v)
        except ValueError:
            pass
    return v


def rows_to_csv(rows, theta_grid=DEFAULT_THETAS, status: Optional[str] = None) -> str:
    buf = io.StringIO()
    cols = header(theta_grid)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        d = r.flat()
        w.writerow([_fmt(d.get(c)) for c in cols])
    if status:
        buf.write(f"# status: {status}\n")
    return buf.getvalue()


def emit(rows, fmt: str, path, config: Optional[ExperimentConfig] = None, status: Optional[str] = None) -> None:
    """Write rows as CSV (fixed header) or JSON (rows + config echo + version)."""
    theta = config.theta_grid if config else (tuple(rows[0].mgf) if rows else DEFAULT_THETAS)
    if fmt == "csv":
        text = rows_to_csv(rows, theta, status)
    elif fmt == "json":
        doc = {
            "version": __version__,
            "config": config.to_dict() if config else None,
            "seed_scheme": "SeedSequence(base_seed, spawn_key=(n_idx, eps_idx, rep, crn?0:pol_idx+1, 0)) traffic; "
                           "(n_idx, eps_idx, rep, pol_idx+1, 1) routing",
            "columns": header(theta),
            "rows": [r.flat() for r in rows],
        }
        if status:
            doc["status"] = status
        text = json.dumps(doc, indent=1)
    else:
        raise ValueError(f"unknown format {fmt!r}")
    Path(path).write_text(text)


def load_rows(path) -> list:
    """Read rows back from an emitted CSV or JSON file."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        doc = json.loads(text)
        cols = doc["columns"]
        theta = [float(c[4:]) for c in cols if c.startswith("mgf_")]
        return [ResultRow.from_flat(d, theta) for d in doc["rows"]]
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    theta = [float(c[4:]) for c in reader.fieldnames if c.startswith("mgf_")]
    rows = []
    for d in reader:
        d = {k: _parse(v) for k, v in d.items()}
        d["seed"] = "" if d["seed"] is None else str(d["seed"])
        d["semantics"] = d["semantics"] or ""
        rows.append(ResultRow.from_flat(d, theta))
    return rows


def agg_rows(rows, policy: Optional[str] = None, N: Optional[int] = None) -> dict:
    """epsilon -> aggregate row, filtered by policy tag and N."""
    return {
        r.epsilon: r for r in rows
        if r.replication == "agg" and (policy is None or r.policy == policy) and (N is None or r.N == N)
    }


def default_workers() -> int:
    return max(1, (os.cpu_count() or 1))
