import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from pullbalance import harness
from pullbalance.exactchain import report
from pullbalance.harness import (
    ExperimentConfig,
    RunFailure,
    Task,
    agg_rows,
    compare,
    emit,
    header,
    load_rows,
    run,
    rows_to_csv,
    task_streams,
)
from pullbalance.policies import PolicySpec


def small(**kw):
    base = dict(
        name="T", N=[2], service={"family": "bernoulli", "p": 0.5}, arrival={"family": "bernoulli"},
        epsilon_list=[0.2], policies=["jsq"], horizon={"rule": "fixed", "slots": 20_000},
        replications=2, base_seed=7,
    )
    base.update(kw)
    return ExperimentConfig.from_dict(base)


def test_row_count_and_aggregate():
    rows = run(small())
    assert len(rows) == 3
    assert [r.replication for r in rows] == [0, 1, "agg"]
    agg = rows[-1]
    assert agg.mean_sum_q == pytest.approx(np.mean([r.mean_sum_q for r in rows[:2]]))
    for r in rows:
        assert r.scaled_mean == pytest.approx(r.epsilon * r.mean_sum_q)
        assert r.zeta_half == pytest.approx((0.25 + 0.25 + 0.8 * 0.2) / 2)


def test_rows_sorted_and_complete():
    cfg = small(N=[2, 3], epsilon_list=[0.3, 0.2], policies=["jsq", "random"], replications=2,
                service={"family": "binomial", "K": 2, "p": 0.5}, arrival={"family": "binomial", "K": "N"})
    rows = run(cfg)
    assert len(rows) == 2 * 2 * 2 * 3
    keys = [(r.N, -r.epsilon, r.policy) for r in rows]
    assert keys == sorted(keys, key=lambda k: (k[0], k[1], ["jsq", "random"].index(k[2])))


def test_same_seed_gives_identical_csv(tmp_path):
    cfg = small(policies=["jiq/level", "random"])
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    emit(run(cfg), "csv", a, cfg)
    emit(run(cfg), "csv", b, cfg)
    assert a.read_bytes() == b.read_bytes()
    c = tmp_path / "c.csv"
    emit(run(replace(cfg, base_seed=8)), "csv", c, cfg)
    assert a.read_bytes() != c.read_bytes()


def _arrivals(cfg, task, n=200):
    return task_streams(cfg, task).arrival.random(n)


def test_common_random_numbers():
    cfg = small(policies=["jsq", "random"])
    t0, t1 = Task(0, 0, 0, 0), Task(0, 0, 0, 1)
    assert np.array_equal(_arrivals(cfg, t0), _arrivals(cfg, t1))
    assert not np.array_equal(task_streams(cfg, t0).routing.random(50), task_streams(cfg, t1).routing.random(50))
    assert not np.array_equal(_arrivals(cfg, t0), _arrivals(cfg, Task(0, 0, 1, 0)))
    off = replace(cfg, crn=False)
    assert not np.array_equal(_arrivals(off, t0), _arrivals(off, t1))
    # switching CRN off leaves each policy's rows reproducible
    assert [r.flat() for r in run(off)] == [r.flat() for r in run(off)]


def test_crn_paired_runs_share_traffic():
    cfg = small(policies=["jsq", "random"], replications=1)
    rows = [r for r in run(cfg) if r.replication != "agg"]
    assert rows[0].seed.split("/")[0] == rows[1].seed.split("/")[0]
    assert rows[0].seed.split("/")[1] != rows[1].seed.split("/")[1]


def test_compare_examples():
    cfg = small(policies=["jsq", "random"], epsilon_list=[0.1], horizon={"rule": "fixed", "slots": 200_000},
                replications=4)
    rows = run(cfg)
    same = compare(rows, "jsq", "jsq", 0.1)
    assert same["verdict"] == "overlap"
    assert same["welch_diff"] == 0
    res = compare(rows, "jsq", "random", 0.1)
    assert res["verdict"] == "a_below_b"
    assert compare(rows, "random", "jsq", 0.1)["verdict"] == "a_above_b"
    with pytest.raises(LookupError):
        compare(rows, "jsq", "jiq", 0.1)
    with pytest.raises(LookupError):
        compare(run(replace(cfg, replications=1)), "jsq", "random", 0.1)


def test_emit_header_only_and_field_counts(tmp_path):
    p = tmp_path / "empty.csv"
    emit([], "csv", p)
    assert p.read_text().strip().split(",") == header()
    cfg = small(policies=["jbt(log,K=4)/level", "random"])
    rows = run(cfg)
    p = tmp_path / "rows.csv"
    emit(rows, "csv", p, cfg)
    with open(p) as fh:
        table = list(csv.reader(fh))
    assert table[0] == header(cfg.theta_grid)
    assert all(len(line) == len(table[0]) for line in table)
    assert len(table) == len(rows) + 1


def test_round_trips(tmp_path):
    cfg = small(policies=["jbt(log,K=4)/report-once", "jiq/level"])
    rows = run(cfg)
    pj, pc = tmp_path / "r.json", tmp_path / "r.csv"
    emit(rows, "json", pj, cfg)
    emit(rows, "csv", pc, cfg)
    assert [r.flat() for r in load_rows(pj)] == [r.flat() for r in rows]
    assert [r.flat() for r in load_rows(pc)] == [r.flat() for r in rows]
    doc = json.loads(pj.read_text())
    assert doc["config"] == cfg.to_dict()
    assert doc["version"] and "spawn_key" in doc["seed_scheme"]
    assert ExperimentConfig.from_dict(doc["config"]) == cfg
    with pytest.raises(ValueError):
        emit(rows, "xml", tmp_path / "r.xml", cfg)


def test_partial_output_on_failure(tmp_path, monkeypatch):
    cfg = small(policies=["jsq", "random"])
    real = harness.run_task

    def flaky(config, task):
        if task.pol_idx == 1 and task.rep == 1:
            raise RuntimeError("boom")
        return real(config, task)

    monkeypatch.setattr(harness, "run_task", flaky)
    with pytest.raises(RunFailure, match="policy=random N=2 epsilon=0.2 replication=1") as info:
        run(cfg)
    rows = info.value.rows
    assert [(r.policy, r.replication) for r in rows] == [("jsq", 0), ("jsq", 1), ("jsq", "agg"), ("random", 0)]
    text = rows_to_csv(rows, cfg.theta_grid, status=f"failed: {info.value}")
    assert text.splitlines()[-1].startswith("# status: failed")
    p = tmp_path / "partial.csv"
    p.write_text(text)
    assert len(load_rows(p)) == 4


@pytest.mark.parametrize("bad", [
    {"epsilon_list": [0.2, 0.3]},
    {"epsilon_list": [0.2, 0.2]},
    {"epsilon_list": [1.2]},
    {"epsilon_list": []},
    {"replications": 0},
    {"warmup_fraction": 0.8},
    {"horizon": {"rule": "fixed", "slots": 50}},
    {"horizon": {"rule": "sometimes"}},
    {"policies": ["jbt(poly,alpha=0)/level"]},
    {"policies": ["teleport"]},
    {"colour": "blue"},
])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        small(**bad)


def test_bundled_configs_load():
    e1 = ExperimentConfig.load("E1")
    assert e1.N == (2, 4) and e1.epsilon_list == (0.3, 0.2, 0.1, 0.05)
    assert e1.horizon_for(0.05) == 40_000_000
    assert len(e1.policy_specs()) == 5
    p = e1.params(4, 0.1)
    assert p.N == 4 and p.lam == pytest.approx(1.9)
    for name in ("E2", "E3"):
        assert ExperimentConfig.load(name).name == name


def test_message_rates():
    cfg = small(policies=["jbt(log,K=4)/report-once", "jbt(log,K=4)/level", "jiq/report-once", "pod(d=2)", "jsq"],
                epsilon_list=[0.3, 0.1], horizon={"rule": "fixed", "slots": 200_000})
    rows = run(cfg)
    for r in rows:
        if r.policy.startswith(("jbt", "jiq")):
            assert r.msgs_per_arrival <= 1.05
            assert 0 <= r.mem_nonempty_frac <= 1
        elif r.policy == "pod(d=2)":
            assert r.msgs_per_arrival == 4
        else:
            assert r.mem_nonempty_frac is None


def test_jsq_scaled_mean_near_pooled_bound():
    cfg = small(policies=["jsq"], replications=4, horizon={"rule": "fixed", "slots": 5_000_000}, base_seed=1)
    rows = run(cfg)
    agg = agg_rows(rows, "jsq")[0.2]
    exact = report(cfg.params(2, 0.2), PolicySpec.jsq(), 50)
    assert abs(agg.mean_sum_q - exact["sum_q"]) <= 3 * agg.ci_half
    assert agg.zeta_half == pytest.approx(0.33)
    assert abs(agg.scaled_mean - agg.zeta_half) < 0.1


def test_workers_match_serial():
    cfg = small(policies=["jsq", "jiq/level"])
    assert [r.flat() for r in run(cfg, workers=2)] == [r.flat() for r in run(cfg)]
