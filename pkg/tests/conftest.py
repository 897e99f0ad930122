import hashlib
import os
from pathlib import Path

import pytest

import pullbalance
from pullbalance.harness import ExperimentConfig, default_workers, emit, load_rows, run

CACHE = Path(__file__).with_name(".acceptance-cache")
VERDICTS: dict = {}


def _source_digest() -> str:
    h = hashlib.sha256()
    for p in sorted(Path(pullbalance.__file__).parent.rglob("*")):
        if p.suffix in (".py", ".yaml"):
            h.update(p.read_bytes())
    return h.hexdigest()[:16]


def experiment_rows(name: str):
    """Rows of a bundled experiment, reused across sessions while config and code are unchanged.

    Set PULLBALANCE_FRESH=1 to ignore the cache.
    """
    cfg = ExperimentConfig.load(name)
    key = hashlib.sha256((repr(cfg.to_dict()) + _source_digest()).encode()).hexdigest()[:16]
    path = CACHE / f"{name}-{key}.csv"
    if path.exists() and not os.environ.get("PULLBALANCE_FRESH"):
        return cfg, load_rows(path)
    rows = run(cfg, workers=default_workers())
    CACHE.mkdir(exist_ok=True)
    emit(rows, "csv", path, cfg)
    return cfg, rows


@pytest.fixture(scope="session")
def verdicts():
    return VERDICTS


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(VERDICTS):
        ok, title, detail = VERDICTS[k]
        terminalreporter.write_line(f"[{k}] {'PASS' if ok else 'FAIL'}  {title}: {detail}")
