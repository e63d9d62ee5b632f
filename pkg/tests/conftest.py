import json
from functools import lru_cache
from pathlib import Path

import pytest

from csifb.channel import generate_dataset, with_seed
from csifb.experiment import DeskPlan, plan_key, run_seed_cached

DESK_DIR = Path(__file__).resolve().parent.parent / "results" / "desk"
DESK_SEEDS = (0, 1, 2)


class DeskRuns:
    """Three-seed desk comparison, read from the result cache (computed if stale)."""

    def __init__(self, plan=DeskPlan(), seeds=DESK_SEEDS, cache=DESK_DIR):
        self.plan, self.seeds, self.cache = plan, seeds, cache
        self.results, self.timings = {}, {}
        for s in seeds:
            self.results[s], self.timings[s] = run_seed_cached(plan, s, cache)

    def history(self, seed, name):
        doc = json.loads((self.cache / f"seed{seed}-{plan_key(self.plan, seed)}.json").read_text())
        return doc["histories"][name]

    @lru_cache(maxsize=None)
    def dataset(self, seed):
        return generate_dataset(with_seed(self.plan.scenario, seed), self.plan.counts)


@pytest.fixture(scope="session")
def desk():
    return DeskRuns()


VERDICTS: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record one pass/fail line for an acceptance criterion."""
    def record(n, ok, detail):
        VERDICTS[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
