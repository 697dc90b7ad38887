import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stepwise_dpo.env import Problem
from stepwise_dpo.pipeline import ExperimentConfig, run_pipeline
from stepwise_dpo.policy import FeatureMap, PolicyParams

settings.register_profile("dev", max_examples=30, deadline=None)
settings.register_profile("ci", max_examples=100, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=1000, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "dev"))


@pytest.fixture
def small_fmap():
    return FeatureMap(V=10, D=3, B=4)


@pytest.fixture
def small_problem():
    return Problem("t0", 3, (("add", 4), ("mul", 2), ("sub", 1)), 10)


def random_policy(fmap, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    return PolicyParams(fmap, scale * rng.standard_normal(fmap.shape))


@pytest.fixture(scope="session")
def default_run():
    """All training stages at the default config, computed once per session."""
    cfg = ExperimentConfig()
    return cfg, run_pipeline(cfg)


_criteria: list[str] = []


@pytest.fixture
def criterion():
    """Record one acceptance line; it is echoed now and repeated in the terminal summary."""
    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        _criteria.append(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _criteria:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_criteria, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
