"""Shared fixtures. Expensive trainings run once per session."""
import time

import numpy as np
import pytest

from coarsesort.control import train_controller
from coarsesort.matclass import SampleSet, extract_samples, scene_family
from coarsesort.plant import canonical_params
from coarsesort.sysid import PredictorConfig, canonical_training_logs, train_predictor

ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion."""

    def record(tag, title, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] {tag} {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1][2:])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def params():
    return canonical_params()


@pytest.fixture(scope="session")
def training_logs(params):
    return canonical_training_logs(params)


@pytest.fixture(scope="session")
def predictor(training_logs):
    t0 = time.perf_counter()
    model = train_predictor(training_logs, PredictorConfig())
    model.meta["train_time_s"] = time.perf_counter() - t0
    return model


@pytest.fixture(scope="session")
def policy(predictor, params):
    return train_controller(predictor, params)


@pytest.fixture(scope="session")
def scene_samples():
    family = scene_family(4, seed=0)
    return SampleSet.concat(extract_samples(cube, rects) for cube, _, rects in family)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
