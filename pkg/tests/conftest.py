import json
from importlib import resources

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from roadtraj import synth
from roadtraj.trajdata import Trajectory

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture(scope="session")
def example_bytes():
    return resources.files("roadtraj").joinpath("data/example_trajectory.json").read_bytes()


@pytest.fixture(scope="session")
def example_record(example_bytes):
    return json.loads(example_bytes)[0]


def line_traj(id="a" * 24, t0=0.0, n=100, v=100.0, x0=0.0, y=6.0, rate=25.0, **kw):
    t = t0 + np.arange(n) / rate
    kw.setdefault("length", 15.0)
    kw.setdefault("width", 6.0)
    kw.setdefault("height", 5.0)
    kw.setdefault("direction", 1 if y >= 0 else -1)
    return Trajectory.from_samples(id, t, x0 + v * (t - t0), np.full(n, float(y)), **kw)


@pytest.fixture(scope="session")
def small_scenario():
    spec = synth.ScenarioSpec(x_start=0, x_end=3000, duration=120, n_lanes=3, inflow=0.8, seed=4)
    return spec, synth.generate_scenario(spec)


# acceptance suite lines, printed in the terminal summary
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
