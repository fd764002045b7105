import dataclasses

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rsmp.adjoint import solve_adjoints
from rsmp.benchmarks import get_benchmark
from rsmp.bsde import solve_bsde
from rsmp.paths import TimeGrid, generate_noise, simulate_forward

settings.register_profile("rsmp", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("rsmp")


@dataclasses.dataclass
class Solved:
    spec: object
    bench: object
    noise: object
    forward: object
    solution: object
    adjoints: object


def solve_small(name, N=2000, M=64, seed=3):
    bench = get_benchmark(name)
    spec = bench.spec()
    grid = TimeGrid(spec.T, M)
    noise = generate_noise(grid, N, seed)
    fwd = simulate_forward(spec, bench.base_policy(), noise)
    sol = solve_bsde(spec, fwd, noise)
    adj = solve_adjoints(spec, sol, noise)
    return Solved(spec, bench, noise, fwd, sol, adj)


@pytest.fixture(scope="session")
def example_small():
    return solve_small("example")


@pytest.fixture(scope="session")
def quadratic_small():
    return solve_small("quadratic")


@pytest.fixture(scope="session")
def vacuous_small():
    return solve_small("example_vacuous")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def record_criterion(number, passed, detail):
    ACCEPTANCE_LINES[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[number])
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
