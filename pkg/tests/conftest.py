import numpy as np
import pytest

from bsdelab.paths import TimeGrid, generate_lattice


@pytest.fixture(scope="session")
def grid64():
    return TimeGrid.uniform(1.0, 64)


@pytest.fixture(scope="session")
def lattice_small(grid64):
    return generate_lattice(grid64, 1, 2000, 11)


@pytest.fixture(scope="session")
def lattice_10k(grid64):
    return generate_lattice(grid64, 1, 10_000, 2024)


def pytest_terminal_summary(terminalreporter):
    from criteria import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES):
            terminalreporter.write_line(line)
