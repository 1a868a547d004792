import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from varerr.grid import Grid, HamiltonianSpec, WaveState

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def gaussian(grid: Grid, q0=0.0, p0=0.0, width=1 / math.sqrt(2), hbar=1.0) -> WaveState:
    q = grid.points(0)
    amp = np.exp(-((q - q0) ** 2) / (4 * width**2) + 1j * p0 * q / hbar)
    return WaveState(grid, amp, hbar).normalized()


def smooth_random(grid: Grid, rng, hbar=1.0, n_modes=4) -> WaveState:
    """Random smooth, well-localized state (any dimension)."""
    mesh = grid.mesh()
    amp = np.zeros(grid.shape, dtype=complex)
    for _ in range(n_modes):
        env = np.ones(grid.shape)
        phase = np.zeros(grid.shape)
        for X, ax in zip(mesh, grid.axes):
            L = ax.x_max - ax.x_min
            c = 0.5 * (ax.x_min + ax.x_max) + rng.uniform(-0.1, 0.1) * L
            env = env * np.exp(-((X - c) ** 2) / (2 * (rng.uniform(0.06, 0.1) * L) ** 2))
            phase = phase + rng.uniform(-1.5, 1.5) * X
        amp += complex(rng.normal(), rng.normal()) * env * np.exp(1j * phase)
    return WaveState(grid, amp, hbar).normalized()


def ho(grid: Grid, mass=1.0, omega=1.0, hbar=1.0, kinetic="spectral") -> HamiltonianSpec:
    q = grid.points(0)
    return HamiltonianSpec(grid, (mass,), 0.5 * mass * omega**2 * q**2, kinetic, hbar)


def ho_eigenstate(grid: Grid, n: int, mass=1.0, omega=1.0, hbar=1.0) -> WaveState:
    from numpy.polynomial.hermite import hermval

    xi = math.sqrt(mass * omega / hbar) * grid.points(0)
    c = np.zeros(n + 1)
    c[n] = 1.0
    return WaveState(grid, hermval(xi, c) * np.exp(-xi**2 / 2), hbar).normalized()


@pytest.fixture
def grid1d():
    return Grid.uniform(-10.0, 10.0, 256)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary ---------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> bool:
    """Store one acceptance line; the terminal summary prints them in order."""
    ACCEPTANCE_LINES.append(f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}")
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
