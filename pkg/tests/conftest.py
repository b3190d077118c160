import numpy as np
import pytest

from bnspec.mesh import DomainSpec, build_mesh
from bnspec.spectral import dirichlet_spectrum

ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    """Store the one-line verdict printed in the terminal summary."""
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])


@pytest.fixture(scope="session")
def ball400():
    mesh = build_mesh(DomainSpec("RadialBall3D", 400))
    return mesh, dirichlet_spectrum(mesh, 6)


@pytest.fixture(scope="session")
def ball2000():
    mesh = build_mesh(DomainSpec("RadialBall3D", 2000))
    return mesh, dirichlet_spectrum(mesh, 10)


@pytest.fixture(scope="session")
def box9():
    mesh = build_mesh(DomainSpec("Box3D", 9))
    return mesh, dirichlet_spectrum(mesh, 10)


@pytest.fixture(scope="session")
def box33():
    mesh = build_mesh(DomainSpec("Box3D", 33))
    return mesh, dirichlet_spectrum(mesh, 10)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
