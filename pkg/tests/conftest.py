import numpy as np
import pytest

from crisp.shapes import KernelBlend, LinearBlend, asymmetric_basis, bump_basis


@pytest.fixture(scope="session")
def basis4():
    return asymmetric_basis(4)


@pytest.fixture(scope="session")
def linear4(basis4):
    return LinearBlend(basis4)


@pytest.fixture(scope="session")
def kernel4(basis4):
    return KernelBlend(basis4, tau=0.05)


@pytest.fixture(scope="session")
def bump():
    return bump_basis()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
