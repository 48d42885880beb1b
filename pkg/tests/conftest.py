import numpy as np
import pytest

from qtw import qcore


def random_bloch(rng, n, radius=None):
    r = rng.normal(size=(n, 3))
    r /= np.linalg.norm(r, axis=-1, keepdims=True)
    r *= rng.uniform(0, 1, (n, 1)) if radius is None else radius
    return r


def random_states(rng, n):
    return qcore.bloch_to_rho(random_bloch(rng, n))


def random_hermitian(rng, n, scale=1.0):
    a = rng.normal(size=(n, 2, 2)) + 1j * rng.normal(size=(n, 2, 2))
    return scale * qcore.hermitize(a)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = []


def record_criterion(number, passed, detail):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
