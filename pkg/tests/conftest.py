import numpy as np
import pytest

from splatdiff import _accel
from splatdiff.model import GaussianMap, sh_coeff_count

BACKENDS = ["numba", "numpy"] if _accel.NUMBA_AVAILABLE else ["numpy"]


@pytest.fixture(params=BACKENDS)
def backend(request):
    prev = _accel.backend()
    _accel.set_backend(request.param)
    yield request.param
    _accel.set_backend(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_map(n, rng, degree=3, spread=10.0):
    k = sh_coeff_count(degree)
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianMap(
        rng.uniform(-spread, spread, (n, 3)),
        np.log(rng.uniform(0.01, 0.5, (n, 3))),
        q,
        rng.normal(0, 0.3, (n, 3, k)),
        rng.normal(0, 2, n),
        sh_degree=degree,
    )


def random_rotation(rng, max_angle=np.pi):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return axis * rng.uniform(0, max_angle)


ACCEPTANCE: list[str] = []


def record(criterion: str, ok: bool, detail: str) -> None:
    ACCEPTANCE.append(f"{'PASS' if ok else 'FAIL'}  {criterion}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
