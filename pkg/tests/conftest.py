import numpy as np
import pytest

from smlmc.kernel import BasisKernelParams, CoregionalizationWeights, StructuredKernel


def random_kernel(rng, Q=2, D=3, R=2, lam_low=0.05):
    basis = [BasisKernelParams(rng.uniform(0.0, 0.08), rng.uniform(1e-5, 5e-4)) for _ in range(Q)]
    weights = [CoregionalizationWeights(rng.normal(0, 0.8, (D, R)), rng.uniform(lam_low, 0.3, D)) for _ in range(Q)]
    return StructuredKernel(basis, weights, rng.uniform(0.05, 0.2, D))


def random_inputs(rng, T, D, horizon=60.0):
    c = rng.integers(0, D, T)
    t = np.sort(rng.uniform(0, horizon, T))
    return c, t


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: [int(p) if p.isdigit() else p for p in k.replace("C", "").split(".")]):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key}: {'PASS' if ok else 'FAIL'}  {detail}")
