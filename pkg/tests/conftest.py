import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from patchdiff.patch_field import Grid2D, PatchParams, SymMatrixField, assemble_A

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def field_c1_n64():
    return assemble_A(Grid2D(64), PatchParams(1.0))


def random_psd_field(n, seed, scale=1.0):
    """Pointwise PSD field ``B B^T`` with a random 2x2 ``B`` per node."""
    rng = np.random.default_rng(seed)
    b = rng.standard_normal((4, n, n)) * scale
    return SymMatrixField(b[0] ** 2 + b[1] ** 2, b[0] * b[2] + b[1] * b[3], b[2] ** 2 + b[3] ** 2)


def trig_field(n):
    """Smooth uniformly elliptic trigonometric coefficient field."""
    x1, x2 = Grid2D(n).coords()
    t = 2 * np.pi
    return SymMatrixField(2.0 + np.cos(t * x2), 0.3 * np.sin(t * (x1 + x2)), 2.0 + np.sin(t * x1))


ACCEPTANCE_LINES = []


def report(number, passed, detail):
    """Record and print one acceptance line; returns ``passed`` for asserting."""
    line = f"ACCEPTANCE {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
