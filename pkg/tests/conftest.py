import numpy as np
import pytest

from ndhomog.env import FieldSpec, realize_field, sample_environment


@pytest.fixture
def checkerboard2():
    return FieldSpec.checkerboard((1.0, 4.0), dim=2)


@pytest.fixture
def checkerboard3():
    return FieldSpec.checkerboard((1.0, 4.0), dim=3)


def random_field(spec, seed):
    return realize_field(sample_environment(spec, seed) if spec.random else None, spec)


def constant_field(matrix):
    return realize_field(None, FieldSpec.constant(np.asarray(matrix, dtype=float)))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
