import numpy as np
import pytest

from westervelt_fem.assembly import MaterialSpec
from westervelt_fem.mesh import interval_mesh
from westervelt_fem.models import Model, ModelKind, State


@pytest.fixture
def unit_interval():
    return interval_mesh(32)


def sine_state(mesh, amplitude, velocity=0.0):
    x = mesh.nodes
    v = np.prod(np.sin(np.pi * x), axis=1)
    v[mesh.boundary_mask] = 0.0
    return State(0.0, amplitude * v, velocity * v)


@pytest.fixture
def pv_model(unit_interval):
    mat = MaterialSpec.uniform(unit_interval, b=1.0, delta=0.5, q=3.0, k=1.0)
    return Model(ModelKind.PRESSURE_VISCOSITY, unit_interval, mat)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
