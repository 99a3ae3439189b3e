import math

import numpy as np
import pytest
import sympy

from fdcheck import jacobian_errors, sample_models
from westervelt_fem import assembly as asm
from westervelt_fem.assembly import MaterialSpec
from westervelt_fem.mesh import interval_mesh, rect_mesh
from westervelt_fem.models import (DegeneracyError, Model, ModelKind, State, degeneracy_guard,
                                   frozen_coefficients, manufactured_forcing, manufactured_solution)
from westervelt_fem.stepper import Trajectory


@pytest.mark.parametrize("kind", list(ModelKind))
def test_jacobians_match_finite_differences(kind):
    model = sample_models()[kind]
    rng = np.random.default_rng(7)
    for _ in range(3):
        assert max(jacobian_errors(model, rng)) < 1e-5


def test_linear_residual_is_m_c_k(unit_interval):
    m = unit_interval
    model = Model(ModelKind.PRESSURE_VISCOSITY, m, MaterialSpec.uniform(m, c2=2.0, b=0.5))
    rng = np.random.default_rng(0)
    u, ut, a = (rng.standard_normal(m.n_nodes) for _ in range(3))
    for v in (u, ut, a):
        v[m.boundary_mask] = 0
    R = model.residual(State(0, u, ut), a)
    expect = asm.mass_matrix(m) @ a + 0.5 * asm.stiffness_matrix(m) @ ut + 2.0 * asm.stiffness_matrix(m) @ u
    expect[m.boundary_mask] = 0
    assert np.allclose(R, expect)


def test_acoustic_constant_coefficients_scale_pressure_model(unit_interval):
    m = unit_interval
    pv = Model(ModelKind.PRESSURE_VISCOSITY, m, MaterialSpec.uniform(m, b=1.0, delta=0.5, q=3.0, k=0.7))
    ac = Model(ModelKind.ACOUSTIC_COUPLED, m, MaterialSpec.uniform(
        m, lam=2.0, rho=2.0, b=0.5, delta=0.5, q=3.0, k=0.7))
    rng = np.random.default_rng(3)
    u, ut, a = (0.1 * rng.standard_normal(m.n_nodes) for _ in range(3))
    for v in (u, ut, a):
        v[m.boundary_mask] = 0
    assert np.allclose(ac.residual(State(0, u, ut), a), 0.5 * pv.residual(State(0, u, ut), a))


def test_margin_and_degeneracy_error(pv_model, unit_interval):
    x = unit_interval.nodes[:, 0]
    s = State(0.0, 0.2 * np.sin(np.pi * x), 0 * x)
    assert math.isclose(pv_model.margin(s), 1 - 0.4 * np.sin(np.pi * x).max())
    bad = State(0.25, 0.6 * np.sin(np.pi * x), 0 * x)
    with pytest.raises(DegeneracyError) as exc:
        pv_model.check_margin(bad)
    assert exc.value.t == 0.25 and exc.value.margin < 0.05


def test_frozen_coefficients_constant_state(pv_model, unit_interval):
    c0, c1 = 0.1, 0.05
    n = unit_interval.n_nodes
    fc = frozen_coefficients(pv_model, State(0.0, np.full(n, c0), np.full(n, c1)))
    assert np.allclose(fc.alpha, -2 * c0)
    assert np.allclose(fc.f, -2 * c1)


def test_frozen_coefficients_from_trajectory(pv_model, unit_interval):
    n = unit_interval.n_nodes
    times = np.array([0.0, 1.0])
    tr = Trajectory(unit_interval, pv_model.kind, times, np.array([np.zeros(n), np.full(n, 0.2)]),
                    np.zeros((2, n)))
    fc = frozen_coefficients(pv_model, tr, 0.5)
    assert np.allclose(fc.alpha, -0.2)
    with pytest.raises(ValueError):
        frozen_coefficients(pv_model, tr, 2.0)
    deg = Trajectory(unit_interval, pv_model.kind, times, np.array([np.zeros(n), np.full(n, 0.49)]),
                     np.zeros((2, n)))
    with pytest.raises(DegeneracyError):
        frozen_coefficients(pv_model, deg, 1.0)


def test_frozen_potential_and_elastic():
    r = rect_mesh(3, 3)
    pot = Model(ModelKind.POTENTIAL_VISCOSITY, r, MaterialSpec.uniform(r, c2=2.0, b=1.0, delta=0.5, k=1.0))
    fc = frozen_coefficients(pot, State(0, np.zeros(r.n_nodes), np.full(r.n_nodes, 0.1)))
    assert np.allclose(fc.alpha, 2.0 / 0.8)
    rf = r.with_tags(np.ones(r.n_elements, dtype=int))
    el = Model(ModelKind.ELASTIC_COUPLED, rf, MaterialSpec.uniform(rf, lam=1.0, b_hat=1.0, delta=0.5))
    assert np.allclose(frozen_coefficients(el, el.zero_state()).alpha, 1.0)


def test_degeneracy_guard_reports_bound(pv_model, unit_interval):
    x = unit_interval.nodes[:, 0]
    g = degeneracy_guard(pv_model, State(0, 0.01 * np.sin(np.pi * x), 0 * x))
    assert g.margin > 0.97
    assert g.a_priori <= 1.0


def test_invalid_models():
    m = interval_mesh(4)
    with pytest.raises(ValueError):
        Model(ModelKind.ELASTIC_COUPLED, m, MaterialSpec.uniform(m))
    with pytest.raises(ValueError):
        Model(ModelKind.PRESSURE_VISCOSITY, m, MaterialSpec.uniform(m, c2=0.0))
    with pytest.raises(ValueError):
        Model(ModelKind.PRESSURE_VISCOSITY, m, MaterialSpec.uniform(interval_mesh(5)))


def test_manufactured_forcing_matches_symbolic():
    x, t = sympy.symbols("x t", real=True)
    c2, b, delta, k, q, A = 1.3, 0.8, 0.4, 0.3, 3, 0.7
    u = A * sympy.sin(sympy.pi * x) * sympy.cos(t)
    ut = sympy.diff(u, t)
    uxt = sympy.diff(ut, x)
    flux = b * ((1 - delta) + delta * uxt ** 2) * uxt          # |g|^{q-1} g for q = 3
    g = (1 - 2 * k * u) * sympy.diff(u, t, 2) - c2 * sympy.diff(u, x, 2) - sympy.diff(flux, x) - 2 * k * ut ** 2
    f = sympy.lambdify((x, t), g, "numpy")
    forcing = manufactured_forcing(c2, b, delta, k, q, A)
    pts = np.linspace(0, 1, 17)[:, None]
    for tt in (0.0, 0.3, 1.7):
        assert np.allclose(forcing(pts, tt), f(pts[:, 0], tt), atol=1e-12)
    u_fn, ut_fn = manufactured_solution(A)
    assert np.allclose(u_fn(pts, 0.0), A * np.sin(np.pi * pts[:, 0]))
    assert np.allclose(ut_fn(pts, 0.0), 0.0)
