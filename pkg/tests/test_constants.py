import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from westervelt_fem.constants import (NormSpec, bochner_norm, embedding_ratio_estimate, l2_error,
                                      lp_norm, poincare_constant, tent_field, triple_norm,
                                      young_check, young_constant)
from westervelt_fem.mesh import interval_mesh, rect_mesh
from westervelt_fem.models import ModelKind
from westervelt_fem.stepper import Trajectory


def test_lp_norm_of_constant_and_linear():
    m = rect_mesh(4, 4, 2.0, 1.0)
    one = np.ones(m.n_nodes)
    assert math.isclose(lp_norm(m, one), math.sqrt(2.0))
    assert math.isclose(lp_norm(m, one, 3), 2.0 ** (1 / 3))
    assert lp_norm(m, one, 2, True) == 0.0
    x = m.nodes[:, 0]
    assert math.isclose(lp_norm(m, x, np.inf), 2.0)
    assert math.isclose(lp_norm(m, 3 * x, 4, True), 3 * 2.0 ** 0.25)


def test_lp_norm_vector_field():
    m = rect_mesh(2, 2)
    U = np.concatenate([np.full(m.n_nodes, 3.0), np.full(m.n_nodes, 4.0)])
    assert math.isclose(lp_norm(m, U), 5.0)


def test_lp_norm_rejects_bad_exponent():
    with pytest.raises(ValueError):
        lp_norm(interval_mesh(2), np.zeros(3), 0.5)


def test_poincare_interval_and_square():
    assert abs(poincare_constant(interval_mesh(64)) * math.pi - 1) < 0.01
    assert abs(poincare_constant(rect_mesh(32, 32)) * math.pi * math.sqrt(2) - 1) < 0.01


def test_poincare_inequality_on_random_fields():
    m = interval_mesh(64)
    C = poincare_constant(m)
    rng = np.random.default_rng(0)
    for _ in range(50):
        v = rng.standard_normal(m.n_nodes)
        v[m.boundary_mask] = 0
        assert lp_norm(m, v) <= C * lp_norm(m, v, 2, True) * (1 + 1e-10)


def test_tent_field_ratio():
    m = interval_mesh(64)
    est = embedding_ratio_estimate(m, NormSpec(1, True), NormSpec(np.inf), samples=1)
    assert est >= 0.5 - 1e-12
    assert np.isclose(tent_field(m).max(), 0.5)


@given(st.integers(1, 20), st.integers(0, 10 ** 6))
@settings(max_examples=15, deadline=None)
def test_embedding_estimate_nondecreasing_in_samples(n, seed):
    m = interval_mesh(16)
    a = embedding_ratio_estimate(m, NormSpec(2, True), NormSpec(np.inf), samples=n, seed=seed)
    b = embedding_ratio_estimate(m, NormSpec(2, True), NormSpec(np.inf), samples=n + 3, seed=seed)
    assert b >= a


def test_young_verbatim_fails_valid_passes():
    yc = young_constant(0.01, 2.0)
    assert math.isclose(yc.valid, 25.0)
    assert not young_check(yc.verbatim, 0.01, 2.0)
    assert young_check(yc.valid, 0.01, 2.0)
    assert math.isclose(young_constant(1.0, 2.0).valid, 0.25)


@given(st.floats(0.01, 10), st.sampled_from([1.5, 2.0, 3.0, 4.0]))
@settings(max_examples=30, deadline=None)
def test_young_valid_constant_holds(eps, r):
    assert young_check(young_constant(eps, r).valid, eps, r)


def test_young_rejects_invalid():
    with pytest.raises(ValueError):
        young_constant(0.0, 2.0)
    with pytest.raises(ValueError):
        young_constant(1.0, 1.0)


def _traj(m, f, times):
    u = np.array([f(t) * np.sin(np.pi * m.nodes[:, 0]) for t in times])
    ut = np.gradient(u, times, axis=0)
    return Trajectory(m, ModelKind.PRESSURE_VISCOSITY, times, u, ut)


def test_bochner_norms():
    m = interval_mesh(64)
    times = np.linspace(0, 1, 101)
    tr = _traj(m, lambda t: 2.0, times)
    assert math.isclose(bochner_norm(tr, NormSpec(2, False, np.inf)), 2 * math.sqrt(0.5), rel_tol=1e-3)
    assert math.isclose(bochner_norm(tr, NormSpec(2, False, 2)), 2 * math.sqrt(0.5), rel_tol=1e-3)
    assert bochner_norm(tr, NormSpec(2, False, 2, "utt")) < 1e-10
    assert math.isclose(triple_norm(tr), 2 * math.pi * math.sqrt(0.5), rel_tol=1e-3)


def test_normspec_validation():
    with pytest.raises(ValueError):
        NormSpec(2, track="v")
    with pytest.raises(ValueError):
        NormSpec(2, time=0.5)


def test_l2_error_quadratic_convergence():
    errs = []
    for n in (8, 16, 32):
        m = interval_mesh(n)
        x = m.nodes[:, 0]
        errs.append(l2_error(m, np.sin(np.pi * x), lambda p: np.sin(np.pi * p[:, 0])))
    assert 1.9 < math.log2(errs[0] / errs[1]) < 2.1
    assert 1.9 < math.log2(errs[1] / errs[2]) < 2.1
