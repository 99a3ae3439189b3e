"""Acceptance criteria, each at its stated tolerance and runtime budget.

Every test prints one ``CRITERION n: PASS|FAIL`` line (also collected into
the terminal summary) before asserting.
"""
import math
import time

import numpy as np
import pytest
import sympy

from conftest import ACCEPTANCE_LINES, sine_state
from fdcheck import jacobian_errors, sample_models
from westervelt_fem import assembly as asm
from westervelt_fem import cli
from westervelt_fem.assembly import MaterialSpec
from westervelt_fem.constants import (l2_error, lp_norm, poincare_constant, triple_norm,
                                      young_check, young_constant)
from westervelt_fem.energy import (decay_fit, energy_monotone, energy_report, equipartition_residual,
                                   interface_jump, tol_energy)
from westervelt_fem.mesh import box_mesh, interval_mesh, rect_mesh
from westervelt_fem.models import Model, ModelKind, State
from westervelt_fem.stepper import fixed_point_outer, integrate


def verdict(n, ok, detail):
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def decay_model(n=128):
    m = interval_mesh(n)
    return Model(ModelKind.PRESSURE_PLAPLACE, m, MaterialSpec.uniform(m, c2=1.0, b=1.0, k=1.0, eps=1.0, p=3.0))


def test_criterion_1_exponential_decay():
    t0 = time.perf_counter()
    model = decay_model()
    tr = integrate(model, sine_state(model.mesh, 1e-2), 10.0, 1 / 256)
    rep = energy_report(tr, model)
    mono = energy_monotone(rep.EW1, tol_energy(model))
    fit = decay_fit(tr.times, rep.EW1, (2.5, 10.0))
    elapsed = time.perf_counter() - t0
    ok = mono and fit.omega > 0 and fit.r_squared >= 0.98 and elapsed < 30
    verdict(1, ok, f"EW1 monotone={mono} (max increase {np.diff(rep.EW1).max():.2e}), "
                   f"omega={fit.omega:.4f}, r2={fit.r_squared:.6f}, {elapsed:.1f}s")


def test_criterion_2_global_run():
    t0 = time.perf_counter()
    model = decay_model()
    tr = integrate(model, sine_state(model.mesh, 1e-2), 50.0, 1 / 256)
    margin = float(np.min(tr.report.degeneracy_margin))
    elapsed = time.perf_counter() - t0
    ok = margin >= 0.9 and np.all(np.isfinite(tr.u)) and elapsed < 180
    verdict(2, ok, f"T=50 completed, min degeneracy margin={margin:.4f}, {elapsed:.1f}s")


def test_criterion_3_fixed_point_contraction():
    t0 = time.perf_counter()
    m = interval_mesh(64)
    model = Model(ModelKind.PRESSURE_VISCOSITY, m, MaterialSpec.uniform(m, b=1.0, delta=0.5, q=3.0, k=1.0))
    s0 = sine_state(m, 1e-3)
    fp = fixed_point_outer(model, s0, 0.5, 1 / 128, max_outer=8, tol=1e-9)
    mono = integrate(model, s0, 0.5, 1 / 128)
    rep = fp.report
    agree = triple_norm(fp - mono)
    elapsed = time.perf_counter() - t0
    ok = (all(r < 1 for r in rep.fixed_point_ratios) and rep.converged and rep.outer_iterations <= 8
          and agree <= 1e-7 and elapsed < 60)
    verdict(3, ok, f"ratios={[f'{r:.2e}' for r in rep.fixed_point_ratios]}, outer={rep.outer_iterations}, "
                   f"converged={rep.converged}, |||fp-mono|||={agree:.2e}, {elapsed:.1f}s")


def test_criterion_4_degeneracy_detection(tmp_path, capsys):
    t0 = time.perf_counter()
    code = cli.main(["run", "degeneracy_1d", "--out", str(tmp_path)])
    err = capsys.readouterr().err
    summary = dict(line.split(",", 1) for line in (tmp_path / "summary.csv").read_text().splitlines()[1:])
    margin = float(summary["abort_margin"])
    elapsed = time.perf_counter() - t0
    ok = (code == cli.EXIT_DEGENERACY and "t=" in err and "margin" in err and math.isfinite(margin)
          and margin <= 0.05 and elapsed < 10)
    verdict(4, ok, f"exit={code}, message={err.strip()!r}, {elapsed:.1f}s")


def _symbolic_forcing(c2, b, delta, k):
    x, t = sympy.symbols("x t", real=True)
    u = sympy.sin(sympy.pi * x) * sympy.cos(t)
    ut = sympy.diff(u, t)
    uxt = sympy.diff(ut, x)
    flux = b * ((1 - delta) + delta * uxt ** 2) * uxt      # q = 3
    g = (1 - 2 * k * u) * sympy.diff(u, t, 2) - c2 * sympy.diff(u, x, 2) - sympy.diff(flux, x) - 2 * k * ut ** 2
    f = sympy.lambdify((x, t), g, "numpy")
    exact = sympy.lambdify((x, t), u, "numpy")
    return (lambda p, tt: f(p[:, 0], tt)), (lambda p, tt: exact(p[:, 0], tt))


def test_criterion_5_manufactured_convergence():
    t0 = time.perf_counter()
    c2, b, delta, k = 1.0, 1.0, 0.5, 0.1
    forcing, exact = _symbolic_forcing(c2, b, delta, k)
    errs, hs = [], []
    for n in (16, 32, 64):
        m = interval_mesh(n)
        model = Model(ModelKind.PRESSURE_VISCOSITY, m,
                      MaterialSpec.uniform(m, c2=c2, b=b, delta=delta, q=3.0, k=k), forcing=forcing)
        s0 = sine_state(m, 1.0)
        tr = integrate(model, s0, 1.0, 1 / n)
        errs.append(max(l2_error(m, tr.u[i], lambda p, t=t: exact(p, t)) for i, t in enumerate(tr.times)))
        hs.append(1 / n)
    rates = [math.log(errs[i] / errs[i + 1]) / math.log(hs[i] / hs[i + 1]) for i in range(2)]
    elapsed = time.perf_counter() - t0
    ok = all(1.8 <= r <= 2.2 for r in rates) and elapsed < 60
    verdict(5, ok, f"Linf(L2) errors={[f'{e:.3e}' for e in errs]}, rates={[f'{r:.3f}' for r in rates]}, "
                   f"{elapsed:.1f}s")


def test_criterion_6_invariant_suites():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    # (a) damping monotonicity
    worst = math.inf
    for q in (1.0, 2.0, 3.0, 5.0):
        g1 = rng.uniform(-3, 3, (10_000, 3))
        g2 = rng.uniform(-3, 3, (10_000, 3))
        prod = np.einsum("id,id->i", asm.damping_flux(g1, q) - asm.damping_flux(g2, q), g1 - g2)
        worst = min(worst, float(prod.min()))
    ok_a = worst >= 0
    # (b) Jacobians against finite differences
    fd_worst = 0.0
    for kind, model in sample_models().items():
        for _ in range(100):
            fd_worst = max(fd_worst, max(jacobian_errors(model, rng)))
    ok_b = fd_worst <= 1e-5
    # (c) Poincare constant
    m = interval_mesh(64)
    C = poincare_constant(m)
    ok_c = abs(C * math.pi - 1) < 0.01
    for _ in range(100):
        v = rng.standard_normal(m.n_nodes)
        v[m.boundary_mask] = 0
        ok_c &= lp_norm(m, v) <= C * lp_norm(m, v, 2, True) * (1 + 1e-12)
    # (d) Young constants
    ok_d = all(young_check(young_constant(eps, r).valid, eps, r)
               for r in (1.5, 2.0, 3.0, 4.0) for eps in (0.01, 0.1, 1.0, 10.0))
    verbatim_fails = not young_check(young_constant(0.01, 2.0).verbatim, 0.01, 2.0)
    elapsed = time.perf_counter() - t0
    ok = ok_a and ok_b and ok_c and ok_d and verbatim_fails and elapsed < 60
    verdict(6, ok, f"(a) min monotonicity product={worst:.2e}; (b) worst FD rel err={fd_worst:.2e}; "
                   f"(c) C_P*pi={C * math.pi:.5f}, inequality held={ok_c}; (d) valid holds={ok_d}, "
                   f"verbatim fails at (0.01, 2)={verbatim_fails}; {elapsed:.1f}s")


def test_criterion_7_coupling_consistency():
    t0 = time.perf_counter()
    m = interval_mesh(64)
    s0 = sine_state(m, 1e-2)
    pv = Model(ModelKind.PRESSURE_VISCOSITY, m, MaterialSpec.uniform(m, b=1.0, delta=0.5, q=3.0, k=1.0))
    ref = integrate(pv, s0, 0.5, 1 / 128)
    diffs = []
    for lam, b in ((1.0, 1.0), (2.0, 0.5)):
        ac = Model(ModelKind.ACOUSTIC_COUPLED, m, MaterialSpec.uniform(
            m, lam=lam, rho=lam, b=b, delta=0.5, q=3.0, k=1.0))
        diffs.append(triple_norm(integrate(ac, s0, 0.5, 1 / 128) - ref))
    cfg = cli.load_config(cli.scenario_dir() / "lens_coupling_1d.ini")
    jumps = []
    for n in (32, 64, 128):
        cfg.mesh["counts"] = [n]
        model = cli.build_model(cfg)
        tr = integrate(model, cli.build_initial(cfg, model), cfg.T, 1 / (2 * n))
        jumps.append(interface_jump(tr, model))
    elapsed = time.perf_counter() - t0
    ok = max(diffs) <= 1e-10 and jumps[0] > jumps[1] > jumps[2] and elapsed < 120
    verdict(7, ok, f"|||AC-PV||| (lam=rho=1, lam=rho=2 with b/2)={[f'{d:.1e}' for d in diffs]}; "
                   f"lens interface jump n=32,64,128: {[f'{j:.3e}' for j in jumps]}; {elapsed:.1f}s")


def _elastic_vs_potential(mesh, T, dt, width=0.08, amplitude=1e-2):
    lam, rho, b_hat = 1.5, 1.2, 0.05
    fluid = mesh.with_tags(np.ones(mesh.n_elements, dtype=int))
    el = Model(ModelKind.ELASTIC_COUPLED, fluid, MaterialSpec.uniform(
        fluid, lam=lam, rho=rho, mu=0.0, b_hat=b_hat, delta=0.5, q=1.0, k=1.0))
    pot = Model(ModelKind.POTENTIAL_VISCOSITY, mesh, MaterialSpec.uniform(
        mesh, c2=lam / rho, b=b_hat / rho, delta=0.5, q=1.0, k=1.0))
    r = mesh.nodes - 0.5
    psi1 = amplitude * np.exp(-(r ** 2).sum(axis=1) / (2 * width ** 2))
    psi1[mesh.boundary_mask] = 0
    U1 = (-r / width ** 2 * psi1[:, None]).T.ravel()
    U1[el.dirichlet_mask] = 0
    te = integrate(el, State(0.0, 0 * U1, U1), T, dt)
    tp = integrate(pot, State(0.0, 0 * psi1, psi1), T, dt)
    psi = asm.poisson_solve(mesh, te.u)
    num = max(lp_norm(mesh, psi[i] - tp.u[i]) for i in range(len(tp)))
    return num / max(lp_norm(mesh, tp.u[i]) for i in range(len(tp)))


def test_criterion_8_elastic_chain():
    t0 = time.perf_counter()
    rel = {n: _elastic_vs_potential(rect_mesh(n, n), 0.125, 1 / (4 * n)) for n in (8, 16, 32)}
    chain_rate = math.log2(rel[16] / rel[32])
    box = _elastic_vs_potential(box_mesh(4, 4, 4), 0.125, 1 / 32, width=0.15)
    errs = []
    for n in (8, 16, 32):
        m = rect_mesh(n, n)
        x, y = m.nodes[:, 0], m.nodes[:, 1]
        U = np.concatenate([np.pi * np.cos(np.pi * x) * np.sin(np.pi * y),
                            np.pi * np.sin(np.pi * x) * np.cos(np.pi * y)])
        errs.append(l2_error(m, asm.poisson_solve(m, U),
                             lambda p: np.sin(np.pi * p[:, 0]) * np.sin(np.pi * p[:, 1])))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    elapsed = time.perf_counter() - t0
    ok = rel[16] <= 0.1 and chain_rate >= 1.5 and np.all((rates > 1.8) & (rates < 2.2)) and elapsed < 180
    verdict(8, ok, f"2D rect psi mismatch n=8,16,32: {[f'{v:.3e}' for v in rel.values()]} "
                   f"(rate {chain_rate:.2f}); box(4,4,4) mismatch {box:.3f} (reported only); "
                   f"Poisson L2 rates={[f'{r:.3f}' for r in rates]}; {elapsed:.1f}s")


def test_criterion_9_equipartition_order():
    t0 = time.perf_counter()
    model = decay_model()
    s0 = sine_state(model.mesh, 1e-2)
    res = [equipartition_residual(integrate(model, s0, 2.0, dt), model) for dt in (1 / 32, 1 / 64, 1 / 128)]
    orders = [math.log2(res[i] / res[i + 1]) for i in range(2)]
    elapsed = time.perf_counter() - t0
    ok = all(1.8 <= o <= 2.2 for o in orders) and elapsed < 60
    verdict(9, ok, f"residuals={[f'{r:.3e}' for r in res]}, orders={[f'{o:.3f}' for o in orders]}, "
                   f"{elapsed:.1f}s")
