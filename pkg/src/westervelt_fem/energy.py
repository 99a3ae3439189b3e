"""Energy functionals, inequality checks, decay fits and interface residuals.

All functions post-process a :class:`~westervelt_fem.stepper.Trajectory`.
Spatial integrals are exact for P1 data; time integrals use the trapezoid
rule on the trajectory grid (midpoint rule for ``u_tt``).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import assembly as asm
from .constants import NormSpec, embedding_ratio_estimate, lp_norm
from .models import DegeneracyError, Model, ModelKind, State
from .stepper import NEWTON_ATOL, Trajectory

ENERGY_KINDS = ("E0", "E1", "EW1")
CHECKS = ("ENEST", "ENEST1", "ENEST0", "W1_DECAY", "ELASTIC")


def tol_energy(model: Model) -> float:
    """Tolerance for inequality checks, tied to the Newton tolerance."""
    return 10 * NEWTON_ATOL * model.mesh.n_nodes


# --------------------------------------------------------------------------
# vectorized spatial integrals over a stack of time levels


def _grads(mesh, U):
    """Element gradients for stacked scalar fields ``(nt, nn) -> (nt, ne, d)``."""
    return np.einsum("ead,tea->ted", mesh.grad_lambda, U[:, mesh.elements])


def _grad_power(mesh, U, p, coeff=None):
    """``sum_e coeff |T| |grad u|^p`` per time level (vector fields: Frobenius)."""
    U = np.atleast_2d(U)
    if U.shape[1] == mesh.n_nodes:
        g = _grads(mesh, U)
        n2 = np.einsum("ted,ted->te", g, g)
    else:
        nn = mesh.n_nodes
        n2 = sum(np.einsum("ted,ted->te", g, g)
                 for g in (_grads(mesh, U[:, c * nn:(c + 1) * nn]) for c in range(mesh.dim)))
    w = mesh.volumes if coeff is None else mesh.volumes * coeff
    return (n2 ** (p / 2)) @ w


def _weighted_product(mesh, wloc, A, B):
    """``int w a b`` per time level; ``wloc`` is ``(ne, m)`` or ``(nt, ne, m)``."""
    E = mesh.elements
    W3 = asm.bary_moments(mesh.dim, 3)
    if wloc.ndim == 2:
        wloc = np.broadcast_to(wloc, (A.shape[0],) + wloc.shape)
    return np.einsum("ijk,tei,tej,tek,e->t", W3, A[:, E], B[:, E], wloc, mesh.volumes)


def _l2sq(mesh, A):
    """``|a|_{L2}^2`` per time level for scalar or vector fields."""
    A = np.atleast_2d(A)
    nn = mesh.n_nodes
    W2 = asm.bary_moments(mesh.dim, 2)
    comps = [A] if A.shape[1] == nn else [A[:, c * nn:(c + 1) * nn] for c in range(mesh.dim)]
    return sum(np.einsum("ij,tei,tej,e->t", W2, C[:, mesh.elements], C[:, mesh.elements],
                         mesh.volumes) for C in comps)


def _voigt_stack(model, A):
    return np.stack([asm.voigt_apply(model.mesh, a) for a in np.atleast_2d(A)])


def _q(model: Model) -> float:
    return float(np.max(model.mat.q))


def _natural_energy(model: Model, U, Ut) -> np.ndarray:
    """``E[u]`` per time level, the energy conserved/dissipated by the model."""
    mesh, mat = model.mesh, model.mat
    U, Ut = np.atleast_2d(U), np.atleast_2d(Ut)
    if model.kind is ModelKind.ELASTIC_COUPLED:
        s = _voigt_stack(model, U)
        C = mat.c_tensor(mesh.dim)
        strain = np.einsum("tev,evw,tew,e->t", s, C, s, mesh.volumes)
        nn = mesh.n_nodes
        kin = sum(_weighted_product(mesh, np.repeat(mat.rho[:, None], mesh.dim + 1, 1),
                                    Ut[:, c * nn:(c + 1) * nn], Ut[:, c * nn:(c + 1) * nn])
                  for c in range(mesh.dim))
        return 0.5 * kin + 0.5 * strain
    if model.kind is ModelKind.POTENTIAL_VISCOSITY:
        return 0.5 * _l2sq(mesh, Ut) + 0.5 * _grad_power(mesh, U, 2, mat.c2)
    k = mat.k[None, :, None]
    s = model.mass_scale[None, :, None]
    w = s * (1 - 2 * k * U[:, mesh.elements])
    if np.any(w <= 0):
        t = int(np.argwhere(np.any(w <= 0, axis=(1, 2)))[0, 0])
        raise DegeneracyError(np.nan if U.shape[0] > 1 else 0.0, float(w[t].min() / s.max()))
    E = 0.5 * _weighted_product(mesh, w, Ut, Ut) + 0.5 * _grad_power(mesh, U, 2, model.stiffness_coeff)
    if model.kind is ModelKind.PRESSURE_PLAPLACE and np.any(mat.eps):
        for p in np.unique(mat.p):
            sel = mat.p == p
            E = E + _grad_power(mesh, U, p + 1, np.where(sel, mat.c2 * mat.eps / (p + 1), 0.0))
    return E


def energy(kind: str, model: Model, state: State) -> float:
    """Evaluate ``E0``, ``E1`` or ``EW1`` at one state.

    ``E0 = |u_t|^2 + |grad u|^2``;
    ``E1 = E0 + |grad u_t|^2 + |grad u_t|_{L_{q+1}}^{q+1}``;
    ``EW1`` is the model energy, for the pressure kinds
    ``1/2 int (1-2ku) u_t^2 + c^2/2 |grad u|^2 + c^2 eps/(p+1) |grad u|_{L_{p+1}}^{p+1}``.
    """
    mesh = model.mesh
    u, ut = np.asarray(state.u, float), np.asarray(state.ut, float)
    if kind == "E0":
        return lp_norm(mesh, ut) ** 2 + lp_norm(mesh, u, 2, True) ** 2
    if kind == "E1":
        q = _q(model)
        return (lp_norm(mesh, ut) ** 2 + lp_norm(mesh, u, 2, True) ** 2
                + lp_norm(mesh, ut, 2, True) ** 2 + lp_norm(mesh, ut, q + 1, True) ** (q + 1))
    if kind == "EW1":
        try:
            return float(_natural_energy(model, u, ut)[0])
        except DegeneracyError as err:
            raise DegeneracyError(state.t, err.margin, model.floor) from None
    raise ValueError(f"unknown energy kind {kind!r}")


# --------------------------------------------------------------------------
# reports


@dataclass
class EnergyReport:
    t: np.ndarray
    E0: np.ndarray
    E1: np.ndarray
    EW1: np.ndarray
    D_grad: np.ndarray
    D_q: np.ndarray
    margins: dict = field(default_factory=dict)
    decay: "DecayFit | None" = None

    def write_csv(self, path) -> None:
        names = list(self.margins)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "E0", "E1", "EW1", "D_grad", "D_q"] + [f"margin_{n}" for n in names])
            for i in range(len(self.t)):
                w.writerow([repr(float(self.t[i]))] + [repr(float(a[i])) for a in
                           (self.E0, self.E1, self.EW1, self.D_grad, self.D_q)]
                           + [repr(float(self.margins[n][i])) for n in names])


def _cumtrapz(t, f):
    out = np.zeros_like(f, dtype=float)
    if len(t) > 1:
        out[1:] = np.cumsum(np.diff(t) * (f[1:] + f[:-1]) / 2)
    return out


def _cummid(t, fn, Ut):
    """Cumulative ``int fn(u_t)`` with ``u_t`` taken at step midpoints.

    This is the dissipation the implicit midpoint scheme actually produces;
    the trapezoid rule would overstate it for convex ``fn``.
    """
    out = np.zeros(len(t))
    if len(t) > 1:
        out[1:] = np.cumsum(np.diff(t) * fn((Ut[1:] + Ut[:-1]) / 2))
    return out


def energy_report(traj: Trajectory, model: Model, checks=None) -> EnergyReport:
    """Energies, cumulative dissipation and margins along a trajectory.

    ``margins`` always holds ``degeneracy`` (per time level) plus the per-level
    margin of each requested inequality check.
    """
    mesh, q = model.mesh, _q(model)
    U, Ut, t = traj.u, traj.ut, traj.times
    gut2 = _grad_power(mesh, Ut, 2)
    E0 = _l2sq(mesh, Ut) + _grad_power(mesh, U, 2)
    E1 = E0 + gut2 + _grad_power(mesh, Ut, q + 1)
    try:
        EW1 = _natural_energy(model, U, Ut)
    except DegeneracyError:
        EW1 = np.full(len(t), np.nan)
    margins = {"degeneracy": np.array([model.margin(traj.state(n)) for n in range(len(t))])}
    for name in checks or ():
        margins[name] = check_energy_inequality(traj, model, name).margins
    return EnergyReport(t, E0, E1, EW1, _cummid(t, lambda V: _grad_power(mesh, V, 2), Ut),
                        _cummid(t, lambda V: _grad_power(mesh, V, q + 1), Ut), margins)


@dataclass
class InequalityCheck:
    which: str
    lhs: np.ndarray
    rhs: np.ndarray
    margins: np.ndarray
    margin: float
    passed: bool
    constant: float | None = None
    notes: str = ""


def _h1_l4(model: Model) -> float:
    key = ("h1l4",)
    if key not in model._cache:
        model._cache[key] = embedding_ratio_estimate(model.mesh, NormSpec(2, True), NormSpec(4),
                                                     samples=16)
    return model._cache[key]


def check_energy_inequality(traj: Trajectory, model: Model, which: str) -> InequalityCheck:
    """Discrete analog of one of the energy estimates.

    ``W1_DECAY`` (p-Laplace): ``E(t) + b~ int |grad u_t|^2 <= E(0)``.
    ``ENEST`` (pressure/viscosity, acoustic): the linearized energy estimate
    at ``alpha = -2ku``, ``f = -2k u_t``, ``g = 0``; right-hand side zero.
    ``ENEST0``, ``ENEST1``, ``ELASTIC``: measured-constant form
    ``LHS(t) <= C RHS``, reporting the smallest ``C`` over the run.
    """
    if which not in CHECKS:
        raise ValueError(f"unknown check {which!r}")
    mesh, mat, kind = model.mesh, model.mat, model.kind
    U, Ut, t = traj.u, traj.ut, traj.times
    tol = tol_energy(model)
    if traj.kind is not kind:
        raise ValueError("trajectory was produced by a different model kind")
    q = _q(model)
    if which == "W1_DECAY":
        if kind is not ModelKind.PRESSURE_PLAPLACE:
            raise ValueError("W1_DECAY applies to PRESSURE_PLAPLACE")
        E = _natural_energy(model, U, Ut)
        kmax = float(np.max(np.abs(mat.k)))
        alpha_low = min(float(np.max(2 * np.abs(mat.k).max() * np.abs(U), initial=0.0)), 0.999)
        kappa = math.sqrt(max(E[0], 0.0))
        b = float(np.min(mat.b))
        btilde = b - math.sqrt(2 / (1 - alpha_low)) * kappa * kmax * _h1_l4(model) ** 2
        notes = ""
        if btilde <= 0:
            notes = f"b~ = {btilde:.3g} <= 0, dissipation term dropped"
            btilde = 0.0
        lhs = E + btilde * _cummid(t, lambda V: _grad_power(mesh, V, 2), Ut)
        rhs = np.full(len(t), E[0])
        margins = rhs - lhs
        return InequalityCheck(which, lhs, rhs, margins, float(margins.min()),
                               bool(margins.min() >= -tol), btilde, notes)
    if which == "ENEST":
        if kind not in (ModelKind.PRESSURE_VISCOSITY, ModelKind.ACOUSTIC_COUPLED):
            raise ValueError("ENEST applies to PRESSURE_VISCOSITY and ACOUSTIC_COUPLED")
        if model.forcing is not None:
            raise ValueError("ENEST is evaluated for unforced runs (g = 0)")
        s = model.mass_scale
        w = s[None, :, None] * (1 - 2 * mat.k[None, :, None] * U[:, mesh.elements])
        kin = 0.5 * (_weighted_product(mesh, w, Ut, Ut) + _grad_power(mesh, U, 2, model.stiffness_coeff))
        bbar = float(np.max(np.abs(mat.k) * s)) * math.sqrt(float(np.max(_l2sq(mesh, Ut))))
        bhat = mat.b * (1 - mat.delta) - _h1_l4(model) ** 2 * bbar
        def diss(V):
            return _grad_power(mesh, V, 2, bhat) + _grad_power(mesh, V, q + 1, mat.b * mat.delta / 2)
        lhs = kin - kin[0] + _cummid(t, diss, Ut)
        rhs = np.zeros(len(t))
        margins = rhs - lhs
        return InequalityCheck(which, lhs, rhs, margins, float(margins.min()),
                               bool(margins.min() >= -tol), float(np.min(bhat)))
    if which in ("ENEST0", "ENEST1"):
        if kind is ModelKind.ELASTIC_COUPLED:
            raise ValueError(f"{which} applies to scalar kinds")
        gut2 = _grad_power(mesh, Ut, 2)
        gq = _grad_power(mesh, Ut, q + 1)
        E0 = _l2sq(mesh, Ut) + _grad_power(mesh, U, 2)
        if which == "ENEST0":
            lhs = E0 + _cumtrapz(t, gut2 + gq)
            rhs0 = E0[0]
        else:
            E1 = E0 + gut2 + gq
            utt2 = np.zeros(len(t))
            if len(t) > 1:
                utt2[1:] = np.cumsum(np.diff(t) * _l2sq(mesh, traj.utt))
            lhs = E1 + _cumtrapz(t, gut2 + gq) + utt2
            f4 = 2 * float(np.max(np.abs(mat.k))) * max(lp_norm(mesh, v, 4) for v in Ut)
            rhs0 = E1[0] + f4 ** 2
        return _measured(which, lhs, rhs0, tol)
    if kind is not ModelKind.ELASTIC_COUPLED:
        raise ValueError("ELASTIC applies to ELASTIC_COUPLED")
    sU, sUt = _voigt_stack(model, U), _voigt_stack(model, Ut)
    vol = mesh.volumes
    nl = (mat.k != 0).astype(float)
    BU2 = np.einsum("tev,tev,e->t", sU, sU, vol)
    n_t = np.sqrt(np.einsum("tev,tev->te", sUt, sUt))
    BUt2 = (n_t ** 2) @ vol
    BUtq = (n_t ** (q + 1)) @ (vol * nl)
    rho = np.repeat(mat.rho[:, None], mesh.dim + 1, 1)
    nn = mesh.n_nodes
    kin = sum(_weighted_product(mesh, rho, Ut[:, c * nn:(c + 1) * nn], Ut[:, c * nn:(c + 1) * nn])
              for c in range(mesh.dim))
    lhs = kin + BU2 + _cumtrapz(t, BUt2 + BUtq)
    rhs0 = float(mat.rho.max()) * _l2sq(mesh, Ut[:1])[0] + BU2[0] + BUt2[0] + BUtq[0]
    return _measured(which, lhs, rhs0, tol)


def _measured(which, lhs, rhs0, tol) -> InequalityCheck:
    if rhs0 > 0:
        C = float(np.max(lhs) / rhs0)
    else:
        C = 0.0 if np.max(np.abs(lhs)) <= tol else math.inf
    rhs = np.full(len(lhs), C * rhs0)
    margins = rhs - lhs
    return InequalityCheck(which, lhs, rhs, margins, float(margins.min()),
                           bool(np.isfinite(C)), C, "measured constant")


def energy_monotone(series: np.ndarray, tol: float) -> bool:
    """``True`` if no step increases the series by more than ``tol``."""
    return bool(np.all(np.diff(np.asarray(series)) <= tol))


# --------------------------------------------------------------------------
# decay fit


@dataclass
class DecayFit:
    omega: float
    r_squared: float
    window: tuple


def decay_fit(times, energies, window=None) -> DecayFit:
    """Least-squares fit of ``log E = c - omega t`` on ``window = (t_a, t_b)``.

    Points from the first nonpositive energy onwards are dropped.
    """
    t = np.asarray(times, float)
    E = np.asarray(energies, float)
    ta, tb = (t[0], t[-1]) if window is None else window
    sel = (t >= ta - 1e-12) & (t <= tb + 1e-12)
    t, E = t[sel], E[sel]
    bad = np.flatnonzero(~(E > 0))
    if len(bad):
        t, E = t[:bad[0]], E[:bad[0]]
    if len(t) < 2:
        raise ValueError("decay window holds fewer than two positive energies")
    y = np.log(E)
    A = np.column_stack([np.ones_like(t), t])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum(resid ** 2))
    r2 = 1.0 if ss_tot <= 1e-30 * max(1.0, float(np.sum(y ** 2))) else 1 - ss_res / ss_tot
    return DecayFit(float(-coef[1]), r2, (float(t[0]), float(t[-1])))


# --------------------------------------------------------------------------
# equipartition


def equipartition_series(traj: Trajectory, model: Model, verbatim: bool = False) -> np.ndarray:
    """Residual of the equipartition identity at every time level.

    Testing the p-Laplace equation with ``u`` gives

        int_0^t { -|sqrt(1-2ku) u_t|^2 + c^2 |grad u|^2 + c^2 eps |grad u|_{p+1}^{p+1} }
          + (b/2) [|grad u|^2]_0^t + [int (1-2ku) u u_t]_0^t = 0.

    ``verbatim=True`` evaluates the commonly printed variant with
    ``(1-4ku)`` and ``b`` in place of ``(1-2ku)`` and ``b/2``, which is not an
    identity for ``k != 0`` or ``b != 0``.
    """
    if model.kind is not ModelKind.PRESSURE_PLAPLACE:
        raise ValueError("equipartition applies to PRESSURE_PLAPLACE")
    mesh, mat = model.mesh, model.mat
    U, Ut, t = traj.u, traj.ut, traj.times
    E = mesh.elements
    kfac = 4 if verbatim else 2
    w = 1 - kfac * mat.k[None, :, None] * U[:, E]
    A = -_weighted_product(mesh, w, Ut, Ut) + _grad_power(mesh, U, 2, mat.c2)
    for p in np.unique(mat.p):
        A = A + _grad_power(mesh, U, p + 1, np.where(mat.p == p, mat.c2 * mat.eps, 0.0))
    B = _grad_power(mesh, U, 2, mat.b if verbatim else mat.b / 2)
    w2 = 1 - 2 * mat.k[None, :, None] * U[:, E]
    Cc = _weighted_product(mesh, w2, U, Ut)
    return _cumtrapz(t, A) + (B - B[0]) + (Cc - Cc[0])


def equipartition_residual(traj: Trajectory, model: Model, verbatim: bool = False) -> float:
    """Maximum absolute equipartition residual over the time levels."""
    return float(np.max(np.abs(equipartition_series(traj, model, verbatim))))


def linf_chain_margin(traj: Trajectory, r: float) -> float:
    """Worst slack of ``|grad u_n|_r <= |grad u_0|_r + sum dt |grad ut_mid|_r``.

    Holds exactly (up to roundoff) because ``u_{n+1} - u_n = dt ut_mid``.
    """
    mesh = traj.mesh
    g = _grad_power(mesh, traj.u, r) ** (1 / r)
    mid = (traj.ut[1:] + traj.ut[:-1]) / 2
    inc = np.diff(traj.times) * _grad_power(mesh, mid, r) ** (1 / r)
    bound = g[0] + np.concatenate([[0.0], np.cumsum(inc)])
    return float(np.min(bound - g))


# --------------------------------------------------------------------------
# interface residual


def interface_jump(traj: Trajectory, model: Model, nodes=None, part: str = "flux",
                   normalized: bool = True) -> float:
    """Weak jump of the (modified) normal flux across a coefficient interface.

    For every interface hat function ``phi_i`` the element-local vectors are
    summed separately over the two sides, ``F_I`` and ``F_II``, at the step
    midpoints where the scheme imposes its equations.

    ``part="flux"`` uses the flux terms only (stiffness plus damping). By
    integration by parts ``F_I + F_II`` is then the weak normal-flux jump
    plus volume terms supported on the interface patch, which vanish like
    ``h``. ``part="residual"`` uses the full element residual; there the sum
    is the discrete residual, which the Galerkin solution drives to solver
    tolerance whether or not the coefficients jump.

    Returns ``max |F_I + F_II| / max |F_I|`` over nodes and steps, or the
    unnormalized maximum if ``normalized`` is false.
    """
    if part not in ("flux", "residual"):
        raise ValueError(f"unknown part {part!r}")
    mesh = model.mesh
    nodes = mesh.interface_nodes() if nodes is None else np.asarray(nodes, dtype=np.int64)
    if len(nodes) == 0:
        raise ValueError("mesh has no interface nodes")
    if traj.kind is not model.kind:
        raise ValueError("trajectory was produced by a different model kind")
    on_iface = np.zeros(mesh.n_nodes, dtype=bool)
    on_iface[nodes] = True
    touching = np.any(on_iface[mesh.elements], axis=1)
    tag_I = int(np.min(mesh.element_tags[touching]))
    side = (mesh.element_tags == tag_I)[:, None]
    pat = model.pattern
    nn = mesh.n_nodes
    dof_sel = np.concatenate([nodes + c * nn for c in range(model.ndof // nn)])
    t = traj.times
    jump = scale = 0.0
    for n in range(len(t) - 1):
        dt = t[n + 1] - t[n]
        u = (traj.u[n] + traj.u[n + 1]) / 2
        ut = (traj.ut[n] + traj.ut[n + 1]) / 2
        if part == "flux":
            Rl = model.flux_locals(u, ut)
        else:
            Rl = model._locals(u, ut, (traj.ut[n + 1] - traj.ut[n]) / dt, None, False)[0]
            if model.forcing is not None:
                Rl = Rl - _local_load(model, t[n] + dt / 2)
        FI = pat.vector(np.where(side, Rl, 0.0))[dof_sel]
        FII = pat.vector(np.where(side, 0.0, Rl))[dof_sel]
        jump = max(jump, float(np.max(np.abs(FI + FII))))
        scale = max(scale, float(np.max(np.abs(FI))))
    if not normalized:
        return jump
    if scale == 0.0:
        return 0.0 if jump == 0.0 else math.inf
    return jump / scale


def _local_load(model: Model, t: float) -> np.ndarray:
    bary, _ = asm.simplex_quadrature(model.mesh.dim, 5)
    x, wq = asm.quadrature_points(model.mesh, 5)
    vals = np.asarray(model.forcing(x.reshape(-1, model.mesh.dim), t)).reshape(x.shape[:2])
    return np.einsum("eq,qa->ea", vals * wq, bary)
