"""Implicit-midpoint time stepping, Newton inner solves and the outer fixed point.

One step solves for the mean acceleration ``a = (ut_{n+1} - ut_n)/dt`` with

    ut_{n+1} = ut_n + dt a,    u_{n+1} = u_n + dt ut_n + dt^2/2 a,

so that ``u_{n+1} - u_n = dt/2 (ut_n + ut_{n+1})`` holds by construction. The
residual is evaluated at the midpoint state ``(u_mid, ut_mid, a)`` at time
``t_n + dt/2``; its Jacobian in ``a`` is ``M + dt/2 C + dt^2/4 K``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .constants import NormSpec, bochner_norm, triple_norm
from .mesh import Mesh
from .models import DegeneracyError, FrozenCoefficients, Model, ModelKind, State

NEWTON_ATOL = 1e-10
NEWTON_RTOL = 1e-12
NEWTON_MAXITER = 25


class SolverError(RuntimeError):
    """Newton failed to converge on a step."""

    def __init__(self, t: float, residuals):
        self.t = float(t)
        self.residuals = list(residuals)
        tail = ", ".join(f"{r:.3e}" for r in self.residuals[-4:])
        super().__init__(f"Newton did not converge at t={self.t:.6g} (last residuals: {tail})")


@dataclass
class AdmissibilityRecord:
    m_bar: float
    M_bar: float
    kappa: float
    observed: dict
    bounds: dict
    member: bool
    smallness_lhs: float
    smallness_lhs_bound: float
    embedding_constant: float


@dataclass
class SolveReport:
    newton_iters: list = field(default_factory=list)
    newton_residuals: list = field(default_factory=list)
    degeneracy_margin: list = field(default_factory=list)
    fixed_point_diffs: list = field(default_factory=list)
    fixed_point_ratios: list = field(default_factory=list)
    outer_iterations: int = 0
    converged: bool = True
    admissibility: AdmissibilityRecord | None = None


@dataclass
class Trajectory:
    """States on a uniform grid, stored as stacked arrays ``(N+1, ndof)``."""

    mesh: Mesh
    kind: ModelKind
    times: np.ndarray
    u: np.ndarray
    ut: np.ndarray
    report: SolveReport = field(default_factory=SolveReport)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    def state(self, n: int) -> State:
        return State(float(self.times[n]), self.u[n], self.ut[n])

    def __len__(self):
        return len(self.times)

    def scaled(self, a: float) -> "Trajectory":
        return Trajectory(self.mesh, self.kind, self.times, a * self.u, a * self.ut)

    def __sub__(self, other: "Trajectory") -> "Trajectory":
        return Trajectory(self.mesh, self.kind, self.times, self.u - other.u, self.ut - other.ut)

    def __add__(self, other: "Trajectory") -> "Trajectory":
        return Trajectory(self.mesh, self.kind, self.times, self.u + other.u, self.ut + other.ut)

    @property
    def utt(self) -> np.ndarray:
        """Step accelerations ``(ut_{n+1} - ut_n)/dt``, one per step."""
        return np.diff(self.ut, axis=0) / np.diff(self.times)[:, None]


def _solve(J, rhs):
    if sp.issparse(J):
        return spla.splu(sp.csc_matrix(J)).solve(rhs)
    return np.linalg.solve(J, rhs)


def _time_grid(T: float, dt: float) -> np.ndarray:
    if not dt > 0 or not T > 0:
        raise ValueError("T and dt must be positive")
    N = int(round(T / dt))
    if N < 1 or abs(N * dt - T) > 1e-9 * T:
        raise ValueError("T must be an integer multiple of dt")
    return dt * np.arange(N + 1)


def _check_initial(model: Model, initial: State) -> State:
    u = np.array(initial.u, dtype=float)
    ut = np.array(initial.ut, dtype=float)
    if u.shape != (model.ndof,) or ut.shape != (model.ndof,):
        raise ValueError("initial state has the wrong layout")
    if np.any(u[model.dirichlet_mask] != 0) or np.any(ut[model.dirichlet_mask] != 0):
        raise ValueError("initial state violates the Dirichlet condition")
    return State(float(initial.t), u, ut)


def midpoint_step(model: Model, u: np.ndarray, ut: np.ndarray, t: float, dt: float,
                  a0: np.ndarray | None = None, frozen: FrozenCoefficients | None = None,
                  atol: float = NEWTON_ATOL, rtol: float = NEWTON_RTOL,
                  maxiter: int = NEWTON_MAXITER):
    """One implicit-midpoint step.

    Returns ``(u_new, ut_new, a, residual_history)``. At least one Newton
    update is taken; convergence means ``n_elements * |R|_2 <= atol`` or
    ``|R|_2 <= rtol |R_0|``. Raises :class:`SolverError` after ``maxiter``
    iterations.
    """
    tm = t + dt / 2
    a = np.zeros_like(u) if a0 is None else a0.copy()
    a[model.dirichlet_mask] = 0.0
    wc, wk = dt / 2, dt * dt / 4

    def mid(a):
        return State(tm, u + dt / 2 * ut + wk * a, ut + wc * a)

    R, J = model.newton_system(mid(a), a, 1.0, wc, wk, frozen)
    r = float(np.linalg.norm(R))
    history = [r]
    tol = max(atol / model.mesh.n_elements, rtol * r)
    for _ in range(maxiter):
        if not np.isfinite(r):
            break
        da = -_solve(J, R)
        step = 1.0
        for _ls in range(12):
            a_new = a + step * da
            R_new = model.residual(mid(a_new), a_new, frozen)
            r_new = float(np.linalg.norm(R_new))
            if np.isfinite(r_new) and (r_new <= r or step < 1e-3):
                break
            step /= 2
        a, r = a_new, r_new
        history.append(r)
        if r <= tol:
            return u + dt * ut + 2 * wk * a, ut + dt * a, a, history
        R, J = model.newton_system(mid(a), a, 1.0, wc, wk, frozen)
    raise SolverError(tm, history)


def integrate(model: Model, initial: State, T: float, dt: float, frozen_traj=None,
              freeze_damping: bool = False, **newton) -> Trajectory:
    """Integrate from ``initial`` over ``[t0, t0 + T]`` with step ``dt``.

    Parameters
    ----------
    model : Model
    initial : State
        Must satisfy the Dirichlet condition and have margin above the floor.
    T, dt : float
        ``T`` must be an integer multiple of ``dt``.
    frozen_traj : Trajectory, optional
        Freeze the coefficients at the midpoints of this trajectory (one
        application of the fixed-point operator).
    **newton
        ``atol``, ``rtol``, ``maxiter`` forwarded to :func:`midpoint_step`.

    Returns
    -------
    Trajectory

    Raises
    ------
    DegeneracyError
        If a state (or frozen coefficient) reaches the degeneracy floor.
    SolverError
        If Newton fails on a step.
    """
    initial = _check_initial(model, initial)
    times = initial.t + _time_grid(T, dt)
    N = len(times) - 1
    U = np.empty((N + 1, model.ndof))
    Ut = np.empty((N + 1, model.ndof))
    U[0], Ut[0] = initial.u, initial.ut
    report = SolveReport()
    lin_model = model
    if frozen_traj is not None and freeze_damping:
        lin_model = _linear_damping_model(model)
    report.degeneracy_margin.append(model.check_margin(initial) if frozen_traj is None
                                    else model.margin(initial))
    a = None
    for n in range(N):
        frozen = None
        if frozen_traj is not None:
            vmid = State(times[n] + dt / 2, (frozen_traj.u[n] + frozen_traj.u[n + 1]) / 2,
                         (frozen_traj.ut[n] + frozen_traj.ut[n + 1]) / 2)
            frozen = model.frozen_from_state(vmid)
            model.check_margin(vmid, frozen)
        U[n + 1], Ut[n + 1], a, hist = midpoint_step(lin_model, U[n], Ut[n], times[n], dt, a,
                                                     frozen, **newton)
        report.newton_iters.append(len(hist) - 1)
        report.newton_residuals.append(hist)
        new = State(times[n + 1], U[n + 1], Ut[n + 1])
        if frozen is None:
            report.degeneracy_margin.append(model.check_margin(new))
        else:
            report.degeneracy_margin.append(model.margin(new))
    return Trajectory(model.mesh, model.kind, times, U, Ut, report)


def _linear_damping_model(model: Model) -> Model:
    """Copy of ``model`` with the damping reduced to its linear part ``b (1 - delta)``."""
    mat = model.mat
    if model.kind is ModelKind.PRESSURE_PLAPLACE:
        new = mat.with_values(eps=np.zeros_like(mat.eps))
    elif model.kind is ModelKind.ELASTIC_COUPLED:
        new = mat.with_values(b_hat=mat.b_hat * (1 - mat.delta), delta=np.zeros_like(mat.delta),
                              b_voigt=None if mat.b_voigt is None
                              else mat.b_voigt * (1 - mat.delta)[:, None, None])
    else:
        new = mat.with_values(b=mat.b * (1 - mat.delta), delta=np.zeros_like(mat.delta))
    return Model(model.kind, model.mesh, new, model.forcing, model.floor, validate=False)


def constant_extension(model: Model, initial: State, times: np.ndarray) -> Trajectory:
    n = len(times)
    return Trajectory(model.mesh, model.kind, times, np.tile(initial.u, (n, 1)),
                      np.tile(initial.ut, (n, 1)))


def fixed_point_outer(model: Model, initial: State, T: float, dt: float, max_outer: int = 20,
                      tol: float = 1e-9, freeze_damping: bool = False, **newton) -> Trajectory:
    """Iterate the frozen-coefficient solution operator over the whole window.

    ``v^0`` is the constant-in-time extension of the initial data and
    ``v^{m+1}`` solves the linearized problem with coefficients taken from
    ``v^m``. Iteration stops once ``|||v^{m+1} - v^m||| <= tol``; the returned
    trajectory is ``v^{m+1}`` and ``report.outer_iterations`` is ``m``.
    Differences and their successive ratios are recorded. Non-convergence is
    reported through ``report.converged`` rather than raised.

    With ``freeze_damping`` the nonlinear part of the damping is dropped,
    which makes every step a single linear solve (this changes the problem).
    """
    initial = _check_initial(model, initial)
    model.check_margin(initial)
    times = initial.t + _time_grid(T, dt)
    v = constant_extension(model, initial, times)
    diffs, ratios = [], []
    converged = False
    m = 0
    for m in range(max_outer + 1):
        new = integrate(model, initial, T, dt, frozen_traj=v, freeze_damping=freeze_damping, **newton)
        d = triple_norm(new - v)
        if diffs and diffs[-1] > 0:
            ratios.append(d / diffs[-1])
        diffs.append(d)
        v = new
        if d <= tol:
            converged = True
            break
    rep = v.report
    rep.fixed_point_diffs = diffs
    rep.fixed_point_ratios = ratios
    rep.outer_iterations = m
    rep.converged = converged
    return v


def degeneracy_guard(model: Model, state: State):
    from .models import degeneracy_guard as _guard

    return _guard(model, state)


# --------------------------------------------------------------------------
# admissibility


def _voigt_bochner(traj: Trajectory, model: Model, p: float, track: str, time_p: float,
                   nl_only: bool) -> float:
    from .assembly import voigt_apply
    from .constants import _track, temporal_norm

    vals, w = _track(traj, track)
    sel = model.mat.k != 0 if nl_only else np.ones(model.mesh.n_elements, dtype=bool)
    vol = model.mesh.volumes[sel]
    norms = []
    for v in vals:
        s = np.linalg.norm(voigt_apply(model.mesh, v)[sel], axis=1)
        norms.append(float(np.sum(vol * s ** p) ** (1 / p)) if len(vol) else 0.0)
    return temporal_norm(np.array(norms), w, time_p)


def check_admissibility(traj: Trajectory, model: Model, m_bar: float, M_bar: float,
                        kappa: float, seed: int = 0) -> AdmissibilityRecord:
    """Observed Bochner norms against the admissible-set bounds.

    The norms follow the admissible set of each formulation; ``u_tt`` is the
    step difference quotient, integrated with the midpoint rule. The
    smallness quantity ``2|k| C (kappa + T^{q/(q+1)} M)`` is reported with the
    observed ``q+1`` norm (``smallness_lhs``) and with ``M_bar``
    (``smallness_lhs_bound``); ``C`` is the mesh-level embedding estimate
    drawn with ``seed``.
    """
    kind = model.kind
    q = float(np.max(model.mat.q))
    p = float(np.max(model.mat.p))
    inf = math.inf
    obs, bnd = {}, {}
    if kind in (ModelKind.PRESSURE_VISCOSITY, ModelKind.ACOUSTIC_COUPLED):
        obs["utt_L2L2"] = bochner_norm(traj, NormSpec(2, False, 2, "utt"))
        obs["grad_ut_LinfL2"] = bochner_norm(traj, NormSpec(2, True, inf, "ut"))
        obs["grad_ut_Lq1Lq1"] = bochner_norm(traj, NormSpec(q + 1, True, q + 1, "ut"))
        bnd = {"utt_L2L2": m_bar, "grad_ut_LinfL2": m_bar, "grad_ut_Lq1Lq1": M_bar}
        r, key = q + 1, "grad_ut_Lq1Lq1"
    elif kind is ModelKind.POTENTIAL_VISCOSITY:
        obs["utt_L2L2"] = bochner_norm(traj, NormSpec(2, False, 2, "utt"))
        obs["grad_ut_CL2"] = bochner_norm(traj, NormSpec(2, True, inf, "ut"))
        obs["grad_ut_CLq1"] = bochner_norm(traj, NormSpec(q + 1, True, inf, "ut"))
        bnd = {"utt_L2L2": m_bar, "grad_ut_CL2": m_bar, "grad_ut_CLq1": M_bar}
        r, key = q + 1, "grad_ut_CLq1"
    elif kind is ModelKind.PRESSURE_PLAPLACE:
        obs["ut_LinfL2"] = bochner_norm(traj, NormSpec(2, False, inf, "ut"))
        obs["grad_ut_L2L2"] = bochner_norm(traj, NormSpec(2, True, 2, "ut"))
        obs["grad_u_LinfLp1"] = bochner_norm(traj, NormSpec(p + 1, True, inf, "u"))
        bnd = {"ut_LinfL2": m_bar, "grad_ut_L2L2": m_bar, "grad_u_LinfLp1": M_bar}
        r, key = p + 1, "grad_u_LinfLp1"
    else:
        obs["utt_L2L2"] = bochner_norm(traj, NormSpec(2, False, 2, "utt"))
        obs["B_ut_CL2"] = _voigt_bochner(traj, model, 2, "ut", inf, False)
        obs["B_ut_CLq1_nl"] = _voigt_bochner(traj, model, q + 1, "ut", inf, True)
        bnd = {"utt_L2L2": m_bar, "B_ut_CL2": m_bar, "B_ut_CLq1_nl": M_bar}
        r, key = q + 1, "B_ut_CLq1_nl"
    member = all(obs[name] <= bnd[name] for name in obs)
    C = model.embedding_constant(r, seed)
    kmax = float(np.max(np.abs(model.mat.k)))
    T = float(traj.times[-1] - traj.times[0])
    if kind in (ModelKind.PRESSURE_VISCOSITY, ModelKind.ACOUSTIC_COUPLED):
        tf = T ** (q / (q + 1))
        lhs = 2 * kmax * C * (kappa + tf * obs[key])
        lhs_b = 2 * kmax * C * (kappa + tf * M_bar)
    else:
        lhs = 2 * kmax * C * (kappa + obs[key])
        lhs_b = 2 * kmax * C * (kappa + M_bar)
    rec = AdmissibilityRecord(m_bar, M_bar, kappa, obs, bnd, member, lhs, lhs_b, C)
    traj.report.admissibility = rec
    return rec
