"""The five damped Westervelt formulations as residual/Jacobian providers.

Every model maps a state ``(u, u_t)`` and an acceleration ``u_tt`` to the
weak-form residual vector. Dirichlet rows are zeroed. The stepper combines
the three partial Jacobians as ``J = M + (dt/2) C + (dt^2/4) K``.

Frozen coefficients (the fixed-point linearization) replace the
solution-dependent factors by values computed from a previous iterate:

* pressure kinds: ``(1 + alpha) u_tt + f u_t`` with ``alpha = -2k v`` and
  ``f = -2k v_t``, which reproduces ``(1 - 2ku) u_tt - 2k u_t^2`` at ``v = u``;
* potential kind: ``alpha = c^2 / (1 - 2k v_t)`` in ``u_tt - alpha lap u``;
* elastic kind: ``alpha = 1 / (1 - 2k psi_t)`` per element, ``psi_t`` from
  the Dirichlet Poisson problem applied to ``v_t``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from . import assembly as asm
from .assembly import MaterialSpec
from .mesh import Mesh, Tag

DEGENERACY_FLOOR = 0.05


class ModelKind(enum.Enum):
    PRESSURE_VISCOSITY = "PRESSURE_VISCOSITY"
    PRESSURE_PLAPLACE = "PRESSURE_PLAPLACE"
    POTENTIAL_VISCOSITY = "POTENTIAL_VISCOSITY"
    ACOUSTIC_COUPLED = "ACOUSTIC_COUPLED"
    ELASTIC_COUPLED = "ELASTIC_COUPLED"

    @property
    def is_pressure(self) -> bool:
        return self in (ModelKind.PRESSURE_VISCOSITY, ModelKind.PRESSURE_PLAPLACE,
                        ModelKind.ACOUSTIC_COUPLED)


class DegeneracyError(RuntimeError):
    """The coefficient of ``u_tt`` (or the potential/elastic factor) left the safe range."""

    def __init__(self, t: float, margin: float, floor: float = DEGENERACY_FLOOR):
        self.t = float(t)
        self.margin = float(margin)
        self.floor = floor
        super().__init__(f"degeneracy at t={self.t:.6g}: margin {self.margin:.6g} <= floor {floor}")


@dataclass
class State:
    t: float
    u: np.ndarray
    ut: np.ndarray

    def copy(self) -> "State":
        return State(self.t, self.u.copy(), self.ut.copy())


@dataclass
class FrozenCoefficients:
    """Coefficients of the linearized problem.

    ``alpha`` and ``f`` are element-local nodal values ``(ne, dim+1)`` for
    scalar kinds; for the elastic kind ``alpha`` is per element and ``f`` is
    unused. ``g`` is always zero here.
    """

    alpha: np.ndarray
    f: np.ndarray | None = None
    g: float = 0.0


@dataclass
class GuardResult:
    margin: float
    a_priori: float


@dataclass(eq=False)
class Model:
    """One of the five formulations on a mesh with element-wise coefficients.

    Parameters
    ----------
    kind : ModelKind
    mesh : Mesh
    mat : MaterialSpec
    forcing : callable, optional
        ``f(x, t)`` with ``x`` of shape ``(npts, dim)``; enters as ``- int f phi``
        (scalar kinds only).
    floor : float
        Degeneracy floor.
    """

    kind: ModelKind
    mesh: Mesh
    mat: MaterialSpec
    forcing: Callable | None = None
    floor: float = DEGENERACY_FLOOR
    validate: bool = True
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.kind = ModelKind(self.kind)
        if len(self.mat.tags) != self.mesh.n_elements:
            raise ValueError("material size does not match the mesh")
        if self.kind is ModelKind.ELASTIC_COUPLED:
            if self.mesh.dim < 2:
                raise ValueError("ELASTIC_COUPLED requires dim >= 2")
            if self.forcing is not None:
                raise ValueError("forcing is only supported for scalar kinds")
            if self.validate:
                self.mat.validate_elastic(self.mesh.dim)
        elif self.kind is ModelKind.ACOUSTIC_COUPLED:
            if self.validate:
                self.mat.validate_acoustic()
        elif self.validate and np.any(self.mat.c2 <= 0):
            raise ValueError("c2 must be positive")
        m = self.mesh
        self._vol = m.volumes
        self._W2 = asm.bary_moments(m.dim, 2)
        self._W3 = asm.bary_moments(m.dim, 3)
        self._GG = m.volumes[:, None, None] * np.einsum("eid,ejd->eij", m.grad_lambda, m.grad_lambda)
        if self.is_vector:
            self._pat = asm.vector_pattern(m)
            self._dofs = asm.vector_dofs(m)
            self._mask = asm.vector_boundary_mask(m)
        else:
            self._pat = asm.scalar_pattern(m)
            self._dofs = m.elements
            self._mask = m.boundary_mask

    # -- layout ------------------------------------------------------------

    @property
    def is_vector(self) -> bool:
        return self.kind is ModelKind.ELASTIC_COUPLED

    @property
    def ndof(self) -> int:
        return self.mesh.n_nodes * (self.mesh.dim if self.is_vector else 1)

    @property
    def dirichlet_mask(self) -> np.ndarray:
        return self._mask

    @property
    def pattern(self) -> asm.Pattern:
        return self._pat

    def zero_state(self, t: float = 0.0) -> State:
        return State(t, np.zeros(self.ndof), np.zeros(self.ndof))

    # -- coefficients ------------------------------------------------------

    @property
    def mass_scale(self) -> np.ndarray:
        """Per-element factor on the inertia/source terms (``1/lambda`` when coupled)."""
        if self.kind is ModelKind.ACOUSTIC_COUPLED:
            return 1.0 / self.mat.lam
        return np.ones(self.mesh.n_elements)

    @property
    def stiffness_coeff(self) -> np.ndarray:
        if self.kind is ModelKind.ACOUSTIC_COUPLED:
            return 1.0 / self.mat.rho
        return self.mat.c2

    def _damping_coeffs(self):
        """(a, beta, s) of the flux ``a g + beta |g|^{s-1} g`` acting on grad u_t."""
        mat = self.mat
        if self.kind is ModelKind.PRESSURE_PLAPLACE:
            return mat.b, np.zeros_like(mat.b), np.ones_like(mat.b)
        return mat.b * (1 - mat.delta), mat.b * mat.delta, mat.q

    def _stiff_flux_coeffs(self):
        mat = self.mat
        if self.kind is ModelKind.PRESSURE_PLAPLACE:
            return mat.c2, mat.c2 * mat.eps, mat.p
        return self.stiffness_coeff, np.zeros(self.mesh.n_elements), np.ones(self.mesh.n_elements)

    def _psi_t(self, ut: np.ndarray) -> np.ndarray:
        return asm.poisson_solve(self.mesh, ut)

    def elastic_alpha(self, ut: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Element factor ``1/(1 - 2k psi_t)`` at the centroid and the nodal ``psi_t``."""
        psi_t = self._psi_t(ut)
        mean = psi_t[self.mesh.elements].mean(axis=1)
        return 1.0 / (1.0 - 2 * self.mat.k * mean), psi_t

    # -- degeneracy --------------------------------------------------------

    def margin(self, state: State, frozen: FrozenCoefficients | None = None) -> float:
        """Minimum over elements and local nodes of the degeneracy factor."""
        E, k = self.mesh.elements, self.mat.k[:, None]
        if frozen is not None and self.kind.is_pressure:
            return float(np.min(1.0 + frozen.alpha, initial=1.0))
        if frozen is not None and self.kind is ModelKind.POTENTIAL_VISCOSITY:
            return float(np.min(self.mat.c2[:, None] / frozen.alpha, initial=1.0))
        if frozen is not None:
            return float(np.min(1.0 / frozen.alpha, initial=1.0))
        if self.kind.is_pressure:
            vals = 1 - 2 * k * state.u[E]
        elif self.kind is ModelKind.POTENTIAL_VISCOSITY:
            vals = 1 - 2 * k * state.ut[E]
        else:
            if not np.any(self.mat.k):
                return 1.0
            vals = 1 - 2 * k * self._psi_t(state.ut)[E]
        return float(np.min(vals, initial=1.0))

    def check_margin(self, state: State, frozen: FrozenCoefficients | None = None) -> float:
        m = self.margin(state, frozen)
        if not m > self.floor:
            raise DegeneracyError(state.t, m, self.floor)
        return m

    # -- residual and Jacobians -------------------------------------------

    def _locals(self, u, ut, a, frozen, jac):
        """Element residual vectors and Jacobian blocks.

        Returns ``(R_loc, M_loc, C_loc, K_loc, nonlocal)`` where ``nonlocal`` is
        an extra dense ``dR/du_t`` (elastic kind only) or ``None``.
        """
        if self.kind is ModelKind.ELASTIC_COUPLED:
            return self._elastic_locals(u, ut, a, frozen, jac)
        mesh, vol, W3 = self.mesh, self._vol, self._W3
        E = mesh.elements
        ul, utl, al = u[E], ut[E], a[E]
        Kl = Cl = None
        if self.kind is ModelKind.POTENTIAL_VISCOSITY:
            Ml = vol[:, None, None] * self._W2[None]
            R = np.einsum("eij,ej->ei", Ml, al)
            R2, K2, C2 = self._potential_stiffness(ul, utl, frozen, jac)
            R += R2
            if jac:
                Kl, Cl = K2, C2
        else:
            s = self.mass_scale
            k = self.mat.k[:, None]
            if frozen is None:
                w = s[:, None] * (1 - 2 * k * ul)
                f = -2 * k * s[:, None] * utl
            else:
                w = s[:, None] * (1 + frozen.alpha)
                f = s[:, None] * frozen.f
            Ml = vol[:, None, None] * np.einsum("ijk,ek->eij", W3, w)
            Fl = vol[:, None, None] * np.einsum("ijk,ek->eij", W3, f)
            R = np.einsum("eij,ej->ei", Ml, al) + np.einsum("eij,ej->ei", Fl, utl)
            a_, b_, s_ = self._stiff_flux_coeffs()
            Rs, Ks = self._flux(ul, a_, b_, s_, jac)
            R += Rs
            if jac:
                Kl = Ks
                Cl = Fl if frozen is not None else 2 * Fl
                if frozen is None:
                    Kl = Kl + (-2 * self.mat.k * s * vol)[:, None, None] * np.einsum("ijk,ej->eik", W3, al)
        a_, b_, s_ = self._damping_coeffs()
        Rd, Cd = self._flux(utl, a_, b_, s_, jac)
        R += Rd
        if jac:
            Cl = Cd if Cl is None else Cl + Cd
        return R, (Ml if jac else None), Cl, Kl, None

    def flux_locals(self, u, ut) -> np.ndarray:
        """Element vectors of the flux terms only, ``int F(u, u_t) . grad phi_i``.

        Stiffness plus damping, without inertia, quadratic source or forcing.
        For the potential kind the flux is ``alpha grad psi`` with the element
        mean of ``alpha``.
        """
        u, ut = np.asarray(u, float), np.asarray(ut, float)
        if self.kind is ModelKind.ELASTIC_COUPLED:
            alpha, _ = self.elastic_alpha(ut)
            K0 = asm.local_elastic_stiffness(self.mesh, self.mat, 1.0)
            R = alpha[:, None] * np.einsum("eij,ej->ei", K0, u[self._dofs])
            return R + asm.local_elastic_damping(self.mesh, self.mat, ut)
        E = self.mesh.elements
        ul, utl = u[E], ut[E]
        if self.kind is ModelKind.POTENTIAL_VISCOSITY:
            abar = (self.mat.c2[:, None] / (1 - 2 * self.mat.k[:, None] * utl)).mean(axis=1)
            R = abar[:, None] * np.einsum("eij,ej->ei", self._GG, ul)
        else:
            R = self._flux(ul, *self._stiff_flux_coeffs(), False)[0]
        return R + self._flux(utl, *self._damping_coeffs(), False)[0]

    def _flux(self, vl, a, beta, s, jac):
        """Residual and tangent of ``int (a + beta|grad v|^{s-1}) grad v . grad phi``."""
        G = self.mesh.grad_lambda
        if not np.any(beta):
            R = np.einsum("eij,ej->ei", self._GG, vl) * a[:, None]
            return R, (a[:, None, None] * self._GG if jac else None)
        g = np.einsum("ead,ea->ed", G, vl)
        R = self._vol[:, None] * np.einsum("eid,ed->ei", G, asm._flux(g, a, beta, s))
        if not jac:
            return R, None
        T = asm._flux_tangent(g, a, beta, s)
        return R, self._vol[:, None, None] * np.einsum("eid,edf,ejf->eij", G, T, G)

    def _potential_stiffness(self, ul, utl, frozen, jac):
        mesh, vol = self.mesh, self._vol
        G = mesh.grad_lambda
        m = mesh.dim + 1
        c2 = self.mat.c2[:, None]
        k = self.mat.k[:, None]
        if frozen is None:
            den = 1 - 2 * k * utl
            al = c2 / den
            dal = 2 * k * c2 / den ** 2
        else:
            al = frozen.alpha
            dal = np.zeros_like(al)
        abar = al.mean(axis=1)
        g = np.einsum("ead,ea->ed", G, ul)
        ga = np.einsum("ead,ea->ed", G, al)
        Gg = np.einsum("eid,ed->ei", G, g)  # G_i . g
        R = (vol * abar)[:, None] * Gg + (vol / m * np.einsum("ed,ed->e", ga, g))[:, None]
        if not jac:
            return R, None, None
        K = abar[:, None, None] * self._GG + (vol / m)[:, None, None] * np.einsum("ed,ejd->ej", ga, G)[:, None, :]
        C = (vol / m)[:, None, None] * dal[:, None, :] * (Gg[:, :, None] + Gg[:, None, :])
        return R, K, C

    def _elastic_locals(self, U, Ut, A, frozen, jac):
        mesh, mat = self.mesh, self.mat
        dofs = self._dofs
        Ml = asm.elastic_mass_local(mesh, mat.rho)
        if frozen is None:
            alpha, _ = self.elastic_alpha(Ut)
        else:
            alpha = frozen.alpha
        K0 = asm.local_elastic_stiffness(mesh, mat, 1.0)
        Ue = U[dofs]
        KU = np.einsum("eij,ej->ei", K0, Ue)
        R = np.einsum("eij,ej->ei", Ml, A[dofs]) + alpha[:, None] * KU
        if jac:
            Rd, Cl = asm.local_elastic_damping(mesh, mat, Ut, jac=True)
        else:
            Rd, Cl = asm.local_elastic_damping(mesh, mat, Ut), None
        R += Rd
        nonlocal_ = None
        if jac and frozen is None and np.any(mat.k):
            dalpha = 2 * mat.k * alpha ** 2  # d alpha / d psi_mean
            P = asm.poisson_operator(mesh)  # (nn, ndof)
            Q = P[mesh.elements].mean(axis=1)  # (ne, ndof)
            nz = np.flatnonzero(dalpha)
            cols = np.repeat(nz, dofs.shape[1])
            Ssp = sp.csr_matrix((KU[nz].ravel(), (dofs[nz].ravel(), cols)),
                                shape=(self.ndof, mesh.n_elements))
            nonlocal_ = Ssp @ (dalpha[:, None] * Q)
        return R, Ml, Cl, (alpha[:, None, None] * K0 if jac else None), nonlocal_

    def _load(self, t: float) -> np.ndarray | None:
        if self.forcing is None:
            return None
        return asm.load_vector(self.mesh, self.forcing, t)

    def residual(self, state: State, utt: np.ndarray, frozen: FrozenCoefficients | None = None) -> np.ndarray:
        """Weak-form residual ``R(u, u_t, u_tt)`` with Dirichlet rows zeroed."""
        Rl = self._locals(np.asarray(state.u, float), np.asarray(state.ut, float),
                          np.asarray(utt, float), frozen, False)[0]
        R = self._pat.vector(Rl)
        load = self._load(state.t)
        if load is not None:
            R -= load
        R[self._mask] = 0.0
        return R

    def jacobians(self, state: State, utt: np.ndarray | None = None,
                  frozen: FrozenCoefficients | None = None):
        """``(dR/du_tt, dR/du_t, dR/du)`` without Dirichlet elimination.

        ``dR/du_t`` is dense for the elastic kind with nonzero nonlinearity.
        """
        utt = np.zeros(self.ndof) if utt is None else np.asarray(utt, float)
        _, Ml, Cl, Kl, nl = self._locals(np.asarray(state.u, float), np.asarray(state.ut, float),
                                         utt, frozen, True)
        pat = self._pat
        C = pat.matrix(pat.data(Cl))
        if nl is not None:
            C = C.toarray() + nl
        return pat.matrix(pat.data(Ml)), C, pat.matrix(pat.data(Kl))

    def newton_system(self, state: State, utt: np.ndarray, wm: float, wc: float, wk: float,
                      frozen: FrozenCoefficients | None = None):
        """Residual and eliminated Jacobian ``wm M + wc C + wk K`` in one pass."""
        Rl, Ml, Cl, Kl, nl = self._locals(np.asarray(state.u, float), np.asarray(state.ut, float),
                                          np.asarray(utt, float), frozen, True)
        pat = self._pat
        R = pat.vector(Rl)
        load = self._load(state.t)
        if load is not None:
            R -= load
        R[self._mask] = 0.0
        J = pat.eliminated(pat.data(wm * Ml + wc * Cl + wk * Kl))
        if nl is not None:
            Jd = J.toarray()
            free = ~self._mask
            Jd[np.ix_(free, free)] += wc * nl[np.ix_(free, free)]
            return R, Jd
        return R, J

    # -- fixed-point coefficients -----------------------------------------

    def frozen_from_state(self, v: State) -> FrozenCoefficients:
        E, k = self.mesh.elements, self.mat.k[:, None]
        if self.kind.is_pressure:
            return FrozenCoefficients(-2 * k * v.u[E], -2 * k * v.ut[E])
        if self.kind is ModelKind.POTENTIAL_VISCOSITY:
            return FrozenCoefficients(self.mat.c2[:, None] / (1 - 2 * k * v.ut[E]))
        return FrozenCoefficients(self.elastic_alpha(v.ut)[0])

    # -- a priori degeneracy bound -----------------------------------------

    def embedding_constant(self, r: float, seed: int = 0) -> float:
        """Mesh-level lower estimate of ``C_{W^{1,r}_0, L_inf}``."""
        from .constants import NormSpec, embedding_ratio_estimate

        key = ("emb", float(r), seed)
        if key not in self._cache:
            self._cache[key] = embedding_ratio_estimate(
                self.mesh, NormSpec(r, True), NormSpec(np.inf), samples=16, seed=seed)
        return self._cache[key]


def residual(model: Model, state: State, utt: np.ndarray, frozen=None) -> np.ndarray:
    return model.residual(state, utt, frozen)


def jacobians(model: Model, state: State, utt=None, frozen=None):
    return model.jacobians(state, utt, frozen)


def frozen_coefficients(model: Model, v, t: float | None = None) -> FrozenCoefficients:
    """Linearized-problem coefficients from ``v`` (a State, or a Trajectory sampled at ``t``).

    Raises :class:`DegeneracyError` if the frozen factor falls to the floor.
    """
    if isinstance(v, State):
        state = v
    else:
        times = np.asarray(v.times)
        if t is None or not times[0] - 1e-12 <= t <= times[-1] + 1e-12:
            raise ValueError("t outside the trajectory window")
        j = int(np.clip(np.searchsorted(times, t) - 1, 0, len(times) - 2)) if len(times) > 1 else 0
        if len(times) == 1:
            state = State(t, v.u[0], v.ut[0])
        else:
            th = (t - times[j]) / (times[j + 1] - times[j])
            state = State(t, (1 - th) * v.u[j] + th * v.u[j + 1], (1 - th) * v.ut[j] + th * v.ut[j + 1])
    fc = model.frozen_from_state(state)
    model.check_margin(state, fc)
    return fc


def degeneracy_guard(model: Model, state: State) -> GuardResult:
    """Observed margin and the embedding-based a priori bound ``1 - 2|k| C |grad w|_{L_r}``.

    ``w`` is ``u`` for pressure kinds, ``u_t`` for the potential kind and
    ``psi_t`` for the elastic kind; ``r`` is ``p+1`` for the p-Laplace model
    and ``q+1`` otherwise. The embedding constant is a lower estimate, so the
    bound is indicative rather than rigorous.
    """
    from .constants import lp_norm

    margin = model.margin(state)
    kmax = float(np.max(np.abs(model.mat.k)))
    if kmax == 0:
        return GuardResult(margin, 1.0)
    if model.kind is ModelKind.PRESSURE_PLAPLACE:
        r = float(np.max(model.mat.p)) + 1
    else:
        r = float(np.max(model.mat.q)) + 1
    if model.kind.is_pressure:
        w = state.u
    elif model.kind is ModelKind.POTENTIAL_VISCOSITY:
        w = state.ut
    else:
        w = model._psi_t(state.ut)
    bound = 1 - 2 * kmax * model.embedding_constant(r) * lp_norm(model.mesh, w, r, True)
    return GuardResult(margin, bound)


# --------------------------------------------------------------------------
# manufactured solution  u* = A sin(pi x) cos(t) on (0, 1)


def manufactured_solution(amplitude: float = 1.0):
    """Exact solution and its time derivative for the 1D manufactured test."""
    def u(x, t):
        return amplitude * np.sin(np.pi * x[:, 0]) * np.cos(t)

    def ut(x, t):
        return -amplitude * np.sin(np.pi * x[:, 0]) * np.sin(t)

    return u, ut


def manufactured_forcing(c2: float, b: float, delta: float, k: float, q: float,
                         amplitude: float = 1.0):
    """Source making ``A sin(pi x) cos t`` exact for the 1D pressure/viscosity model."""
    A, pi = amplitude, math.pi

    def g(x, t):
        s, c = np.sin(pi * x[:, 0]), np.cos(pi * x[:, 0])
        u = A * s * np.cos(t)
        ut = -A * s * np.sin(t)
        utt = -u
        uxt = -A * pi * c * np.sin(t)
        uxxt = -pi ** 2 * ut
        uxx = -pi ** 2 * u
        damp = (1 - delta) * uxxt + delta * q * np.abs(uxt) ** (q - 1) * uxxt
        return (1 - 2 * k * u) * utt - c2 * uxx - b * damp - 2 * k * ut ** 2

    return g
