"""Norms and auxiliary constants: Poincare-Friedrichs, embedding ratios, Young.

Spatial norms of P1 fields are exact where the integrand is polynomial
(gradient norms, the L2 norm of a field) and use collapsed Gauss quadrature
otherwise. Time integrals use the trapezoid rule on the trajectory grid;
quantities living on step midpoints (``u_tt``) use the midpoint rule.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import (bary_moments, element_gradients, mass_matrix, restrict,
                       simplex_quadrature, stiffness_matrix)
from .mesh import Mesh


class ConvergenceError(RuntimeError):
    """An iterative procedure hit its iteration cap."""


@dataclass(frozen=True)
class NormSpec:
    """A spatial norm, optionally combined with a temporal one.

    Parameters
    ----------
    p : float
        Spatial exponent, ``>= 1`` or ``inf``.
    gradient : bool
        Measure the gradient instead of the field.
    time : float or None
        Temporal exponent (``inf`` for sup over the grid); ``None`` means
        pointwise in time.
    track : str
        Which trajectory track to read: ``"u"``, ``"ut"`` or ``"utt"``.
    """

    p: float = 2.0
    gradient: bool = False
    time: float | None = None
    track: str = "u"

    def __post_init__(self):
        if not self.p >= 1:
            raise ValueError("spatial exponent must be >= 1")
        if self.time is not None and not self.time >= 1:
            raise ValueError("temporal exponent must be >= 1")
        if self.track not in ("u", "ut", "utt"):
            raise ValueError(f"unknown track {self.track!r}")


def _components(mesh: Mesh, field: np.ndarray) -> np.ndarray:
    f = np.asarray(field, dtype=float)
    if f.shape[-1] == mesh.n_nodes:
        return f[None]
    if f.shape[-1] == mesh.dim * mesh.n_nodes:
        return f.reshape(mesh.dim, mesh.n_nodes)
    raise ValueError("field length matches neither a scalar nor a vector field")


def _pointwise_magnitude(mesh: Mesh, field, gradient: bool, n: int = 4):
    """Magnitude samples and weights: element values for gradients, quadrature otherwise."""
    comps = _components(mesh, field)
    if gradient:
        g = np.stack([element_gradients(mesh, c) for c in comps])  # (nc, ne, d)
        return np.sqrt(np.einsum("ced,ced->e", g, g)), mesh.volumes
    bary, w = simplex_quadrature(mesh.dim, n)
    vals = np.einsum("qa,cea->ceq", bary, comps[:, mesh.elements])
    return np.sqrt(np.einsum("ceq,ceq->eq", vals, vals)), mesh.volumes[:, None] * w


def lp_norm(mesh: Mesh, field, p: float = 2.0, of_gradient: bool = False) -> float:
    """Spatial ``L_p`` norm of a P1 field or of its gradient.

    Vector fields (length ``dim * n_nodes``) use the Euclidean magnitude of
    the value and the Frobenius norm of the Jacobian.

    Parameters
    ----------
    mesh : Mesh
    field : array_like
        Nodal values.
    p : float
        Exponent ``>= 1`` or ``np.inf``.
    of_gradient : bool
        Measure ``grad field`` instead of ``field``.

    Returns
    -------
    float
    """
    if not p >= 1:
        raise ValueError("p must be >= 1")
    comps = _components(mesh, field)
    if math.isinf(p):
        if of_gradient:
            mag, _ = _pointwise_magnitude(mesh, field, True)
            return float(mag.max(initial=0.0))
        return float(np.sqrt((comps ** 2).sum(axis=0)).max(initial=0.0))
    if p == 2 and not of_gradient:
        W2 = bary_moments(mesh.dim, 2)
        loc = comps[:, mesh.elements]
        s = np.einsum("e,ij,cei,cej->", mesh.volumes, W2, loc, loc)
        return float(np.sqrt(max(s, 0.0)))
    mag, w = _pointwise_magnitude(mesh, field, of_gradient)
    return float(np.sum(w * mag ** p) ** (1.0 / p))


def lp_norms(mesh: Mesh, fields: np.ndarray, p: float = 2.0, of_gradient: bool = False) -> np.ndarray:
    """Row-wise :func:`lp_norm` for a stack of fields ``(nt, ndof)``."""
    return np.array([lp_norm(mesh, f, p, of_gradient) for f in np.atleast_2d(fields)])


def l2_error(mesh: Mesh, field, exact, n: int = 5) -> float:
    """``||field - exact||_{L2}`` by quadrature; ``exact`` maps points ``(N, d)`` to values."""
    bary, w = simplex_quadrature(mesh.dim, n)
    f = np.asarray(field, dtype=float)
    pts = np.einsum("qa,ead->eqd", bary, mesh.nodes[mesh.elements])
    ex = np.asarray(exact(pts.reshape(-1, mesh.dim)), dtype=float).reshape(pts.shape[:2])
    diff = np.einsum("qa,ea->eq", bary, f[mesh.elements]) - ex
    return float(np.sqrt(np.sum(mesh.volumes[:, None] * w * diff ** 2)))


# --------------------------------------------------------------------------
# Poincare-Friedrichs


def poincare_constant(mesh: Mesh, tol: float = 1e-8, maxiter: int = 500) -> float:
    """Discrete Poincare-Friedrichs constant ``lambda_1^{-1/2}``.

    ``lambda_1`` is the smallest eigenvalue of ``K x = lambda M x`` on the
    Dirichlet-eliminated system, found by inverse power iteration until the
    Rayleigh quotient changes by less than ``tol`` relative.
    """
    K = sp.csc_matrix(restrict(stiffness_matrix(mesh), mesh.boundary_mask))
    M = sp.csr_matrix(restrict(mass_matrix(mesh), mesh.boundary_mask))
    if K.shape[0] == 0:
        raise ValueError("mesh has no interior nodes")
    lu = spla.splu(K)
    x = np.ones(K.shape[0])
    lam_old = np.inf
    for _ in range(maxiter):
        x = lu.solve(M @ x)
        x /= np.sqrt(x @ (M @ x))
        lam = x @ (K @ x)
        if abs(lam - lam_old) <= tol * lam:
            return float(lam ** -0.5)
        lam_old = lam
    raise ConvergenceError(f"inverse iteration did not converge in {maxiter} steps")


# --------------------------------------------------------------------------
# embedding ratios


def _spatial(mesh: Mesh, spec: NormSpec, field) -> float:
    return lp_norm(mesh, field, spec.p, spec.gradient)


def tent_field(mesh: Mesh) -> np.ndarray:
    """Distance to the boundary of the meshed box, as a P1 interpolant."""
    x = mesh.nodes
    L = np.asarray(mesh.lengths)
    return np.min(np.minimum(x, L - x), axis=1)


def _random_field(mesh: Mesh, rng: np.random.Generator) -> np.ndarray:
    x = mesh.nodes / np.asarray(mesh.lengths)
    if rng.random() < 0.5:
        v = rng.standard_normal(mesh.n_nodes)
    else:
        v = np.zeros(mesh.n_nodes)
        for _ in range(3):
            modes = rng.integers(1, 5, size=mesh.dim)
            v += rng.standard_normal() * np.prod(np.sin(np.pi * modes * x), axis=1)
        if rng.random() < 0.5:
            v = np.abs(v) ** rng.uniform(0.5, 3.0)
    v[mesh.boundary_mask] = 0.0
    return v


def embedding_ratio_estimate(mesh: Mesh, source: NormSpec, target: NormSpec,
                             samples: int = 32, seed: int = 0) -> float:
    """Lower bound for the discrete embedding constant ``target <= C source``.

    The maximum of ``target/source`` over the boundary tent field and
    ``samples`` seeded random Dirichlet-zero fields. Sample ``i`` draws from
    its own stream, so the estimate is nondecreasing in ``samples``.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    candidates = [tent_field(mesh)]
    candidates += [_random_field(mesh, np.random.default_rng([seed, i])) for i in range(samples)]
    best = 0.0
    for v in candidates:
        s = _spatial(mesh, source, v)
        if s > 0:
            best = max(best, _spatial(mesh, target, v) / s)
    return best


# --------------------------------------------------------------------------
# Young's inequality  ab <= eps a^r + C(eps, r) b^{r/(r-1)}


class YoungConstants(NamedTuple):
    verbatim: float
    valid: float


def young_constant(eps: float, r: float) -> YoungConstants:
    """Both forms of the Young constant ``C(eps, r)``.

    ``verbatim`` is ``(r-1) r^{r/(r-1)} eps^{-1/(1-r)}``, the commonly quoted
    form, which does not satisfy the inequality for small ``eps``.
    ``valid`` is the sharp constant ``(r-1) r^{-r/(r-1)} eps^{-1/(r-1)}``.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    if not r > 1:
        raise ValueError("r must be > 1")
    verbatim = (r - 1) * r ** (r / (r - 1)) * eps ** (-1 / (1 - r))
    valid = (r - 1) * r ** (-r / (r - 1)) * eps ** (-1 / (r - 1))
    return YoungConstants(verbatim, valid)


def young_check(C: float, eps: float, r: float, a=None, b=None, rtol: float = 1e-12) -> bool:
    """Check ``ab <= eps a^r + C b^{r/(r-1)}`` on a grid (default ``[0,10]^2``)."""
    a = np.linspace(0, 10, 201) if a is None else np.atleast_1d(np.asarray(a, dtype=float))
    b = np.linspace(0, 10, 201) if b is None else np.atleast_1d(np.asarray(b, dtype=float))
    A, B = np.meshgrid(a, b, indexing="ij")
    lhs = A * B
    rhs = eps * A ** r + C * B ** (r / (r - 1))
    return bool(np.all(lhs <= rhs * (1 + rtol) + 1e-300))


# --------------------------------------------------------------------------
# Bochner norms


def _track(traj, name: str):
    """Values and time weights for a trajectory track.

    Returns the stacked fields and the quadrature weights in time: trapezoid
    for grid tracks, midpoint for ``utt``.
    """
    t = np.asarray(traj.times)
    if len(t) == 0:
        raise ValueError("empty trajectory")
    if name == "utt":
        dt = np.diff(t)
        vals = np.diff(np.asarray(traj.ut), axis=0) / dt[:, None]
        return vals, dt
    vals = np.asarray(getattr(traj, name))
    w = np.zeros(len(t))
    if len(t) > 1:
        dt = np.diff(t)
        w[:-1] += dt / 2
        w[1:] += dt / 2
    return vals, w


def temporal_norm(values: np.ndarray, weights: np.ndarray, time_p: float) -> float:
    values = np.asarray(values, dtype=float)
    if len(values) == 0:
        return 0.0
    if math.isinf(time_p):
        return float(values.max())
    return float(np.sum(weights * values ** time_p) ** (1.0 / time_p))


def bochner_norm(traj, spec: NormSpec, mesh: Mesh | None = None) -> float:
    """``|| track ||_{L_time(0,T; L_p)}`` on the trajectory grid."""
    mesh = traj.mesh if mesh is None else mesh
    vals, w = _track(traj, spec.track)
    spatial = lp_norms(mesh, vals, spec.p, spec.gradient)
    return temporal_norm(spatial, w, np.inf if spec.time is None else spec.time)


def triple_norm(traj, mesh: Mesh | None = None) -> float:
    """``||v_t||_{Linf L2} + ||grad v||_{Linf L2} + ||grad v_t||_{L2 L2}``."""
    return (bochner_norm(traj, NormSpec(2, False, np.inf, "ut"), mesh)
            + bochner_norm(traj, NormSpec(2, True, np.inf, "u"), mesh)
            + bochner_norm(traj, NormSpec(2, True, 2, "ut"), mesh))
