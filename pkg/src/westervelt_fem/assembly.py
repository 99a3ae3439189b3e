"""P1 finite element operators for the damped Westervelt family.

All integrals of products of P1 functions are evaluated exactly with the
barycentric moment formula

    int_T lambda^a = d! |T| prod(a_i!) / (d + |a|)!

so the nodal-weighted mass matrices and the quadratic source carry no
quadrature error. Gradients of P1 fields are element-constant, which makes
the q-viscosity and p-Laplace integrands exact as well.

Scalar fields are arrays of length ``n_nodes``. Vector fields use
component-major blocks: dof ``c * n_nodes + i``.
"""
from __future__ import annotations

import itertools
import math
import weakref
from dataclasses import dataclass, field, fields, replace
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Mesh, Tag

ETA = 1e-10  # gradient-norm regularization, domain units


# --------------------------------------------------------------------------
# barycentric moments and quadrature


@lru_cache(maxsize=None)
def bary_moments(dim: int, order: int) -> np.ndarray:
    """Tensor ``W[i, j, ...] = int_T lambda_i lambda_j ... / |T|``."""
    m = dim + 1
    W = np.empty((m,) * order)
    for idx in itertools.product(range(m), repeat=order):
        counts = np.bincount(idx, minlength=m)
        num = math.factorial(dim) * np.prod([math.factorial(c) for c in counts])
        W[idx] = num / math.factorial(dim + order)
    W.setflags(write=False)
    return W


@lru_cache(maxsize=None)
def simplex_quadrature(dim: int, n: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Collapsed Gauss rule on the reference simplex.

    Returns barycentric points ``(nq, dim+1)`` and weights summing to one.
    With ``n`` points per direction the rule integrates polynomials of
    degree ``2n - dim`` exactly.
    """
    x, w = np.polynomial.legendre.leggauss(n)
    t, wt = (x + 1) / 2, w / 2
    if dim == 1:
        pts = t[:, None]
        wts = wt
    elif dim == 2:
        U, V = np.meshgrid(t, t, indexing="ij")
        WU, WV = np.meshgrid(wt, wt, indexing="ij")
        pts = np.column_stack([U.ravel(), (V * (1 - U)).ravel()])
        wts = (WU * WV * (1 - U)).ravel() * 2.0
    else:
        U, V, S = np.meshgrid(t, t, t, indexing="ij")
        WU, WV, WS = np.meshgrid(wt, wt, wt, indexing="ij")
        pts = np.column_stack([U.ravel(), (V * (1 - U)).ravel(),
                               (S * (1 - U) * (1 - V)).ravel()])
        wts = (WU * WV * WS * (1 - U) ** 2 * (1 - V)).ravel() * 6.0
    bary = np.column_stack([1 - pts.sum(axis=1), pts])
    return bary, wts


def quadrature_points(mesh: Mesh, n: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Physical quadrature points ``(ne, nq, dim)`` and weights ``(ne, nq)``."""
    bary, w = simplex_quadrature(mesh.dim, n)
    x = np.einsum("qa,ead->eqd", bary, mesh.nodes[mesh.elements])
    return x, mesh.volumes[:, None] * w[None, :]


# --------------------------------------------------------------------------
# sparsity patterns


@dataclass
class Pattern:
    """Fixed CSR pattern plus the scatter map from element-local entries."""

    ndof: int
    dofs: np.ndarray  # (ne, m)
    indptr: np.ndarray
    indices: np.ndarray
    scatter: np.ndarray  # (ne*m*m,) -> position in data
    diag: np.ndarray  # data position of (i, i) for every dof
    fixed_entries: np.ndarray  # data positions in a fixed row or column
    fixed_dofs: np.ndarray

    @property
    def nnz(self) -> int:
        return len(self.indices)

    def data(self, local: np.ndarray) -> np.ndarray:
        return np.bincount(self.scatter, weights=local.ravel(), minlength=self.nnz)

    def matrix(self, data: np.ndarray) -> sp.csr_matrix:
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.ndof, self.ndof))

    def vector(self, local: np.ndarray) -> np.ndarray:
        return np.bincount(self.dofs.ravel(), weights=local.ravel(), minlength=self.ndof)

    def eliminated(self, data: np.ndarray) -> sp.csr_matrix:
        """Dirichlet row/column elimination with unit diagonal on fixed dofs."""
        d = data.copy()
        d[self.fixed_entries] = 0.0
        d[self.diag[self.fixed_dofs]] = 1.0
        return self.matrix(d)


def _build_pattern(dofs: np.ndarray, ndof: int, fixed: np.ndarray) -> Pattern:
    m = dofs.shape[1]
    rows = np.repeat(dofs, m, axis=1).ravel()
    cols = np.tile(dofs, (1, m)).ravel()
    key = rows * ndof + cols
    uniq, inv = np.unique(key, return_inverse=True)
    r, c = uniq // ndof, uniq % ndof
    indptr = np.zeros(ndof + 1, dtype=np.int64)
    np.cumsum(np.bincount(r, minlength=ndof), out=indptr[1:])
    diag = np.full(ndof, -1, dtype=np.int64)
    on_diag = r == c
    diag[r[on_diag]] = np.flatnonzero(on_diag)
    fixed_mask = np.zeros(ndof, dtype=bool)
    fixed_mask[fixed] = True
    fixed_entries = np.flatnonzero(fixed_mask[r] | fixed_mask[c])
    return Pattern(ndof, dofs, indptr, c.astype(np.int32), inv.ravel(), diag,
                   fixed_entries, np.asarray(fixed, dtype=np.int64))


_PATTERNS: "weakref.WeakKeyDictionary[Mesh, dict]" = weakref.WeakKeyDictionary()


def _cache(mesh: Mesh) -> dict:
    return _PATTERNS.setdefault(mesh, {})


def scalar_pattern(mesh: Mesh) -> Pattern:
    c = _cache(mesh)
    if "scalar" not in c:
        c["scalar"] = _build_pattern(mesh.elements, mesh.n_nodes,
                                     np.flatnonzero(mesh.boundary_mask))
    return c["scalar"]


def vector_dofs(mesh: Mesh) -> np.ndarray:
    """Element dofs ``(ne, dim*(dim+1))``, local index ``c*(dim+1) + a``."""
    nn = mesh.n_nodes
    return np.concatenate([mesh.elements + c * nn for c in range(mesh.dim)], axis=1)


def vector_pattern(mesh: Mesh) -> Pattern:
    c = _cache(mesh)
    if "vector" not in c:
        nn = mesh.n_nodes
        fixed = np.concatenate([np.flatnonzero(mesh.boundary_mask) + k * nn
                                for k in range(mesh.dim)])
        c["vector"] = _build_pattern(vector_dofs(mesh), mesh.dim * nn, fixed)
    return c["vector"]


def vector_boundary_mask(mesh: Mesh) -> np.ndarray:
    return np.tile(mesh.boundary_mask, mesh.dim)


def restrict(A, mask: np.ndarray):
    """Sub-matrix on the free (unmasked) dofs."""
    free = np.flatnonzero(~mask)
    A = sp.csr_matrix(A) if sp.issparse(A) else np.asarray(A)
    return A[free][:, free]


# --------------------------------------------------------------------------
# material data


def _voigt_size(dim: int) -> int:
    return {2: 3, 3: 6}[dim]


def voigt_e(dim: int) -> np.ndarray:
    """Voigt vector e with ``e^T B u = div u``."""
    return np.array([1.0, 1.0, 0.0]) if dim == 2 else np.array([1.0, 1, 1, 0, 0, 0])


_ARRAY_FIELDS = ("c2", "b", "delta", "k", "eps", "p", "q", "rho", "lam", "mu", "b_hat")


@dataclass(eq=False)
class MaterialSpec:
    """Element-wise constant coefficients.

    ``k`` holds the nonlinearity coefficient of the active formulation (``k``
    for pressure kinds, ``k~`` for potential and elastic kinds). Optional
    ``c_voigt`` / ``b_voigt`` arrays of shape ``(ne, nv, nv)`` override the
    isotropic tensors on SOLID elements.
    """

    c2: np.ndarray
    b: np.ndarray
    delta: np.ndarray
    k: np.ndarray
    eps: np.ndarray
    p: np.ndarray
    q: np.ndarray
    rho: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    b_hat: np.ndarray
    tags: np.ndarray
    c_voigt: np.ndarray | None = None
    b_voigt: np.ndarray | None = None
    _tensors: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        ne = len(self.tags)
        for name in _ARRAY_FIELDS:
            arr = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (ne,)).copy()
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"material field {name} must be finite")
            setattr(self, name, arr)
        self.tags = np.asarray(self.tags, dtype=np.int64)
        if np.any((self.delta < 0) | (self.delta > 1)):
            raise ValueError("delta must lie in [0, 1]")
        if np.any(self.p < 1) or np.any(self.q < 1):
            raise ValueError("p and q must be >= 1")
        for name in ("eps", "lam", "mu", "b_hat", "b", "c2"):
            if np.any(getattr(self, name) < 0):
                raise ValueError(f"{name} must be nonnegative")
        if np.any(self.rho <= 0):
            raise ValueError("rho must be positive")
        fluid = self.tags == Tag.FLUID
        solid = self.tags == Tag.SOLID
        if np.any(self.mu[fluid] != 0):
            raise ValueError("mu must vanish on FLUID elements")
        if np.any(self.mu[solid] <= 0):
            raise ValueError("mu must be positive on SOLID elements")
        for name in ("c_voigt", "b_voigt"):
            t = getattr(self, name)
            if t is not None:
                t = np.asarray(t, dtype=float)
                if np.max(np.abs(t - np.transpose(t, (0, 2, 1)))) > 1e-12 * max(1.0, np.abs(t).max()):
                    raise ValueError(f"{name} must be symmetric")
                if np.any(np.linalg.eigvalsh(t)[:, 0] < -1e-12 * max(1.0, np.abs(t).max())):
                    raise ValueError(f"{name} must be positive semidefinite")
                setattr(self, name, t)

    @classmethod
    def uniform(cls, mesh: Mesh, **values) -> "MaterialSpec":
        return cls.from_tags(mesh, values)

    @classmethod
    def from_tags(cls, mesh: Mesh, default: dict, per_tag: dict | None = None,
                  **extra) -> "MaterialSpec":
        """Build from global values with optional per-tag overrides."""
        base = dict(c2=1.0, b=1.0, delta=0.0, k=0.0, eps=0.0, p=1.0, q=1.0, rho=1.0,
                    lam=1.0, mu=0.0, b_hat=0.0)
        unknown = set(default) - set(base)
        if unknown:
            raise ValueError(f"unknown material keys {sorted(unknown)}")
        base.update(default)
        arrays = {k: np.full(mesh.n_elements, float(v)) for k, v in base.items()}
        for tag, over in (per_tag or {}).items():
            sel = mesh.element_tags == int(Tag[tag.upper()] if isinstance(tag, str) else tag)
            for key, v in over.items():
                if key not in arrays:
                    raise ValueError(f"unknown material key {key!r}")
                arrays[key][sel] = float(v)
        return cls(tags=mesh.element_tags.copy(), **arrays, **extra)

    def with_values(self, **changes) -> "MaterialSpec":
        return replace(self, _tensors={}, **changes)

    def c_tensor(self, dim: int) -> np.ndarray:
        """Stiffness tensor [c] per element, ``(ne, nv, nv)``."""
        key = ("c", dim)
        if key not in self._tensors:
            nv = _voigt_size(dim)
            nd = dim
            C = np.zeros((len(self.tags), nv, nv))
            lam, mu = self.lam, self.mu
            for i in range(nd):
                for j in range(nd):
                    C[:, i, j] = lam + (2 * mu if i == j else 0.0)
            for i in range(nd, nv):
                C[:, i, i] = mu
            if self.c_voigt is not None:
                solid = self.tags == Tag.SOLID
                C[solid] = self.c_voigt[solid]
            self._tensors[key] = C
        return self._tensors[key]

    def b_tensor(self, dim: int) -> np.ndarray:
        """Damping tensor [b]: ``b_hat e e^T`` off SOLID, ``b_hat I`` on SOLID."""
        key = ("b", dim)
        if key not in self._tensors:
            nv = _voigt_size(dim)
            e = voigt_e(dim)
            Bt = self.b_hat[:, None, None] * np.outer(e, e)[None]
            solid = self.tags == Tag.SOLID
            Bt[solid] = self.b_hat[solid, None, None] * np.eye(nv)[None]
            if self.b_voigt is not None:
                Bt[solid] = self.b_voigt[solid]
            self._tensors[key] = Bt
        return self._tensors[key]

    # -- validation blocks -------------------------------------------------

    def validate_acoustic(self, b_lower: float = 1e-8, delta_lower: float = 1e-8,
                          lam_lower: float = 1e-12, rho_lower: float = 1e-12) -> None:
        """Positivity floors of the acoustic-acoustic coupling conditions."""
        nl = self.k != 0
        if np.any(self.lam < lam_lower) or np.any(self.rho < rho_lower):
            raise ValueError("lambda and rho must be bounded below by positive floors")
        if np.any(self.b[nl] < b_lower):
            raise ValueError("b must be bounded below on the nonlinear region")
        if np.any(self.delta[nl] < delta_lower):
            raise ValueError("delta must be bounded below on the nonlinear region")

    def validate_elastic(self, dim: int, c_lower: float = 1e-12, gamma_lower: float = 1e-12,
                         b_lower: float = 1e-8, delta_lower: float = 1e-8,
                         delta_upper: float = 1.0 - 1e-8) -> None:
        """Elastic-acoustic coefficient conditions.

        The fluid patterns ``lambda e e^T`` and ``b_hat e e^T`` are rank one, so
        on non-SOLID elements the eigenvalue floors are applied to the scalar
        coefficients ``lambda`` and ``(1 - delta) b_hat``; on SOLID elements to
        the extreme eigenvalues of the full tensors.
        """
        if np.any(self.rho <= 0):
            raise ValueError("rho must be positive")
        C, Bt = self.c_tensor(dim), self.b_tensor(dim)
        solid = self.tags == Tag.SOLID
        ev_c = np.linalg.eigvalsh(C)
        ev_b = np.linalg.eigvalsh(Bt)
        if np.any(ev_c[:, 0] < -1e-12) or np.any(ev_b[:, 0] < -1e-12):
            raise ValueError("[c] and [b] must be positive semidefinite")
        cmin = np.where(solid, ev_c[:, 0], self.lam)
        bmin = np.where(solid, ev_b[:, 0], self.b_hat)
        if np.any(cmin < c_lower):
            raise ValueError("[c] violates its lower eigenvalue floor")
        if np.any((1 - self.delta) * bmin < gamma_lower):
            raise ValueError("(1 - delta) [b] violates the linear damping floor")
        nl = self.k != 0
        if np.any(nl & solid):
            raise ValueError("nonlinearity must be confined to non-SOLID elements")
        if np.any(bmin[nl] < b_lower):
            raise ValueError("[b] violates its floor on the nonlinear region")
        if np.any((self.delta[nl] < delta_lower) | (self.delta[nl] > delta_upper)):
            raise ValueError("delta must lie strictly inside (0, 1) on the nonlinear region")


# --------------------------------------------------------------------------
# linear operators


def _local_weights(mesh: Mesh, weight) -> np.ndarray:
    """Normalize a weight to element-local nodal values ``(ne, dim+1)``."""
    ne, m = mesh.n_elements, mesh.dim + 1
    w = np.asarray(weight, dtype=float)
    if w.ndim == 0:
        return np.full((ne, m), float(w))
    if w.shape == (ne, m):
        return w
    if w.shape == (mesh.n_nodes,) and w.shape != (ne,):
        return w[mesh.elements]
    if w.shape == (ne,):
        return np.repeat(w[:, None], m, axis=1)
    raise ValueError(f"cannot interpret weight of shape {w.shape}")


def local_mass(mesh: Mesh, wloc: np.ndarray) -> np.ndarray:
    """Element mass blocks ``int w phi_i phi_j`` for P1-local weights."""
    W3 = bary_moments(mesh.dim, 3)
    return mesh.volumes[:, None, None] * np.einsum("ijk,ek->eij", W3, wloc)


def local_stiffness(mesh: Mesh, coeff) -> np.ndarray:
    G = mesh.grad_lambda
    c = np.broadcast_to(np.asarray(coeff, dtype=float), (mesh.n_elements,))
    return (c * mesh.volumes)[:, None, None] * np.einsum("eid,ejd->eij", G, G)


def mass_matrix(mesh: Mesh, weight=1.0) -> sp.csr_matrix:
    """``M_ij = int weight phi_i phi_j``.

    ``weight`` may be a scalar, an element field ``(ne,)``, a nodal field
    ``(n_nodes,)`` or element-local nodal values ``(ne, dim+1)``; it is
    integrated exactly as a (possibly discontinuous) P1 function.
    """
    pat = scalar_pattern(mesh)
    return pat.matrix(pat.data(local_mass(mesh, _local_weights(mesh, weight))))


def stiffness_matrix(mesh: Mesh, coeff=1.0) -> sp.csr_matrix:
    """``K_ij = int coeff grad phi_i . grad phi_j`` with element-wise ``coeff``."""
    pat = scalar_pattern(mesh)
    return pat.matrix(pat.data(local_stiffness(mesh, coeff)))


def element_gradients(mesh: Mesh, v: np.ndarray) -> np.ndarray:
    """Element-constant gradients ``(ne, dim)`` of a nodal field."""
    return np.einsum("ead,ea->ed", mesh.grad_lambda, np.asarray(v)[mesh.elements])


# --------------------------------------------------------------------------
# nonlinear fluxes  a g + beta |g|^{s-1} g


def _flux(g: np.ndarray, a: np.ndarray, beta: np.ndarray, s: np.ndarray):
    n2 = np.einsum("ed,ed->e", g, g) + ETA ** 2
    w = a + beta * n2 ** ((s - 1) / 2)
    return w[:, None] * g


def _flux_tangent(g: np.ndarray, a: np.ndarray, beta: np.ndarray, s: np.ndarray):
    n2 = np.einsum("ed,ed->e", g, g) + ETA ** 2
    d = g.shape[1]
    T = (a + beta * n2 ** ((s - 1) / 2))[:, None, None] * np.eye(d)[None]
    T += (beta * (s - 1) * n2 ** ((s - 3) / 2))[:, None, None] * np.einsum("ei,ej->eij", g, g)
    return T


def local_flux_residual(mesh, v, a, beta, s) -> np.ndarray:
    g = element_gradients(mesh, v)
    F = _flux(g, a, beta, s)
    return mesh.volumes[:, None] * np.einsum("eid,ed->ei", mesh.grad_lambda, F)


def local_flux_jacobian(mesh, v, a, beta, s) -> np.ndarray:
    g = element_gradients(mesh, v)
    T = _flux_tangent(g, a, beta, s)
    G = mesh.grad_lambda
    return mesh.volumes[:, None, None] * np.einsum("eid,edf,ejf->eij", G, T, G)


def _qdamp_coeffs(mat: MaterialSpec):
    return mat.b * (1 - mat.delta), mat.b * mat.delta, mat.q


def _plap_coeffs(mat: MaterialSpec):
    return mat.c2, mat.c2 * mat.eps, mat.p


def qdamping_residual(mesh: Mesh, mat: MaterialSpec, v: np.ndarray) -> np.ndarray:
    """``r_i = int b((1-delta) + delta|grad v|^{q-1}) grad v . grad phi_i``."""
    return scalar_pattern(mesh).vector(local_flux_residual(mesh, v, *_qdamp_coeffs(mat)))


def qdamping_jacobian(mesh: Mesh, mat: MaterialSpec, v: np.ndarray) -> sp.csr_matrix:
    pat = scalar_pattern(mesh)
    return pat.matrix(pat.data(local_flux_jacobian(mesh, v, *_qdamp_coeffs(mat))))


def plaplace_residual(mesh: Mesh, mat: MaterialSpec, u: np.ndarray) -> np.ndarray:
    """``r_i = int c^2 (grad u + eps |grad u|^{p-1} grad u) . grad phi_i``."""
    return scalar_pattern(mesh).vector(local_flux_residual(mesh, u, *_plap_coeffs(mat)))


def plaplace_jacobian(mesh: Mesh, mat: MaterialSpec, u: np.ndarray) -> sp.csr_matrix:
    pat = scalar_pattern(mesh)
    return pat.matrix(pat.data(local_flux_jacobian(mesh, u, *_plap_coeffs(mat))))


def damping_flux(g: np.ndarray, q: float) -> np.ndarray:
    """Pointwise ``F(g) = |g|^{q-1} g`` for an array of vectors ``(..., d)``."""
    g = np.asarray(g, dtype=float)
    n = np.linalg.norm(g, axis=-1, keepdims=True)
    return n ** (q - 1) * g


# --------------------------------------------------------------------------
# quadratic source


def local_quadratic(mesh: Mesh, coeff: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Element vectors ``int coeff * a * b * phi_i`` for P1 ``a``, ``b``."""
    W3 = bary_moments(mesh.dim, 3)
    return (coeff * mesh.volumes)[:, None] * np.einsum(
        "ijk,ej,ek->ei", W3, a[mesh.elements], b[mesh.elements])


def source_term(mesh: Mesh, mat: MaterialSpec, ut: np.ndarray) -> np.ndarray:
    """``g_i = int 2k (u_t)^2 phi_i`` (exact)."""
    ut = np.asarray(ut, dtype=float)
    return scalar_pattern(mesh).vector(local_quadratic(mesh, 2 * mat.k, ut, ut))


def load_vector(mesh: Mesh, func, t: float = 0.0, n: int = 5) -> np.ndarray:
    """``int f(x, t) phi_i`` by collapsed Gauss quadrature."""
    bary, w = simplex_quadrature(mesh.dim, n)
    x, wq = quadrature_points(mesh, n)
    vals = np.asarray(func(x.reshape(-1, mesh.dim), t), dtype=float).reshape(x.shape[:2])
    local = np.einsum("eq,qa->ea", vals * wq, bary)
    return scalar_pattern(mesh).vector(local)


# --------------------------------------------------------------------------
# elasticity in Voigt notation


def voigt_matrix(mesh: Mesh) -> np.ndarray:
    """Per-element Voigt operator ``B`` of shape ``(ne, nv, dim*(dim+1))``."""
    c = _cache(mesh)
    if "voigt" in c:
        return c["voigt"]
    d = mesh.dim
    if d == 1:
        raise ValueError("the elastic model needs dim >= 2")
    G = mesh.grad_lambda
    m = d + 1
    nv = _voigt_size(d)
    B = np.zeros((mesh.n_elements, nv, d * m))

    def col(comp, a):
        return comp * m + a

    # (row, component, derivative direction)
    if d == 2:
        entries = [(0, 0, 0), (1, 1, 1), (2, 0, 1), (2, 1, 0)]
    else:
        entries = [(0, 0, 0), (1, 1, 1), (2, 2, 2),
                   (3, 1, 2), (3, 2, 1),
                   (4, 0, 2), (4, 2, 0),
                   (5, 0, 1), (5, 1, 0)]
    for a in range(m):
        for row, comp, der in entries:
            B[:, row, col(comp, a)] = G[:, a, der]
    c["voigt"] = B
    return B


def voigt_apply(mesh: Mesh, U: np.ndarray) -> np.ndarray:
    """Element-constant Voigt strain ``B U``, shape ``(ne, nv)``."""
    B = voigt_matrix(mesh)
    return np.einsum("evj,ej->ev", B, np.asarray(U)[vector_dofs(mesh)])


def local_elastic_stiffness(mesh: Mesh, mat: MaterialSpec, alpha) -> np.ndarray:
    B = voigt_matrix(mesh)
    C = mat.c_tensor(mesh.dim)
    a = np.broadcast_to(np.asarray(alpha, dtype=float), (mesh.n_elements,))
    return (a * mesh.volumes)[:, None, None] * np.einsum("evi,evw,ewj->eij", B, C, B)


def local_elastic_damping(mesh: Mesh, mat: MaterialSpec, Ut: np.ndarray, jac: bool = False):
    B = voigt_matrix(mesh)
    Bt = mat.b_tensor(mesh.dim)
    s = voigt_apply(mesh, Ut)
    n2 = np.einsum("ev,ev->e", s, s) + ETA ** 2
    q, dl = mat.q, mat.delta
    w = (1 - dl) + dl * n2 ** ((q - 1) / 2)
    bs = np.einsum("evw,ew->ev", Bt, s)
    res = (mesh.volumes * w)[:, None] * np.einsum("evi,ev->ei", B, bs)
    if not jac:
        return res
    T = w[:, None, None] * Bt + (dl * (q - 1) * n2 ** ((q - 3) / 2))[:, None, None] * \
        np.einsum("ev,ew->evw", bs, s)
    J = mesh.volumes[:, None, None] * np.einsum("evi,evw,ewj->eij", B, T, B)
    return res, J


def elastic_residuals(mesh: Mesh, mat: MaterialSpec, alpha, U: np.ndarray, Ut: np.ndarray):
    """Weak-form stiffness and damping vectors of the elastic-acoustic system.

    Returns ``(int alpha (B phi)^T [c] B U, int ((1-delta) + delta|B U_t|^{q-1}) (B phi)^T [b] B U_t)``.
    """
    pat = vector_pattern(mesh)
    dofs = vector_dofs(mesh)
    Kloc = local_elastic_stiffness(mesh, mat, alpha)
    stiff = pat.vector(np.einsum("eij,ej->ei", Kloc, np.asarray(U)[dofs]))
    damp = pat.vector(local_elastic_damping(mesh, mat, Ut))
    return stiff, damp


def elastic_mass_local(mesh: Mesh, rho) -> np.ndarray:
    """Block-diagonal element mass ``int rho phi_i phi_j`` per component."""
    d, m = mesh.dim, mesh.dim + 1
    W2 = bary_moments(mesh.dim, 2)
    r = np.broadcast_to(np.asarray(rho, dtype=float), (mesh.n_elements,))
    Ms = (r * mesh.volumes)[:, None, None] * W2[None]
    out = np.zeros((mesh.n_elements, d * m, d * m))
    for c in range(d):
        out[:, c * m:(c + 1) * m, c * m:(c + 1) * m] = Ms
    return out


# --------------------------------------------------------------------------
# Dirichlet Poisson problem  -lap psi = -div U


def divergence_load_matrix(mesh: Mesh) -> sp.csr_matrix:
    """Sparse map ``U -> (int U . grad phi_i)_i``, shape ``(nn, dim*nn)``."""
    c = _cache(mesh)
    if "divload" not in c:
        d, m, nn = mesh.dim, mesh.dim + 1, mesh.n_nodes
        G = mesh.grad_lambda
        rows, cols, vals = [], [], []
        for comp in range(d):
            for i in range(m):
                for a in range(m):
                    rows.append(mesh.elements[:, i])
                    cols.append(mesh.elements[:, a] + comp * nn)
                    vals.append(mesh.volumes / m * G[:, i, comp])
        c["divload"] = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(nn, d * nn))
    return c["divload"]


def _poisson_factor(mesh: Mesh):
    c = _cache(mesh)
    if "poisson_lu" not in c:
        K = restrict(stiffness_matrix(mesh), mesh.boundary_mask)
        c["poisson_lu"] = spla.splu(sp.csc_matrix(K))
    return c["poisson_lu"]


def poisson_solve(mesh: Mesh, U: np.ndarray) -> np.ndarray:
    """Discrete Dirichlet solution of ``-lap psi = -div U``.

    Accepts a single vector field ``(dim*nn,)`` or a stack ``(..., dim*nn)``.
    """
    U = np.asarray(U, dtype=float)
    rhs = divergence_load_matrix(mesh) @ U.reshape(-1, mesh.dim * mesh.n_nodes).T
    free = mesh.free_nodes
    psi = np.zeros((mesh.n_nodes, rhs.shape[1]))
    if len(free):
        psi[free] = _poisson_factor(mesh).solve(np.ascontiguousarray(rhs[free]))
    return psi.T.reshape(U.shape[:-1] + (mesh.n_nodes,))


def poisson_operator(mesh: Mesh) -> np.ndarray:
    """Dense matrix of the linear map ``U -> psi`` (small meshes only)."""
    c = _cache(mesh)
    if "poisson_dense" not in c:
        D = divergence_load_matrix(mesh).toarray()
        P = np.zeros_like(D)
        free = mesh.free_nodes
        if len(free):
            P[free] = _poisson_factor(mesh).solve(np.ascontiguousarray(D[free]))
        c["poisson_dense"] = P
    return c["poisson_dense"]


def gradient_projection(mesh: Mesh, psi: np.ndarray) -> np.ndarray:
    """L2 projection of ``grad psi`` onto Dirichlet-zero P1 vector fields."""
    M = restrict(mass_matrix(mesh), mesh.boundary_mask)
    lu = spla.splu(sp.csc_matrix(M))
    g = element_gradients(mesh, psi)
    out = np.zeros(mesh.dim * mesh.n_nodes)
    free = mesh.free_nodes
    for comp in range(mesh.dim):
        rhs = scalar_pattern(mesh).vector(
            (mesh.volumes * g[:, comp])[:, None] * np.full(mesh.dim + 1, 1.0 / (mesh.dim + 1)))
        block = np.zeros(mesh.n_nodes)
        block[free] = lu.solve(rhs[free])
        out[comp * mesh.n_nodes:(comp + 1) * mesh.n_nodes] = block
    return out
