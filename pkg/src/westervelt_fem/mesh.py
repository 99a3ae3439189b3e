"""Structured simplicial meshes on intervals, rectangles and boxes.

Nodes live in "domain units"; every mesh remembers the axis-aligned box it
was built on so that boundary detection and profile evaluation can use the
exact coordinate test.
"""
from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np


class Tag(enum.IntEnum):
    """Subdomain label carried by every element."""

    DEFAULT = 0
    FLUID = 1
    SOLID = 2
    NONLINEAR = 3


@dataclass(eq=False)
class Mesh:
    """Simplicial P1 mesh with boundary flags and element tags.

    Attributes
    ----------
    dim : int
        Spatial dimension (1, 2 or 3).
    nodes : ndarray, shape (n_nodes, dim)
    elements : ndarray, shape (n_elements, dim + 1)
        Node indices, oriented so that every simplex has positive signed volume.
    boundary_mask : ndarray of bool, shape (n_nodes,)
    element_tags : ndarray of int, shape (n_elements,)
        Values of :class:`Tag`.
    lengths : tuple of float
        Extent of the meshed box ``(0, l_1) x ... x (0, l_dim)``.
    """

    dim: int
    nodes: np.ndarray
    elements: np.ndarray
    boundary_mask: np.ndarray
    element_tags: np.ndarray
    lengths: tuple[float, ...] = field(default=())

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float).reshape(-1, self.dim)
        self.elements = np.asarray(self.elements, dtype=np.int64)
        self.boundary_mask = np.asarray(self.boundary_mask, dtype=bool)
        self.element_tags = np.asarray(self.element_tags, dtype=np.int64)
        if self.dim not in (1, 2, 3):
            raise ValueError(f"dim must be 1, 2 or 3, got {self.dim}")
        if self.elements.shape[1] != self.dim + 1:
            raise ValueError("elements must have dim + 1 vertices")
        if self.elements.min() < 0 or self.elements.max() >= self.n_nodes:
            raise ValueError("element vertex index out of range")
        srt = np.sort(self.elements, axis=1)
        if np.any(srt[:, 1:] == srt[:, :-1]):
            raise ValueError("element with repeated vertex")
        self._fix_orientation()
        for arr in (self.nodes, self.elements, self.boundary_mask, self.element_tags):
            arr.setflags(write=False)

    def _fix_orientation(self):
        vol = self._signed_volumes()
        if np.any(np.abs(vol) <= 0.0):
            raise ValueError("degenerate element with zero measure")
        neg = vol < 0
        if np.any(neg):
            els = self.elements.copy()
            els[neg, 0], els[neg, 1] = self.elements[neg, 1], self.elements[neg, 0]
            self.elements = els

    def _signed_volumes(self) -> np.ndarray:
        x = self.nodes[self.elements]
        edges = x[:, 1:, :] - x[:, :1, :]
        return np.linalg.det(edges) / math.factorial(self.dim)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def boundary_nodes(self) -> frozenset[int]:
        return frozenset(np.flatnonzero(self.boundary_mask).tolist())

    @cached_property
    def free_nodes(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary_mask)

    @cached_property
    def volumes(self) -> np.ndarray:
        return self._signed_volumes()

    @cached_property
    def grad_lambda(self) -> np.ndarray:
        """Gradients of the barycentric coordinates, shape (ne, dim+1, dim)."""
        x = self.nodes[self.elements]
        edges = x[:, 1:, :] - x[:, :1, :]  # (ne, d, d), rows = edge vectors
        inv = np.linalg.inv(edges)  # columns give grads of lambda_1..lambda_d
        g = np.empty((self.n_elements, self.dim + 1, self.dim))
        g[:, 1:, :] = np.transpose(inv, (0, 2, 1))
        g[:, 0, :] = -g[:, 1:, :].sum(axis=1)
        return g

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.nodes[self.elements].mean(axis=1)

    def diameters(self) -> np.ndarray:
        x = self.nodes[self.elements]
        d = np.zeros(self.n_elements)
        for a, b in itertools.combinations(range(self.dim + 1), 2):
            d = np.maximum(d, np.linalg.norm(x[:, a] - x[:, b], axis=1))
        return d

    def elements_with(self, *tags: Tag) -> np.ndarray:
        return np.isin(self.element_tags, [int(t) for t in tags])

    def interface_nodes(self) -> np.ndarray:
        """Nodes shared by elements carrying different tags (interior only)."""
        nn = self.n_nodes
        seen = np.full((nn, len(Tag)), False)
        for a in range(self.dim + 1):
            seen[self.elements[:, a], self.element_tags] = True
        multi = seen.sum(axis=1) > 1
        return np.flatnonzero(multi & ~self.boundary_mask)

    def with_tags(self, tags: np.ndarray) -> "Mesh":
        return Mesh(self.dim, self.nodes, self.elements, self.boundary_mask,
                    np.asarray(tags, dtype=np.int64), self.lengths)


def _box_boundary(nodes: np.ndarray, lengths) -> np.ndarray:
    mask = np.zeros(nodes.shape[0], dtype=bool)
    for i, length in enumerate(lengths):
        mask |= np.isclose(nodes[:, i], 0.0, rtol=0, atol=1e-14 * length)
        mask |= np.isclose(nodes[:, i], length, rtol=0, atol=1e-14 * length)
    return mask


def _check_counts(*counts):
    for n in counts:
        if int(n) != n or n < 1:
            raise ValueError(f"subdivision counts must be positive integers, got {n}")


def _check_lengths(*lengths):
    for length in lengths:
        if not length > 0:
            raise ValueError(f"lengths must be positive, got {length}")


def interval_mesh(n: int, length: float = 1.0) -> Mesh:
    """Uniform mesh of ``(0, length)`` with ``n`` elements."""
    _check_counts(n)
    _check_lengths(length)
    x = np.linspace(0.0, length, n + 1)[:, None]
    els = np.column_stack([np.arange(n), np.arange(1, n + 1)])
    return Mesh(1, x, els, _box_boundary(x, (length,)), np.zeros(n, dtype=np.int64),
                (float(length),))


def rect_mesh(nx: int, ny: int, lx: float = 1.0, ly: float = 1.0) -> Mesh:
    """Each grid cell of ``(0,lx) x (0,ly)`` split into two triangles."""
    _check_counts(nx, ny)
    _check_lengths(lx, ly)
    xs = np.linspace(0.0, lx, nx + 1)
    ys = np.linspace(0.0, ly, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    def idx(i, j):
        return i * (ny + 1) + j

    I, J = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    I, J = I.ravel(), J.ravel()
    v00, v10, v01, v11 = idx(I, J), idx(I + 1, J), idx(I, J + 1), idx(I + 1, J + 1)
    tri = np.concatenate([np.column_stack([v00, v10, v11]),
                          np.column_stack([v00, v11, v01])])
    return Mesh(2, nodes, tri, _box_boundary(nodes, (lx, ly)),
                np.zeros(len(tri), dtype=np.int64), (float(lx), float(ly)))


def box_mesh(nx: int, ny: int, nz: int, lx: float = 1.0, ly: float = 1.0,
             lz: float = 1.0) -> Mesh:
    """Kuhn subdivision: every grid cell split into six tetrahedra."""
    _check_counts(nx, ny, nz)
    _check_lengths(lx, ly, lz)
    xs, ys, zs = (np.linspace(0.0, lx, nx + 1), np.linspace(0.0, ly, ny + 1),
                  np.linspace(0.0, lz, nz + 1))
    X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
    nodes = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])

    def idx(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    I, J, K = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    I, J, K = I.ravel(), J.ravel(), K.ravel()
    tets = []
    for perm in itertools.permutations(range(3)):
        corner = [np.zeros_like(I), np.zeros_like(I), np.zeros_like(I)]
        verts = [idx(I, J, K)]
        for axis in perm:
            corner[axis] = corner[axis] + 1
            verts.append(idx(I + corner[0], J + corner[1], K + corner[2]))
        tets.append(np.column_stack(verts))
    tets = np.concatenate(tets)
    return Mesh(3, nodes, tets, _box_boundary(nodes, (lx, ly, lz)),
                np.zeros(len(tets), dtype=np.int64), (float(lx), float(ly), float(lz)))


def tag_elements(mesh: Mesh, predicate: Callable[[np.ndarray], "Tag | str"]) -> Mesh:
    """Return a copy of ``mesh`` whose tags are ``predicate(centroid)``."""
    tags = np.empty(mesh.n_elements, dtype=np.int64)
    for e, c in enumerate(mesh.centroids):
        label = predicate(c)
        tags[e] = int(Tag[label.upper()] if isinstance(label, str) else Tag(label))
    return mesh.with_tags(tags)


def write_mesh_text(mesh: Mesh, path) -> None:
    """Write the plain-text node/element format described in the README."""
    lines = [f"dim {mesh.dim}", f"nodes {mesh.n_nodes}"]
    for x, b in zip(mesh.nodes, mesh.boundary_mask):
        lines.append(" ".join(repr(float(c)) for c in x) + f" {int(b)}")
    lines.append(f"elements {mesh.n_elements}")
    for el, tag in zip(mesh.elements, mesh.element_tags):
        lines.append(" ".join(str(int(i)) for i in el) + f" {Tag(tag).name}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh_text(path) -> Mesh:
    """Read the format written by :func:`write_mesh_text`; raises ``ValueError`` if malformed."""
    lines = [ln.split() for ln in Path(path).read_text().splitlines()
             if ln.strip() and not ln.lstrip().startswith("#")]

    def header(i, word):
        if i >= len(lines) or len(lines[i]) != 2 or lines[i][0] != word:
            raise ValueError(f"mesh file: expected '{word} <int>' on record {i + 1}")
        return int(lines[i][1])

    try:
        dim = header(0, "dim")
        if dim not in (1, 2, 3):
            raise ValueError("mesh file: dim must be 1, 2 or 3")
        nn = header(1, "nodes")
        node_rows = lines[2:2 + nn]
        if len(node_rows) != nn or any(len(r) != dim + 1 for r in node_rows):
            raise ValueError("mesh file: node records need dim coordinates and a boundary flag")
        nodes = np.array([[float(v) for v in r[:dim]] for r in node_rows])
        bmask = np.array([bool(int(r[dim])) for r in node_rows])
        ne = header(2 + nn, "elements")
        el_rows = lines[3 + nn:3 + nn + ne]
        if len(el_rows) != ne or any(len(r) != dim + 2 for r in el_rows):
            raise ValueError("mesh file: element records need dim+1 node indices and a tag")
        els = np.array([[int(v) for v in r[:dim + 1]] for r in el_rows])
        tags = np.array([int(Tag[r[dim + 1].upper()]) for r in el_rows])
    except KeyError as err:
        raise ValueError(f"mesh file: unknown tag {err}") from None
    if els.min() < 0 or els.max() >= nn:
        raise ValueError("mesh file: element refers to a missing node")
    lengths = tuple(float(v) for v in nodes.max(axis=0) - nodes.min(axis=0))
    return Mesh(dim, nodes, els, bmask, tags, lengths)
