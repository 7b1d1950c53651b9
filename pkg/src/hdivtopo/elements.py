"""Lowest-order H(div) elements on triangles and piecewise constants.

The velocity space is spanned per cell by the full set of linear vector
polynomials; the six degrees of freedom of a cell are normal moments over its
edges,

    L_{e,k}(v) = int_e (v . n_e) P_k(s) ds,      k in {0, 1},

with P_0 = 1, P_1(s) = 2s - 1, where s runs along the facet from its lower to
its higher global vertex index and n_e is that tangent rotated by -90 degrees.
Tying every functional to the global facet orientation makes the normal trace
single-valued across cells, so fields assembled from these dofs are H(div)
conforming while their tangential component may jump.

Physical bases come from the reference element through the contravariant
Piola map, which preserves normal moments; the only correction left is a sign
on the mean-moment dof whenever a cell traverses a facet against its global
direction (odd moments pick up two cancelling sign flips).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import Mesh

REF_VERTICES = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])

_MAX_DEGREE = 50


@dataclass(eq=False)
class QuadratureRule:
    """Positive-weight rule exact for polynomials up to ``degree``."""

    points: np.ndarray
    weights: np.ndarray
    degree: int
    domain: str


def _gauss01(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def quadrature(domain: str, degree: int) -> QuadratureRule:
    """Rule on the reference triangle or the unit interval.

    Triangle rules are conical products collapsed from a Gauss tensor grid;
    they stay positive and are exact for any requested degree in range.
    """
    if not isinstance(degree, (int, np.integer)) or not 1 <= degree <= _MAX_DEGREE:
        raise ValueError(
            f"unsupported quadrature degree {degree!r}; supported: integers 1..{_MAX_DEGREE}")
    if domain == "edge":
        s, w = _gauss01((degree + 2) // 2)
        return QuadratureRule(s, w, degree, domain)
    if domain == "triangle":
        # x = xi, y = eta*(1-xi): the Jacobian (1-xi) raises the xi-degree by one.
        xi, wx = _gauss01((degree + 3) // 2)
        eta, wy = _gauss01((degree + 2) // 2)
        X, Y = np.meshgrid(xi, eta)
        pts = np.stack([X.ravel(), (Y * (1.0 - X)).ravel()], axis=1)
        w = (np.outer(wy, wx) * (1.0 - X)).ravel()
        return QuadratureRule(pts, w, degree, domain)
    raise ValueError(f"unknown quadrature domain {domain!r}; supported: 'triangle', 'edge'")


def _reference_basis():
    """Monomial coefficients of the six reference shape functions.

    Dual to edge normal moments taken in the cyclic (outward-normal) sense;
    returns (a, B) with shape ((6, 2), (6, 2, 2)) so that
    phi_b(x) = a[b] + B[b] @ x.
    """
    s, w = _gauss01(2)                       # exact for the quadratic integrands
    mono_a = np.array([[1, 0], [0, 0], [0, 0], [0, 1], [0, 0], [0, 0]], dtype=float)
    mono_B = np.array([
        [[0, 0], [0, 0]], [[1, 0], [0, 0]], [[0, 1], [0, 0]],
        [[0, 0], [0, 0]], [[0, 0], [1, 0]], [[0, 0], [0, 1]],
    ], dtype=float)
    lam = np.zeros((6, 6))
    for loc in range(3):
        a = REF_VERTICES[(loc + 1) % 3]
        b = REF_VERTICES[(loc + 2) % 3]
        t = b - a
        length = np.hypot(*t)
        n = np.array([t[1], -t[0]]) / length
        x = a[None, :] + s[:, None] * t[None, :]
        vals = mono_a[:, None, :] + np.einsum("bij,qj->bqi", mono_B, x)
        vn = vals @ n
        lam[2 * loc] = length * (vn * w).sum(axis=1)
        lam[2 * loc + 1] = length * (vn * (2 * s - 1) * w).sum(axis=1)
    coeff = np.linalg.inv(lam)               # column b: monomial coefficients of phi_b
    ref_a = np.stack([coeff[0], coeff[3]], axis=1)
    ref_B = coeff[[1, 2, 4, 5]].T.reshape(6, 2, 2)
    return ref_a, ref_B


REF_BDM_A, REF_BDM_B = _reference_basis()


def tabulate_bdm1(points: np.ndarray):
    """Reference shape functions at reference points.

    Returns (values, divergences) with shapes (6, n, 2) and (6,).  Points must
    lie in the closed reference triangle.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    lam = np.stack([1.0 - pts[:, 0] - pts[:, 1], pts[:, 0], pts[:, 1]])
    if np.any(lam < -1e-12):
        raise ValueError("evaluation point outside the reference cell")
    vals = REF_BDM_A[:, None, :] + np.einsum("bij,qj->bqi", REF_BDM_B, pts)
    divs = np.trace(REF_BDM_B, axis1=1, axis2=2)
    return vals, divs


def cell_jacobians(mesh: Mesh, cells=None):
    """Affine map data (J, detJ) per cell; detJ equals twice the cell area."""
    idx = np.arange(mesh.n_cells) if cells is None else np.atleast_1d(cells)
    p = mesh.vertices[mesh.cells[idx]]
    J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=-1)
    detJ = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    return J, detJ


def piola_map(mesh: Mesh, cell: int, ref_values: np.ndarray) -> np.ndarray:
    """Contravariant map of reference vector values onto one physical cell."""
    J, detJ = cell_jacobians(mesh, [cell])
    if not detJ[0] > 1e-14 * mesh.h_cell[cell] ** 2:
        raise ValueError(f"cell {cell} is degenerate or inverted (detJ={detJ[0]:.3e})")
    return np.einsum("ij,...j->...i", J[0], np.asarray(ref_values)) / detJ[0]


class Bdm1Space:
    """Global H(div)-conforming linear vector space on a mesh.

    Per cell the basis is stored in centered monomial form,
    phi(x) = lin_a + lin_B @ (x - centroid), with local dof order
    (edge 0 mean, edge 0 first moment, edge 1 mean, ...).
    """

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        nc = mesh.n_cells
        self.n_dofs = 2 * mesh.n_facets
        cf = mesh.cell_facets
        self.dofmap = np.empty((nc, 6), dtype=np.int64)
        self.dofmap[:, 0::2] = 2 * cf
        self.dofmap[:, 1::2] = 2 * cf + 1

        # +1 where the facet's global lo->hi direction agrees with the cell's
        # cyclic traversal, i.e. where n_e is outward for this cell.
        cyc_a = mesh.cells[:, [1, 2, 0]]
        cyc_b = mesh.cells[:, [2, 0, 1]]
        self.orient = np.where(cyc_a < cyc_b, 1, -1).astype(np.int8)

        J, detJ = cell_jacobians(mesh)
        Jinv = np.empty_like(J)
        Jinv[:, 0, 0], Jinv[:, 1, 1] = J[:, 1, 1], J[:, 0, 0]
        Jinv[:, 0, 1], Jinv[:, 1, 0] = -J[:, 0, 1], -J[:, 1, 0]
        Jinv /= detJ[:, None, None]
        scale = 1.0 / detJ
        self.lin_B = np.einsum("cij,bjk,ckl->cbil", J, REF_BDM_B, Jinv) * scale[:, None, None, None]
        a = np.einsum("cij,bj->cbi", J, REF_BDM_A) * scale[:, None, None]
        p0 = mesh.vertices[mesh.cells[:, 0]]
        shift = mesh.cell_centroids - p0
        self.lin_a = a + np.einsum("cbij,cj->cbi", self.lin_B, shift)

        sign = np.repeat(self.orient, 2, axis=1).astype(float)
        sign[:, 1::2] = 1.0                   # odd moments need no correction
        self.lin_a *= sign[:, :, None]
        self.lin_B *= sign[:, :, None, None]
        self.div = np.trace(self.lin_B, axis1=2, axis2=3)

        bdofs = np.concatenate([2 * mesh.boundary_facets, 2 * mesh.boundary_facets + 1])
        self.boundary_dofs = np.sort(bdofs)
        mask = np.ones(self.n_dofs, dtype=bool)
        mask[self.boundary_dofs] = False
        self.interior_dofs = np.flatnonzero(mask)


class Dg0Space:
    """Piecewise constants; one dof per cell."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        self.n_dofs = mesh.n_cells


@dataclass(eq=False)
class Field:
    """Coefficient vector bound to its space."""

    space: object
    coeffs: np.ndarray


def bdm_interpolate(space: Bdm1Space, f, degree: int = 4) -> Field:
    """Edge-moment interpolation of a callable f(points (n,2)) -> (n,2)."""
    mesh = space.mesh
    s, w = _gauss01((degree + 2) // 2)
    lo = mesh.vertices[mesh.facets[:, 0]]
    t = mesh.vertices[mesh.facets[:, 1]] - lo
    x = lo[:, None, :] + s[None, :, None] * t[:, None, :]
    vals = np.asarray(f(x.reshape(-1, 2))).reshape(mesh.n_facets, s.size, 2)
    n_e = np.stack([t[:, 1], -t[:, 0]], axis=1) / mesh.h_facet[:, None]
    vn = np.einsum("fqi,fi->fq", vals, n_e)
    coeffs = np.empty(space.n_dofs)
    coeffs[0::2] = mesh.h_facet * (vn * w).sum(axis=1)
    coeffs[1::2] = mesh.h_facet * (vn * (2 * s - 1) * w).sum(axis=1)
    return Field(space, coeffs)


def bdm_evaluate(space: Bdm1Space, coeffs: np.ndarray, cell_idx, points) -> np.ndarray:
    """Field values at physical points, one point set per listed cell."""
    cell_idx = np.atleast_1d(cell_idx)
    pts = np.asarray(points, dtype=float)
    d = coeffs[space.dofmap[cell_idx]]                       # (m, 6)
    rel = pts - space.mesh.cell_centroids[cell_idx][:, None, :]
    vals = np.einsum("cb,cbi->ci", d, space.lin_a[cell_idx])[:, None, :]
    vals = vals + np.einsum("cb,cbij,cqj->cqi", d, space.lin_B[cell_idx], rel)
    return vals


def bdm_cell_gradients(space: Bdm1Space, coeffs: np.ndarray) -> np.ndarray:
    """Constant velocity gradient per cell, shape (nc, 2, 2)."""
    d = coeffs[space.dofmap]
    return np.einsum("cb,cbij->cij", d, space.lin_B)


def bdm_cell_divergence(space: Bdm1Space, coeffs: np.ndarray) -> np.ndarray:
    """Constant divergence per cell."""
    return np.einsum("cb,cb->c", coeffs[space.dofmap], space.div)


def bdm_facet_trace(space: Bdm1Space, coeffs: np.ndarray, facet_ids, side: int,
                    s: np.ndarray) -> np.ndarray:
    """Trace from one side of the given facets at lo->hi parameters s."""
    mesh = space.mesh
    facet_ids = np.atleast_1d(facet_ids)
    cells = mesh.facet_cells[facet_ids, side]
    if np.any(cells < 0):
        raise ValueError("requested trace from the empty side of a boundary facet")
    lo = mesh.vertices[mesh.facets[facet_ids, 0]]
    t = mesh.vertices[mesh.facets[facet_ids, 1]] - lo
    pts = lo[:, None, :] + s[None, :, None] * t[:, None, :]
    return bdm_evaluate(space, coeffs, cells, pts)


def dg0_interpolate(space: Dg0Space, f) -> Field:
    """Centroid interpolation of a callable f(points (n,2)) -> (n,)."""
    return Field(space, np.asarray(f(space.mesh.cell_centroids), dtype=float))
