"""Structured triangular meshes with nested uniform refinement.

Conventions used throughout the package:

* cells are stored counterclockwise; local edge ``l`` of a cell runs from
  vertex ``(l+1) % 3`` to vertex ``(l+2) % 3`` (the edge opposite vertex
  ``l``), so rotating its tangent by -90 degrees gives the outward normal;
* facets are stored as vertex pairs ``(lo, hi)`` with ``lo < hi``; the facet
  normal is the outward normal of the "plus" cell (the incident cell with the
  smaller index), and boundary facets keep ``-1`` in the minus slot;
* uniform refinement places the midpoint of coarse facet ``f`` at vertex
  ``n_vertices + f`` and emits the four children of cell ``c`` contiguously
  at ``4c .. 4c+3`` (three corner children, then the central one), which is
  what the field-transfer code relies on.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MeshError(RuntimeError):
    """A structural mesh invariant does not hold."""


@dataclass
class RegularityReport:
    """Shape-regularity constants of a mesh and the floor they were checked against."""

    c_shape: float
    c_contact: float
    c_boundary: float
    floor: float
    flags: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.flags


@dataclass(eq=False)
class Mesh:
    """Conforming triangulation with precomputed facet topology and sizes."""

    vertices: np.ndarray          # (nv, 2) float
    cells: np.ndarray             # (nc, 3) int, CCW
    facets: np.ndarray            # (nf, 2) int, lo < hi
    facet_cells: np.ndarray       # (nf, 2) int, [plus, minus], minus == -1 on boundary
    facet_local: np.ndarray       # (nf, 2) int, local edge index in plus/minus cell
    facet_normals: np.ndarray     # (nf, 2) float, unit, outward from plus cell
    level: int = 0
    parent: np.ndarray | None = None   # (nc,) coarse cell index, None on a root mesh

    def __post_init__(self):
        p = self.vertices
        c = self.cells
        e1 = p[c[:, 1]] - p[c[:, 0]]
        e2 = p[c[:, 2]] - p[c[:, 0]]
        self.cell_areas = 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
        edges = p[c] - p[c[:, [1, 2, 0]]]
        self.h_cell = np.sqrt((edges ** 2).sum(-1)).max(axis=1)
        tv = p[self.facets[:, 1]] - p[self.facets[:, 0]]
        self.h_facet = np.sqrt((tv ** 2).sum(-1))
        self.cell_centroids = p[c].mean(axis=1)
        self.interior_facets = np.flatnonzero(self.facet_cells[:, 1] >= 0)
        self.boundary_facets = np.flatnonzero(self.facet_cells[:, 1] < 0)
        for a in (self.vertices, self.cells, self.facets, self.facet_cells,
                  self.facet_local, self.facet_normals):
            a.setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    @property
    def n_facets(self) -> int:
        return self.facets.shape[0]

    @property
    def h_max(self) -> float:
        return float(self.h_cell.max())

    def validate(self):
        """Raise MeshError if orientation, adjacency or normal conventions are broken."""
        bad = []
        if np.any(self.cell_areas <= 0.0):
            bad.append("non-positive cell area (orientation or degeneracy)")
        occ = np.bincount(self._facet_of_cell_edge().ravel(), minlength=self.n_facets)
        if np.any(occ < 1) or np.any(occ > 2):
            bad.append("facet incident to zero or more than two cells")
        inter = self.interior_facets
        if inter.size:
            plus, minus = self.facet_cells[inter, 0], self.facet_cells[inter, 1]
            if np.any(plus >= minus):
                bad.append("plus cell index not smaller than minus cell index")
            n_minus = _cyclic_outward_normals(self.vertices, self.cells,
                                              minus, self.facet_local[inter, 1])
            if np.any(self.facet_normals[inter] + n_minus != 0.0):
                bad.append("interior facet normals are not exact opposites across sides")
        if bad:
            raise MeshError("; ".join(bad))

    def _facet_of_cell_edge(self) -> np.ndarray:
        """(nc, 3) facet index of each local cell edge."""
        if not hasattr(self, "_cell_facets"):
            loc = self.cells[:, [[1, 2], [2, 0], [0, 1]]]
            key = np.sort(loc, axis=-1)
            flat = key[..., 0].astype(np.int64) * self.n_vertices + key[..., 1]
            fkey = self.facets[:, 0].astype(np.int64) * self.n_vertices + self.facets[:, 1]
            order = np.argsort(fkey)
            pos = np.searchsorted(fkey[order], flat.ravel())
            cf = order[pos].reshape(self.n_cells, 3)
            cf.setflags(write=False)
            self._cell_facets = cf
        return self._cell_facets

    @property
    def cell_facets(self) -> np.ndarray:
        return self._facet_of_cell_edge()


def _cyclic_outward_normals(vertices, cells, cell_idx, local_idx):
    """Unit outward normals of the given (cell, local edge) pairs."""
    a = cells[cell_idx, (local_idx + 1) % 3]
    b = cells[cell_idx, (local_idx + 2) % 3]
    t = vertices[b] - vertices[a]
    n = np.stack([t[:, 1], -t[:, 0]], axis=1)
    return n / np.sqrt((t ** 2).sum(-1))[:, None]


def _build_facets(vertices, cells):
    nc = cells.shape[0]
    nv = vertices.shape[0]
    loc = cells[:, [[1, 2], [2, 0], [0, 1]]]              # (nc, 3, 2) cyclic pairs
    key = np.sort(loc, axis=-1).reshape(-1, 2)
    flat = key[:, 0].astype(np.int64) * nv + key[:, 1]
    uniq, inverse = np.unique(flat, return_inverse=True)
    nf = uniq.shape[0]
    facets = np.stack([uniq // nv, uniq % nv], axis=1).astype(cells.dtype)

    owner_cell = np.repeat(np.arange(nc), 3)
    owner_local = np.tile(np.arange(3), nc)
    order = np.argsort(inverse, kind="stable")            # plus side = smaller cell index
    finv = inverse[order]
    first = np.ones(finv.size, dtype=bool)
    first[1:] = finv[1:] != finv[:-1]

    facet_cells = np.full((nf, 2), -1, dtype=cells.dtype)
    facet_local = np.full((nf, 2), -1, dtype=cells.dtype)
    side = np.where(first, 0, 1)                          # at most two incident cells
    facet_cells[finv, side] = owner_cell[order]
    facet_local[finv, side] = owner_local[order]

    normals = _cyclic_outward_normals(vertices, cells, facet_cells[:, 0], facet_local[:, 0])
    return facets, facet_cells, facet_local, normals


def generate_rect_mesh(nx: int, ny: int, lx: float, ly: float) -> Mesh:
    """Uniform criss-cross-free triangulation of (0, lx) x (0, ly).

    Each of the nx*ny quads is split along its lower-left to upper-right
    diagonal, giving 2*nx*ny congruent right triangles.
    """
    if nx < 1 or ny < 1:
        raise ValueError(f"subdivision counts must be positive, got nx={nx}, ny={ny}")
    if lx <= 0 or ly <= 0:
        raise ValueError(f"domain lengths must be positive, got lx={lx}, ly={ly}")
    x = np.linspace(0.0, lx, nx + 1)
    y = np.linspace(0.0, ly, ny + 1)
    X, Y = np.meshgrid(x, y)
    vertices = np.stack([X.ravel(), Y.ravel()], axis=1)

    i, j = np.meshgrid(np.arange(nx), np.arange(ny))
    v00 = (j * (nx + 1) + i).ravel()
    v10 = v00 + 1
    v01 = v00 + (nx + 1)
    v11 = v01 + 1
    lower = np.stack([v00, v10, v11], axis=1)
    upper = np.stack([v00, v11, v01], axis=1)
    cells = np.empty((2 * nx * ny, 3), dtype=np.int64)
    cells[0::2] = lower
    cells[1::2] = upper

    mesh = Mesh(vertices, cells, *_build_facets(vertices, cells))
    mesh.validate()
    return mesh


def refine_uniform(mesh: Mesh) -> Mesh:
    """Red refinement: every cell is split into four similar children.

    Child cells keep the parent orientation; diameters halve exactly and the
    children of cell c occupy indices 4c..4c+3 on the fine mesh.
    """
    p, c = mesh.vertices, mesh.cells
    mid = 0.5 * (p[mesh.facets[:, 0]] + p[mesh.facets[:, 1]])
    vertices = np.concatenate([p, mid], axis=0)

    cf = mesh.cell_facets                       # local edge l is opposite vertex l
    m = mesh.n_vertices + cf                    # midpoint vertex of each local edge
    v0, v1, v2 = c[:, 0], c[:, 1], c[:, 2]
    m12, m20, m01 = m[:, 0], m[:, 1], m[:, 2]
    children = np.stack([
        np.stack([v0, m01, m20], axis=1),
        np.stack([v1, m12, m01], axis=1),
        np.stack([v2, m20, m12], axis=1),
        np.stack([m01, m12, m20], axis=1),
    ], axis=1).reshape(-1, 3)

    fine = Mesh(vertices, children, *_build_facets(vertices, children),
                level=mesh.level + 1,
                parent=np.repeat(np.arange(mesh.n_cells), 4))
    fine.validate()
    return fine


def classify_facets(mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
    """Partition facet indices into (interior, boundary), re-deriving occupancy.

    Raises MeshError when the stored adjacency disagrees with the cell data.
    """
    occ = np.bincount(mesh.cell_facets.ravel(), minlength=mesh.n_facets)
    interior = np.flatnonzero(occ == 2)
    boundary = np.flatnonzero(occ == 1)
    if interior.size + boundary.size != mesh.n_facets:
        raise MeshError("facet incident to zero or more than two cells")
    if (not np.array_equal(interior, mesh.interior_facets)
            or not np.array_equal(boundary, mesh.boundary_facets)):
        raise MeshError("stored facet adjacency disagrees with cell connectivity")
    return interior, boundary


def check_mesh_regularity(mesh: Mesh, floor: float = 1e-3) -> RegularityReport:
    """Mesh-quality ratios: cell shape, facet/cell contact and boundary sizing.

    c_shape    = min_K |K| / h_K^2
    c_contact  = min over incident (facet, cell) pairs of h_F / h_K
    c_boundary = min over boundary facets of h_F / h_max
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        c_shape = float(np.min(mesh.cell_areas / mesh.h_cell ** 2))
        ratio = mesh.h_facet[:, None] / mesh.h_cell[mesh.facet_cells]
        ratio[mesh.facet_cells < 0] = np.inf     # ignore the empty boundary slot
        c_contact = float(np.min(ratio))
        c_boundary = float(np.min(mesh.h_facet[mesh.boundary_facets] / mesh.h_max))
    flags = [name for name, val in [("shape", c_shape), ("contact", c_contact),
                                    ("boundary", c_boundary)] if not val > floor]
    return RegularityReport(c_shape, c_contact, c_boundary, floor, flags)
