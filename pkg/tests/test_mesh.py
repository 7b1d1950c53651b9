"""Mesh construction, refinement and regularity checks."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hdivtopo.mesh import (Mesh, _build_facets, check_mesh_regularity,
                           classify_facets, generate_rect_mesh, refine_uniform)


def test_unit_square_counts():
    mesh = generate_rect_mesh(2, 2, 1.0, 1.0)
    assert mesh.n_cells == 8
    assert mesh.n_vertices == 9
    assert mesh.interior_facets.size == 8
    assert mesh.boundary_facets.size == 8
    assert mesh.n_facets == 16


def test_cell_areas_positive_and_sum_to_domain():
    mesh = generate_rect_mesh(6, 4, 1.5, 1.0)
    assert np.all(mesh.cell_areas > 0.0)
    assert np.isclose(mesh.cell_areas.sum(), 1.5, rtol=1e-14)
    # congruent right triangles: every cell has area |Omega| / n_cells
    assert np.allclose(mesh.cell_areas, 1.5 / mesh.n_cells, rtol=1e-13)


def test_h_max_matches_brute_force():
    mesh = generate_rect_mesh(48, 32, 1.5, 1.0)
    h = 0.0
    for tri in mesh.vertices[mesh.cells]:
        for i in range(3):
            h = max(h, float(np.linalg.norm(tri[i] - tri[(i + 1) % 3])))
    assert np.isclose(mesh.h_max, h, rtol=1e-14)
    assert np.isclose(mesh.h_max, np.sqrt(2.0) / 32.0, rtol=1e-12)


def test_facets_sorted_lo_hi():
    mesh = generate_rect_mesh(3, 2, 1.5, 1.0)
    assert np.all(mesh.facets[:, 0] < mesh.facets[:, 1])
    assert np.all(mesh.h_facet > 0.0)
    inter = mesh.interior_facets
    assert np.all(mesh.facet_cells[inter, 0] < mesh.facet_cells[inter, 1])


def test_facet_normals_point_plus_to_minus():
    mesh = generate_rect_mesh(4, 3, 1.0, 1.0)
    inter = mesh.interior_facets
    plus, minus = mesh.facet_cells[inter, 0], mesh.facet_cells[inter, 1]
    d = mesh.cell_centroids[minus] - mesh.cell_centroids[plus]
    assert np.all(np.einsum("ij,ij->i", d, mesh.facet_normals[inter]) > 0.0)
    bnd = mesh.boundary_facets
    mid = 0.5 * mesh.vertices[mesh.facets[bnd]].sum(axis=1)
    out = mid - mesh.cell_centroids[mesh.facet_cells[bnd, 0]]
    assert np.all(np.einsum("ij,ij->i", out, mesh.facet_normals[bnd]) > 0.0)


@settings(max_examples=20, deadline=None)
@given(nx=st.integers(1, 6), ny=st.integers(1, 6),
       lx=st.floats(0.5, 3.0), ly=st.floats(0.5, 3.0))
def test_counts_and_euler_formula(nx, ny, lx, ly):
    mesh = generate_rect_mesh(nx, ny, lx, ly)
    assert mesh.n_cells == 2 * nx * ny
    assert mesh.n_vertices == (nx + 1) * (ny + 1)
    assert mesh.boundary_facets.size == 2 * (nx + ny)
    assert mesh.n_vertices - mesh.n_facets + mesh.n_cells == 1
    assert np.isclose(mesh.cell_areas.sum(), lx * ly, rtol=1e-12)


def test_refine_counts_and_parent_map():
    coarse = generate_rect_mesh(2, 2, 1.0, 1.0)
    fine = refine_uniform(coarse)
    assert fine.n_cells == 32
    assert fine.level == coarse.level + 1
    assert np.array_equal(fine.parent, np.repeat(np.arange(8), 4))


def test_refine_halves_diameters_and_keeps_area():
    coarse = generate_rect_mesh(3, 2, 1.5, 1.0)
    fine = refine_uniform(coarse)
    assert np.allclose(fine.h_cell, 0.5 * coarse.h_cell[fine.parent], rtol=1e-13)
    child_area = np.add.reduceat(fine.cell_areas, np.arange(0, fine.n_cells, 4))
    assert np.allclose(child_area, coarse.cell_areas, rtol=1e-13)


def test_children_lie_inside_parent():
    coarse = generate_rect_mesh(2, 3, 1.0, 1.0)
    fine = refine_uniform(coarse)
    tri = coarse.vertices[coarse.cells[fine.parent]]
    T = np.stack([tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]], axis=-1)
    rhs = fine.cell_centroids - tri[:, 0]
    lam = np.linalg.solve(T, rhs[..., None])[..., 0]
    assert np.all(lam > -1e-12)
    assert np.all(lam.sum(axis=1) < 1.0 + 1e-12)


def test_classify_facets_counts():
    interior, boundary = classify_facets(generate_rect_mesh(1, 1, 1.0, 1.0))
    assert interior.size == 1
    assert boundary.size == 4

    mesh = generate_rect_mesh(2, 2, 1.0, 1.0)
    interior, boundary = classify_facets(mesh)
    assert interior.size == 8
    assert boundary.size == 8

    _, boundary_fine = classify_facets(refine_uniform(mesh))
    assert boundary_fine.size == 2 * boundary.size


def test_regularity_constants_survive_refinement():
    mesh = generate_rect_mesh(6, 4, 1.5, 1.0)
    reports = []
    for _ in range(3):
        reports.append(check_mesh_regularity(mesh))
        mesh = refine_uniform(mesh)
    assert all(r.ok for r in reports)
    for key in ("c_shape", "c_contact", "c_boundary"):
        vals = [getattr(r, key) for r in reports]
        assert np.allclose(vals, vals[0], rtol=1e-12)


def test_regularity_flags_degenerate_cell():
    v = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, 1e-8]])
    c = np.array([[0, 1, 2]])
    mesh = Mesh(v, c, *_build_facets(v, c))
    report = check_mesh_regularity(mesh)
    assert not report.ok
    assert "shape" in report.flags


@pytest.mark.parametrize("nx,ny,lx,ly", [
    (0, 2, 1.0, 1.0), (2, 0, 1.0, 1.0), (2, 2, 0.0, 1.0), (2, 2, 1.0, -1.0),
])
def test_bad_mesh_parameters_rejected(nx, ny, lx, ly):
    with pytest.raises(ValueError):
        generate_rect_mesh(nx, ny, lx, ly)
