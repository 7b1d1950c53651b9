"""Reference element, quadrature rules and interpolation operators."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hdivtopo.elements import (REF_VERTICES, Bdm1Space, Dg0Space, _gauss01,
                               bdm_cell_divergence, bdm_cell_gradients,
                               bdm_evaluate, bdm_facet_trace, bdm_interpolate,
                               cell_jacobians, dg0_interpolate, piola_map,
                               quadrature, tabulate_bdm1)
from hdivtopo.mesh import Mesh, _build_facets, generate_rect_mesh

MESH = generate_rect_mesh(4, 3, 1.0, 1.0)
SPACE = Bdm1Space(MESH)


def ref_monomial_integral(a, b):
    # int over the reference triangle of x^a y^b = a! b! / (a+b+2)!
    from math import factorial
    return factorial(a) * factorial(b) / factorial(a + b + 2)


def test_triangle_quadrature_exactness():
    rule = quadrature("triangle", 4)
    assert np.all(rule.weights > 0.0)
    assert np.isclose(rule.weights.sum(), 0.5, rtol=1e-14)
    x, y = rule.points.T
    assert np.isclose((rule.weights * x ** 2 * y ** 2).sum(),
                      ref_monomial_integral(2, 2), rtol=1e-13)
    rule7 = quadrature("triangle", 7)
    x, y = rule7.points.T
    assert np.isclose((rule7.weights * x ** 3 * y ** 4).sum(),
                      ref_monomial_integral(3, 4), rtol=1e-12)


def test_edge_quadrature_exactness():
    rule = quadrature("edge", 3)
    assert np.isclose(rule.weights.sum(), 1.0, rtol=1e-14)
    assert np.isclose((rule.weights * rule.points ** 3).sum(), 0.25, rtol=1e-13)


@pytest.mark.parametrize("domain,degree", [
    ("triangle", 0), ("triangle", 51), ("edge", -2), ("square", 3),
])
def test_quadrature_rejects_bad_requests(domain, degree):
    with pytest.raises(ValueError):
        quadrature(domain, degree)


def test_reference_basis_dual_to_edge_moments():
    # the defining functionals are scaled normal moments on the cyclic edges;
    # applying them to the tabulated basis must give the identity
    s, w = _gauss01(3)
    lam = np.zeros((6, 6))
    for loc in range(3):
        a = REF_VERTICES[(loc + 1) % 3]
        b = REF_VERTICES[(loc + 2) % 3]
        t = b - a
        length = float(np.hypot(*t))
        n = np.array([t[1], -t[0]]) / length
        vals, _ = tabulate_bdm1(a[None, :] + s[:, None] * t[None, :])
        vn = vals @ n
        lam[2 * loc] = length * (vn * w).sum(axis=1)
        lam[2 * loc + 1] = length * (vn * (2 * s - 1) * w).sum(axis=1)
    assert np.allclose(lam, np.eye(6), atol=1e-12)


def test_tabulate_rejects_outside_points():
    with pytest.raises(ValueError):
        tabulate_bdm1(np.array([[0.7, 0.7]]))


def test_piola_map_divergence_theorem():
    # area integral of div(v) equals the boundary flux, cell by cell
    mesh = generate_rect_mesh(3, 2, 1.5, 1.0)
    s, w = _gauss01(3)
    for c in (0, 3, 7):
        tri = mesh.vertices[mesh.cells[c]]
        for b in range(6):
            flux = 0.0
            for loc in range(3):
                a_ref = REF_VERTICES[(loc + 1) % 3]
                t_ref = REF_VERTICES[(loc + 2) % 3] - a_ref
                ref_vals, ref_div = tabulate_bdm1(a_ref[None, :] + s[:, None] * t_ref[None, :])
                phys = piola_map(mesh, c, ref_vals[b])
                t_phys = tri[(loc + 2) % 3] - tri[(loc + 1) % 3]
                n_scaled = np.array([t_phys[1], -t_phys[0]])  # length times outward normal
                flux += (w * (phys @ n_scaled)).sum()
            assert np.isclose(flux, 0.5 * ref_div[b], atol=1e-13)


def test_piola_map_rejects_degenerate_cell():
    v = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    c = np.array([[0, 1, 2]])
    mesh = Mesh(v, c, *_build_facets(v, c))
    with pytest.raises(ValueError):
        piola_map(mesh, 0, np.ones((3, 2)))


def test_space_counts_and_dof_split():
    assert SPACE.n_dofs == 2 * MESH.n_facets
    assert SPACE.boundary_dofs.size == 2 * MESH.boundary_facets.size
    assert SPACE.interior_dofs.size + SPACE.boundary_dofs.size == SPACE.n_dofs
    assert np.intersect1d(SPACE.interior_dofs, SPACE.boundary_dofs).size == 0


def test_interpolation_reproduces_linear_fields():
    def f(x):
        return np.stack([1.0 + 2.0 * x[:, 0] + x[:, 1],
                         4.0 - x[:, 0] - 2.0 * x[:, 1]], axis=1)

    u = bdm_interpolate(SPACE, f)
    pts = np.array([[0.31, 0.17], [0.05, 0.02], [0.21, 0.09]])
    # place each point in a cell by brute force
    for pt in pts:
        tri = MESH.vertices[MESH.cells]
        T = np.stack([tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]], axis=-1)
        lam = np.linalg.solve(T, (pt - tri[:, 0])[..., None])[..., 0]
        inside = (lam > -1e-12).all(axis=1) & (lam.sum(axis=1) < 1 + 1e-12)
        c = int(np.flatnonzero(inside)[0])
        val = bdm_evaluate(SPACE, u.coeffs, [c], pt[None, None, :])[0, 0]
        assert np.allclose(val, f(pt[None, :])[0], atol=1e-12)
    grads = bdm_cell_gradients(SPACE, u.coeffs)
    assert np.allclose(grads, np.array([[2.0, 1.0], [-1.0, -2.0]]), atol=1e-12)
    assert np.allclose(bdm_cell_divergence(SPACE, u.coeffs), 0.0, atol=1e-12)


def test_divergence_of_div_free_linear_vanishes():
    u = bdm_interpolate(SPACE, lambda x: np.stack([x[:, 0], -x[:, 1]], axis=1))
    assert np.max(np.abs(bdm_cell_divergence(SPACE, u.coeffs))) < 1e-12


def test_interpolation_error_second_order_for_quadratics():
    def f(x):
        return np.stack([x[:, 0] ** 2, np.zeros(x.shape[0])], axis=1)

    rule = quadrature("triangle", 8)
    errs = []
    mesh = generate_rect_mesh(4, 4, 1.0, 1.0)
    for _ in range(2):
        V = Bdm1Space(mesh)
        u = bdm_interpolate(V, f)
        tri = mesh.vertices[mesh.cells]
        T = np.stack([tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]], axis=-1)
        qp = tri[:, 0][:, None, :] + np.einsum("cij,qj->cqi", T, rule.points)
        qw = 2.0 * mesh.cell_areas[:, None] * rule.weights[None, :]
        vals = bdm_evaluate(V, u.coeffs, np.arange(mesh.n_cells), qp)
        diff = vals - f(qp.reshape(-1, 2)).reshape(qp.shape)
        errs.append(np.sqrt(np.einsum("cq,cqi,cqi->", qw, diff, diff)))
        from hdivtopo.mesh import refine_uniform
        mesh = refine_uniform(mesh)
    assert 3.5 < errs[0] / errs[1] < 4.5


def test_normal_trace_continuous_at_sample_points():
    rng = np.random.default_rng(7)
    coeffs = rng.standard_normal(SPACE.n_dofs)
    s = np.array([0.2, 0.5, 0.9])
    inter = MESH.interior_facets
    tp = bdm_facet_trace(SPACE, coeffs, inter, 0, s)
    tm = bdm_facet_trace(SPACE, coeffs, inter, 1, s)
    n = MESH.facet_normals[inter]
    jump = np.einsum("fqi,fi->fq", tp - tm, n)
    assert np.max(np.abs(jump)) < 1e-12 * np.abs(coeffs).max()


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_global_divergence_theorem(seed):
    # sum of cell divergences equals the net boundary flux read off the dofs
    rng = np.random.default_rng(seed)
    coeffs = rng.standard_normal(SPACE.n_dofs)
    lhs = MESH.cell_areas @ bdm_cell_divergence(SPACE, coeffs)
    lo = MESH.vertices[MESH.facets[:, 0]]
    t = MESH.vertices[MESH.facets[:, 1]] - lo
    n_e = np.stack([t[:, 1], -t[:, 0]], axis=1) / MESH.h_facet[:, None]
    sign = np.round(np.einsum("fi,fi->f", n_e, MESH.facet_normals))
    bnd = MESH.boundary_facets
    rhs = float(sign[bnd] @ coeffs[2 * bnd])
    assert np.isclose(lhs, rhs, atol=1e-10 * max(1.0, np.abs(coeffs).max()))


def test_boundary_facet_has_no_minus_trace():
    coeffs = np.zeros(SPACE.n_dofs)
    with pytest.raises(ValueError):
        bdm_facet_trace(SPACE, coeffs, MESH.boundary_facets[:1], 1, np.array([0.5]))


def test_dg0_interpolation_hits_centroids():
    Q = Dg0Space(MESH)
    rho = dg0_interpolate(Q, lambda x: x[:, 0] + 2.0 * x[:, 1])
    expect = MESH.cell_centroids[:, 0] + 2.0 * MESH.cell_centroids[:, 1]
    assert np.allclose(rho.coeffs, expect, rtol=1e-14)


def test_cell_jacobians_match_areas():
    J, detJ = cell_jacobians(MESH)
    assert np.allclose(detJ, 2.0 * MESH.cell_areas, rtol=1e-14)
    assert J.shape == (MESH.n_cells, 2, 2)
