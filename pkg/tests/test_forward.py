"""Boundary projection, saddle solves and manufactured-solution convergence."""

import numpy as np
import pytest

from hdivtopo.elements import Bdm1Space, Dg0Space, bdm_interpolate
from hdivtopo.forms import AlphaModel, BrokenForms, divergence_norm
from hdivtopo.forward import (SaddleSolver, check_mms, estimate_inf_sup,
                              inf_sup_spectrum, mms_solution,
                              project_boundary_data, solve_stokes,
                              velocity_error_norms)
from hdivtopo.mesh import Mesh, _build_facets, generate_rect_mesh, refine_uniform


def zero_g(x):
    return np.zeros_like(x)


def test_projection_of_zero_datum_is_zero():
    mesh = generate_rect_mesh(4, 4, 1.0, 1.0)
    bdata = project_boundary_data(mesh, Bdm1Space(mesh), zero_g)
    assert np.array_equal(bdata.dof_values, np.zeros(2 * mesh.n_facets))
    assert bdata.projection_error == 0.0
    assert bdata.net_flux == 0.0


def test_projection_reproduces_linear_data():
    mesh = generate_rect_mesh(3, 4, 1.5, 1.0)

    def g(x):
        return np.stack([1.0 + 2.0 * x[:, 0] - x[:, 1],
                         0.5 * x[:, 0] + x[:, 1]], axis=1)

    bdata = project_boundary_data(mesh, Bdm1Space(mesh), g)
    assert bdata.projection_error < 1e-12
    s = np.array([0.1, 0.6])
    got = bdata.trace(mesh.boundary_facets[:5], s)
    lo = mesh.vertices[mesh.facets[mesh.boundary_facets[:5], 0]]
    t = mesh.vertices[mesh.facets[mesh.boundary_facets[:5], 1]] - lo
    pts = lo[:, None, :] + s[None, :, None] * t[:, None, :]
    assert np.allclose(got, g(pts.reshape(-1, 2)).reshape(got.shape), atol=1e-12)


def test_projection_error_second_order():
    u_exact = mms_solution(1.0, AlphaModel(1.0, 0.1))["u"]
    mesh = generate_rect_mesh(8, 8, 1.0, 1.0)
    errs = []
    for _ in range(2):
        errs.append(project_boundary_data(mesh, Bdm1Space(mesh), u_exact).projection_error)
        mesh = refine_uniform(mesh)
    assert 3.5 < errs[0] / errs[1] < 4.5


def test_trace_rejects_interior_facets():
    mesh = generate_rect_mesh(3, 3, 1.0, 1.0)
    bdata = project_boundary_data(mesh, Bdm1Space(mesh), zero_g)
    with pytest.raises(ValueError):
        bdata.trace(mesh.interior_facets[:1], np.array([0.5]))


def test_solver_reproduces_linear_exactly():
    # with the zeroth-order term off and linear divergence-free data the
    # discrete solution is the datum itself and the pressure is constant
    mesh = generate_rect_mesh(4, 4, 1.0, 1.0)
    V = Bdm1Space(mesh)
    forms = BrokenForms(mesh, V)

    def g(x):
        return np.stack([2.0 * x[:, 0] + 3.0 * x[:, 1],
                         1.0 * x[:, 0] - 2.0 * x[:, 1]], axis=1)

    bdata = project_boundary_data(mesh, V, g)
    sol = solve_stokes(forms, bdata, alpha_cells=np.zeros(mesh.n_cells))
    exact = bdm_interpolate(V, g)
    err = forms.field_norms(sol.u.coeffs - exact.coeffs)["h1"]
    scale = forms.field_norms(exact.coeffs)["h1"]
    assert err < 1e-10 * scale
    assert np.max(np.abs(sol.p.coeffs)) < 1e-8 * scale
    assert abs(mesh.cell_areas @ sol.p.coeffs) < 1e-10 * scale


def test_solutions_divergence_free_and_pressure_mean_zero():
    mesh = generate_rect_mesh(8, 8, 1.0, 1.0)
    V = Bdm1Space(mesh)
    forms = BrokenForms(mesh, V)
    model = AlphaModel(100.0, 0.1)
    exact = mms_solution(1.0, model)
    bdata = project_boundary_data(mesh, V, exact["u"])
    alpha = model.alpha(exact["rho"](mesh.cell_centroids))
    sol = solve_stokes(forms, bdata, alpha_cells=alpha, f=exact["f"])
    u_norm = forms.field_norms(sol.u.coeffs)["h1"]
    # the direct solve enforces the constraint rows to LU roundoff; the
    # amplification by 1/|K| keeps this above the 1e-12 floor of exactly
    # projected fields, but far below any discretization scale
    assert divergence_norm(sol.u) <= 1e-9 * u_norm
    p_mean = mesh.cell_areas @ sol.p.coeffs
    assert abs(p_mean) < 1e-10 * max(1.0, np.abs(sol.p.coeffs).max())


def test_saddle_solver_reuse_matches_fresh_solve():
    # the second solve goes through stale-factor refinement, not refactorization
    mesh = generate_rect_mesh(6, 4, 1.5, 1.0)
    V = Bdm1Space(mesh)
    forms = BrokenForms(mesh, V)
    exact = mms_solution(1.0, AlphaModel(100.0, 0.1))
    bdata = project_boundary_data(mesh, V, exact["u"])
    solver = SaddleSolver(forms, bdata, f=exact["f"])
    alpha1 = np.full(mesh.n_cells, 5.0)
    alpha2 = np.full(mesh.n_cells, 80.0)
    solver.solve(alpha1)
    warm = solver.solve(alpha2)
    fresh = solve_stokes(forms, bdata, alpha_cells=alpha2, f=exact["f"])
    scale = np.abs(fresh.u.coeffs).max()
    assert np.allclose(warm.u.coeffs, fresh.u.coeffs, atol=1e-9 * scale)
    assert np.allclose(warm.p.coeffs, fresh.p.coeffs, atol=1e-8 * scale)


def test_relabeling_cells_leaves_solution_invariant():
    # assembly and pinned-gauge solve must not depend on cell numbering
    base = generate_rect_mesh(6, 4, 1.5, 1.0)
    rng = np.random.default_rng(11)
    perm = rng.permutation(base.n_cells)
    relabeled = Mesh(base.vertices.copy(), base.cells[perm].copy(),
                     *_build_facets(base.vertices, base.cells[perm]))
    relabeled.validate()

    model = AlphaModel(100.0, 0.1)
    exact = mms_solution(1.0, model)
    results = []
    for mesh in (base, relabeled):
        V = Bdm1Space(mesh)
        forms = BrokenForms(mesh, V)
        bdata = project_boundary_data(mesh, V, exact["u"])
        alpha = model.alpha(exact["rho"](mesh.cell_centroids))
        sol = solve_stokes(forms, bdata, alpha_cells=alpha, f=exact["f"])
        order = np.lexsort(mesh.cell_centroids.T)
        from hdivtopo.cli_io import centroid_velocity
        results.append((centroid_velocity(V, sol.u.coeffs)[order],
                        sol.p.coeffs[order]))
    (u1, p1), (u2, p2) = results
    assert np.allclose(u1, u2, atol=1e-10 * max(1.0, np.abs(u1).max()))
    assert np.allclose(p1, p2, atol=1e-9 * max(1.0, np.abs(p1).max()))


def test_manufactured_solution_convergence_orders():
    rows = check_mms(levels=3)
    err_u = [r["err_u_l2"] for r in rows]
    err_h1 = [r["err_u_h1"] for r in rows]
    err_p = [r["err_p_l2"] for r in rows]
    assert all(np.diff(err_u) < 0) and all(np.diff(err_h1) < 0) and all(np.diff(err_p) < 0)
    last = rows[-1]
    assert 1.6 <= last["order_u_l2"] <= 2.2
    assert 0.8 <= last["order_u_h1"] <= 1.2
    assert 0.8 <= last["order_p_l2"] <= 1.2


def test_velocity_error_norm_detects_exact_field():
    mesh = generate_rect_mesh(4, 4, 1.0, 1.0)
    V = Bdm1Space(mesh)
    forms = BrokenForms(mesh, V)

    def g(x):
        return np.stack([x[:, 0], -x[:, 1]], axis=1)

    def grad_g(x):
        out = np.zeros((x.shape[0], 2, 2))
        out[:, 0, 0] = 1.0
        out[:, 1, 1] = -1.0
        return out

    u = bdm_interpolate(V, g)
    errs = velocity_error_norms(forms, u.coeffs, g, grad_g)
    assert errs["l2"] < 1e-13
    assert errs["energy"] < 1e-12


def test_inf_sup_positive_and_level_stable():
    betas = []
    for k in (2, 4, 8):
        mesh = generate_rect_mesh(k, k, 1.0, 1.0)
        V, Q = Bdm1Space(mesh), Dg0Space(mesh)
        w = inf_sup_spectrum(mesh, V, Q)
        assert w[0] <= 1e-10 * max(w[1], 1e-30)  # constant-pressure null mode
        beta = estimate_inf_sup(mesh, V, Q)
        assert beta > 0.0
        betas.append(beta)
    assert 0.5 <= betas[1] / betas[0] <= 2.0
    assert 0.5 <= betas[2] / betas[1] <= 2.0


def test_inf_sup_cap_guards_dense_solve():
    mesh = generate_rect_mesh(8, 8, 1.0, 1.0)
    with pytest.raises(ValueError):
        inf_sup_spectrum(mesh, Bdm1Space(mesh), Dg0Space(mesh), cap=10)
