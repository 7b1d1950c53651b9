"""Flow solves: boundary data, the saddle-point system, and verification.

Velocity boundary conditions are imposed strongly through the facet moments:
the datum g is L2-projected edge by edge onto linear polynomials, its normal
moments pin the boundary dofs, and the tangential part rides along in the
load vector through the penalty terms.  The remaining system couples interior
velocity dofs with cellwise pressures,

    [ A   B^T ]
    [ B   0   ],

where the pressure is only determined up to a constant.  The gauge is fixed
by pinning the first cell's pressure to zero and dropping that cell's
divergence row (it is implied by the compatibility of the boundary flux);
the reported pressure is shifted to zero area-weighted mean afterwards.
Pinning instead of a zero-mean multiplier keeps the matrix free of dense
borders, which would otherwise poison the fill-reducing ordering.

Factorizations are reused across nearby coefficients: a solve first tries
iterative refinement with the previous LU factors and only refactorizes when
that stalls.  Either way the accepted solution satisfies the fresh system to
a relative algebraic residual of 1e-10, which the optimization loop relies on
when it certifies stationarity.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .elements import Bdm1Space, Dg0Space, Field, quadrature
from .forms import AlphaModel, BrokenForms
from .mesh import Mesh


class LinearSolveError(RuntimeError):
    """Direct solve failed to reach the requested algebraic residual."""


@dataclass(eq=False)
class BoundaryData:
    """Edgewise linear approximation of a velocity boundary datum."""

    mesh: Mesh
    facets: np.ndarray            # boundary facet indices
    c0: np.ndarray                # (nb, 2) mean value per facet
    c1: np.ndarray                # (nb, 2) first Legendre coefficient
    dof_values: np.ndarray        # constrained values indexed like V dofs (0 elsewhere)
    projection_error: float       # ||g - g_h|| over the boundary
    _pos: np.ndarray = field(repr=False, default=None)

    def trace(self, facet_ids, s) -> np.ndarray:
        """g_h on the listed boundary facets at lo->hi parameters s."""
        idx = self._pos[facet_ids]
        if np.any(idx < 0):
            raise ValueError("trace requested on a non-boundary facet")
        leg = 2.0 * np.asarray(s) - 1.0
        return self.c0[idx][:, None, :] + leg[None, :, None] * self.c1[idx][:, None, :]

    @property
    def net_flux(self) -> float:
        """int_boundary g_h . n_outward, which vanishes for compatible data."""
        mesh = self.mesh
        lo = mesh.vertices[mesh.facets[self.facets, 0]]
        hi = mesh.vertices[mesh.facets[self.facets, 1]]
        t = hi - lo
        n_e = np.stack([t[:, 1], -t[:, 0]], axis=1) / mesh.h_facet[self.facets, None]
        sign = np.einsum("fi,fi->f", n_e, mesh.facet_normals[self.facets])
        return float(np.sum(sign * self.dof_values[2 * self.facets]))


def project_boundary_data(mesh: Mesh, V: Bdm1Space, g, degree: int = 24) -> BoundaryData:
    """Facetwise L2 projection of g onto linear polynomials on the boundary.

    The projection preserves the two normal moments per facet, so the strongly
    imposed dof values and the tangential trace used by the penalty terms are
    consistent with each other.
    """
    bnd = mesh.boundary_facets
    rule = quadrature("edge", degree)
    s, w = rule.points, rule.weights
    lo = mesh.vertices[mesh.facets[bnd, 0]]
    t = mesh.vertices[mesh.facets[bnd, 1]] - lo
    pts = lo[:, None, :] + s[None, :, None] * t[:, None, :]
    vals = np.asarray(g(pts.reshape(-1, 2))).reshape(len(bnd), s.size, 2)
    leg = 2.0 * s - 1.0
    c0 = np.einsum("q,fqi->fi", w, vals)
    c1 = 3.0 * np.einsum("q,q,fqi->fi", w, leg, vals)

    n_e = np.stack([t[:, 1], -t[:, 0]], axis=1) / mesh.h_facet[bnd, None]
    vn = np.einsum("fqi,fi->fq", vals, n_e)
    dof_values = np.zeros(V.n_dofs)
    dof_values[2 * bnd] = mesh.h_facet[bnd] * (vn @ w)
    dof_values[2 * bnd + 1] = mesh.h_facet[bnd] * ((vn * leg) @ w)

    resid = vals - c0[:, None, :] - leg[None, :, None] * c1[:, None, :]
    err = float(np.sqrt(np.einsum("f,q,fqi,fqi->", mesh.h_facet[bnd], w, resid, resid)))
    pos = np.full(mesh.n_facets, -1, dtype=np.int64)
    pos[bnd] = np.arange(len(bnd))
    return BoundaryData(mesh, bnd, c0, c1, dof_values, err, pos)


@dataclass(eq=False)
class SaddleSolution:
    u: Field
    p: Field
    residual: float


def _refine_solve(lu, K, rhs, tol: float = 1e-10, rounds: int = 3):
    x = lu.solve(rhs)
    scale = np.linalg.norm(rhs)
    if scale == 0.0:
        return x, 0.0
    for _ in range(rounds):
        r = K @ x - rhs
        rel = np.linalg.norm(r) / scale
        if rel <= tol:
            return x, rel
        x -= lu.solve(r)
    r = K @ x - rhs
    rel = np.linalg.norm(r) / scale
    if rel > tol:
        raise LinearSolveError(
            f"saddle solve stalled at relative residual {rel:.3e} (tol {tol:.1e})")
    return x, rel


class SaddleSolver:
    """Repeated flow solves against a changing cellwise coefficient.

    The matrix is assembled once in pinned-gauge form; each call only rewrites
    the data entries fed by alpha(rho) (a scatter into the fixed sparsity
    pattern), then refines against the previous factorization or refactorizes.
    """

    def __init__(self, forms: BrokenForms, bdata: BoundaryData, f=None):
        self.forms, self.bdata = forms, bdata
        mesh, V = forms.mesh, forms.V
        free = V.interior_dofs
        self.free = free
        nf, nc = free.size, mesh.n_cells
        self.n_free, self.n_cells = nf, nc
        remap = np.full(V.n_dofs, -1, dtype=np.int64)
        remap[free] = np.arange(nf)
        u_c = bdata.dof_values

        def split(rows, cols, data, cells=None):
            rf, cf = remap[rows], remap[cols]
            ff = (rf >= 0) & (cf >= 0)
            fc = (rf >= 0) & (cf < 0)
            out = {"ff": (rf[ff], cf[ff], data[ff]),
                   "fc": (rf[fc], data[fc] * u_c[cols[fc]])}
            if cells is not None:
                out["ff_cells"] = cells[ff]
                out["fc_cells"] = cells[fc]
            return out

        v = split(forms.visc_rows, forms.visc_cols, forms.visc_data)
        m = split(forms.mass_rows, forms.mass_cols, forms.mass_unit, forms.mass_cell)

        B = forms.B.tocoo()
        n = nf + nc - 1                # pressure of cell 0 pinned to zero
        rows = [v["ff"][0], m["ff"][0]]
        cols = [v["ff"][1], m["ff"][1]]
        data = [v["ff"][2], np.zeros_like(m["ff"][2])]
        brf = remap[B.col]
        keep = (brf >= 0) & (B.row > 0)
        rows += [nf + B.row[keep] - 1, brf[keep]]
        cols += [brf[keep], nf + B.row[keep] - 1]
        data += [B.data[keep], B.data[keep]]
        K = sp.coo_matrix((np.concatenate(data),
                           (np.concatenate(rows), np.concatenate(cols))),
                          shape=(n, n)).tocsc()
        K.sort_indices()
        self._K = K
        self._base_data = K.data.copy()
        self._lu = None

        # positions of the alpha-scaled entries inside K.data (csc is sorted
        # by column-major key, so one searchsorted resolves all of them)
        key_all = (np.repeat(np.arange(n), np.diff(K.indptr)).astype(np.int64) * n
                   + K.indices)
        key_m = m["ff"][1].astype(np.int64) * n + m["ff"][0]
        self._mass_pos = np.searchsorted(key_all, key_m)
        assert np.array_equal(key_all[self._mass_pos], key_m)
        self._mass_unit = m["ff"][2]
        self._mass_cells = m["ff_cells"]

        self._rhs_base = np.zeros(n)
        load = forms.load_vector(f=f, g_trace=bdata.trace)
        self._rhs_base[:nf] = load[free]
        np.subtract.at(self._rhs_base, v["fc"][0], v["fc"][1])
        self._rhs_base[nf:] = -(B.tocsr() @ u_c)[1:]
        self._rhs_fc_rows = m["fc"][0]
        self._rhs_fc_w = m["fc"][1]
        self._rhs_fc_cells = m["fc_cells"]
        self._u_c = u_c

    def system(self, alpha_cells: np.ndarray):
        """Pinned-gauge matrix and right-hand side for a cellwise coefficient."""
        data = self._base_data.copy()
        np.add.at(data, self._mass_pos, alpha_cells[self._mass_cells] * self._mass_unit)
        rhs = self._rhs_base.copy()
        np.subtract.at(rhs, self._rhs_fc_rows,
                       alpha_cells[self._rhs_fc_cells] * self._rhs_fc_w)
        K = sp.csc_matrix((data, self._K.indices, self._K.indptr), shape=self._K.shape)
        return K, rhs

    def unpack(self, x: np.ndarray) -> SaddleSolution:
        """Solution fields from a pinned-gauge vector; pressure shifted to zero mean."""
        u = self._u_c.copy()
        u[self.free] = x[:self.n_free]
        mesh = self.forms.mesh
        p = np.concatenate([[0.0], x[self.n_free:]])
        p -= (mesh.cell_areas @ p) / mesh.cell_areas.sum()
        return SaddleSolution(Field(self.forms.V, u), Field(Dg0Space(mesh), p), 0.0)

    def solve(self, alpha_cells: np.ndarray) -> SaddleSolution:
        K, rhs = self.system(alpha_cells)
        x = None
        if self._lu is not None:
            try:                      # stale factors as a refinement preconditioner
                x, rel = _refine_solve(self._lu, K, rhs, rounds=6)
            except LinearSolveError:
                x = None
        if x is None:
            self._lu = None               # stale + fresh factors together can double peak memory
            self._lu = spla.splu(K)
            x, rel = _refine_solve(self._lu, K, rhs)
        sol = self.unpack(x)
        sol.residual = rel
        return sol


def solve_stokes(forms: BrokenForms, bdata: BoundaryData, alpha_cells=None,
                 alpha_at_qp=None, f=None) -> SaddleSolution:
    """One-shot flow solve; accepts a cellwise or pointwise zeroth-order term."""
    if alpha_at_qp is None:
        solver = SaddleSolver(forms, bdata, f=f)
        return solver.solve(np.zeros(forms.mesh.n_cells) if alpha_cells is None
                            else alpha_cells)
    A = forms.assemble_a_pointwise(alpha_at_qp)
    mesh, V = forms.mesh, forms.V
    free, con = V.interior_dofs, V.boundary_dofs
    u_c = bdata.dof_values
    load = forms.load_vector(f=f, g_trace=bdata.trace)
    A_csc = A.tocsc()
    rhs_u = load[free] - A_csc[:, con][free] @ u_c[con]
    Bf = forms.B.tocsc()[:, free][1:]
    K = sp.bmat([[A_csc[:, free][free], Bf.T],
                 [Bf, None]], format="csc")
    rhs = np.concatenate([rhs_u, -(forms.B @ u_c)[1:]])
    lu = spla.splu(K)
    x, rel = _refine_solve(lu, K, rhs)
    u = u_c.copy()
    u[free] = x[:free.size]
    p = np.concatenate([[0.0], x[free.size:]])
    p -= (mesh.cell_areas @ p) / mesh.cell_areas.sum()
    return SaddleSolution(Field(V, u), Field(Dg0Space(mesh), p), rel)


# -- manufactured-solution verification ---------------------------------------


def mms_solution(nu: float, model: AlphaModel):
    """Closed-form fields on the unit square for solver verification.

    The velocity is the curl of sin(pi x) cos(pi y), hence exactly divergence
    free and an eigenfunction of the Laplacian; the material field stays
    inside (0, 1) so the coefficient alpha(rho) is smooth.
    """
    pi = np.pi

    def u(x):
        return -pi * np.stack([np.sin(pi * x[:, 0]) * np.sin(pi * x[:, 1]),
                               np.cos(pi * x[:, 0]) * np.cos(pi * x[:, 1])], axis=1)

    def grad_u(x):
        cx, sx = np.cos(pi * x[:, 0]), np.sin(pi * x[:, 0])
        cy, sy = np.cos(pi * x[:, 1]), np.sin(pi * x[:, 1])
        g = np.empty((x.shape[0], 2, 2))
        g[:, 0, 0] = -pi * pi * cx * sy
        g[:, 0, 1] = -pi * pi * sx * cy
        g[:, 1, 0] = pi * pi * sx * cy
        g[:, 1, 1] = pi * pi * cx * sy
        return g

    def p(x):
        return np.sin(2 * pi * x[:, 0]) * np.cos(pi * x[:, 1])

    def rho(x):
        return 0.5 + 0.4 * np.sin(2 * pi * x[:, 0]) * np.sin(2 * pi * x[:, 1])

    def f(x):
        grad_p = np.stack([2 * pi * np.cos(2 * pi * x[:, 0]) * np.cos(pi * x[:, 1]),
                           -pi * np.sin(2 * pi * x[:, 0]) * np.sin(pi * x[:, 1])], axis=1)
        uv = u(x)
        return model.alpha(rho(x))[:, None] * uv + 2 * pi * pi * nu * uv + grad_p

    return {"u": u, "grad_u": grad_u, "p": p, "rho": rho, "f": f}


def velocity_error_norms(forms: BrokenForms, coeffs: np.ndarray, u_exact, grad_exact,
                         degree: int = 10) -> dict:
    """L2 and energy-style errors of a discrete velocity against callables."""
    mesh, V = forms.mesh, forms.V
    rule = quadrature("triangle", degree)
    J = np.stack([mesh.vertices[mesh.cells[:, 1]] - mesh.vertices[mesh.cells[:, 0]],
                  mesh.vertices[mesh.cells[:, 2]] - mesh.vertices[mesh.cells[:, 0]]],
                 axis=-1)
    qp = (mesh.vertices[mesh.cells[:, 0]][:, None, :]
          + np.einsum("cij,qj->cqi", J, rule.points))
    qw = 2.0 * mesh.cell_areas[:, None] * rule.weights[None, :]
    rel = qp - mesh.cell_centroids[:, None, :]
    phi = V.lin_a[:, :, None, :] + np.einsum("cbij,cqj->cbqi", V.lin_B, rel)
    uh = np.einsum("cb,cbqi->cqi", coeffs[V.dofmap], phi)
    du = uh - np.asarray(u_exact(qp.reshape(-1, 2))).reshape(qp.shape)
    l2sq = float(np.einsum("cq,cqi,cqi->", qw, du, du))
    gh = np.einsum("cb,cbij->cij", coeffs[V.dofmap], V.lin_B)[:, None, :, :]
    dg = gh - np.asarray(grad_exact(qp.reshape(-1, 2))).reshape(qp.shape + (2,))
    semisq = float(np.einsum("cq,cqij,cqij->", qw, dg, dg))

    # the exact field is continuous, so its jumps vanish and only u_h enters
    up, um, ub, *_ = forms._facet_values(coeffs)
    dv = up - um
    semisq += float(np.einsum("q,fqi,fqi->", forms.edge_w, dv, dv))
    es, ew = forms.edge_s, forms.edge_w
    bnd = mesh.boundary_facets
    lo = mesh.vertices[mesh.facets[bnd, 0]]
    t = mesh.vertices[mesh.facets[bnd, 1]] - lo
    pts = lo[:, None, :] + es[None, :, None] * t[:, None, :]
    gb = np.asarray(u_exact(pts.reshape(-1, 2))).reshape(pts.shape)
    wb = ub - gb
    semisq += float(np.einsum("q,fqi,fqi->", ew, wb, wb))
    return {"l2": np.sqrt(l2sq), "energy": np.sqrt(l2sq + semisq)}


def pressure_error_norm(mesh: Mesh, p_cells: np.ndarray, p_exact, degree: int = 10) -> float:
    rule = quadrature("triangle", degree)
    J = np.stack([mesh.vertices[mesh.cells[:, 1]] - mesh.vertices[mesh.cells[:, 0]],
                  mesh.vertices[mesh.cells[:, 2]] - mesh.vertices[mesh.cells[:, 0]]],
                 axis=-1)
    qp = (mesh.vertices[mesh.cells[:, 0]][:, None, :]
          + np.einsum("cij,qj->cqi", J, rule.points))
    qw = 2.0 * mesh.cell_areas[:, None] * rule.weights[None, :]
    dp = p_cells[:, None] - np.asarray(p_exact(qp.reshape(-1, 2))).reshape(qp.shape[:2])
    return float(np.sqrt(np.einsum("cq,cq->", qw, dp ** 2)))


def check_mms(levels: int = 4, base: int = 4, nu: float = 1.0, sigma: float = 10.0,
              model: AlphaModel = AlphaModel(100.0, 0.1)) -> list[dict]:
    """Convergence study against the manufactured solution.

    Returns one row per level with errors and observed orders; the zeroth-order
    coefficient is sampled pointwise from the smooth material field so that the
    only consistency errors are the quadrature's.
    """
    from .mesh import generate_rect_mesh

    ex = None
    rows = []
    for lvl in range(levels):
        n = base * 2 ** lvl
        mesh = generate_rect_mesh(n, n, 1.0, 1.0)
        V = Bdm1Space(mesh)
        forms = BrokenForms(mesh, V, nu=nu, sigma=sigma)
        ex = mms_solution(nu, model)
        bdata = project_boundary_data(mesh, V, ex["u"])
        alpha_qp = model.alpha(ex["rho"](forms.cell_qp.reshape(-1, 2))).reshape(
            forms.cell_qp.shape[:2])
        sol = solve_stokes(forms, bdata, alpha_at_qp=alpha_qp, f=ex["f"])
        verr = velocity_error_norms(forms, sol.u.coeffs, ex["u"], ex["grad_u"])
        perr = pressure_error_norm(mesh, sol.p.coeffs, ex["p"])
        rows.append({"h": mesh.h_max, "err_u_l2": verr["l2"],
                     "err_u_h1": verr["energy"], "err_p_l2": perr})
    for i in range(1, len(rows)):
        r, prev = rows[i], rows[i - 1]
        step = np.log(prev["h"] / r["h"])
        for key in ("err_u_l2", "err_u_h1", "err_p_l2"):
            r["order_" + key[4:]] = np.log(prev[key] / r[key]) / step
    return rows


def inf_sup_spectrum(mesh: Mesh, V: Bdm1Space, Q: Dg0Space, sigma: float = 10.0,
                     cap: int = 6000) -> np.ndarray:
    """Eigenvalues of the dense pressure Schur complement in the broken-H1 metric."""
    import scipy.linalg as sla

    if V.interior_dofs.size > cap:
        raise ValueError(
            f"dense inf-sup estimate limited to {cap} velocity dofs, "
            f"got {V.interior_dofs.size}")
    forms = BrokenForms(mesh, V, nu=1.0, sigma=sigma)
    free = V.interior_dofs
    G = forms.assemble_h1_gram()[np.ix_(free, free)].toarray()
    Bf = forms.B.tocsc()[:, free].toarray()
    S = Bf @ np.linalg.solve(G, Bf.T)
    D = np.diag(mesh.cell_areas)
    return sla.eigh(S, D, eigvals_only=True)


def estimate_inf_sup(mesh: Mesh, V: Bdm1Space, Q: Dg0Space, sigma: float = 10.0,
                     cap: int = 6000) -> float:
    """Discrete inf-sup constant: square root of the smallest nonzero
    generalized eigenvalue of the pressure Schur complement (the zero mode is
    the constant pressure)."""
    w = inf_sup_spectrum(mesh, V, Q, sigma=sigma, cap=cap)
    return float(np.sqrt(max(w[1], 0.0)))
