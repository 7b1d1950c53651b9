"""Interior-penalty forms for the material-distribution flow problem.

The discrete energy of a velocity u with material field rho is

    J_h(u, rho) = sum_K int_K ( alpha(rho)|u|^2 + nu |grad u|^2 - 2 f.u ) / 2
                + sum_F  nu*sigma/(2 h_F) int_F |[u]|^2
                - sum_F  nu int_F {grad u} : [u]

where jumps insert the boundary datum on exterior facets ([u - g_h]) and the
facet sum runs over all facets.  Because the velocity space is H(div)
conforming only the tangential part of u jumps, and [u] := u+ otimes n+ +
u- otimes n- contracts against averages in the usual symmetric-interior-
penalty pattern.  Differentiating in u gives the bilinear form a_h and load
l_h assembled here; the pressure coupling b(u, q) = -int q div(u) closes the
saddle system.

The material enters only through the zeroth-order term, so the assembled
operator splits into a fixed viscous part and a cellwise mass part that is
cheap to refresh when rho changes; solvers exploit that split.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .elements import Bdm1Space, Dg0Space, Field, quadrature
from .mesh import Mesh


@dataclass(frozen=True)
class AlphaModel:
    """Convex inverse-permeability interpolation between solid and fluid.

    alpha(0) = alpha_bar (impermeable), alpha(1) = 0 (pure fluid); smaller q
    sharpens the transition.  alpha is convex and strictly decreasing.
    """

    alpha_bar: float
    q: float

    def __post_init__(self):
        if self.alpha_bar < 0:
            raise ValueError(f"alpha_bar must be nonnegative, got {self.alpha_bar}")
        if self.q <= 0:
            raise ValueError(f"penalty shape q must be positive, got {self.q}")

    def _checked(self, rho):
        rho = np.asarray(rho, dtype=float)
        if np.any(rho < -1e-12) or np.any(rho > 1 + 1e-12):
            raise ValueError("material value outside [0, 1]")
        return np.clip(rho, 0.0, 1.0)

    def alpha(self, rho):
        rho = self._checked(rho)
        return self.alpha_bar * (1.0 - rho * (1.0 + self.q) / (rho + self.q))

    def alpha_prime(self, rho):
        rho = self._checked(rho)
        return -self.alpha_bar * self.q * (1.0 + self.q) / (rho + self.q) ** 2


def alpha(rho, model: AlphaModel):
    return model.alpha(rho)


def alpha_prime(rho, model: AlphaModel):
    return model.alpha_prime(rho)


@dataclass(frozen=True)
class FlowConfig:
    """Parameters of one flow problem: viscosity, penalty weight, material law."""

    nu: float = 1.0
    sigma: float = 10.0
    model: AlphaModel = AlphaModel(2.5e4, 0.1)


class BrokenForms:
    """Tabulations and assembly for one (mesh, velocity space) pair.

    Keeps every rho-independent ingredient: cell quadrature and basis values,
    unit mass and stiffness blocks, facet traces, and the viscous part of the
    operator in COO form with a parallel cellwise-mass pattern so that
    refreshing alpha costs one scatter.
    """

    def __init__(self, mesh: Mesh, V: Bdm1Space, nu: float = 1.0, sigma: float = 10.0,
                 cell_degree: int = 4, edge_degree: int = 4):
        if nu <= 0:
            raise ValueError(f"viscosity must be positive, got {nu}")
        if sigma <= 0:
            raise ValueError(f"penalty weight must be positive, got {sigma}")
        self.mesh, self.V = mesh, V
        self.nu, self.sigma = float(nu), float(sigma)
        nc = mesh.n_cells

        rule = quadrature("triangle", cell_degree)
        J = np.stack([mesh.vertices[mesh.cells[:, 1]] - mesh.vertices[mesh.cells[:, 0]],
                      mesh.vertices[mesh.cells[:, 2]] - mesh.vertices[mesh.cells[:, 0]]],
                     axis=-1)
        self.cell_qp = (mesh.vertices[mesh.cells[:, 0]][:, None, :]
                        + np.einsum("cij,qj->cqi", J, rule.points))
        self.cell_qw = 2.0 * mesh.cell_areas[:, None] * rule.weights[None, :]
        rel = self.cell_qp - mesh.cell_centroids[:, None, :]
        self.phi = (V.lin_a[:, :, None, :]
                    + np.einsum("cbij,cqj->cbqi", V.lin_B, rel))     # (nc, 6, nq, 2)
        self.mass0 = np.einsum("cq,ciqk,cjqk->cij", self.cell_qw, self.phi, self.phi)
        self.stiff = mesh.cell_areas[:, None, None] * np.einsum(
            "cikl,cjkl->cij", V.lin_B, V.lin_B)

        es, ew = quadrature("edge", edge_degree).points, quadrature("edge", edge_degree).weights
        self.edge_s, self.edge_w = es, ew
        lo = mesh.vertices[mesh.facets[:, 0]]
        tv = mesh.vertices[mesh.facets[:, 1]] - lo
        self.facet_qp = lo[:, None, :] + es[None, :, None] * tv[:, None, :]

        self._int = mesh.interior_facets
        self._bnd = mesh.boundary_facets
        cp = mesh.facet_cells[self._int, 0]
        cm = mesh.facet_cells[self._int, 1]
        self._trace_p = self._trace(cp, self._int)          # (nfi, 6, nq, 2)
        self._trace_m = self._trace(cm, self._int)
        nrm = mesh.facet_normals[self._int]
        self._gn_p = np.einsum("fbij,fj->fbi", V.lin_B[cp], nrm)
        self._gn_m = np.einsum("fbij,fj->fbi", V.lin_B[cm], nrm)
        cb = mesh.facet_cells[self._bnd, 0]
        self._trace_b = self._trace(cb, self._bnd)
        self._gn_b = np.einsum("fbij,fj->fbi", V.lin_B[cb],
                               mesh.facet_normals[self._bnd])

        self._build_operator_blocks(cp, cm, cb)

    def _trace(self, cells, facet_ids):
        V, mesh = self.V, self.mesh
        rel = self.facet_qp[facet_ids] - mesh.cell_centroids[cells][:, None, :]
        return (V.lin_a[cells][:, :, None, :]
                + np.einsum("cbij,cqj->cbqi", V.lin_B[cells], rel))

    def _build_operator_blocks(self, cp, cm, cb):
        mesh, V = self.mesh, self.V
        nu, sigma, w = self.nu, self.sigma, self.edge_w

        jt = np.concatenate([self._trace_p, -self._trace_m], axis=1)   # (nfi, 12, nq, 2)
        ag = 0.5 * np.concatenate([self._gn_p, self._gn_m], axis=1)
        jbar = np.einsum("q,faqi->fai", w, jt)
        hf = mesh.h_facet[self._int]
        loc_i = nu * sigma * np.einsum("q,faqi,fbqi->fab", w, jt, jt)
        cons = np.einsum("f,fai,fbi->fab", hf, jbar, ag)
        loc_i -= nu * (cons + cons.transpose(0, 2, 1))
        dofs_i = np.concatenate([V.dofmap[cp], V.dofmap[cm]], axis=1)

        tb = self._trace_b
        tbar = np.einsum("q,faqi->fai", w, tb)
        hb = mesh.h_facet[self._bnd]
        loc_b = nu * sigma * np.einsum("q,faqi,fbqi->fab", w, tb, tb)
        cons_b = np.einsum("f,fai,fbi->fab", hb, tbar, self._gn_b)
        loc_b -= nu * (cons_b + cons_b.transpose(0, 2, 1))
        dofs_b = V.dofmap[cb]

        loc_s = nu * self.stiff
        blocks = [(loc_s, V.dofmap), (loc_i, dofs_i), (loc_b, dofs_b)]
        rows = np.concatenate([np.repeat(d, d.shape[1], axis=1).ravel() for _, d in blocks])
        cols = np.concatenate([np.tile(d, (1, d.shape[1])).ravel() for _, d in blocks])
        self.visc_rows = rows.astype(np.int32)
        self.visc_cols = cols.astype(np.int32)
        self.visc_data = np.concatenate([m.ravel() for m, _ in blocks])

        self.mass_rows = np.repeat(V.dofmap, 6, axis=1).ravel().astype(np.int32)
        self.mass_cols = np.tile(V.dofmap, (1, 6)).ravel().astype(np.int32)
        self.mass_unit = self.mass0.ravel().copy()
        self.mass_cell = np.repeat(np.arange(mesh.n_cells, dtype=np.int32), 36)

        bd = -mesh.cell_areas[:, None] * V.div
        self.B = sp.coo_matrix(
            (bd.ravel(),
             (np.repeat(np.arange(mesh.n_cells), 6), V.dofmap.ravel())),
            shape=(mesh.n_cells, V.n_dofs)).tocsr()

    # -- operator assembly -------------------------------------------------

    def assemble_a(self, alpha_cells: np.ndarray) -> sp.csr_matrix:
        """a_h with a cellwise-constant zeroth-order coefficient."""
        rows = np.concatenate([self.visc_rows, self.mass_rows])
        cols = np.concatenate([self.visc_cols, self.mass_cols])
        data = np.concatenate([self.visc_data, alpha_cells[self.mass_cell] * self.mass_unit])
        n = self.V.n_dofs
        return sp.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()

    def assemble_a_pointwise(self, alpha_at_qp: np.ndarray) -> sp.csr_matrix:
        """a_h with the zeroth-order coefficient sampled at cell quadrature points."""
        mass = np.einsum("cq,cq,ciqk,cjqk->cij", self.cell_qw, alpha_at_qp,
                         self.phi, self.phi)
        rows = np.concatenate([self.visc_rows, self.mass_rows])
        cols = np.concatenate([self.visc_cols, self.mass_cols])
        data = np.concatenate([self.visc_data, mass.ravel()])
        n = self.V.n_dofs
        return sp.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()

    def assemble_h1_gram(self) -> sp.csr_matrix:
        """Gram matrix of the broken H1 norm (cell L2 + gradients + interior jumps)."""
        jt = np.concatenate([self._trace_p, -self._trace_m], axis=1)
        loc = np.einsum("q,faqi,fbqi->fab", self.edge_w, jt, jt)
        cp, cm = self.mesh.facet_cells[self._int, 0], self.mesh.facet_cells[self._int, 1]
        dofs = np.concatenate([self.V.dofmap[cp], self.V.dofmap[cm]], axis=1)
        rows = np.concatenate([self.mass_rows, self.mass_rows,
                               np.repeat(dofs, 12, axis=1).ravel().astype(np.int32)])
        cols = np.concatenate([self.mass_cols, self.mass_cols,
                               np.tile(dofs, (1, 12)).ravel().astype(np.int32)])
        data = np.concatenate([self.mass_unit, self.stiff.ravel(), loc.ravel()])
        n = self.V.n_dofs
        return sp.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()

    # -- load vector --------------------------------------------------------

    def load_vector(self, f=None, g_trace=None, f_degree: int = 8) -> np.ndarray:
        """l_h(v) = int f.v + boundary penalty/consistency terms carrying g_h.

        f maps points (n,2) -> (n,2); g_trace(facet_ids, s) returns boundary
        values at the lo->hi parameters s of the listed facets.
        """
        L = np.zeros(self.V.n_dofs)
        if f is not None:
            rule = quadrature("triangle", f_degree)
            mesh, V = self.mesh, self.V
            J = np.stack([mesh.vertices[mesh.cells[:, 1]] - mesh.vertices[mesh.cells[:, 0]],
                          mesh.vertices[mesh.cells[:, 2]] - mesh.vertices[mesh.cells[:, 0]]],
                         axis=-1)
            qp = (mesh.vertices[mesh.cells[:, 0]][:, None, :]
                  + np.einsum("cij,qj->cqi", J, rule.points))
            qw = 2.0 * mesh.cell_areas[:, None] * rule.weights[None, :]
            rel = qp - mesh.cell_centroids[:, None, :]
            phi = V.lin_a[:, :, None, :] + np.einsum("cbij,cqj->cbqi", V.lin_B, rel)
            fv = np.asarray(f(qp.reshape(-1, 2))).reshape(qp.shape)
            np.add.at(L, V.dofmap.ravel(),
                      np.einsum("cq,cqi,cbqi->cb", qw, fv, phi).ravel())
        if g_trace is not None:
            gv = np.asarray(g_trace(self._bnd, self.edge_s))
            pen = self.nu * self.sigma * np.einsum("q,fqi,fbqi->fb", self.edge_w,
                                                   gv, self._trace_b)
            gbar = np.einsum("q,fqi->fi", self.edge_w, gv)
            con = self.nu * self.mesh.h_facet[self._bnd, None] * np.einsum(
                "fi,fbi->fb", gbar, self._gn_b)
            cb = self.mesh.facet_cells[self._bnd, 0]
            np.add.at(L, self.V.dofmap[cb].ravel(), (pen - con).ravel())
        return L

    # -- functionals of discrete fields --------------------------------------

    def _cell_values(self, coeffs):
        d = coeffs[self.V.dofmap]
        return np.einsum("cb,cbqi->cqi", d, self.phi)

    def _facet_values(self, coeffs):
        d = coeffs[self.V.dofmap]
        cp, cm = self.mesh.facet_cells[self._int, 0], self.mesh.facet_cells[self._int, 1]
        up = np.einsum("fb,fbqi->fqi", d[cp], self._trace_p)
        um = np.einsum("fb,fbqi->fqi", d[cm], self._trace_m)
        cb = self.mesh.facet_cells[self._bnd, 0]
        ub = np.einsum("fb,fbqi->fqi", d[cb], self._trace_b)
        gnp = np.einsum("fb,fbi->fi", d[cp], self._gn_p)
        gnm = np.einsum("fb,fbi->fi", d[cm], self._gn_m)
        gnb = np.einsum("fb,fbi->fi", d[cb], self._gn_b)
        return up, um, ub, gnp, gnm, gnb

    def cell_velocity_l2(self, coeffs: np.ndarray) -> np.ndarray:
        """m_K = int_K |u|^2 per cell (exact for fields in the space)."""
        uq = self._cell_values(coeffs)
        return np.einsum("cq,cqi,cqi->c", self.cell_qw, uq, uq)

    def energy(self, coeffs: np.ndarray, alpha_cells: np.ndarray, g_trace,
               f=None, f_degree: int = 8) -> float:
        """The discrete objective J_h at (u, alpha(rho)) with boundary datum g_h."""
        mesh, V = self.mesh, self.V
        nu, sigma, w = self.nu, self.sigma, self.edge_w
        m = self.cell_velocity_l2(coeffs)
        grads = np.einsum("cb,cbij->cij", coeffs[V.dofmap], V.lin_B)
        val = 0.5 * float(alpha_cells @ m)
        val += 0.5 * nu * float(mesh.cell_areas @ np.einsum("cij,cij->c", grads, grads))
        if f is not None:
            rule = quadrature("triangle", f_degree)
            J = np.stack([mesh.vertices[mesh.cells[:, 1]] - mesh.vertices[mesh.cells[:, 0]],
                          mesh.vertices[mesh.cells[:, 2]] - mesh.vertices[mesh.cells[:, 0]]],
                         axis=-1)
            qp = (mesh.vertices[mesh.cells[:, 0]][:, None, :]
                  + np.einsum("cij,qj->cqi", J, rule.points))
            qw = 2.0 * mesh.cell_areas[:, None] * rule.weights[None, :]
            rel = qp - mesh.cell_centroids[:, None, :]
            phi = V.lin_a[:, :, None, :] + np.einsum("cbij,cqj->cbqi", V.lin_B, rel)
            uq = np.einsum("cb,cbqi->cqi", coeffs[V.dofmap], phi)
            fv = np.asarray(f(qp.reshape(-1, 2))).reshape(qp.shape)
            val -= float(np.einsum("cq,cqi,cqi->", qw, fv, uq))

        up, um, ub, gnp, gnm, gnb = self._facet_values(coeffs)
        dv = up - um
        val += 0.5 * nu * sigma * float(np.einsum("q,fqi,fqi->", w, dv, dv))
        dbar = np.einsum("q,fqi->fi", w, dv)
        val -= nu * float(np.einsum("f,fi,fi->", mesh.h_facet[self._int],
                                    0.5 * (gnp + gnm), dbar))
        gv = np.asarray(g_trace(self._bnd, self.edge_s)) if g_trace is not None else 0.0
        wb = ub - gv
        val += 0.5 * nu * sigma * float(np.einsum("q,fqi,fqi->", w, wb, wb))
        wbar = np.einsum("q,fqi->fi", w, wb)
        val -= nu * float(np.einsum("f,fi,fi->", mesh.h_facet[self._bnd], gnb, wbar))
        return val

    def field_norms(self, coeffs: np.ndarray, g_trace=None) -> dict:
        """Broken norms of a discrete velocity: L2, jump-augmented H1 seminorm,
        full H1, and the boundary-penalized H1_g variant (g = 0 when no trace
        is supplied)."""
        mesh = self.mesh
        uq = self._cell_values(coeffs)
        l2sq = float(np.einsum("cq,cqi,cqi->", self.cell_qw, uq, uq))
        grads = np.einsum("cb,cbij->cij", coeffs[self.V.dofmap], self.V.lin_B)
        semi = float(mesh.cell_areas @ np.einsum("cij,cij->c", grads, grads))
        up, um, ub, *_ = self._facet_values(coeffs)
        dv = up - um
        semi += float(np.einsum("q,fqi,fqi->", self.edge_w, dv, dv))
        gv = np.asarray(g_trace(self._bnd, self.edge_s)) if g_trace is not None else 0.0
        wb = ub - gv
        bterm = float(np.einsum("q,fqi,fqi->", self.edge_w, wb, wb))
        return {
            "l2": np.sqrt(l2sq),
            "h1_semi": np.sqrt(semi),
            "h1": np.sqrt(l2sq + semi),
            "h1_g": np.sqrt(l2sq + semi + bterm),
        }


# -- stable module-level surface ---------------------------------------------

def assemble_a_h(mesh: Mesh, V: Bdm1Space, rho: Field, nu: float, sigma: float,
                 model: AlphaModel) -> sp.csr_matrix:
    return BrokenForms(mesh, V, nu, sigma).assemble_a(model.alpha(rho.coeffs))


def assemble_b(mesh: Mesh, V: Bdm1Space, Q: Dg0Space) -> sp.csr_matrix:
    return BrokenForms(mesh, V).B


def assemble_l_h(mesh: Mesh, V: Bdm1Space, f, g_trace, nu: float, sigma: float) -> np.ndarray:
    return BrokenForms(mesh, V, nu, sigma).load_vector(f=f, g_trace=g_trace)


def evaluate_J_h(u: Field, rho: Field, g_trace, config: FlowConfig, f=None) -> float:
    forms = BrokenForms(u.space.mesh, u.space, config.nu, config.sigma)
    return forms.energy(u.coeffs, config.model.alpha(rho.coeffs), g_trace, f=f)


def broken_norms(u: Field, g_trace=None) -> dict:
    return BrokenForms(u.space.mesh, u.space).field_norms(u.coeffs, g_trace)


def divergence_norm(u: Field) -> float:
    """L2 norm of div(u); exact because divergences are cellwise constant."""
    from .elements import bdm_cell_divergence
    d = bdm_cell_divergence(u.space, u.coeffs)
    return float(np.sqrt(u.space.mesh.cell_areas @ d ** 2))
