"""Alternating minimization for the material distribution problem.

The objective is block-convex: for fixed material the velocity solve is a
linear saddle problem, and for fixed velocity the material subproblem

    min_rho  1/2 sum_K alpha(rho_K) m_K   s.t.  0 <= rho <= 1,
                                                sum_K rho_K |K| <= gamma |Omega|,

with m_K = int_K |u|^2, is separable and strictly convex on cells where
m_K > 0, so it is solved exactly: the per-cell stationarity condition gives a
closed form in the volume multiplier, and the multiplier comes from a
monotone bisection with a final algebraic polish.  Cells the flow does not
reach (m_K = 0) are set to solid, matching the support property of
minimizers.  Alternating exact substeps makes the energy monotone, which the
loop enforces; an optional Newton refinement on the frozen active sets
squeezes the stationarity residuals to machine precision once the iteration
has essentially settled.

Distinct minimizers are collected by multi_start from different seeds, with an
optional multiplicative deflation of the material subproblem that pushes later
runs away from the basins already found.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .elements import Dg0Space, Field
from .forms import AlphaModel, BrokenForms, divergence_norm
from .forward import BoundaryData, SaddleSolution, SaddleSolver


class DescentError(RuntimeError):
    """The accepted iterate increased the energy beyond tolerance."""


@dataclass
class MaterialState:
    """Material field with its volume multiplier and bound classification."""

    rho: np.ndarray
    lam: float
    gamma: float

    def classify(self, tol: float = 1e-9):
        lower = self.rho <= tol
        upper = self.rho >= 1.0 - tol
        return lower, upper, ~(lower | upper)

    def feasible(self, areas: np.ndarray, tol: float = 1e-10) -> bool:
        total = areas.sum()
        return bool(np.all(self.rho >= -tol) and np.all(self.rho <= 1.0 + tol)
                    and self.rho @ areas <= self.gamma * total + tol * total)


def rho_from_m(m: np.ndarray, areas: np.ndarray, model: AlphaModel, gamma: float):
    """Exact solution of the separable material subproblem.

    Returns (rho, lam).  Stationarity at an interior value reads
    alpha'(rho) m / 2 + lam |K| = 0, i.e. rho = sqrt(c_K / lam) - q with
    c_K = alpha_bar q (1+q) m_K / (2 |K|); clipping to [0, 1] handles the
    bounds and a monotone bisection in lam meets the volume budget.
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"volume fraction must lie in (0, 1), got {gamma}")
    m = np.asarray(m, dtype=float)
    if np.any(m < -1e-14 * max(1.0, m.max(initial=0.0))):
        raise ValueError("negative cell velocity mass")
    m = np.maximum(m, 0.0)
    target = gamma * areas.sum()
    active = m > 0.0
    rho = np.zeros_like(m)                     # unreached cells stay solid
    if model.alpha_bar == 0.0 or not np.any(active):
        return rho, 0.0
    if areas[active].sum() <= target:
        rho[active] = 1.0                      # budget slack: constraint inactive
        return rho, 0.0

    q = model.q
    c = model.alpha_bar * q * (1.0 + q) * m[active] / (2.0 * areas[active])
    a = areas[active]

    def vol(lam):
        return a @ np.clip(np.sqrt(c / lam) - q, 0.0, 1.0)

    lo = c.min() / (1.0 + q) ** 2              # everything clipped at 1
    hi = c.max() / q ** 2                      # everything clipped at 0
    llo, lhi = np.log(lo), np.log(hi)
    for _ in range(120):
        mid = 0.5 * (llo + lhi)
        if vol(np.exp(mid)) > target:
            llo = mid
        else:
            lhi = mid
    lam = np.exp(0.5 * (llo + lhi))

    # algebraic polish: with the clip pattern frozen, lam solves the budget
    # equation exactly, which drives the complementarity gap to roundoff
    t = np.sqrt(c / lam) - q
    free = (t > 0.0) & (t < 1.0)
    sat = t >= 1.0
    denom = target - a[sat].sum() + q * a[free].sum()
    if np.any(free) and denom > 0.0:
        lam_exact = (a[free] @ np.sqrt(c[free]) / denom) ** 2
        t_new = np.sqrt(c / lam_exact) - q
        if np.array_equal((t_new > 0.0) & (t_new < 1.0), free) and \
                np.array_equal(t_new >= 1.0, sat):
            lam, t = lam_exact, t_new
    rho[active] = np.clip(t, 0.0, 1.0)
    return rho, float(lam)


def rho_update(u: Field, model: AlphaModel, gamma: float,
               forms: BrokenForms | None = None) -> MaterialState:
    """Material step for a velocity field; exact minimizer of the subproblem."""
    space = u.space
    if forms is None:
        forms = BrokenForms(space.mesh, space, cell_degree=2, edge_degree=2)
    m = forms.cell_velocity_l2(u.coeffs)
    rho, lam = rho_from_m(m, space.mesh.cell_areas, model, gamma)
    return MaterialState(rho, lam, gamma)


@dataclass
class FocResiduals:
    """Scaled stationarity residuals of a candidate (u, p, rho, lam)."""

    momentum: float
    divergence: float
    variational: float
    complementarity: float

    @property
    def max(self) -> float:
        return max(self.momentum, self.divergence, self.variational,
                   self.complementarity)


def variational_residual(rho, lam, m, areas, model: AlphaModel, tol: float = 1e-9):
    """Scaled max-norm violation of the bound-constrained stationarity system."""
    t = 0.5 * model.alpha_prime(rho) * m + lam * areas
    scale = np.max(0.5 * np.abs(model.alpha_prime(rho)) * m + lam * areas, initial=0.0)
    if scale == 0.0:
        return 0.0
    lower = rho <= tol
    upper = rho >= 1.0 - tol
    interior = ~(lower | upper)
    viol = np.max(np.abs(t[interior]), initial=0.0)
    viol = max(viol, np.max(-t[lower], initial=0.0))
    viol = max(viol, np.max(t[upper], initial=0.0))
    return float(viol / scale)


@dataclass
class StageReport:
    alpha_bar: float
    iterations: int
    J_history: list = field(default_factory=list)
    converged: bool = False
    foc: FocResiduals | None = None
    omega_final: float = 1.0
    polish_iterations: int = 0


@dataclass
class OptimizeReport:
    stages: list
    wall_time: float = 0.0

    @property
    def converged(self) -> bool:
        return bool(self.stages) and self.stages[-1].converged

    @property
    def iterations(self) -> int:
        return sum(s.iterations for s in self.stages)

    @property
    def J_final(self) -> float:
        return self.stages[-1].J_history[-1]

    @property
    def foc(self) -> FocResiduals:
        return self.stages[-1].foc


@dataclass
class DeflationOperator:
    """Multiplicative repulsion from known material fields.

    factor(rho) = prod_i ( ||rho - rho_i||^-2 + 1 ); gradient with respect to
    the cell values uses the volume-weighted inner product.
    """

    known: list
    areas: np.ndarray
    power: int = 2
    shift: float = 1.0

    def factor_grad(self, rho):
        terms, grads = [], []
        for r in self.known:
            d2 = max(float(self.areas @ (rho - r) ** 2), 1e-30)
            terms.append(d2 ** (-self.power / 2) + self.shift)
            grads.append(-self.power * d2 ** (-self.power / 2 - 1)
                         * self.areas * (rho - r))
        M = float(np.prod(terms))
        g = np.zeros_like(rho)
        for i in range(len(terms)):
            rest = M / terms[i]
            g += rest * grads[i]
        return M, g


def deflated_rho_step(m, areas, model: AlphaModel, gamma: float, rho_cur,
                      deflation: DeflationOperator, max_inner: int = 30):
    """Material step minimizing deflation * energy by majorization.

    Each inner pass freezes the deflation factor and linearizes its gradient,
    leaving a separable convex problem solved like the plain step; a backtrack
    toward the previous iterate guards the true deflated objective.
    """
    q, ab = model.q, model.alpha_bar
    target = gamma * areas.sum()

    def F(rho):
        return 0.5 * float(model.alpha(rho) @ m)

    def solve_inner(Mj, w):
        # per cell: Mj*alpha(rho)*m/2 + w*rho + lam*|K|*rho, box + budget
        def rho_of(lam):
            D = w + lam * areas
            r = np.zeros_like(m)
            pos = (m > 0) & (D > 0)
            r[pos] = np.clip(np.sqrt(Mj * ab * q * (1 + q) * m[pos] / (2 * D[pos])) - q,
                             0.0, 1.0)
            r[(m > 0) & (D <= 0)] = 1.0
            r[(m == 0) & (D <= 0)] = 1.0       # linear pull only; ties go solid
            return r

        lam = 0.0
        if areas @ rho_of(0.0) <= target:
            return rho_of(0.0), 0.0
        hi = 1.0 + max(0.0, -w.min() / areas.min()) + Mj * ab * (1 + q) * m.max() / (2 * q)
        while areas @ rho_of(hi) > target:
            hi *= 10.0
        lo = 0.0
        for _ in range(120):
            mid = 0.5 * (lo + hi)
            if areas @ rho_of(mid) > target:
                lo = mid
            else:
                hi = mid
        lam = 0.5 * (lo + hi)
        return rho_of(lam), lam

    rho = rho_cur.copy()
    lam = 0.0
    phi_old = None
    for _ in range(max_inner):
        Mj, gj = deflation.factor_grad(rho)
        Fj = F(rho)
        if phi_old is None:
            phi_old = Mj * Fj
        cand, lam = solve_inner(Mj, Fj * gj)
        Mc, _ = deflation.factor_grad(cand)
        phi_new = Mc * F(cand)
        back = 0
        while phi_new > phi_old and back < 5:
            cand = 0.5 * (cand + rho)
            Mc, _ = deflation.factor_grad(cand)
            phi_new = Mc * F(cand)
            back += 1
        if phi_new > phi_old:
            break
        move = float(np.sqrt(areas @ (cand - rho) ** 2))
        rho, phi_old = cand, phi_new
        if move < 1e-12:
            break
    return rho, float(lam)


class _Workspace:
    """Per-mesh caches shared by the optimization loop."""

    def __init__(self, forms: BrokenForms, bdata: BoundaryData, f=None):
        self.forms, self.bdata = forms, bdata
        self.solver = SaddleSolver(forms, bdata, f=f)
        self.f = f
        free = forms.V.interior_dofs
        self._G = forms.assemble_h1_gram()[free][:, free].tocsc()
        self._G_lu = None
        self.load = forms.load_vector(f=f, g_trace=bdata.trace)
        Lf = self.load[free]
        self.load_dual = float(np.sqrt(Lf @ self._gram_solve(Lf)))

    def _gram_solve(self, r: np.ndarray) -> np.ndarray:
        if self._G_lu is None:
            self._G_lu = spla.splu(self._G)
        return self._G_lu.solve(r)

    def release_factors(self):
        """Free the cached factorizations; they rebuild on the next solve.

        On fine meshes two LU factors do not fit next to the polish system,
        so the polish trades a refactorization for the headroom.
        """
        self.solver._lu = None
        self._G_lu = None

    def dual_norm(self, r_free: np.ndarray) -> float:
        return float(np.sqrt(r_free @ self._gram_solve(r_free)))

    def momentum_residual(self, alpha_cells, x) -> float:
        K, rhs = self.solver.system(alpha_cells)
        r = (K @ x - rhs)[:self.solver.n_free]
        return self.dual_norm(r) / (1.0 + self.load_dual)

    def foc(self, sol: SaddleSolution, state: MaterialState, model: AlphaModel,
            x) -> FocResiduals:
        forms = self.forms
        m = forms.cell_velocity_l2(sol.u.coeffs)
        areas = forms.mesh.cell_areas
        mom = self.momentum_residual(model.alpha(state.rho), x)
        div = divergence_norm(sol.u)
        vi = variational_residual(state.rho, state.lam, m, areas, model)
        slack = state.gamma * areas.sum() - state.rho @ areas
        comp = abs(state.lam * slack) / (1.0 + state.lam * state.gamma * areas.sum())
        return FocResiduals(mom, div, vi, comp)


def _pack_x(solver: SaddleSolver, sol: SaddleSolution) -> np.ndarray:
    x = np.empty(solver.n_free + solver.n_cells - 1)
    x[:solver.n_free] = sol.u.coeffs[solver.free]
    x[solver.n_free:] = sol.p.coeffs[1:] - sol.p.coeffs[0]   # pinned gauge
    return x


def _newton_polish(ws: _Workspace, model: AlphaModel, sol: SaddleSolution,
                   state: MaterialState, foc_tol: float, max_outer: int = 40,
                   verbose: bool = False):
    """Primal-dual active-set refinement of a near-stationary iterate.

    Each pass takes one Newton step on the coupled stationarity system in
    (u, p, rho_free, lam) with the bound sets frozen, then re-classifies:
    free cells pushed past a bound become bound, bound cells whose
    stationarity defect has the wrong sign are released.  Quadratic once the
    sets settle.  Returns None when the iteration leaves its trust region
    (negative multiplier, singular matrix, cycling sets, residual blow-up),
    handing control back to the alternating loop.
    """
    forms, solver = ws.forms, ws.solver
    V = forms.V
    areas = forms.mesh.cell_areas
    target = state.gamma * areas.sum()
    rho = state.rho.copy()
    lam = state.lam
    x = _pack_x(solver, sol)
    remap = np.full(V.n_dofs, -1, dtype=np.int64)
    remap[solver.free] = np.arange(solver.n_free)
    n0 = solver.n_free + solver.n_cells - 1

    lower, upper, interior = MaterialState(rho, lam, state.gamma).classify()
    seen = set()
    settled = False
    r_prev = np.inf
    r_min = np.inf
    lu = None
    ws.release_factors()        # headroom for the coupled factorization below
    for _ in range(max_outer):
        freeC = np.flatnonzero(interior)
        nF = freeC.size
        if nF == 0 or lam <= 0.0:
            return None

        K, rhs = solver.system(model.alpha(rho))
        rK = K @ x - rhs
        u_full = ws.bdata.dof_values.copy()
        u_full[solver.free] = x[:solver.n_free]
        m_all = forms.cell_velocity_l2(u_full)
        ap = model.alpha_prime(rho[freeC])
        r_vi = 0.5 * ap * m_all[freeC] + lam * areas[freeC]
        r_vol = rho @ areas - target
        rhs_n = -np.concatenate([rK, r_vi, [r_vol]])
        r_norm = float(np.linalg.norm(rhs_n))
        if r_norm > 1e3 * r_min:
            return None                      # diverging, bail cheaply
        r_min = min(r_min, r_norm)

        d6 = u_full[V.dofmap[freeC]]
        Mu = np.einsum("cij,cj->ci", forms.mass0[freeC], d6)   # int_K phi_i . u
        rows = remap[V.dofmap[freeC]]
        keep = rows >= 0
        cols = np.repeat(np.arange(nF), 6).reshape(nF, 6)
        D = sp.coo_matrix(((ap[:, None] * Mu)[keep],
                           (rows[keep], cols[keep])),
                          shape=(n0, nF)).tocsc()
        app = 2.0 * model.alpha_bar * model.q * (1 + model.q) / (rho[freeC] + model.q) ** 3
        H = sp.diags(0.5 * app * m_all[freeC])
        acol = sp.csc_matrix(areas[freeC][:, None])
        N = sp.bmat([[K, D, None],
                     [D.T, H, acol],
                     [None, acol.T, None]], format="csc")
        try:
            lu = None           # never hold two of these factors at once
            lu = spla.splu(N)
        except RuntimeError:
            return None
        dz = lu.solve(rhs_n)
        if not np.all(np.isfinite(dz)):
            return None

        x = x + dz[:n0]
        rho[freeC] += dz[n0:n0 + nF]
        lam += dz[-1]
        if lam <= 0.0:
            return None

        # re-classify against the updated primal-dual pair
        crossed_lo = interior & (rho <= 0.0)
        crossed_hi = interior & (rho >= 1.0)
        rho = np.clip(rho, 0.0, 1.0)
        u_full[solver.free] = x[:solver.n_free]
        m_all = forms.cell_velocity_l2(u_full)
        zeta = 0.5 * model.alpha_prime(rho) * m_all + lam * areas
        z_tol = 1e-8 * lam * areas           # hysteresis against chattering
        new_lower = (lower & (zeta >= -z_tol)) | crossed_lo
        new_upper = (upper & (zeta <= z_tol)) | crossed_hi
        rho[new_lower] = 0.0
        rho[new_upper] = 1.0
        changed = int(np.sum(new_lower != lower) + np.sum(new_upper != upper))
        lower, upper = new_lower, new_upper
        interior = ~(lower | upper)
        if verbose:
            print(f"    polish pass: nF={nF} changed={changed} "
                  f"|r|={r_norm:.3e} lam={lam:.6e}")
        if changed:
            key = (lower.tobytes(), upper.tobytes())
            if key in seen:
                return None                    # set oscillation
            seen.add(key)
        elif r_norm > 0.25 * r_prev:
            # quadratic phase over (roundoff floor or stall); certify below
            settled = True
            break
        r_prev = r_norm

    if not settled:
        return None
    sol2 = solver.unpack(x)
    state2 = MaterialState(rho, float(lam), state.gamma)
    foc = ws.foc(sol2, state2, model, x)
    if foc.max <= foc_tol and state2.feasible(areas):
        return sol2, state2, foc, x
    return None


@dataclass
class OptOptions:
    """Knobs of the alternating loop; defaults match the benchmark runs."""

    gamma: float = 1.0 / 3.0
    alpha_schedule: tuple = (2.5e2, 2.5e3, 2.5e4)
    q: float = 0.1
    max_iterations: int = 2000
    foc_tol: float = 1e-8
    rho_tol: float = 1e-8
    omega0: float = 1.0
    omega_floor: float = 1.0 / 64.0
    descent_rtol: float = 1e-12
    polish: bool = True
    polish_foc_trigger: float = 1e-2
    polish_drho_trigger: float = 1e-4
    polish_spacing: int = 10
    polish_max_attempts: int = 12
    # deflation steers the early iterations; once the iterate sits this far
    # from every known solution (relative to sqrt(|Omega|)) and has settled,
    # it is switched off so the tail converges on the original problem
    deflation_release_distance: float = 0.15
    deflation_release_drho: float = 1e-3


def alternating_solve(forms: BrokenForms, bdata: BoundaryData, rho0: np.ndarray,
                      opts: OptOptions, f=None, deflation: DeflationOperator | None = None,
                      workspace: _Workspace | None = None):
    """Continuation-wrapped alternating minimization.

    Returns (solution, state, report).  Within every continuation stage the
    recorded energies are nonincreasing (enforced up to the descent
    tolerance); the optional Newton polish at the stage tail drives the
    stationarity residuals to roundoff without disturbing monotonicity at any
    resolvable level.
    """
    t0 = time.time()
    ws = workspace or _Workspace(forms, bdata, f=f)
    areas = forms.mesh.cell_areas
    target_vol = opts.gamma * areas.sum()
    rho = np.asarray(rho0, dtype=float).copy()
    if rho.shape != (forms.mesh.n_cells,):
        raise ValueError("seed material field does not match the mesh")
    if np.any(rho < 0) or np.any(rho > 1) or rho @ areas > target_vol * (1 + 1e-12):
        raise ValueError("seed material field is infeasible")

    stages = []
    sol = None
    state = MaterialState(rho, 0.0, opts.gamma)
    for ab in opts.alpha_schedule:
        model = AlphaModel(ab, opts.q)
        rep = StageReport(alpha_bar=ab, iterations=0)
        omega = opts.omega0
        J_prev = None
        polish_attempts = 0
        last_polish_iter = -10
        for it in range(opts.max_iterations):
            sol = ws.solver.solve(model.alpha(rho))
            J_u = ws.forms.energy(sol.u.coeffs, model.alpha(rho), ws.bdata.trace, f=ws.f)
            if J_prev is not None and J_u > J_prev + opts.descent_rtol * (1 + abs(J_prev)):
                raise DescentError(
                    f"flow step raised the energy: {J_prev!r} -> {J_u!r}")
            m = forms.cell_velocity_l2(sol.u.coeffs)
            if deflation is not None:
                # the deflated step minimizes a repulsion-weighted objective,
                # so plain-energy descent is not enforced on it
                rho_new, lam = deflated_rho_step(m, areas, model, opts.gamma,
                                                 rho, deflation)
                w = 1.0
                J_new = ws.forms.energy(sol.u.coeffs, model.alpha(rho_new),
                                        ws.bdata.trace, f=ws.f)
            else:
                rho_star, lam = rho_from_m(m, areas, model, opts.gamma)
                w = omega
                while True:
                    rho_new = (1 - w) * rho + w * rho_star
                    J_new = ws.forms.energy(sol.u.coeffs, model.alpha(rho_new),
                                            ws.bdata.trace, f=ws.f)
                    if (J_new <= J_u + opts.descent_rtol * (1 + abs(J_u))
                            or w <= opts.omega_floor):
                        break
                    w *= 0.5
                if J_new > J_u + opts.descent_rtol * (1 + abs(J_u)):
                    raise DescentError(
                        f"material step raised the energy at omega={w}: "
                        f"{J_u!r} -> {J_new!r}")
                omega = min(opts.omega0, w * 2.0)
            drho = float(np.sqrt(areas @ (rho_new - rho) ** 2))
            rho = rho_new
            state = MaterialState(rho, lam, opts.gamma)
            J_prev = J_new
            rep.J_history.append(J_new)
            rep.iterations += 1
            rep.omega_final = w

            if deflation is not None and drho <= opts.deflation_release_drho:
                dmin = min(float(np.sqrt(areas @ (rho - r) ** 2))
                           for r in deflation.known)
                if dmin > opts.deflation_release_distance * np.sqrt(areas.sum()):
                    deflation = None   # settled in a new basin; finish undeflated
                    omega = opts.omega0

            x = _pack_x(ws.solver, sol)
            foc = ws.foc(sol, state, model, x)
            rep.foc = foc
            if foc.max <= opts.foc_tol and (drho <= opts.rho_tol or foc.max <= 1e-13):
                rep.converged = True
                break
            if (opts.polish and deflation is None
                    and (foc.max <= opts.polish_foc_trigger
                         or drho <= opts.polish_drho_trigger)
                    and polish_attempts < opts.polish_max_attempts
                    and it - last_polish_iter >= opts.polish_spacing):
                polish_attempts += 1
                last_polish_iter = it
                out = _newton_polish(ws, model, sol, state, opts.foc_tol)
                rep.polish_iterations += 1
                if out is not None:
                    J_fin = ws.forms.energy(out[0].u.coeffs, model.alpha(out[1].rho),
                                            ws.bdata.trace, f=ws.f)
                    # a stationary point uphill is some other basin's; skip it
                    if J_fin <= rep.J_history[-1] + opts.descent_rtol * (1 + abs(J_fin)):
                        sol, state, foc, x = out
                        rho = state.rho
                        rep.foc = foc
                        rep.converged = True
                        rep.J_history.append(J_fin)
                        break
        stages.append(rep)
    report = OptimizeReport(stages, wall_time=time.time() - t0)
    return sol, state, report


# -- multi-start registry ------------------------------------------------------


@dataclass
class RegistryEntry:
    seed: str
    solution: SaddleSolution
    state: MaterialState
    report: OptimizeReport

    @property
    def J(self) -> float:
        return self.report.J_final


@dataclass
class Registry:
    entries: list = field(default_factory=list)
    duplicates: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    def distances(self, areas: np.ndarray) -> np.ndarray:
        n = len(self.entries)
        d = np.zeros((n, n))
        for i in range(n):
            for j in range(i + 1, n):
                diff = self.entries[i].state.rho - self.entries[j].state.rho
                d[i, j] = d[j, i] = np.sqrt(areas @ diff ** 2)
        return d


def multi_start(forms: BrokenForms, bdata: BoundaryData, seeds: dict,
                opts: OptOptions, f=None, deflate: bool = False,
                distance_tol_rel: float = 0.05) -> Registry:
    """Run the optimizer from every seed and keep the distinct converged ends.

    Solutions closer than distance_tol_rel * sqrt(|Omega|) in L2 to an earlier
    entry are recorded as duplicates.  With deflate=True later runs minimize a
    material subproblem multiplied by a repulsion factor from the entries
    already found.
    """
    ws = _Workspace(forms, bdata, f=f)
    areas = forms.mesh.cell_areas
    tol = distance_tol_rel * np.sqrt(areas.sum())
    reg = Registry()
    for name in sorted(seeds):
        defl = None
        if deflate and reg.entries:
            defl = DeflationOperator([e.state.rho for e in reg.entries], areas)
        sol, state, report = alternating_solve(forms, bdata, seeds[name], opts,
                                               f=f, deflation=defl, workspace=ws)
        if not (report.converged and report.foc.max <= opts.foc_tol):
            reg.failures.append((name, report))
            continue
        dists = [float(np.sqrt(areas @ (state.rho - e.state.rho) ** 2))
                 for e in reg.entries]
        if dists and min(dists) <= tol:
            reg.duplicates.append((name, min(dists)))
            continue
        reg.entries.append(RegistryEntry(name, sol, state, report))
    reg.entries.sort(key=lambda e: (e.J, e.seed))
    return reg


# -- transfer between nested meshes -------------------------------------------


def transfer_to_fine(coarse: Field, fine_space) -> Field:
    """Inject a coarse field into the child space of one uniform refinement.

    Piecewise constants copy the parent value; velocity fields are resampled
    through their facet moments, which reproduces them exactly because the
    coarse space is nested in the fine one.
    """
    fine_mesh = fine_space.mesh
    if fine_mesh.parent is None:
        raise ValueError("fine mesh does not record a parent map")
    cspace = coarse.space
    if fine_mesh.parent.max() >= cspace.mesh.n_cells:
        raise ValueError("parent map does not match the coarse mesh")

    if isinstance(cspace, Dg0Space):
        return Field(fine_space, coarse.coeffs[fine_mesh.parent])

    s, w = np.polynomial.legendre.leggauss(2)
    s = 0.5 * (s + 1.0)
    w = 0.5 * w
    mesh = fine_mesh
    lo = mesh.vertices[mesh.facets[:, 0]]
    t = mesh.vertices[mesh.facets[:, 1]] - lo
    pts = lo[:, None, :] + s[None, :, None] * t[:, None, :]
    owner = fine_mesh.parent[mesh.facet_cells[:, 0]]
    rel = pts - cspace.mesh.cell_centroids[owner][:, None, :]
    d = coarse.coeffs[cspace.dofmap[owner]]
    a = np.einsum("fb,fbi->fi", d, cspace.lin_a[owner])
    Bm = np.einsum("fb,fbij->fij", d, cspace.lin_B[owner])
    vals = a[:, None, :] + np.einsum("fij,fqj->fqi", Bm, rel)
    n_e = np.stack([t[:, 1], -t[:, 0]], axis=1) / mesh.h_facet[:, None]
    vn = np.einsum("fqi,fi->fq", vals, n_e)
    coeffs = np.empty(fine_space.n_dofs)
    coeffs[0::2] = mesh.h_facet * (vn @ w)
    coeffs[1::2] = mesh.h_facet * ((vn * (2 * s - 1)) @ w)
    return Field(fine_space, coeffs)
