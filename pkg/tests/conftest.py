"""Shared fixtures: coarse meshes and assembled forms reused across modules."""

import numpy as np
import pytest

from hdivtopo.elements import Bdm1Space
from hdivtopo.forms import BrokenForms
from hdivtopo.mesh import generate_rect_mesh


@pytest.fixture(scope="session")
def unit_mesh():
    return generate_rect_mesh(4, 4, 1.0, 1.0)


@pytest.fixture(scope="session")
def unit_space(unit_mesh):
    return Bdm1Space(unit_mesh)


@pytest.fixture(scope="session")
def unit_forms(unit_mesh, unit_space):
    return BrokenForms(unit_mesh, unit_space)


def locate_cell(mesh, pt):
    """Index of a cell containing pt, by brute-force barycentric test."""
    tri = mesh.vertices[mesh.cells]
    T = np.stack([tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]], axis=-1)
    lam = np.linalg.solve(T, (np.asarray(pt) - tri[:, 0])[..., None])[..., 0]
    inside = (lam > -1e-12).all(axis=1) & (lam.sum(axis=1) < 1.0 + 1e-12)
    return int(np.flatnonzero(inside)[0])


def rayleigh_floor(forms, n_samples=100, seed=0):
    """Smallest sampled Rayleigh quotient of a_h against the broken H1 gram
    over random fields with zero normal boundary trace."""
    rng = np.random.default_rng(seed)
    V = forms.V
    A = forms.assemble_a(np.zeros(forms.mesh.n_cells))
    G = forms.assemble_h1_gram()
    best = np.inf
    for _ in range(n_samples):
        w = rng.standard_normal(V.n_dofs)
        w[V.boundary_dofs] = 0.0
        best = min(best, float(w @ (A @ w)) / float(w @ (G @ w)))
    return best
