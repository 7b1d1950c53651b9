"""Pointwise divergence-free topology optimization of Stokes flow.

An interior-penalty discontinuous Galerkin discretization (H(div)-conforming
linear velocities, piecewise-constant pressures and material) of the material
distribution problem for minimal-dissipation flow, solved by alternating
minimization with penalty continuation.
"""

__version__ = "0.1.0"
