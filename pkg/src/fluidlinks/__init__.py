"""Simulation and optimal control of ball-jointed rigid bodies in an
incompressible, irrotational fluid.

The package couples a structure-preserving variational integrator on the
rotation-group configuration manifold with a direct, spline-parameterized
optimal control layer, plus a conventional Runge-Kutta reference integrator
used for cross-validation.
"""

__version__ = "0.1.0"
