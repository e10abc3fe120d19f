"""Continuous-time equations of motion and a Runge-Kutta reference
integrator.

The forced Euler-Lagrange system on the left-trivialized tangent bundle is

    inertia(R) @ xi_dot + bias(R, xi) = U(R, u),      g_dot = g xi,

where the bias collects the gyroscopic and joint-coupling terms.  The RK4
stepper integrates this in the ambient matrix space and re-projects the
attitudes with the polar map after every step; it exists to cross-check the
variational integrator's accuracy order and energy behavior, not to be the
production integrator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as k
from .bodies import Configuration, ControlMoment, SystemParams


@dataclass
class ContinuousState:
    config: Configuration
    xi: np.ndarray

    def __post_init__(self):
        self.xi = np.asarray(self.xi, dtype=float).reshape(12)


def coupling_term_W(params: SystemParams, config: Configuration, xi, i: int) -> np.ndarray:
    """Joint-coupling vector W_i (i = 1 or 2) of the link equations."""
    if i not in (1, 2):
        raise ValueError("coupling term is defined for the link bodies 1 and 2")
    xi = np.asarray(xi, dtype=float).reshape(12)
    R = config.rotations
    Mb = (params.M1, params.M2)[i - 1]
    db0 = (params.d01, params.d02)[i - 1]
    dbi = (params.d10, params.d20)[i - 1]
    Om0 = xi[0:3]
    Omb = xi[3 + 3 * i : 6 + 3 * i]
    xdot = xi[3:6]
    G = R[i].T @ xdot - R[i].T @ (R[0] @ np.cross(db0, Om0))
    W = np.cross(Omb, Mb @ G) - Mb @ np.cross(Omb, G)
    W -= Mb @ (R[i].T @ (R[0] @ np.cross(Om0, np.cross(db0, Om0))))
    W += np.cross(Omb, Mb @ np.cross(dbi, Omb))
    return W


def el_bias(params: SystemParams, config: Configuration, xi) -> np.ndarray:
    """Velocity-dependent bias of the Euler-Lagrange system."""
    M, J, Jd, d0, di = params.packed()
    xi = np.asarray(xi, dtype=float).reshape(12)
    return k.bias12(M, J, d0, di, config.rotations, xi)


def el_vector_field(params: SystemParams, state: ContinuousState, u: ControlMoment):
    """Time derivative of a continuous state under the forced dynamics.

    Returns (R_dot, x_dot, xi_dot): the attitude derivatives stacked
    (3, 3, 3), the translational velocity, and the acceleration
    inertia^{-1} (U - bias).
    """
    M, J, Jd, d0, di = params.packed()
    R = state.config.rotations
    II = k.inertia12(M, J, d0, di, R)
    if np.linalg.cond(II) > 1e8:
        raise ValueError("generalized inertia is ill-conditioned; degenerate parameters")
    xi = state.xi
    xi_dot = k.xi_dot12(M, J, d0, di, R, xi, u.stacked)
    R_dot = np.empty((3, 3, 3))
    omegas = (xi[0:3], xi[6:9], xi[9:12])
    for b in range(3):
        R_dot[b] = R[b] @ np.array(
            [
                [0.0, -omegas[b][2], omegas[b][1]],
                [omegas[b][2], 0.0, -omegas[b][0]],
                [-omegas[b][1], omegas[b][0], 0.0],
            ]
        )
    return R_dot, xi[3:6].copy(), xi_dot


def rk4_step(params: SystemParams, state: ContinuousState, u_of_t, t: float, h: float) -> ContinuousState:
    """One classical RK4 step.  ``u_of_t(t)`` returns a ControlMoment."""
    if h <= 0.0:
        raise ValueError("step size must be positive")
    M, J, Jd, d0, di = params.packed()
    u_a = u_of_t(t).stacked
    u_m = u_of_t(t + 0.5 * h).stacked
    u_b = u_of_t(t + h).stacked
    R, x, xi = k.rk4_step(
        M, J, d0, di, state.config.rotations, state.config.x, state.xi, u_a, u_m, u_b, h
    )
    return ContinuousState(Configuration.from_rotations(R, x), xi)


def rk4_trajectory(params: SystemParams, state0: ContinuousState, u_of_t, h: float, N: int):
    """Integrate N steps; returns (R_traj, x_traj, xi_traj, energies)."""
    if h <= 0.0 or N < 1:
        raise ValueError("need h > 0 and N >= 1")
    M, J, Jd, d0, di = params.packed()
    if u_of_t is None:
        u_nodes = np.zeros((N + 1, 6))
        u_half = np.zeros((N, 6))
    else:
        u_nodes = np.stack([u_of_t(k_ * h).stacked for k_ in range(N + 1)])
        u_half = np.stack([u_of_t((k_ + 0.5) * h).stacked for k_ in range(N)])
    return k.rk4_run(
        M, J, d0, di, state0.config.rotations, state0.config.x, state0.xi, u_nodes, u_half, h
    )
