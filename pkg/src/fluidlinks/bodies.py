"""Model of three ball-jointed rigid bodies in an incompressible,
irrotational fluid.

The fluid never appears as a state variable: its effect is folded into
effective inertia matrices (body inertia plus added inertia), so each body
carries a 3x3 effective mass M_i and a 3x3 effective rotational inertia J_i.
The central body (index 0) is connected to the two link bodies (1 and 2) by
ball joints; d_01/d_02 locate the joints in the central frame and d_10/d_20
in the link frames.

Configuration: (R_0, x, R_1, R_2) with R_i the body-to-reference attitude
and x the central body's center of mass.  Body velocity is the stacked
vector xi = [Omega_0; xdot; Omega_1; Omega_2] with angular rates in body
frames and xdot in the reference frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as k
from .so3 import check_rotation, hat

E1 = np.array([1.0, 0.0, 0.0])
E2 = np.array([0.0, 1.0, 0.0])
E3 = np.array([0.0, 0.0, 1.0])


def _spd(A, name: str, tol: float = 1e-9) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.shape != (3, 3):
        raise ValueError(f"{name}: expected a 3x3 matrix, got {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError(f"{name}: non-finite entries")
    if np.linalg.norm(A - A.T, "fro") > tol * max(1.0, np.linalg.norm(A, "fro")):
        raise ValueError(f"{name}: matrix is not symmetric")
    if np.min(np.linalg.eigvalsh(0.5 * (A + A.T))) <= 0.0:
        raise ValueError(f"{name}: matrix is not positive definite")
    return A


def _vec3(v, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.shape != (3,):
        raise ValueError(f"{name}: expected a 3-vector")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name}: non-finite entries")
    return v


@dataclass
class SystemParams:
    """Effective inertias and joint geometry of the three-body system.

    M_i = m_i I + (added mass), J_i = (body inertia) + (added inertia);
    both must be symmetric positive definite.  ``body_masses`` and
    ``body_inertias`` optionally split off the rigid-body share, used only
    by the momentum-exchange diagnostics (the dynamics see only the
    effective matrices).
    """

    M0: np.ndarray
    M1: np.ndarray
    M2: np.ndarray
    J0: np.ndarray
    J1: np.ndarray
    J2: np.ndarray
    d01: np.ndarray
    d02: np.ndarray
    d10: np.ndarray
    d20: np.ndarray
    body_masses: np.ndarray | None = None
    body_inertias: list[np.ndarray] | None = None

    def __post_init__(self):
        self.M0 = _spd(self.M0, "M0")
        self.M1 = _spd(self.M1, "M1")
        self.M2 = _spd(self.M2, "M2")
        self.J0 = _spd(self.J0, "J0")
        self.J1 = _spd(self.J1, "J1")
        self.J2 = _spd(self.J2, "J2")
        self.d01 = _vec3(self.d01, "d01")
        self.d02 = _vec3(self.d02, "d02")
        self.d10 = _vec3(self.d10, "d10")
        self.d20 = _vec3(self.d20, "d20")
        if self.body_masses is not None:
            bm = np.asarray(self.body_masses, dtype=float).reshape(-1)
            if bm.shape != (3,) or np.any(bm <= 0):
                raise ValueError("body_masses: expected three positive scalars")
            self.body_masses = bm
        if self.body_inertias is not None:
            self.body_inertias = [
                _spd(B, f"body_inertias[{i}]") for i, B in enumerate(self.body_inertias)
            ]
        self._packed = None

    # arrays handed to the compiled kernels; built once per instance
    def packed(self):
        if self._packed is None:
            M = np.ascontiguousarray(np.stack([self.M0, self.M1, self.M2]))
            J = np.ascontiguousarray(np.stack([self.J0, self.J1, self.J2]))
            d0 = np.ascontiguousarray(np.stack([self.d01, self.d02]))
            di = np.ascontiguousarray(np.stack([self.d10, self.d20]))
            Jd = np.empty((3, 3, 3))
            Jd[0] = 0.5 * np.trace(self.J0) * np.eye(3) - self.J0
            for b, (Jb, Mb, dbi) in enumerate(
                [(self.J1, self.M1, self.d10), (self.J2, self.M2, self.d20)], start=1
            ):
                Jp = Jb - hat(dbi) @ Mb @ hat(dbi)
                Jd[b] = 0.5 * np.trace(Jp) * np.eye(3) - Jp
            self._packed = (M, J, np.ascontiguousarray(Jd), d0, di)
        return self._packed


@dataclass
class Configuration:
    """Group element (R_0, x, R_1, R_2)."""

    R0: np.ndarray
    x: np.ndarray
    R1: np.ndarray
    R2: np.ndarray

    def __post_init__(self):
        self.R0 = check_rotation(self.R0)
        self.R1 = check_rotation(self.R1)
        self.R2 = check_rotation(self.R2)
        self.x = _vec3(self.x, "x")

    @property
    def rotations(self) -> np.ndarray:
        """Attitudes stacked as a (3, 3, 3) array."""
        return np.ascontiguousarray(np.stack([self.R0, self.R1, self.R2]))

    @classmethod
    def from_rotations(cls, R: np.ndarray, x) -> "Configuration":
        return cls(R0=R[0].copy(), x=np.asarray(x, float).copy(), R1=R[1].copy(), R2=R[2].copy())

    @classmethod
    def identity(cls) -> "Configuration":
        return cls(np.eye(3), np.zeros(3), np.eye(3), np.eye(3))


@dataclass
class BodyVelocity:
    """Left-trivialized velocity [Omega_0; xdot; Omega_1; Omega_2]."""

    Omega0: np.ndarray = field(default_factory=lambda: np.zeros(3))
    xdot: np.ndarray = field(default_factory=lambda: np.zeros(3))
    Omega1: np.ndarray = field(default_factory=lambda: np.zeros(3))
    Omega2: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.Omega0 = _vec3(self.Omega0, "Omega0")
        self.xdot = _vec3(self.xdot, "xdot")
        self.Omega1 = _vec3(self.Omega1, "Omega1")
        self.Omega2 = _vec3(self.Omega2, "Omega2")

    @property
    def stacked(self) -> np.ndarray:
        return np.concatenate([self.Omega0, self.xdot, self.Omega1, self.Omega2])

    @classmethod
    def from_stacked(cls, xi) -> "BodyVelocity":
        xi = np.asarray(xi, dtype=float).reshape(12)
        return cls(xi[0:3].copy(), xi[3:6].copy(), xi[6:9].copy(), xi[9:12].copy())


@dataclass
class ControlMoment:
    """Internal joint moments, both expressed in the central body frame."""

    u1: np.ndarray = field(default_factory=lambda: np.zeros(3))
    u2: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.u1 = _vec3(self.u1, "u1")
        self.u2 = _vec3(self.u2, "u2")

    @property
    def stacked(self) -> np.ndarray:
        return np.concatenate([self.u1, self.u2])


def body_velocity(params: SystemParams, config: Configuration, xi, i: int) -> np.ndarray:
    """Velocity of body i in its own frame.

    For the links (i = 1, 2) this is
    R_i^T xdot - R_i^T R_0 hat(d_0i) Omega_0 + hat(d_i0) Omega_i;
    the central body reduces to R_0^T xdot.
    """
    if i not in (0, 1, 2):
        raise ValueError("body index must be 0, 1 or 2")
    M, J, Jd, d0, di = params.packed()
    xi = np.asarray(xi, dtype=float).reshape(12)
    return k.body_velocity3(M, J, d0, di, config.rotations, xi, i)


def assemble_inertia(params: SystemParams, config: Configuration) -> np.ndarray:
    """12x12 generalized inertia at the given attitudes."""
    M, J, Jd, d0, di = params.packed()
    return k.inertia12(M, J, d0, di, config.rotations)


def kinetic_energy(params: SystemParams, config: Configuration, xi) -> float:
    """Kinetic energy as the per-body sum (independent of assemble_inertia).

    Kept as the direct sum over bodies so that agreement with the quadratic
    form through the assembled inertia is a real consistency check.
    """
    xi = np.asarray(xi, dtype=float).reshape(12)
    T = 0.0
    omegas = (xi[0:3], xi[6:9], xi[9:12])
    Ms = (params.M0, params.M1, params.M2)
    Js = (params.J0, params.J1, params.J2)
    for i in range(3):
        V = body_velocity(params, config, xi, i)
        T += 0.5 * V @ (Ms[i] @ V) + 0.5 * omegas[i] @ (Js[i] @ omegas[i])
    return float(T)


def momentum(params: SystemParams, config: Configuration, xi) -> np.ndarray:
    """Legendre transform mu = inertia @ xi."""
    xi = np.asarray(xi, dtype=float).reshape(12)
    return assemble_inertia(params, config) @ xi


def total_momenta(params: SystemParams, config: Configuration, xi):
    """Total linear and angular momentum (bodies plus fluid).

    p_x is the translational momentum block; the angular momentum about the
    reference origin is hat(x) p_x + sum_i R_i p_i.  Both are conserved
    along the dynamics, with or without the internal joint moments.
    """
    mu = momentum(params, config, xi)
    px, pom = k.momentum_maps(config.rotations, config.x, mu)
    return px, pom


def control_covector(config: Configuration, u: ControlMoment) -> np.ndarray:
    """Generalized force [u1+u2; 0; -R_1^T R_0 u1; -R_2^T R_0 u2]."""
    return k.covector12(config.rotations, u.stacked)


def body_positions(params: SystemParams, config: Configuration) -> np.ndarray:
    """Centers of mass of the three bodies in the reference frame."""
    out = np.empty((3, 3))
    out[0] = config.x
    out[1] = config.x + config.R0 @ params.d01 - config.R1 @ params.d10
    out[2] = config.x + config.R0 @ params.d02 - config.R2 @ params.d20
    return out
