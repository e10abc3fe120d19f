"""Rotation-group primitives: hat/vee maps, exponential and logarithm,
orthonormality checks, and a Newton solver for implicit rotation equations.

All rotations are plain (3, 3) float arrays.  Nothing in this module ever
projects a matrix back onto the group: functions that produce rotations do so
structurally (through the exponential map), and functions that consume them
may verify the group invariants with ``check_rotation``.
"""

from __future__ import annotations

import numpy as np

# Below this angle the Rodrigues coefficients switch to their series
# expansions (the closed forms lose precision to cancellation).
SMALL_ANGLE = 1e-8

ORTHONORMALITY_TOL = 1e-12


class ImplicitSolveError(RuntimeError):
    """Newton iteration on a rotation equation failed to converge.

    Usually means the right-hand side is outside the reachable range of the
    left-hand side, e.g. because the integration step size is too large.
    """


def hat(v) -> np.ndarray:
    """Skew matrix of a 3-vector: hat(v) @ w == cross(v, w)."""
    v = np.asarray(v, dtype=float)
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def vee(S, tol: float = 1e-10) -> np.ndarray:
    """Inverse of ``hat``.  Rejects matrices that are not skew-symmetric.

    A non-skew argument signals numerical corruption upstream (these
    matrices arise as differences like F @ J - J @ F.T that are skew by
    construction), so it raises instead of silently symmetrizing.
    """
    S = np.asarray(S, dtype=float)
    defect = np.linalg.norm(S + S.T, "fro")
    if defect > tol:
        raise ValueError(
            f"vee: matrix is not skew-symmetric (|S + S^T|_F = {defect:.3e})"
        )
    return np.array([S[2, 1], S[0, 2], S[1, 0]])


def exp_so3(v) -> np.ndarray:
    """Rodrigues formula for exp of a rotation vector."""
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v)
    S = hat(v)
    if theta < SMALL_ANGLE:
        a = 1.0 - theta**2 / 6.0
        b = 0.5 - theta**2 / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * S + b * (S @ S)


def log_so3(R, pi_tol: float = 1e-6) -> np.ndarray:
    """Rotation vector of R, with a dedicated branch near angle pi.

    Within ``pi_tol`` of a half turn the antisymmetric part is too small to
    define the axis, so the axis is recovered from the symmetric part
    (R + I)/2 ~= a a^T and its sign is fixed by making the largest-magnitude
    component positive.
    """
    R = np.asarray(R, dtype=float)
    c = (np.trace(R) - 1.0) / 2.0
    c = min(1.0, max(-1.0, c))
    theta = np.arccos(c)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < SMALL_ANGLE:
        return 0.5 * w  # sin(theta)/theta ~ 1 at this scale
    if np.pi - theta < pi_tol:
        B = 0.5 * (R + np.eye(3))
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / np.sqrt(max(B[k, k], 0.0))
        axis /= np.linalg.norm(axis)
        j = int(np.argmax(np.abs(axis)))
        if axis[j] < 0.0:
            axis = -axis
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * w


def project_rotation(A) -> np.ndarray:
    """Closest rotation in Frobenius norm (polar factor, det corrected).

    Used only by the conventional reference integrator; the variational
    integrator never needs it.
    """
    A = np.asarray(A, dtype=float)
    U, _, Vt = np.linalg.svd(A)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def rotation_defect(R) -> float:
    """Frobenius distance of R^T R from the identity."""
    R = np.asarray(R, dtype=float)
    return float(np.linalg.norm(R.T @ R - np.eye(3), "fro"))


def check_rotation(R, tol: float = ORTHONORMALITY_TOL) -> np.ndarray:
    """Validate the rotation invariants; returns R unchanged on success."""
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {R.shape}")
    d = rotation_defect(R)
    if d > tol:
        raise ValueError(f"matrix is not orthonormal (|R^T R - I|_F = {d:.3e})")
    if abs(np.linalg.det(R) - 1.0) > max(tol, 1e-12):
        raise ValueError("matrix has determinant != +1 (improper rotation)")
    return R


def _default_residual(F, J_d, b):
    return vee(F @ J_d - J_d @ F.T, tol=1e-8) - b


def solve_implicit_rotation(
    J_d,
    b,
    residual_fn=None,
    F0=None,
    tol: float = 1e-12,
    max_iter: int = 50,
) -> np.ndarray:
    """Solve (F J_d - J_d F^T)^vee = b for F in SO(3).

    Newton iteration in exponential coordinates, F <- F exp(hat(phi)), so
    every iterate is a rotation by construction.  ``residual_fn(F)`` may
    override the left-hand side; the Jacobian is then taken by central
    differences (step 1e-7) instead of the closed form.

    Raises ``ImplicitSolveError`` after ``max_iter`` iterations, which in the
    integrator context signals a too-large time step.
    """
    J_d = np.asarray(J_d, dtype=float)
    b = np.asarray(b, dtype=float)
    if residual_fn is None:
        res = lambda F: _default_residual(F, J_d, b)
        analytic = True
    else:
        res = residual_fn
        analytic = False

    F = np.eye(3) if F0 is None else np.array(F0, dtype=float)
    for _ in range(max_iter):
        r = res(F)
        if np.linalg.norm(r) <= tol:
            return F
        Jac = np.empty((3, 3))
        if analytic:
            for j in range(3):
                E = hat(np.eye(3)[j])
                D = F @ E @ J_d + J_d @ E @ F.T
                Jac[:, j] = [D[2, 1], D[0, 2], D[1, 0]]
        else:
            for j in range(3):
                step = 1e-7 * np.eye(3)[j]
                Jac[:, j] = (res(F @ exp_so3(step)) - res(F @ exp_so3(-step))) / 2e-7
        phi = np.linalg.solve(Jac, -r)
        F = F @ exp_so3(phi)
    raise ImplicitSolveError(
        f"implicit rotation solve: no convergence in {max_iter} iterations "
        f"(|residual| = {np.linalg.norm(res(F)):.3e}); reduce the step size"
    )
