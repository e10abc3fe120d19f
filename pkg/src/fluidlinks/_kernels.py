"""Compiled numerical core for the three-body ideal-fluid system.

Everything here operates on plain float64 arrays so it can be jitted:

* rotations stacked as ``R[3, 3, 3]`` = (central body, link 1, link 2),
* relative updates stacked as ``F[3, 3, 3]`` plus a translation ``dx[3]``,
* body velocity ``xi[12]`` = [Omega_0; xdot; Omega_1; Omega_2],
* controls ``u[6]`` = [u_1; u_2] (both expressed in the central body frame),
* parameters packed as ``M[3, 3, 3]`` (effective masses), ``J[3, 3, 3]``
  (effective rotational inertias), ``Jd[3, 3, 3]`` (nonstandard discrete
  inertias), ``d0[2, 3]`` (joint offsets in the central frame) and
  ``di[2, 3]`` (joint offsets in the link frames).

The public modules wrap these kernels with typed containers and validation;
tests check them against independent slow-path oracles.
"""

import numpy as np
from numba import njit, prange

# ---------------------------------------------------------------------------
# small fixed-size linear algebra (explicit loops beat BLAS at 3x3)
# ---------------------------------------------------------------------------


@njit(cache=True, inline="always")
def _mm33(A, B):
    C = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            C[i, j] = A[i, 0] * B[0, j] + A[i, 1] * B[1, j] + A[i, 2] * B[2, j]
    return C


@njit(cache=True, inline="always")
def _mtm33(A, B):
    # A^T @ B
    C = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            C[i, j] = A[0, i] * B[0, j] + A[1, i] * B[1, j] + A[2, i] * B[2, j]
    return C


@njit(cache=True, inline="always")
def _mmt33(A, B):
    # A @ B^T
    C = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            C[i, j] = A[i, 0] * B[j, 0] + A[i, 1] * B[j, 1] + A[i, 2] * B[j, 2]
    return C


@njit(cache=True, inline="always")
def _mv3(A, v):
    w = np.empty(3)
    for i in range(3):
        w[i] = A[i, 0] * v[0] + A[i, 1] * v[1] + A[i, 2] * v[2]
    return w


@njit(cache=True, inline="always")
def _mtv3(A, v):
    # A^T @ v
    w = np.empty(3)
    for i in range(3):
        w[i] = A[0, i] * v[0] + A[1, i] * v[1] + A[2, i] * v[2]
    return w


@njit(cache=True, inline="always")
def _cross3(a, b):
    c = np.empty(3)
    c[0] = a[1] * b[2] - a[2] * b[1]
    c[1] = a[2] * b[0] - a[0] * b[2]
    c[2] = a[0] * b[1] - a[1] * b[0]
    return c


@njit(cache=True, inline="always")
def _hat3(v):
    S = np.zeros((3, 3))
    S[0, 1] = -v[2]
    S[0, 2] = v[1]
    S[1, 0] = v[2]
    S[1, 2] = -v[0]
    S[2, 0] = -v[1]
    S[2, 1] = v[0]
    return S


@njit(cache=True, inline="always")
def _veeskew(K):
    # vee(K - K^T) without forming the difference
    w = np.empty(3)
    w[0] = K[2, 1] - K[1, 2]
    w[1] = K[0, 2] - K[2, 0]
    w[2] = K[1, 0] - K[0, 1]
    return w


@njit(cache=True, inline="always")
def _eye3():
    I = np.zeros((3, 3))
    I[0, 0] = 1.0
    I[1, 1] = 1.0
    I[2, 2] = 1.0
    return I


@njit(cache=True)
def _exp3(v):
    theta2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2]
    theta = np.sqrt(theta2)
    if theta < 1e-8:
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    S = _hat3(v)
    S2 = _mm33(S, S)
    R = _eye3()
    for i in range(3):
        for j in range(3):
            R[i, j] += a * S[i, j] + b * S2[i, j]
    return R


@njit(cache=True)
def _log3(R):
    c = 0.5 * (R[0, 0] + R[1, 1] + R[2, 2] - 1.0)
    if c > 1.0:
        c = 1.0
    elif c < -1.0:
        c = -1.0
    theta = np.arccos(c)
    w = np.empty(3)
    w[0] = R[2, 1] - R[1, 2]
    w[1] = R[0, 2] - R[2, 0]
    w[2] = R[1, 0] - R[0, 1]
    if theta < 1e-8:
        for i in range(3):
            w[i] *= 0.5
        return w
    if np.pi - theta < 1e-6:
        # axis from the symmetric part; sign fixed by the largest component
        k = 0
        if R[1, 1] > R[k, k]:
            k = 1
        if R[2, 2] > R[k, k]:
            k = 2
        ax = np.empty(3)
        for i in range(3):
            ax[i] = 0.5 * (R[i, k] + (1.0 if i == k else 0.0))
        nrm = np.sqrt(ax[0] ** 2 + ax[1] ** 2 + ax[2] ** 2)
        for i in range(3):
            ax[i] /= nrm
        j = 0
        if abs(ax[1]) > abs(ax[j]):
            j = 1
        if abs(ax[2]) > abs(ax[j]):
            j = 2
        if ax[j] < 0.0:
            for i in range(3):
                ax[i] = -ax[i]
        for i in range(3):
            ax[i] *= theta
        return ax
    s = theta / (2.0 * np.sin(theta))
    for i in range(3):
        w[i] *= s
    return w


@njit(cache=True)
def _inv3(A):
    a, b, c = A[0, 0], A[0, 1], A[0, 2]
    d, e, f = A[1, 0], A[1, 1], A[1, 2]
    g, h, i = A[2, 0], A[2, 1], A[2, 2]
    det = a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)
    B = np.empty((3, 3))
    B[0, 0] = (e * i - f * h) / det
    B[0, 1] = (c * h - b * i) / det
    B[0, 2] = (b * f - c * e) / det
    B[1, 0] = (f * g - d * i) / det
    B[1, 1] = (a * i - c * g) / det
    B[1, 2] = (c * d - a * f) / det
    B[2, 0] = (d * h - e * g) / det
    B[2, 1] = (b * g - a * h) / det
    B[2, 2] = (a * e - b * d) / det
    return B


@njit(cache=True)
def _orth_defect3(R):
    # |R^T R - I|_F
    G = _mtm33(R, R)
    s = 0.0
    for i in range(3):
        for j in range(3):
            d = G[i, j] - (1.0 if i == j else 0.0)
            s += d * d
    return np.sqrt(s)


@njit(cache=True)
def _polar3(A):
    # Newton iteration X <- (X + X^-T)/2; converges quadratically for
    # matrices near the rotation group (det > 0).
    X = A.copy()
    for _ in range(30):
        Xi = _inv3(X)
        delta = 0.0
        Y = np.empty((3, 3))
        for i in range(3):
            for j in range(3):
                Y[i, j] = 0.5 * (X[i, j] + Xi[j, i])
                delta += abs(Y[i, j] - X[i, j])
        X = Y
        if delta < 1e-15:
            break
    return X


@njit(cache=True)
def _solve12(A, b):
    # Gaussian elimination with partial pivoting; A is/stays untouched.
    n = 12
    M = A.copy()
    x = b.copy()
    for col in range(n):
        p = col
        best = abs(M[col, col])
        for r in range(col + 1, n):
            if abs(M[r, col]) > best:
                best = abs(M[r, col])
                p = r
        if p != col:
            for c in range(n):
                tmp = M[col, c]
                M[col, c] = M[p, c]
                M[p, c] = tmp
            tmp = x[col]
            x[col] = x[p]
            x[p] = tmp
        piv = M[col, col]
        for r in range(col + 1, n):
            fct = M[r, col] / piv
            if fct != 0.0:
                for c in range(col, n):
                    M[r, c] -= fct * M[col, c]
                x[r] -= fct * x[col]
    for r in range(n - 1, -1, -1):
        s = x[r]
        for c in range(r + 1, n):
            s -= M[r, c] * x[c]
        x[r] = s / M[r, r]
    return x


# ---------------------------------------------------------------------------
# continuous-time model
# ---------------------------------------------------------------------------


@njit(cache=True)
def inertia12(M, J, d0, di, R):
    """Generalized inertia of the coupled system at attitudes R."""
    out = np.zeros((12, 12))
    R0 = R[0]
    # central body
    P0 = _mmt33(_mm33(R0, M[0]), R0)  # R0 M0 R0^T
    for i in range(3):
        for j in range(3):
            out[i, j] = J[0][i, j]
            out[3 + i, 3 + j] = P0[i, j]
    for b in range(1, 3):
        Rb = R[b]
        Hd0 = _hat3(d0[b - 1])
        Hdi = _hat3(di[b - 1])
        Q = _mtm33(R0, Rb)  # R0^T Rb
        QM = _mm33(Q, M[b])
        S = _mmt33(QM, Q)  # Q Mb Q^T
        blk00 = _mm33(_mm33(Hd0, S), Hd0)  # -hat^T S hat = -(this)
        blk0x = _mmt33(_mm33(Hd0, QM), Rb)  # hat(d0) Q Mb Rb^T
        blk0b = _mm33(_mm33(Hd0, QM), Hdi)  # hat(d0) Q Mb hat(di)
        Pb = _mmt33(_mm33(Rb, M[b]), Rb)
        blkxb = _mm33(_mm33(Rb, M[b]), Hdi)
        blkbb = _mm33(_mm33(Hdi, M[b]), Hdi)
        r = 3 + 3 * b  # row offset of this body's rotational block
        for i in range(3):
            for j in range(3):
                out[i, j] -= blk00[i, j]
                out[i, 3 + j] += blk0x[i, j]
                out[3 + j, i] += blk0x[i, j]
                out[i, r + j] = blk0b[i, j]
                out[r + j, i] = blk0b[i, j]
                out[3 + i, 3 + j] += Pb[i, j]
                out[3 + i, r + j] = blkxb[i, j]
                out[r + j, 3 + i] = blkxb[i, j]
                out[r + i, r + j] = J[b][i, j] - blkbb[i, j]
    return out


@njit(cache=True)
def covector12(R, u):
    """Generalized force of the two internal joint moments."""
    out = np.zeros(12)
    u1 = u[0:3]
    u2 = u[3:6]
    for i in range(3):
        out[i] = u1[i] + u2[i]
    w1 = _mtv3(R[1], _mv3(R[0], u1))
    w2 = _mtv3(R[2], _mv3(R[0], u2))
    for i in range(3):
        out[6 + i] = -w1[i]
        out[9 + i] = -w2[i]
    return out


@njit(cache=True)
def body_velocity3(M, J, d0, di, R, xi, b):
    """Velocity of body b in its own frame (b = 0, 1 or 2)."""
    xdot = xi[3:6]
    if b == 0:
        return _mtv3(R[0], xdot)
    Om0 = xi[0:3]
    Omb = xi[3 + 3 * b : 6 + 3 * b]
    V = _mtv3(R[b], xdot)
    V -= _mtv3(R[b], _mv3(R[0], _cross3(d0[b - 1], Om0)))
    V += _cross3(di[b - 1], Omb)
    return V


@njit(cache=True)
def bias12(M, J, d0, di, R, xi):
    """Velocity-dependent terms of the equations of motion.

    The vector field solves  inertia12 @ xi_dot + bias12 = covector12.
    """
    out = np.empty(12)
    Om0 = xi[0:3]
    xdot = xi[3:6]
    V0 = _mtv3(R[0], xdot)
    # central rotational block: Om0 x J0 Om0 + V0 x M0 V0 + joint couplings
    r0 = _cross3(Om0, _mv3(J[0], Om0)) + _cross3(V0, _mv3(M[0], V0))
    # translational block: d/dt(R0 M0 R0^T) xdot + sum R_i W_i
    t1 = _mv3(R[0], _cross3(Om0, _mv3(M[0], V0)) - _mv3(M[0], _cross3(Om0, V0)))
    rx = t1
    for b in range(1, 3):
        Omb = xi[3 + 3 * b : 6 + 3 * b]
        db0 = d0[b - 1]
        dbi = di[b - 1]
        Gb = _mtv3(R[b], xdot) - _mtv3(R[b], _mv3(R[0], _cross3(db0, Om0)))
        Vb = Gb + _cross3(dbi, Omb)
        W = _cross3(Omb, _mv3(M[b], Gb)) - _mv3(M[b], _cross3(Omb, Gb))
        W -= _mv3(M[b], _mtv3(R[b], _mv3(R[0], _cross3(Om0, _cross3(db0, Om0)))))
        W += _cross3(Omb, _mv3(M[b], _cross3(dbi, Omb)))
        r0 += _cross3(db0, _mtv3(R[0], _mv3(R[b], W)))
        rx += _mv3(R[b], W)
        rb = _cross3(Omb, _mv3(J[b], Omb)) + _cross3(Vb, _mv3(M[b], Vb))
        rb -= _cross3(dbi, W)
        for i in range(3):
            out[3 + 3 * b + i] = rb[i]
    for i in range(3):
        out[i] = r0[i]
        out[3 + i] = rx[i]
    return out


@njit(cache=True)
def xi_dot12(M, J, d0, di, R, xi, u):
    """Acceleration xi_dot from the forced equations of motion."""
    II = inertia12(M, J, d0, di, R)
    rhs = covector12(R, u) - bias12(M, J, d0, di, R, xi)
    return _solve12(II, rhs)


@njit(cache=True)
def kinetic12(M, J, d0, di, R, xi):
    """Kinetic energy through the quadratic form."""
    II = inertia12(M, J, d0, di, R)
    s = 0.0
    for i in range(12):
        acc = 0.0
        for j in range(12):
            acc += II[i, j] * xi[j]
        s += xi[i] * acc
    return 0.5 * s


@njit(cache=True)
def rk4_step(M, J, d0, di, R, x, xi, u_a, u_m, u_b, h):
    """Classical fourth-order step; rotations re-projected by the polar map."""
    # stage 1
    k1_xi = xi_dot12(M, J, d0, di, R, xi, u_a)
    # stage 2
    R2 = np.empty((3, 3, 3))
    for b in range(3):
        Om = xi[0:3] if b == 0 else xi[3 * b + 3 : 3 * b + 6]
        Rd = _mm33(R[b], _hat3(Om))
        for i in range(3):
            for j in range(3):
                R2[b, i, j] = R[b, i, j] + 0.5 * h * Rd[i, j]
    xi2 = xi + 0.5 * h * k1_xi
    k2_xi = xi_dot12(M, J, d0, di, R2, xi2, u_m)
    # stage 3
    R3 = np.empty((3, 3, 3))
    for b in range(3):
        Om = xi2[0:3] if b == 0 else xi2[3 * b + 3 : 3 * b + 6]
        Rd = _mm33(R2[b], _hat3(Om))
        for i in range(3):
            for j in range(3):
                R3[b, i, j] = R[b, i, j] + 0.5 * h * Rd[i, j]
    xi3 = xi + 0.5 * h * k2_xi
    k3_xi = xi_dot12(M, J, d0, di, R3, xi3, u_m)
    # stage 4
    R4 = np.empty((3, 3, 3))
    for b in range(3):
        Om = xi3[0:3] if b == 0 else xi3[3 * b + 3 : 3 * b + 6]
        Rd = _mm33(R3[b], _hat3(Om))
        for i in range(3):
            for j in range(3):
                R4[b, i, j] = R[b, i, j] + h * Rd[i, j]
    xi4 = xi + h * k3_xi
    k4_xi = xi_dot12(M, J, d0, di, R4, xi4, u_b)

    xi_new = xi + (h / 6.0) * (k1_xi + 2.0 * k2_xi + 2.0 * k3_xi + k4_xi)
    x_new = np.empty(3)
    vsum = xi[3:6] + 2.0 * xi2[3:6] + 2.0 * xi3[3:6] + xi4[3:6]
    for i in range(3):
        x_new[i] = x[i] + (h / 6.0) * vsum[i]
    R_new = np.empty((3, 3, 3))
    for b in range(3):
        Om1 = xi[0:3] if b == 0 else xi[3 * b + 3 : 3 * b + 6]
        Om2 = xi2[0:3] if b == 0 else xi2[3 * b + 3 : 3 * b + 6]
        Om3 = xi3[0:3] if b == 0 else xi3[3 * b + 3 : 3 * b + 6]
        Om4 = xi4[0:3] if b == 0 else xi4[3 * b + 3 : 3 * b + 6]
        D = (
            _mm33(R[b], _hat3(Om1))
            + 2.0 * _mm33(R2[b], _hat3(Om2))
            + 2.0 * _mm33(R3[b], _hat3(Om3))
            + _mm33(R4[b], _hat3(Om4))
        )
        A = np.empty((3, 3))
        for i in range(3):
            for j in range(3):
                A[i, j] = R[b, i, j] + (h / 6.0) * D[i, j]
        R_new[b] = _polar3(A)
    return R_new, x_new, xi_new


@njit(cache=True)
def rk4_run(M, J, d0, di, R0, x0, xi0, u_nodes, u_half, h):
    """Integrate N = len(u_half) steps; returns full trajectories."""
    N = u_half.shape[0]
    R_traj = np.empty((N + 1, 3, 3, 3))
    x_traj = np.empty((N + 1, 3))
    xi_traj = np.empty((N + 1, 12))
    en = np.empty(N + 1)
    R_traj[0] = R0
    x_traj[0] = x0
    xi_traj[0] = xi0
    en[0] = kinetic12(M, J, d0, di, R0, xi0)
    R = R0.copy()
    x = x0.copy()
    xi = xi0.copy()
    for k in range(N):
        R, x, xi = rk4_step(
            M, J, d0, di, R, x, xi, u_nodes[k], u_half[k], u_nodes[k + 1], h
        )
        R_traj[k + 1] = R
        x_traj[k + 1] = x
        xi_traj[k + 1] = xi
        en[k + 1] = kinetic12(M, J, d0, di, R, xi)
    return R_traj, x_traj, xi_traj, en


@njit(cache=True)
def rk4_scan(M, J, d0, di, R0, x0, xi0, h, N, stride):
    """Unforced long run storing only subsampled energies (drift study)."""
    n_keep = N // stride + 1
    en = np.empty(n_keep)
    u0 = np.zeros(6)
    en[0] = kinetic12(M, J, d0, di, R0, xi0)
    R = R0.copy()
    x = x0.copy()
    xi = xi0.copy()
    kept = 1
    for k in range(N):
        R, x, xi = rk4_step(M, J, d0, di, R, x, xi, u0, u0, u0, h)
        if (k + 1) % stride == 0 and kept < n_keep:
            en[kept] = kinetic12(M, J, d0, di, R, xi)
            kept += 1
    return en, R, x, xi


# ---------------------------------------------------------------------------
# discrete-time model (variational integrator)
# ---------------------------------------------------------------------------


@njit(cache=True)
def legs_minus(M, Jd, d0, di, R, F, dx):
    """h times the incoming-node momentum leg of one discrete step.

    R holds the attitudes at the step's own (left) node.
    """
    out = np.empty(12)
    R0 = R[0]
    F0 = F[0]
    v0 = _mtv3(R0, dx)
    Mv0 = _mv3(M[0], v0)
    mx = _mv3(R0, Mv0)
    m0 = _veeskew(_mm33(F0, Jd[0])) - _cross3(Mv0, v0)
    for b in range(1, 3):
        Rb = R[b]
        Fb = F[b]
        db0 = d0[b - 1]
        dbi = di[b - 1]
        a = _mv3(F0, db0) - db0
        B = dx + _mv3(R0, a)
        w = _mtv3(Rb, B)
        bb = _mv3(Fb, dbi) - dbi
        c = w - bb
        Mc = _mv3(M[b], c)
        A = _mv3(Rb, Mc)
        mx += A
        m0 += _cross3(db0, _mtv3(R0, A))
        mb = _veeskew(_mm33(Fb, Jd[b]))
        mb -= _cross3(_mv3(Fb, dbi), _mv3(M[b], w))
        mb -= _cross3(Mc, w)
        for i in range(3):
            out[3 + 3 * b + i] = mb[i]
    for i in range(3):
        out[i] = m0[i]
        out[3 + i] = mx[i]
    return out


@njit(cache=True)
def legs_plus(M, Jd, d0, di, R, F, dx):
    """h times the outgoing-node momentum leg of one discrete step."""
    out = np.empty(12)
    R0 = R[0]
    F0 = F[0]
    v0 = _mtv3(R0, dx)
    mx = _mv3(R0, _mv3(M[0], v0))
    m0 = _veeskew(_mm33(Jd[0], F0))
    for b in range(1, 3):
        Rb = R[b]
        Fb = F[b]
        db0 = d0[b - 1]
        dbi = di[b - 1]
        a = _mv3(F0, db0) - db0
        B = dx + _mv3(R0, a)
        w = _mtv3(Rb, B)
        bb = _mv3(Fb, dbi) - dbi
        c = w - bb
        Mc = _mv3(M[b], c)
        A = _mv3(Rb, Mc)
        mx += A
        m0 += _cross3(db0, _mtv3(F0, _mtv3(R0, A)))
        mb = _veeskew(_mm33(Jd[b], Fb))
        mb -= _cross3(dbi, _mtv3(Fb, _mv3(M[b], w)))
        for i in range(3):
            out[3 + 3 * b + i] = mb[i]
    for i in range(3):
        out[i] = m0[i]
        out[3 + i] = mx[i]
    return out


@njit(cache=True)
def _dlegs_minus(M, Jd, d0, di, R, F, dx):
    """Derivative of legs_minus w.r.t. z = [phi_0; dx; phi_1; phi_2],
    where rotation directions act by F_b -> F_b exp(hat(phi_b))."""
    D = np.zeros((12, 12))
    R0 = R[0]
    F0 = F[0]
    v0 = _mtv3(R0, dx)
    Mv0 = _mv3(M[0], v0)
    Hv0 = _hat3(v0)
    HMv0 = _hat3(Mv0)
    # d m_0 / d dx and d m_x / d dx (central-body parts)
    A0 = _mm33(Hv0, M[0]) - HMv0
    blk = _mmt33(A0, R0)  # (hat(v0) M0 - hat(M0 v0)) R0^T
    P0 = _mmt33(_mm33(R0, M[0]), R0)
    for i in range(3):
        for j in range(3):
            D[i, 3 + j] += blk[i, j]
            D[3 + i, 3 + j] += P0[i, j]
    # Lambda(F0, Jd0): columns vee(F0 E_j Jd0 + Jd0 E_j F0^T)
    for j in range(3):
        e = np.zeros(3)
        e[j] = 1.0
        E = _hat3(e)
        K = _mm33(_mm33(F0, E), Jd[0]) + _mmt33(_mm33(Jd[0], E), F0)
        D[0, j] += K[2, 1]
        D[1, j] += K[0, 2]
        D[2, j] += K[1, 0]
    for b in range(1, 3):
        Rb = R[b]
        Fb = F[b]
        db0 = d0[b - 1]
        dbi = di[b - 1]
        Hd0 = _hat3(db0)
        Hdi = _hat3(dbi)
        a = _mv3(F0, db0) - db0
        B = dx + _mv3(R0, a)
        w = _mtv3(Rb, B)
        bb = _mv3(Fb, dbi) - dbi
        c = w - bb
        Mc = _mv3(M[b], c)
        Mw = _mv3(M[b], w)
        Fd = _mv3(Fb, dbi)
        rb = 3 + 3 * b
        Pb = _mmt33(_mm33(Rb, M[b]), Rb)  # Rb Mb Rb^T
        Gb = _mm33(Rb, M[b])
        Y = -_mm33(_mm33(R0, F0), Hd0)  # dB/dphi0
        Z = _mm33(Fb, Hdi)  # dc/dphi_b ; d(Fb dbi)/dphi_b = -Z
        QT = _mtm33(R0, Rb)  # R0^T Rb
        # m_x row
        PbY = _mm33(Pb, Y)
        GZ = _mm33(Gb, Z)
        for i in range(3):
            for j in range(3):
                D[3 + i, j] += PbY[i, j]
                D[3 + i, 3 + j] += Pb[i, j]
                D[3 + i, rb + j] += GZ[i, j]
        # m_0 row couplings
        HQ = _mm33(Hd0, QT)  # hat(d0) R0^T Rb
        HQM = _mm33(HQ, M[b])
        T1 = _mmt33(HQM, Rb)  # hat(d0) R0^T Pb  (since Q M Rb^T = R0^T Pb)
        T1Y = _mm33(T1, Y)
        T1Z = _mm33(HQM, Z)
        for i in range(3):
            for j in range(3):
                D[i, j] += T1Y[i, j]
                D[i, 3 + j] += T1[i, j]
                D[i, rb + j] += T1Z[i, j]
        # m_b rows
        pref = -_mm33(_hat3(Fd), M[b]) + _mm33(_hat3(w), M[b]) - _hat3(Mc)
        prefR = _mmt33(pref, Rb)  # acting on reference-frame increments
        prefRY = _mm33(prefR, Y)
        for i in range(3):
            for j in range(3):
                D[rb + i, j] += prefRY[i, j]
                D[rb + i, 3 + j] += prefR[i, j]
        own = _mm33(-_hat3(Mw) + _mm33(_hat3(w), M[b]), Z)
        for j in range(3):
            e = np.zeros(3)
            e[j] = 1.0
            E = _hat3(e)
            K = _mm33(_mm33(Fb, E), Jd[b]) + _mmt33(_mm33(Jd[b], E), Fb)
            D[rb + 0, rb + j] += K[2, 1]
            D[rb + 1, rb + j] += K[0, 2]
            D[rb + 2, rb + j] += K[1, 0]
        for i in range(3):
            for j in range(3):
                D[rb + i, rb + j] += own[i, j]
    return D


@njit(cache=True)
def solve_del_node(M, Jd, d0, di, R, K, F, dx, h, tol, max_iter):
    """Newton solve of legs_minus(R, f) / h = K for the step f = (F, dx).

    F/dx are the warm-start guess; rotation updates go through the
    exponential so the iterates stay on the group.  Returns the solution,
    iteration count, a success flag, and the final residual norm.
    """
    Fc = F.copy()
    dxc = dx.copy()
    it = 0
    res = 0.0
    for it in range(max_iter + 1):
        r = K - legs_minus(M, Jd, d0, di, R, Fc, dxc) / h
        res = 0.0
        for i in range(12):
            res += r[i] * r[i]
        res = np.sqrt(res)
        if res <= tol:
            return Fc, dxc, it, True, res
        if it == max_iter:
            break
        D = _dlegs_minus(M, Jd, d0, di, R, Fc, dxc)
        dz = _solve12(D, h * r)
        ok = True
        for i in range(12):
            if not np.isfinite(dz[i]):
                ok = False
        if not ok:
            return Fc, dxc, it, False, res
        Fc[0] = _mm33(Fc[0], _exp3(dz[0:3]))
        Fc[1] = _mm33(Fc[1], _exp3(dz[6:9]))
        Fc[2] = _mm33(Fc[2], _exp3(dz[9:12]))
        for i in range(3):
            dxc[i] += dz[3 + i]
    return Fc, dxc, it, False, res


@njit(cache=True)
def del_step(M, Jd, d0, di, R, x, F, dx, u_next, h, tol, max_iter):
    """One flow-map step (g_k, f_k) -> (g_{k+1}, f_{k+1}).

    The joint-moment impulse enters at the incoming node, evaluated at the
    configuration it is paired with, which keeps the momentum maps exact in
    the controlled dynamics.
    """
    Rn = np.empty((3, 3, 3))
    for b in range(3):
        Rn[b] = _mm33(R[b], F[b])
    xn = x + dx
    K = legs_plus(M, Jd, d0, di, R, F, dx) / h + h * covector12(Rn, u_next)
    Fn, dxn, it, ok, res = solve_del_node(M, Jd, d0, di, Rn, K, F, dx, h, tol, max_iter)
    return Rn, xn, Fn, dxn, it, ok, res


@njit(cache=True)
def first_step(M, J, Jd, d0, di, R, xi0, u0, h, tol, max_iter):
    """Discrete step matching a continuous initial velocity.

    Solves the discrete Legendre condition: the incoming momentum leg of the
    first step, minus the half-impulse (h/2) U_0, equals the continuous
    momentum at the initial state.
    """
    II = inertia12(M, J, d0, di, R)
    mu0 = np.empty(12)
    for i in range(12):
        acc = 0.0
        for j in range(12):
            acc += II[i, j] * xi0[j]
        mu0[i] = acc
    K = mu0 + 0.5 * h * covector12(R, u0)
    F = np.empty((3, 3, 3))
    F[0] = _exp3(h * xi0[0:3])
    F[1] = _exp3(h * xi0[6:9])
    F[2] = _exp3(h * xi0[9:12])
    dx = h * xi0[3:6]
    return solve_del_node(M, Jd, d0, di, R, K, F, dx, h, tol, max_iter)


@njit(cache=True)
def node_momentum(M, Jd, d0, di, R, F, dx, u, h):
    """Physical momentum mu_k at a node (includes the force half)."""
    mu = legs_minus(M, Jd, d0, di, R, F, dx) / h
    Uc = covector12(R, u)
    for i in range(12):
        mu[i] -= 0.5 * h * Uc[i]
    return mu


@njit(cache=True)
def momentum_maps(R, x, mu):
    """Total linear and angular momentum from a node momentum."""
    px = mu[3:6].copy()
    pom = _cross3(x, px)
    pom += _mv3(R[0], mu[0:3])
    pom += _mv3(R[1], mu[6:9])
    pom += _mv3(R[2], mu[9:12])
    return px, pom


@njit(cache=True)
def node_energy(M, J, d0, di, R, mu):
    """Hamiltonian at a node: (1/2) mu^T inertia^{-1} mu."""
    II = inertia12(M, J, d0, di, R)
    xi = _solve12(II, mu)
    s = 0.0
    for i in range(12):
        s += mu[i] * xi[i]
    return 0.5 * s


@njit(cache=True)
def run_del(M, J, Jd, d0, di, R0, x0, F0, dx0, u_nodes, h, tol, max_iter):
    """Integrate N steps storing the full discrete trajectory.

    u_nodes has shape (N+1, 6); the k-th row is the moment at node k.
    Returns trajectories, node momenta/diagnostics, the worst orthonormality
    defect seen, and (ok, fail_step) status.
    """
    N = u_nodes.shape[0] - 1
    R_traj = np.empty((N + 1, 3, 3, 3))
    x_traj = np.empty((N + 1, 3))
    F_traj = np.empty((N + 1, 3, 3, 3))
    dx_traj = np.empty((N + 1, 3))
    mu_traj = np.empty((N + 1, 12))
    px_traj = np.empty((N + 1, 3))
    pom_traj = np.empty((N + 1, 3))
    en = np.empty(N + 1)
    R = R0.copy()
    x = x0.copy()
    F = F0.copy()
    dx = dx0.copy()
    orth = 0.0
    ok_all = True
    fail_k = -1
    for k in range(N + 1):
        R_traj[k] = R
        x_traj[k] = x
        F_traj[k] = F
        dx_traj[k] = dx
        mu = node_momentum(M, Jd, d0, di, R, F, dx, u_nodes[k], h)
        mu_traj[k] = mu
        px, pom = momentum_maps(R, x, mu)
        px_traj[k] = px
        pom_traj[k] = pom
        en[k] = node_energy(M, J, d0, di, R, mu)
        for b in range(3):
            d = _orth_defect3(R[b])
            if d > orth:
                orth = d
            d = _orth_defect3(F[b])
            if d > orth:
                orth = d
        if k == N:
            break
        R, x, F, dx, it, ok, res = del_step(
            M, Jd, d0, di, R, x, F, dx, u_nodes[k + 1], h, tol, max_iter
        )
        if not ok:
            ok_all = False
            fail_k = k
            return (
                R_traj[: k + 1],
                x_traj[: k + 1],
                F_traj[: k + 1],
                dx_traj[: k + 1],
                mu_traj[: k + 1],
                px_traj[: k + 1],
                pom_traj[: k + 1],
                en[: k + 1],
                orth,
                ok_all,
                fail_k,
            )
    return (
        R_traj,
        x_traj,
        F_traj,
        dx_traj,
        mu_traj,
        px_traj,
        pom_traj,
        en,
        orth,
        ok_all,
        fail_k,
    )


@njit(cache=True)
def run_del_scan(M, J, Jd, d0, di, R0, x0, F0, dx0, h, N, tol, max_iter):
    """Unforced long run keeping only conservation diagnostics.

    Returns the energy series, worst-case drifts of the two momentum maps,
    the worst orthonormality defect, the terminal state and status.
    """
    en = np.empty(N + 1)
    u0 = np.zeros(6)
    R = R0.copy()
    x = x0.copy()
    F = F0.copy()
    dx = dx0.copy()
    mu = node_momentum(M, Jd, d0, di, R, F, dx, u0, h)
    px0, pom0 = momentum_maps(R, x, mu)
    en[0] = node_energy(M, J, d0, di, R, mu)
    px_drift = 0.0
    pom_drift = 0.0
    orth = 0.0
    ok_all = True
    fail_k = -1
    for k in range(N):
        R, x, F, dx, it, ok, res = del_step(
            M, Jd, d0, di, R, x, F, dx, u0, h, tol, max_iter
        )
        if not ok:
            ok_all = False
            fail_k = k
            return en[: k + 1], px_drift, pom_drift, orth, R, x, F, dx, ok_all, fail_k
        mu = node_momentum(M, Jd, d0, di, R, F, dx, u0, h)
        px, pom = momentum_maps(R, x, mu)
        dpx = np.sqrt(
            (px[0] - px0[0]) ** 2 + (px[1] - px0[1]) ** 2 + (px[2] - px0[2]) ** 2
        )
        dpom = np.sqrt(
            (pom[0] - pom0[0]) ** 2 + (pom[1] - pom0[1]) ** 2 + (pom[2] - pom0[2]) ** 2
        )
        if dpx > px_drift:
            px_drift = dpx
        if dpom > pom_drift:
            pom_drift = dpom
        en[k + 1] = node_energy(M, J, d0, di, R, mu)
        for b in range(3):
            d = _orth_defect3(R[b])
            if d > orth:
                orth = d
            d = _orth_defect3(F[b])
            if d > orth:
                orth = d
    return en, px_drift, pom_drift, orth, R, x, F, dx, ok_all, fail_k


@njit(cache=True)
def run_del_terminal(M, J, Jd, d0, di, R0, x0, xi0, u_nodes, h, tol, max_iter):
    """Initialize from a continuous velocity and run to the terminal node."""
    F, dx, it, ok, res = first_step(M, J, Jd, d0, di, R0, xi0, u_nodes[0], h, tol, max_iter)
    if not ok:
        return R0.copy(), x0.copy(), F, dx, False, -1
    N = u_nodes.shape[0] - 1
    R = R0.copy()
    x = x0.copy()
    for k in range(N):
        R, x, F, dx, it, ok2, res = del_step(
            M, Jd, d0, di, R, x, F, dx, u_nodes[k + 1], h, tol, max_iter
        )
        if not ok2:
            return R, x, F, dx, False, k
    return R, x, F, dx, True, -1


@njit(cache=True, parallel=True)
def run_del_terminal_batch(M, J, Jd, d0, di, R0, x0, xi0, u_all, h, tol, max_iter):
    """Terminal states for a batch of control sequences (one per row).

    Rollouts are independent; used for finite-difference sensitivities.
    """
    Bn = u_all.shape[0]
    R_N = np.empty((Bn, 3, 3, 3))
    x_N = np.empty((Bn, 3))
    F_N = np.empty((Bn, 3, 3, 3))
    dx_N = np.empty((Bn, 3))
    ok_N = np.zeros(Bn, dtype=np.bool_)
    for b in prange(Bn):
        R, x, F, dx, ok, fk = run_del_terminal(
            M, J, Jd, d0, di, R0, x0, xi0, u_all[b], h, tol, max_iter
        )
        R_N[b] = R
        x_N[b] = x
        F_N[b] = F
        dx_N[b] = dx
        ok_N[b] = ok
    return R_N, x_N, F_N, dx_N, ok_N


@njit(cache=True)
def discrete_velocity12(F, dx, h):
    """Velocity reconstruction (log F / h, dx / h); reporting only."""
    out = np.empty(12)
    w0 = _log3(F[0])
    w1 = _log3(F[1])
    w2 = _log3(F[2])
    for i in range(3):
        out[i] = w0[i] / h
        out[3 + i] = dx[i] / h
        out[6 + i] = w1[i] / h
        out[9 + i] = w2[i] / h
    return out
