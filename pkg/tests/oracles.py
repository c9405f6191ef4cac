"""Independent reference formulas used only by the tests.

Each Green's-function piece is transcribed as an explicit 3x3 matrix G_ij(P, Q)
(u_i = G_ij F_j).  Dislocation fields and gradients are produced from these by
central finite differences, so nothing here shares code with the library.
"""

import numpy as np


def alpha_of(lam, mu):
    return (lam + mu) / (lam + 2 * mu)


def kelvin_matrix(P, Q, lam, mu):
    a = alpha_of(lam, mu)
    r = np.asarray(P, float) - np.asarray(Q, float)
    rn = np.linalg.norm(r)
    return ((2 - a) * np.eye(3) / rn + a * np.outer(r, r) / rn**3) / (8 * np.pi * mu)


def _image_R(P, Q):
    return np.array([P[0] - Q[0], P[1] - Q[1], -(P[2] + Q[2])], float)


def a_matrix(P, Q, lam, mu):
    a = alpha_of(lam, mu)
    R = _image_R(P, Q)
    Rn = np.linalg.norm(R)
    return (a * np.eye(3) / Rn + (2 - a) * np.outer(R, R) / Rn**3) / (8 * np.pi * mu)


def b_matrix(P, Q, lam, mu):
    a = alpha_of(lam, mu)
    R = _image_R(P, Q)
    Rn = np.linalg.norm(R)
    W = Rn + R[2]
    d3 = np.array([0.0, 0.0, 1.0])
    out = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            t = (1.0 if i == j else 0.0) / W
            t += (R[i] * d3[j] - R[j] * d3[i] * (1 - d3[j])) / (Rn * W)
            t -= R[i] * R[j] * (1 - d3[i]) * (1 - d3[j]) / (Rn * W**2)
            out[i, j] = t
    return out * (1 - a) / (a * 4 * np.pi * mu)


def c_matrix(P, Q, lam, mu):
    """C without the target x3 factor."""
    a = alpha_of(lam, mu)
    R = _image_R(P, Q)
    Rn = np.linalg.norm(R)
    xi3 = Q[2]
    d3 = np.array([0.0, 0.0, 1.0])
    out = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            t = (2 - a) * (R[i] * d3[j] - R[j] * d3[i]) / Rn**3
            t += a * xi3 * ((1.0 if i == j else 0.0) / Rn**3 - 3 * R[i] * R[j] / Rn**5)
            out[i, j] = (1 - 2 * d3[i]) * t
    return out / (4 * np.pi * mu)


def x3c_matrix(P, Q, lam, mu):
    return P[2] * c_matrix(P, Q, lam, mu)


def mindlin_matrix(P, Q, lam, mu):
    return kelvin_matrix(P, Q, lam, mu) + a_matrix(P, Q, lam, mu) + b_matrix(P, Q, lam, mu) + x3c_matrix(P, Q, lam, mu)


def slp_u(mat, P, Q, F, lam, mu):
    return mat(np.asarray(P, float), np.asarray(Q, float), lam, mu) @ np.asarray(F, float)


def e_tensor(D, nu, lam, mu):
    D = np.asarray(D, float)
    nu = np.asarray(nu, float)
    return lam * np.dot(nu, D) * np.eye(3) + mu * (np.outer(D, nu) + np.outer(nu, D))


def dlp_u_fd(mat, P, Q, D, nu, lam, mu, h=1e-5):
    """u_i = E_jk d/dxi_k G_ij by central differences in the source position."""
    E = e_tensor(D, nu, lam, mu)
    Q = np.asarray(Q, float)
    u = np.zeros(3)
    for k in range(3):
        dq = np.zeros(3)
        dq[k] = h
        dG = (mat(P, Q + dq, lam, mu) - mat(P, Q - dq, lam, mu)) / (2 * h)
        u += dG @ E[:, k]
    return u


def grad_fd(fun, P, h=1e-5):
    """Central-difference gradient g[i, l] = d u_i / d x_l of a vector field."""
    P = np.asarray(P, float)
    g = np.zeros((3, 3))
    for l in range(3):
        dp = np.zeros(3)
        dp[l] = h
        g[:, l] = (fun(P + dp) - fun(P - dp)) / (2 * h)
    return g


def b_potential(R):
    R = np.asarray(R, float)
    Rn = np.linalg.norm(R)
    return R[2] * np.log(Rn + R[2]) - Rn


def phi_b_direct(x, images, forces):
    """Scalar sum of F . grad_image B(x - image) by central differences in the image position."""
    tot = 0.0
    h = 1e-5
    for s, F in zip(images, forces):
        for j in range(3):
            ds = np.zeros(3)
            ds[j] = h

            def bval(sp):
                d = x - sp
                return b_potential(np.array([d[0], d[1], -d[2]]))

            tot += F[j] * (bval(s + ds) - bval(s - ds)) / (2 * h)
    return tot
