"""Pointwise Green's-function pieces for the half-space (Kelvin, images A/B/C),
their analytic target gradients, and the direct-summation oracle.

Conventions.  For a source at xi and target x, the image variables are
R = (x1 - xi1, x2 - xi2, -(x3 + xi3)).  With S = diag(1, 1, -1),
d/dx_l = S_l d/dR_l and d/dxi_k = -d/dR_k.  A dislocation (D, nu) acts through
the symmetric tensor E = lambda (nu.D) I + mu (D nu^T + nu D^T) contracted with
source derivatives, u_i = E_jk d/dxi_k G_ij.

The B image is generated by the scalar potential B(R) = R3 log(R + R3) - R:
B_ij = -c_B S_j B,ij with c_B = (1 - alpha) / (4 pi mu alpha).  The C image is
written without its target factor x3; the driver multiplies by x3 and applies
the product rule.
"""

from __future__ import annotations

from dataclasses import dataclass
import itertools
import math

import numba
import numpy as np

from ._bjet import INDEX as _BINDEX
from ._bjet import b_jet as _b_jet
from .core import (
    ElasticModuli,
    FieldBatch,
    FieldSample,
    ImageCoords,
    InvalidModuliError,
    SingularEvaluationError,
    SourceBatch,
    TargetBatch,
    dislocation_tensor,
    field_sample,
    tilde_moduli,
)

PIECE_KELVIN = 1
PIECE_A = 2
PIECE_B = 4
PIECE_C = 8
PIECES_IMAGE = PIECE_A | PIECE_B | PIECE_C


@dataclass(frozen=True)
class KernelSelector:
    kelvin: bool = False
    imageA: bool = False
    imageB: bool = False
    imageC: bool = False

    def __post_init__(self):
        if not (self.kelvin or self.imageA or self.imageB or self.imageC):
            raise ValueError("KernelSelector needs at least one piece")

    @classmethod
    def full_halfspace(cls) -> "KernelSelector":
        return cls(True, True, True, True)

    @classmethod
    def kelvin_only(cls) -> "KernelSelector":
        return cls(kelvin=True)

    @property
    def is_full(self) -> bool:
        return self.kelvin and self.imageA and self.imageB and self.imageC

    @property
    def image_flags(self) -> int:
        return (PIECE_A if self.imageA else 0) | (PIECE_B if self.imageB else 0) | (PIECE_C if self.imageC else 0)


def _index_table(order: int) -> np.ndarray:
    shape = (3,) * order
    out = np.zeros(shape if order else (1,), dtype=np.int64)
    for k, idx in enumerate(_BINDEX):
        if len(idx) != order:
            continue
        if order == 0:
            out[0] = k
            continue
        for perm in set(itertools.permutations(idx)):
            out[perm] = k
    return out


_BI1 = _index_table(1)
_BI2 = _index_table(2)
_BI3 = _index_table(3)
_BI4 = _index_table(4)
_S = np.array([1.0, 1.0, -1.0])


# ---------------------------------------------------------------------------
# numba building blocks
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _radial_piece(y, F, E, a, c, use_f, use_e, u, du):
    """Accumulate the Kelvin-type field c[2 delta/r - a d_i d_j r] in variable y.

    u_i += c (2 F_i/r - a F_j r,ij) - c (2 E_ik (1/r),k - a E_jk r,ijk) and
    du[i, l] += derivative of the same with respect to y_l.
    """
    y0, y1, y2 = y[0], y[1], y[2]
    r2 = y0 * y0 + y1 * y1 + y2 * y2
    r = math.sqrt(r2)
    ir = 1.0 / r
    ir3 = ir * ir * ir
    ir5 = ir3 * ir * ir
    ir7 = ir5 * ir * ir
    if use_f:
        yf = y0 * F[0] + y1 * F[1] + y2 * F[2]
        for i in range(3):
            u[i] += c * ((2.0 - a) * F[i] * ir + a * y[i] * yf * ir3)
            for l in range(3):
                t = -2.0 * F[i] * y[l] * ir3 + a * (F[i] * y[l] + F[l] * y[i]) * ir3
                t -= 3.0 * a * y[i] * y[l] * yf * ir5
                if i == l:
                    t += a * yf * ir3
                du[i, l] += c * t
    if use_e:
        ey0 = E[0, 0] * y0 + E[0, 1] * y1 + E[0, 2] * y2
        ey1 = E[1, 0] * y0 + E[1, 1] * y1 + E[1, 2] * y2
        ey2 = E[2, 0] * y0 + E[2, 1] * y1 + E[2, 2] * y2
        ey = (ey0, ey1, ey2)
        yey = y0 * ey0 + y1 * ey1 + y2 * ey2
        tr = E[0, 0] + E[1, 1] + E[2, 2]
        for i in range(3):
            t = -2.0 * ey[i] * ir3 + a * ((2.0 * ey[i] + y[i] * tr) * ir3 - 3.0 * y[i] * yey * ir5)
            u[i] -= c * t
            for l in range(3):
                ekv = 3.0 * ey[i] * y[l] * ir5 - E[i, l] * ir3
                p4 = -2.0 * E[i, l] * ir3
                p4 += 3.0 * (2.0 * ey[i] * y[l] + 2.0 * y[i] * ey[l] + tr * y[i] * y[l]) * ir5
                p4 -= 15.0 * y[i] * y[l] * yey * ir7
                if i == l:
                    p4 += -tr * ir3 + 3.0 * yey * ir5
                du[i, l] -= c * (2.0 * ekv - a * p4)


@numba.njit(cache=True)
def _inv_r_jets(y, v1, v2, v3, v4):
    """Cartesian derivatives of 1/|y| of orders 1-4 (full symmetric arrays)."""
    s = y[0] * y[0] + y[1] * y[1] + y[2] * y[2]
    r = math.sqrt(s)
    f1 = -0.5 / (s * r)
    f2 = 0.75 / (s * s * r)
    f3 = -1.875 / (s * s * s * r)
    f4 = 6.5625 / (s * s * s * s * r)
    for i in range(3):
        v1[i] = 2.0 * y[i] * f1
        for j in range(3):
            dij = 1.0 if i == j else 0.0
            v2[i, j] = 4.0 * y[i] * y[j] * f2 + 2.0 * dij * f1
            for k in range(3):
                dik = 1.0 if i == k else 0.0
                djk = 1.0 if j == k else 0.0
                v3[i, j, k] = 8.0 * y[i] * y[j] * y[k] * f3 + 4.0 * (dij * y[k] + dik * y[j] + djk * y[i]) * f2
                for l in range(3):
                    dil = 1.0 if i == l else 0.0
                    djl = 1.0 if j == l else 0.0
                    dkl = 1.0 if k == l else 0.0
                    t = 16.0 * y[i] * y[j] * y[k] * y[l] * f4
                    t += 8.0 * (dij * y[k] * y[l] + dik * y[j] * y[l] + dil * y[j] * y[k]
                                + djk * y[i] * y[l] + djl * y[i] * y[k] + dkl * y[i] * y[j]) * f3
                    t += 4.0 * (dij * dkl + dik * djl + dil * djk) * f2
                    v4[i, j, k, l] = t


@numba.njit(cache=True)
def _b_piece(R, F, E, cb, use_f, use_e, u, du, jet):
    """B image in variable R; du is the derivative with respect to R."""
    _b_jet(R[0], R[1], R[2], jet)
    S0 = (1.0, 1.0, -1.0)
    for i in range(3):
        for j in range(3):
            if use_f:
                fj = S0[j] * F[j]
                u[i] -= cb * fj * jet[_BI2[i, j]]
                for l in range(3):
                    du[i, l] -= cb * fj * jet[_BI3[i, j, l]]
            if use_e:
                for k in range(3):
                    ejk = cb * E[j, k] * S0[j]
                    u[i] += ejk * jet[_BI3[i, j, k]]
                    for l in range(3):
                        du[i, l] += ejk * jet[_BI4[i, j, k, l]]


@numba.njit(cache=True)
def _c_piece(R, xi3, F, E, alpha, cc, use_f, use_e, g, dg, v1, v2, v3, v4):
    """C image without the target x3 factor; dg is the derivative with respect to R."""
    _inv_r_jets(R, v1, v2, v3, v4)
    S0 = (1.0, 1.0, -1.0)
    b = 2.0 - alpha
    for i in range(3):
        si = cc * S0[i]
        di3 = 1.0 if i == 2 else 0.0
        if use_f:
            vf = v1[0] * F[0] + v1[1] * F[1] + v1[2] * F[2]
            t = b * (-v1[i] * F[2] + di3 * vf)
            for j in range(3):
                t -= alpha * xi3 * v2[i, j] * F[j]
            g[i] += si * t
            for l in range(3):
                t = -b * v2[i, l] * F[2]
                for j in range(3):
                    t += b * di3 * v2[j, l] * F[j] - alpha * xi3 * v3[i, j, l] * F[j]
                dg[i, l] += si * t
        if use_e:
            t = 0.0
            for j in range(3):
                dj3 = 1.0 if j == 2 else 0.0
                for k in range(3):
                    dk3 = 1.0 if k == 2 else 0.0
                    e = E[j, k]
                    t += e * (b * (v2[i, k] * dj3 - v2[j, k] * di3) - alpha * dk3 * v2[i, j]
                              + alpha * xi3 * v3[i, j, k])
            g[i] += si * t
            for l in range(3):
                t = 0.0
                for j in range(3):
                    dj3 = 1.0 if j == 2 else 0.0
                    for k in range(3):
                        dk3 = 1.0 if k == 2 else 0.0
                        e = E[j, k]
                        t += e * (b * (v3[i, k, l] * dj3 - v3[j, k, l] * di3) - alpha * dk3 * v3[i, j, l]
                                  + alpha * xi3 * v4[i, j, k, l])
                dg[i, l] += si * t


@numba.njit(cache=True)
def _image_pair(x, xi, F, E, alpha, mu, flags, use_f, use_e, u, g, R, tu, tdu, jet, v1, v2, v3, v4):
    """Accumulate A/B/C image contributions of one source at one target into u, g (dx)."""
    S0 = (1.0, 1.0, -1.0)
    R[0] = x[0] - xi[0]
    R[1] = x[1] - xi[1]
    R[2] = -(x[2] + xi[2])
    for i in range(3):
        tu[i] = 0.0
        for l in range(3):
            tdu[i, l] = 0.0
    if flags & 2:
        _radial_piece(R, F, E, 2.0 - alpha, 1.0 / (8.0 * math.pi * mu), use_f, use_e, tu, tdu)
    if flags & 4:
        cb = (1.0 - alpha) / (4.0 * math.pi * mu * alpha)
        _b_piece(R, F, E, cb, use_f, use_e, tu, tdu, jet)
    for i in range(3):
        u[i] += tu[i]
        for l in range(3):
            g[i, l] += S0[l] * tdu[i, l]
    if flags & 8:
        for i in range(3):
            tu[i] = 0.0
            for l in range(3):
                tdu[i, l] = 0.0
        _c_piece(R, xi[2], F, E, alpha, 1.0 / (4.0 * math.pi * mu), use_f, use_e, tu, tdu, v1, v2, v3, v4)
        x3 = x[2]
        for i in range(3):
            u[i] += x3 * tu[i]
            g[i, 2] += tu[i]
            for l in range(3):
                g[i, l] += x3 * S0[l] * tdu[i, l]


@numba.njit(cache=True)
def _kelvin_blocks(tx, sx, F, E, alpha, mu, use_f, use_e, bt0, bt1, bs0, bs1, u, g):
    """Sum Kelvin fields over blocks (target range x source range).  Returns -1 or a singular pair code."""
    c = 1.0 / (8.0 * math.pi * mu)
    y = np.empty(3)
    for b in range(bt0.shape[0]):
        for t in range(bt0[b], bt1[b]):
            for s in range(bs0[b], bs1[b]):
                y[0] = tx[t, 0] - sx[s, 0]
                y[1] = tx[t, 1] - sx[s, 1]
                y[2] = tx[t, 2] - sx[s, 2]
                if y[0] == 0.0 and y[1] == 0.0 and y[2] == 0.0:
                    return t * sx.shape[0] + s
                _radial_piece(y, F[s], E[s], alpha, c, use_f, use_e, u[t], g[t])
    return -1


@numba.njit(cache=True)
def _image_blocks(tx, sx, F, E, alpha, mu, flags, use_f, use_e, bt0, bt1, bs0, bs1, u, g):
    R = np.empty(3)
    tu = np.empty(3)
    tdu = np.empty((3, 3))
    jet = np.empty(35)
    v1 = np.empty(3)
    v2 = np.empty((3, 3))
    v3 = np.empty((3, 3, 3))
    v4 = np.empty((3, 3, 3, 3))
    for b in range(bt0.shape[0]):
        for t in range(bt0[b], bt1[b]):
            for s in range(bs0[b], bs1[b]):
                if tx[t, 2] + sx[s, 2] >= 0.0:
                    return t * sx.shape[0] + s
                _image_pair(tx[t], sx[s], F[s], E[s], alpha, mu, flags, use_f, use_e, u[t], g[t],
                            R, tu, tdu, jet, v1, v2, v3, v4)
    return -1


@numba.njit(cache=True)
def _kelvin_elementwise(tx, sx, F, E, alpha, mu, use_f, use_e, u, g):
    c = 1.0 / (8.0 * math.pi * mu)
    y = np.empty(3)
    for t in range(tx.shape[0]):
        y[0] = tx[t, 0] - sx[t, 0]
        y[1] = tx[t, 1] - sx[t, 1]
        y[2] = tx[t, 2] - sx[t, 2]
        if y[0] == 0.0 and y[1] == 0.0 and y[2] == 0.0:
            return t
        _radial_piece(y, F[t], E[t], alpha, c, use_f, use_e, u[t], g[t])
    return -1


@numba.njit(cache=True)
def _image_elementwise(tx, sx, F, E, alpha, mu, flags, use_f, use_e, u, g):
    R = np.empty(3)
    tu = np.empty(3)
    tdu = np.empty((3, 3))
    jet = np.empty(35)
    v1 = np.empty(3)
    v2 = np.empty((3, 3))
    v3 = np.empty((3, 3, 3))
    v4 = np.empty((3, 3, 3, 3))
    for t in range(tx.shape[0]):
        if tx[t, 2] + sx[t, 2] >= 0.0:
            return t
        _image_pair(tx[t], sx[t], F[t], E[t], alpha, mu, flags, use_f, use_e, u[t], g[t],
                    R, tu, tdu, jet, v1, v2, v3, v4)
    return -1


@numba.njit(cache=True)
def _b_jets_many(R, out):
    for n in range(R.shape[0]):
        _b_jet(R[n, 0], R[n, 1], R[n, 2], out[n])


# ---------------------------------------------------------------------------
# Python-level pointwise operations
# ---------------------------------------------------------------------------


def _pairs(P, Q, F, D, nu, moduli):
    P = np.atleast_2d(np.asarray(P, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    n = max(len(P), len(Q))
    P = np.ascontiguousarray(np.broadcast_to(P, (n, 3)))
    Q = np.ascontiguousarray(np.broadcast_to(Q, (n, 3)))
    use_f = F is not None
    use_e = D is not None
    Fa = np.ascontiguousarray(np.broadcast_to(np.asarray(F, dtype=float), (n, 3))) if use_f else np.zeros((n, 3))
    if use_e:
        if nu is None:
            raise ValueError("a dislocation needs its normal")
        Ea = np.ascontiguousarray(np.broadcast_to(dislocation_tensor(D, nu, moduli), (n, 3, 3)))
    else:
        Ea = np.zeros((n, 3, 3))
    return P, Q, Fa, Ea, use_f, use_e, n


def _wrap(u, g, moduli, single):
    if single:
        return field_sample(u[0], g[0], moduli)
    return FieldBatch(u, g, moduli)


def _is_single(P, Q):
    return np.ndim(P) == 1 and np.ndim(Q) == 1


def _kelvin(P, Q, F, D, nu, moduli: ElasticModuli):
    single = _is_single(P, Q)
    P, Q, Fa, Ea, use_f, use_e, n = _pairs(P, Q, F, D, nu, moduli)
    u = np.zeros((n, 3))
    g = np.zeros((n, 3, 3))
    bad = _kelvin_elementwise(P, Q, Fa, Ea, moduli.alpha, moduli.mu, use_f, use_e, u, g)
    if bad >= 0:
        raise SingularEvaluationError(f"target coincides with source (pair {bad})")
    return _wrap(u, g, moduli, single)


def _image(P, Q, F, D, nu, moduli: ElasticModuli, flags: int):
    if flags & PIECE_B and moduli.alpha == 0.0:
        raise InvalidModuliError("the B image is undefined for alpha = 0")
    single = _is_single(P, Q)
    P, Q, Fa, Ea, use_f, use_e, n = _pairs(P, Q, F, D, nu, moduli)
    u = np.zeros((n, 3))
    g = np.zeros((n, 3, 3))
    bad = _image_elementwise(P, Q, Fa, Ea, moduli.alpha, moduli.mu, flags, use_f, use_e, u, g)
    if bad >= 0:
        raise SingularEvaluationError(f"target coincides with an image point (pair {bad})")
    return _wrap(u, g, moduli, single)


def kelvin_slp(P, Q, F, moduli: ElasticModuli):
    """Free-space displacement at P of a point force F at Q, with its gradient.

    Accepts single points (returns FieldSample) or matching (n, 3) arrays (returns FieldBatch).
    """
    return _kelvin(P, Q, F, None, None, moduli)


def kelvin_dlp(P, Q, D, nu, moduli: ElasticModuli):
    return _kelvin(P, Q, None, D, nu, moduli)


def _reflect(P):
    P = np.array(P, dtype=float)
    P[..., 2] *= -1.0
    return P


def _flip_x3_derivative(res):
    if isinstance(res, FieldSample):
        g = res.grad_u.copy()
        g[:, 2] *= -1.0
        return g
    g = res.grad_u.copy()
    g[:, :, 2] *= -1.0
    return g


def mindlin_A_slp(P, Q, F, moduli: ElasticModuli):
    """A image through the tilde-moduli identity A(x, xi) = -K[lambda+4mu, -mu](x*, xi), x* = (x1, x2, -x3)."""
    tm = tilde_moduli(moduli)
    res = kelvin_slp(_reflect(P), Q, F, tm)
    g = -_flip_x3_derivative(res)
    if isinstance(res, FieldSample):
        return field_sample(-res.u, g, moduli)
    return FieldBatch(-res.u, g, moduli)


def _grad_inv_r(y):
    r = np.linalg.norm(y, axis=-1, keepdims=True)
    return -y / r**3


def _hess_inv_r(y):
    r = np.linalg.norm(y, axis=-1)[..., None, None]
    return 3.0 * y[..., :, None] * y[..., None, :] / r**5 - np.eye(3) / r**3


def mindlin_A_dlp(P, Q, D, nu, moduli: ElasticModuli):
    """A image of a dislocation: tilde-moduli Kelvin dislocation at the reflected target
    plus the harmonic correction (nu.D)/(2 pi) grad(1/|x* - xi|)."""
    tm = tilde_moduli(moduli)
    Pr = _reflect(P)
    res = kelvin_dlp(Pr, Q, D, nu, tm)
    y = np.asarray(Pr, dtype=float) - np.asarray(Q, dtype=float)
    w = np.einsum("...i,...i->...", np.asarray(D, dtype=float), np.asarray(nu, dtype=float)) / (2.0 * np.pi)
    corr_u = w[..., None] * _grad_inv_r(y)
    corr_g = w[..., None, None] * _hess_inv_r(y)
    u = res.u + corr_u
    gy = res.grad_u + corr_g
    g = gy.copy()
    g[..., 2] *= -1.0
    if isinstance(res, FieldSample):
        return field_sample(u, g, moduli)
    return FieldBatch(u, g, moduli)


def mindlin_B_slp(P, Q, F, moduli: ElasticModuli):
    return _image(P, Q, F, None, None, moduli, PIECE_B)


def mindlin_B_dlp(P, Q, D, nu, moduli: ElasticModuli):
    return _image(P, Q, None, D, nu, moduli, PIECE_B)


def mindlin_C_slp(P, Q, F, moduli: ElasticModuli):
    """Contribution x3 C F of the C image (target factor included)."""
    return _image(P, Q, F, None, None, moduli, PIECE_C)


def mindlin_C_dlp(P, Q, D, nu, moduli: ElasticModuli):
    return _image(P, Q, None, D, nu, moduli, PIECE_C)


def mindlin_image(P, Q, F, D, nu, moduli: ElasticModuli, flags: int = PIECES_IMAGE):
    """Any combination of A/B/C image pieces, A evaluated directly in image variables."""
    return _image(P, Q, F, D, nu, moduli, flags)


def mindlin_full(P, Q, F=None, D=None, nu=None, *, moduli: ElasticModuli):
    if F is None and D is None:
        raise ValueError("mindlin_full needs a force and/or a dislocation")
    k = _kelvin(P, Q, F, D, nu, moduli)
    im = _image(P, Q, F, D, nu, moduli, PIECES_IMAGE)
    if isinstance(k, FieldSample):
        return field_sample(k.u + im.u, k.grad_u + im.grad_u, moduli)
    return k + im


@dataclass(frozen=True)
class BPotentialJet:
    """Value, gradient and Hessian of B(R) = R3 log(R + R3) - R with respect to R."""

    value: float
    gradient: np.ndarray
    hessian: np.ndarray


def b_potential_derivatives(R: np.ndarray) -> np.ndarray:
    """All derivatives of B up to order 4 at points R (n, 3); columns follow ``_bjet.INDEX``."""
    R = np.ascontiguousarray(np.atleast_2d(R), dtype=float)
    out = np.empty((len(R), 35))
    _b_jets_many(R, out)
    return out


def b_potential_jet(c: ImageCoords) -> BPotentialJet:
    if c.R <= 0.0 or c.R + c.R3 <= 0.0:
        raise SingularEvaluationError("B potential is singular at R = 0 or on R + R3 = 0")
    j = b_potential_derivatives(np.array([c.R1, c.R2, c.R3]))[0]
    return BPotentialJet(float(j[0]), j[_BI1].copy(), j[_BI2].copy())


def b_jet_tensor(jets: np.ndarray, order: int) -> np.ndarray:
    """Expand packed derivative rows into full symmetric tensors of the given order."""
    table = {0: np.array([0]), 1: _BI1, 2: _BI2, 3: _BI3, 4: _BI4}[order]
    if order == 0:
        return jets[..., 0]
    return jets[..., table]


# ---------------------------------------------------------------------------
# direct summation
# ---------------------------------------------------------------------------


def source_arrays(sources: SourceBatch, moduli: ElasticModuli):
    """Contiguous (positions, F, E) arrays and usage flags for the numba loops."""
    pos = np.ascontiguousarray(sources.positions)
    F = np.ascontiguousarray(sources.forces_or_zero())
    E = np.ascontiguousarray(sources.dislocation_tensors(moduli))
    return pos, F, E, sources.has_slp, sources.has_dlp


def kelvin_blocks(tx, sx, F, E, moduli, use_f, use_e, bt0, bt1, bs0, bs1, u, g):
    bad = _kelvin_blocks(tx, sx, F, E, moduli.alpha, moduli.mu, use_f, use_e, bt0, bt1, bs0, bs1, u, g)
    if bad >= 0:
        t, s = divmod(int(bad), len(sx))
        raise SingularEvaluationError(f"target {t} coincides with source {s}")


def image_blocks(tx, sx, F, E, moduli, flags, use_f, use_e, bt0, bt1, bs0, bs1, u, g):
    if flags & PIECE_B and moduli.alpha == 0.0:
        raise InvalidModuliError("the B image is undefined for alpha = 0")
    bad = _image_blocks(tx, sx, F, E, moduli.alpha, moduli.mu, flags, use_f, use_e, bt0, bt1, bs0, bs1, u, g)
    if bad >= 0:
        t, s = divmod(int(bad), len(sx))
        raise SingularEvaluationError(f"target {t} coincides with the image of source {s}")


def direct_sum(sources: SourceBatch, targets: TargetBatch, sel: KernelSelector, moduli: ElasticModuli) -> FieldBatch:
    """Exact O(NM) summation of the selected pieces; the reference for every FMM result."""
    tx = np.ascontiguousarray(targets.positions)
    m = len(tx)
    u = np.zeros((m, 3))
    g = np.zeros((m, 3, 3))
    if len(sources) and m:
        sx, F, E, use_f, use_e = source_arrays(sources, moduli)
        one = np.zeros(1, dtype=np.int64)
        bt1 = np.array([m], dtype=np.int64)
        bs1 = np.array([len(sx)], dtype=np.int64)
        if sel.kelvin:
            kelvin_blocks(tx, sx, F, E, moduli, use_f, use_e, one, bt1, one, bs1, u, g)
        if sel.image_flags:
            image_blocks(tx, sx, F, E, moduli, sel.image_flags, use_f, use_e, one, bt1, one, bs1, u, g)
    return FieldBatch(u, g, moduli)
