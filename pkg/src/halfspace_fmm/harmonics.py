"""Spherical-harmonic machinery for the Laplace kernel.

Two coefficient conventions live here.

Public expansions (:class:`MultipoleExpansion`, :class:`LocalExpansion`) use the
orthonormal harmonics Y_n^m = N_n^|m| P_n^|m|(cos t) e^{im phi} (Condon-Shortley
phase inside P) and store coefficients scaled by the box size h:

    multipole  phi(x) = (sqrt(4 pi) / h) sum M_n^m Y_n^m (h / r)^{n+1}
    local      Phi(x) = sum L_n^m Y_n^m (r / h)^n

so a unit charge at the center has M_0^0 = 1 and a constant c has L_0^0 = c sqrt(4 pi).

Internally the FMM works with the solid harmonics
R_n^m = r^n P_n^m e^{im phi} / (n+m)!  and  I_n^m = (n-m)! P_n^m e^{im phi} / r^{n+1}
(m >= 0, with T^{-m} = (-1)^m conj(T^m)), in which 1/|x - s| = sum conj(R_n^m(s)) I_n^m(x)
and all derivative and translation rules have unit coefficients.  Internal
coefficients are scaled so that phi(x) = sum M_n^m I_n^m((x - c)/h) and
Phi(x) = sum L_n^m R_n^m((x - c)/h).  Real fields are stored "packed": slot
n^2 + n + m holds Re c_n^m for m >= 0 and Im c_n^|m| for m < 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from collections import OrderedDict
from functools import lru_cache
import math
from typing import Optional

import numba
import numpy as np

from .core import DomainError, SeparationError


def nterms(p: int) -> int:
    return (p + 1) * (p + 1)


@lru_cache(maxsize=None)
def nm_arrays(p: int):
    """Degree and order of every full index n^2 + n + m."""
    n = np.concatenate([np.full(2 * k + 1, k) for k in range(p + 1)])
    m = np.concatenate([np.arange(-k, k + 1) for k in range(p + 1)])
    return n, m


# ---------------------------------------------------------------------------
# numba kernels: solid-harmonic tables, derivative jets, formation
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _table(x, y, z, p, irregular, out):
    """Fill out[n^2+n+m] with R_n^m(x,y,z) (irregular=False) or I_n^m (True) for n <= p."""
    r2 = x * x + y * y + z * z
    w = complex(x, y)
    if irregular:
        ir2 = 1.0 / r2
        diag = 1.0 / math.sqrt(r2)
        for m in range(p + 1):
            if m > 0:
                diag = -(2 * m - 1) * w * ir2 * diag
            out[m * m + 2 * m] = diag
            if m + 1 <= p:
                n = m + 1
                out[n * n + n + m] = (2 * m + 1) * z * ir2 * diag
            for n in range(m + 2, p + 1):
                a = out[(n - 1) * (n - 1) + (n - 1) + m]
                b = out[(n - 2) * (n - 2) + (n - 2) + m]
                out[n * n + n + m] = ((2 * n - 1) * z * a - (n + m - 1) * (n - m - 1) * b) * ir2
    else:
        diag = complex(1.0, 0.0)
        for m in range(p + 1):
            if m > 0:
                diag = -w / (2 * m) * diag
            out[m * m + 2 * m] = diag
            if m + 1 <= p:
                n = m + 1
                out[n * n + n + m] = z * diag
            for n in range(m + 2, p + 1):
                a = out[(n - 1) * (n - 1) + (n - 1) + m]
                b = out[(n - 2) * (n - 2) + (n - 2) + m]
                out[n * n + n + m] = ((2 * n - 1) * z * a - r2 * b) / ((n - m) * (n + m))
    for n in range(1, p + 1):
        sgn = -1.0
        for m in range(1, n + 1):
            out[n * n + n - m] = sgn * out[n * n + n + m].conjugate()
            sgn = -sgn


@numba.njit(cache=True)
def _get(T, n, m, pt):
    if n < 0 or n > pt or m > n or -m > n:
        return complex(0.0, 0.0)
    return T[n * n + n + m]


@numba.njit(cache=True)
def _jets(T, pt, p, irregular, nder, out):
    """Derivative tables of a solid-harmonic family for degrees n <= p.

    out[0] = T, out[1:4] = d/dx, d/dy, d/dz, out[4:10] = xx, yy, zz, xy, xz, yz.
    T must hold degrees up to pt (p for regular, p + 2 for irregular families).
    """
    d = 1 if irregular else -1
    sz = -1.0 if irregular else 1.0
    mi = complex(0.0, -1.0)
    for n in range(p + 1):
        for m in range(-n, n + 1):
            k = n * n + n + m
            out[0, k] = T[k]
            if nder == 1:
                continue
            a = _get(T, n + d, m + 1, pt)
            b = _get(T, n + d, m - 1, pt)
            zz = _get(T, n + d, m, pt)
            out[1, k] = 0.5 * (a - b)
            out[2, k] = 0.5 * mi * (a + b)
            out[3, k] = sz * zz
            a2 = _get(T, n + 2 * d, m + 2, pt)
            b2 = _get(T, n + 2 * d, m - 2, pt)
            z2 = _get(T, n + 2 * d, m, pt)
            a1 = _get(T, n + 2 * d, m + 1, pt)
            b1 = _get(T, n + 2 * d, m - 1, pt)
            out[4, k] = 0.25 * (a2 - 2.0 * z2 + b2)
            out[5, k] = -0.25 * (a2 + 2.0 * z2 + b2)
            out[6, k] = z2
            out[7, k] = 0.25 * mi * (a2 - b2)
            out[8, k] = sz * 0.5 * (a1 - b1)
            out[9, k] = sz * 0.5 * mi * (a1 + b1)


@numba.njit(cache=True)
def _basis_jets(pts, p, irregular, nder, out):
    """Packed real evaluation rows: value(s) = out[i, d] . packed_coefficients."""
    pt = p + 2 if irregular else p
    T = np.empty((pt + 1) * (pt + 1), dtype=np.complex128)
    J = np.empty((10, (p + 1) * (p + 1)), dtype=np.complex128)
    for i in range(pts.shape[0]):
        _table(pts[i, 0], pts[i, 1], pts[i, 2], pt, irregular, T)
        _jets(T, pt, p, irregular, nder, J)
        for dd in range(nder):
            for n in range(p + 1):
                c = n * n + n
                out[i, dd, c] = J[dd, c].real
                for m in range(1, n + 1):
                    v = J[dd, c + m]
                    out[i, dd, c + m] = 2.0 * v.real
                    out[i, dd, c - m] = -2.0 * v.imag


@numba.njit(cache=True)
def _form(pts, inv_h, q, dip, quad, dest, p, irregular, use_d, use_q, out):
    """Accumulate expansion coefficients of charges/dipoles/quadrupoles.

    Source i (scaled position pts[i] = (s - c)/h) adds, for every channel,
    q conj(T) + dip . grad conj(T) + quad : hess conj(T), all divided by h
    (dip and quad are pre-scaled by 1/h and 1/h^2).  T is R for multipoles and
    I for locals.  out has shape (ndest, nch, P), complex.
    """
    pt = p + 2 if irregular else p
    nder = 10 if (use_d or use_q) else 1
    P = (p + 1) * (p + 1)
    T = np.empty((pt + 1) * (pt + 1), dtype=np.complex128)
    J = np.empty((10, P), dtype=np.complex128)
    nch = q.shape[1]
    for i in range(pts.shape[0]):
        _table(pts[i, 0], pts[i, 1], pts[i, 2], pt, irregular, T)
        _jets(T, pt, p, irregular, nder, J)
        o = dest[i]
        s = inv_h[i]
        for c in range(nch):
            qq = q[i, c] * s
            dx = dip[i, c, 0] * s
            dy = dip[i, c, 1] * s
            dz = dip[i, c, 2] * s
            qxx = quad[i, c, 0, 0] * s
            qyy = quad[i, c, 1, 1] * s
            qzz = quad[i, c, 2, 2] * s
            qxy = (quad[i, c, 0, 1] + quad[i, c, 1, 0]) * s
            qxz = (quad[i, c, 0, 2] + quad[i, c, 2, 0]) * s
            qyz = (quad[i, c, 1, 2] + quad[i, c, 2, 1]) * s
            for k in range(P):
                v = qq * J[0, k]
                if use_d:
                    v += dx * J[1, k] + dy * J[2, k] + dz * J[3, k]
                if use_q:
                    v += qxx * J[4, k] + qyy * J[5, k] + qzz * J[6, k]
                    v += qxy * J[7, k] + qxz * J[8, k] + qyz * J[9, k]
                out[o, c, k] += v.conjugate()


# ---------------------------------------------------------------------------
# packing and operator construction
# ---------------------------------------------------------------------------


def table(points: np.ndarray, p: int, irregular: bool) -> np.ndarray:
    """Complex full tables R_n^m or I_n^m at points (n, 3) -> (n, (p+1)^2)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    out = np.empty((len(pts), nterms(p)), dtype=np.complex128)
    for i, x in enumerate(pts):
        _table(x[0], x[1], x[2], p, irregular, out[i])
    return out


def pack(full: np.ndarray, p: int) -> np.ndarray:
    """Complex full coefficients of a real field -> packed real."""
    n, m = nm_arrays(p)
    base = n * n + n
    src = base + np.abs(m)
    c = full[..., src]
    return np.where(m >= 0, c.real, c.imag)


def unpack(packed: np.ndarray, p: int) -> np.ndarray:
    """Packed real -> complex full coefficients satisfying c^{-m} = (-1)^m conj(c^m)."""
    n, m = nm_arrays(p)
    base = n * n + n
    am = np.abs(m)
    re = packed[..., base + am]
    im = np.where(am > 0, packed[..., base - am], 0.0)
    c = re + 1j * im
    neg = m < 0
    sign = np.where(am % 2 == 1, -1.0, 1.0)
    return np.where(neg, sign * np.conj(c), c)


def real_operator(T: np.ndarray, p_out: int, p_in: int) -> np.ndarray:
    """Packed-real matrix of a complex full linear map that preserves real fields."""
    n_in, m_in = nm_arrays(p_in)
    base = n_in * n_in + n_in
    cols_pos = base + np.abs(m_in)
    cols_neg = base - np.abs(m_in)
    sign = np.where(np.abs(m_in) % 2 == 1, -1.0, 1.0)
    pos = T[:, cols_pos]
    neg = T[:, cols_neg]
    is_re = m_in >= 0
    has_pair = m_in != 0
    col_re = pos + np.where(has_pair, sign, 0.0) * neg
    col_im = 1j * pos - 1j * sign * neg
    Tc = np.where(is_re, col_re, col_im)
    n_out, m_out = nm_arrays(p_out)
    rows = n_out * n_out + n_out + np.abs(m_out)
    Tr = Tc[rows]
    return np.where((m_out >= 0)[:, None], Tr.real, Tr.imag)


@lru_cache(maxsize=None)
def _pair_index(p_out: int, p_in: int, kind: str):
    """Gather indices and signs for translation matrices."""
    no, mo = nm_arrays(p_out)
    ni, mi = nm_arrays(p_in)
    J, K = no[:, None], mo[:, None]
    N, M = ni[None, :], mi[None, :]
    if kind == "m2l":
        dn, dm = N + J, M - K
        valid = np.ones(dn.shape, dtype=bool)
        sign = np.where((J + K) % 2 == 0, 1.0, -1.0)
    elif kind == "m2m":
        dn, dm = J - N, K - M
        valid = (dn >= 0) & (np.abs(dm) <= dn)
        sign = np.ones(dn.shape)
    elif kind == "l2l":
        dn, dm = N - J, M - K
        valid = (dn >= 0) & (np.abs(dm) <= dn)
        sign = np.ones(dn.shape)
    else:
        raise ValueError(kind)
    idx = np.where(valid, dn * dn + dn + dm, 0)
    return idx, valid, sign


def m2l_full(tau: np.ndarray, ratio: float, p: int, p_in: Optional[int] = None) -> np.ndarray:
    """Complex M2L matrix; tau = (c_target - c_source)/h_target, ratio = h_source/h_target."""
    p_in = p if p_in is None else p_in
    idx, valid, sign = _pair_index(p, p_in, "m2l")
    It = table(np.asarray(tau, float)[None], p + p_in, True)[0]
    n_in = nm_arrays(p_in)[0]
    return sign * It[idx] * (ratio ** (n_in + 1))[None, :]


def m2m_full(tau: np.ndarray, ratio: float, p: int) -> np.ndarray:
    """Complex M2M matrix; tau = (c_old - c_new)/h_new, ratio = h_old/h_new."""
    idx, valid, _ = _pair_index(p, p, "m2m")
    Rt = np.conj(table(np.asarray(tau, float)[None], p, False)[0])
    n_in = nm_arrays(p)[0]
    return np.where(valid, Rt[idx], 0.0) * (ratio ** (n_in + 1))[None, :]


def l2l_full(tau: np.ndarray, ratio: float, p: int) -> np.ndarray:
    """Complex L2L matrix; tau = (c_new - c_old)/h_new, ratio = h_new/h_old."""
    idx, valid, _ = _pair_index(p, p, "l2l")
    Rt = table(np.asarray(tau, float)[None], p, False)[0]
    n_in = nm_arrays(p)[0]
    return np.where(valid, Rt[idx], 0.0) * (ratio ** n_in)[None, :]


_CHILD_OFFSETS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])


@lru_cache(maxsize=None)
def m2m_child_operators(p: int) -> np.ndarray:
    """Packed M2M matrices child -> parent for the 8 octants (index 4i + 2j + k)."""
    ops = []
    for o in _CHILD_OFFSETS:
        tau = (o - 0.5) * 0.5  # child center minus parent center, in parent units
        ops.append(real_operator(m2m_full(tau, 0.5, p), p, p))
    return np.array(ops)


@lru_cache(maxsize=None)
def l2l_child_operators(p: int) -> np.ndarray:
    ops = []
    for o in _CHILD_OFFSETS:
        tau = (o - 0.5)  # child center minus parent center, in child units
        ops.append(real_operator(l2l_full(tau, 0.5, p), p, p))
    return np.array(ops)


class M2LCache:
    """Packed same-level M2L matrices keyed by integer lattice offset (target - source).

    Least recently used matrices are dropped once the cache exceeds ``max_bytes``.
    """

    def __init__(self, p: int, max_bytes: int = 256 * 2**20):
        self.p = p
        self.max_bytes = max_bytes
        self._ops: "OrderedDict[tuple, np.ndarray]" = OrderedDict()

    def get(self, offset) -> np.ndarray:
        key = tuple(int(v) for v in offset)
        op = self._ops.get(key)
        if op is not None:
            self._ops.move_to_end(key)
            return op
        if max(abs(v) for v in key) < 2:
            raise SeparationError(f"M2L requested for adjacent boxes (offset {key})")
        op = real_operator(m2l_full(np.array(key, float), 1.0, self.p), self.p, self.p)
        self._ops[key] = op
        while len(self._ops) > 1 and len(self._ops) * op.nbytes > self.max_bytes:
            self._ops.popitem(last=False)
        return op


@lru_cache(maxsize=None)
def m2l_cache(p: int) -> M2LCache:
    return M2LCache(p)


def basis_jets(points: np.ndarray, p: int, irregular: bool, nder: int = 10) -> np.ndarray:
    """Packed evaluation rows (n, nder, P) at scaled points."""
    pts = np.ascontiguousarray(np.atleast_2d(points), dtype=float)
    out = np.empty((len(pts), nder, nterms(p)))
    _basis_jets(pts, p, irregular, nder, out)
    return out


def form_coefficients(pts, inv_h, q, dip, quad, dest, ndest, p, irregular):
    """Packed coefficients (ndest, nch, P) from point strengths; see ``_form``."""
    nch = q.shape[1]
    out = np.zeros((ndest, nch, nterms(p)), dtype=np.complex128)
    use_d = dip is not None
    use_q = quad is not None
    ns = len(pts)
    if dip is None:
        dip = np.zeros((ns, nch, 3))
    if quad is None:
        quad = np.zeros((ns, nch, 3, 3))
    _form(np.ascontiguousarray(pts, dtype=float), np.ascontiguousarray(inv_h, dtype=float),
          np.ascontiguousarray(q, dtype=float), np.ascontiguousarray(dip, dtype=float),
          np.ascontiguousarray(quad, dtype=float), np.ascontiguousarray(dest, dtype=np.int64),
          p, irregular, use_d, use_q, out)
    return pack(out, p)


JET_ORDER = ("v", "x", "y", "z", "xx", "yy", "zz", "xy", "xz", "yz")


def jets_to_arrays(vals: np.ndarray):
    """Split (..., 10) jets into value, gradient (..., 3) and Hessian (..., 3, 3)."""
    v = vals[..., 0]
    g = vals[..., 1:4]
    h = np.empty(vals.shape[:-1] + (3, 3))
    h[..., 0, 0] = vals[..., 4]
    h[..., 1, 1] = vals[..., 5]
    h[..., 2, 2] = vals[..., 6]
    h[..., 0, 1] = h[..., 1, 0] = vals[..., 7]
    h[..., 0, 2] = h[..., 2, 0] = vals[..., 8]
    h[..., 1, 2] = h[..., 2, 1] = vals[..., 9]
    return v, g, h


def scale_jets(vals: np.ndarray, h) -> np.ndarray:
    """Convert derivatives with respect to scaled coordinates into physical ones."""
    h = np.asarray(h, dtype=float)
    out = vals.copy()
    out[..., 1:4] /= h[..., None] if h.ndim else h
    out[..., 4:10] /= (h * h)[..., None] if h.ndim else h * h
    return out


def dz_inv2_packed(packed: np.ndarray, p: int, h) -> np.ndarray:
    """Map coefficients of a field H to those of G with d^2G/dz^2 = H (n -> n-2), times h^2.

    Only defined when the entries with n - |m| <= 1 vanish; the caller checks that.
    """
    n, m = nm_arrays(p)
    out = np.zeros_like(packed)
    ok = (n - np.abs(m)) >= 2
    src = np.nonzero(ok)[0]
    dst = (n[ok] - 2) ** 2 + (n[ok] - 2) + m[ok]
    out[..., dst] = packed[..., src]
    h = np.asarray(h, dtype=float)
    return out * (h * h)[..., None, None] if h.ndim else out * h * h


def low_order_mask(p: int) -> np.ndarray:
    n, m = nm_arrays(p)
    return (n - np.abs(m)) <= 1


# ---------------------------------------------------------------------------
# orthonormal spherical harmonics and public expansions
# ---------------------------------------------------------------------------


def eval_ynm_block(p: int, theta, phi) -> np.ndarray:
    """Y_n^m(theta, phi) for 0 <= n <= p, shape (..., p+1, 2p+1) with m at column m+p.

    Normalized associated Legendre values are built upward in n from the m-diagonal.
    """
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    x = np.cos(theta)
    s = np.sin(theta)
    shape = np.broadcast(theta, phi).shape
    pbar = np.zeros(shape + (p + 1, p + 1))
    pbar[..., 0, 0] = 1.0 / math.sqrt(4.0 * math.pi)
    for m in range(1, p + 1):
        pbar[..., m, m] = -math.sqrt((2 * m + 1) / (2.0 * m)) * s * pbar[..., m - 1, m - 1]
    for m in range(0, p):
        pbar[..., m + 1, m] = math.sqrt(2 * m + 3) * x * pbar[..., m, m]
        for n in range(m + 2, p + 1):
            a = math.sqrt((4.0 * n * n - 1.0) / (n * n - m * m))
            b = math.sqrt(((n - 1.0) ** 2 - m * m) / (4.0 * (n - 1.0) ** 2 - 1.0))
            pbar[..., n, m] = a * (x * pbar[..., n - 1, m] - b * pbar[..., n - 2, m])
    out = np.zeros(shape + (p + 1, 2 * p + 1), dtype=np.complex128)
    for m in range(0, p + 1):
        e = np.exp(1j * m * phi)
        out[..., m:, p + m] = pbar[..., m:, m] * e[..., None]
        if m:
            out[..., m:, p - m] = pbar[..., m:, m] * np.conj(e)[..., None]
    return out


@lru_cache(maxsize=None)
def _norm_factors(p: int):
    """Per full index: N_n^|m|, (n-|m|)!, (n+|m|)!, and the (-1)^m sign for m < 0."""
    n, m = nm_arrays(p)
    am = np.abs(m)
    fm = np.array([math.factorial(int(a)) for a in (n - am)], dtype=float)
    fp = np.array([math.factorial(int(a)) for a in (n + am)], dtype=float)
    N = np.sqrt((2 * n + 1) / (4 * math.pi) * fm / fp)
    sgn = np.where((m < 0) & (am % 2 == 1), -1.0, 1.0)
    return N, fm, fp, sgn


def _grid2full(c: np.ndarray, p: int) -> np.ndarray:
    n, m = nm_arrays(p)
    return c[..., n, m + p]


def _full2grid(f: np.ndarray, p: int) -> np.ndarray:
    n, m = nm_arrays(p)
    out = np.zeros(f.shape[:-1] + (p + 1, 2 * p + 1), dtype=np.complex128)
    out[..., n, m + p] = f
    return out


def multipole_to_internal(M: np.ndarray, p: int, h: float) -> np.ndarray:
    """Public (p+1, 2p+1) multipole coefficients -> internal complex full coefficients."""
    N, fm, fp, sgn = _norm_factors(p)
    return _grid2full(M, p) * (math.sqrt(4 * math.pi) / h) * N / fm * sgn


def multipole_from_internal(c: np.ndarray, p: int, h: float) -> np.ndarray:
    N, fm, fp, sgn = _norm_factors(p)
    return _full2grid(c / ((math.sqrt(4 * math.pi) / h) * N / fm * sgn), p)


def local_to_internal(L: np.ndarray, p: int) -> np.ndarray:
    N, fm, fp, sgn = _norm_factors(p)
    return _grid2full(L, p) * N * fp * sgn


def local_from_internal(c: np.ndarray, p: int) -> np.ndarray:
    N, fm, fp, sgn = _norm_factors(p)
    return _full2grid(c / (N * fp * sgn), p)


@dataclass(frozen=True)
class MultipoleExpansion:
    center: np.ndarray
    scale: float
    p: int
    coeffs: np.ndarray
    kind: str = "plain"

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        c = np.asarray(self.coeffs, dtype=np.complex128)
        if c.shape != (self.p + 1, 2 * self.p + 1):
            raise ValueError(f"coefficient array must have shape {(self.p + 1, 2 * self.p + 1)}")
        if self.kind not in ("plain", "pre_dz2"):
            raise ValueError("kind must be 'plain' or 'pre_dz2'")
        object.__setattr__(self, "coeffs", c)

    def internal(self) -> np.ndarray:
        return multipole_to_internal(self.coeffs, self.p, self.scale)

    @classmethod
    def from_internal(cls, center, scale, p, c, kind="plain") -> "MultipoleExpansion":
        return cls(np.asarray(center, float), float(scale), p, multipole_from_internal(c, p, scale), kind)


@dataclass(frozen=True)
class LocalExpansion:
    center: np.ndarray
    scale: float
    p: int
    coeffs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        c = np.asarray(self.coeffs, dtype=np.complex128)
        if c.shape != (self.p + 1, 2 * self.p + 1):
            raise ValueError(f"coefficient array must have shape {(self.p + 1, 2 * self.p + 1)}")
        object.__setattr__(self, "coeffs", c)

    def internal(self) -> np.ndarray:
        return local_to_internal(self.coeffs, self.p)

    @classmethod
    def from_internal(cls, center, scale, p, c) -> "LocalExpansion":
        return cls(np.asarray(center, float), float(scale), p, local_from_internal(c, p))

    def __add__(self, other: "LocalExpansion") -> "LocalExpansion":
        if self.p != other.p or self.scale != other.scale or not np.array_equal(self.center, other.center):
            raise ValueError("local expansions must share center, scale and order")
        return LocalExpansion(self.center, self.scale, self.p, self.coeffs + other.coeffs)


def _complex_form(points, center, h, p, irregular, charges=None, dipoles=None, quadrupoles=None):
    pts = (np.atleast_2d(np.asarray(points, float)) - center) / h
    ns = len(pts)
    q = np.zeros((ns, 1)) if charges is None else np.asarray(charges, float).reshape(ns, 1)
    dip = None if dipoles is None else np.asarray(dipoles, float).reshape(ns, 1, 3) / h
    quad = None if quadrupoles is None else np.asarray(quadrupoles, float).reshape(ns, 1, 3, 3) / (h * h)
    out = np.zeros((1, 1, nterms(p)), dtype=np.complex128)
    _form(np.ascontiguousarray(pts), np.full(ns, 1.0 / h), np.ascontiguousarray(q),
          np.ascontiguousarray(dip if dip is not None else np.zeros((ns, 1, 3))),
          np.ascontiguousarray(quad if quad is not None else np.zeros((ns, 1, 3, 3))),
          np.zeros(ns, dtype=np.int64), p, irregular, dip is not None, quad is not None, out)
    return out[0, 0]


def form_multipole(center, scale: float, p: int, points, charges=None, dipole_vectors=None,
                   quadrupoles=None, kind: str = "plain") -> MultipoleExpansion:
    """Multipole of charges q (potential q/|x-s|), dipoles d (d . grad_s 1/|x-s|) and
    quadrupoles Q (Q_jk d_sj d_sk 1/|x-s|) about ``center``."""
    center = np.asarray(center, float)
    pts = np.atleast_2d(np.asarray(points, float))
    if len(pts) and np.max(np.linalg.norm(pts - center, axis=1)) > scale * math.sqrt(3) / 2 * (1 + 1e-12):
        raise DomainError("source outside the bounding sphere of the box")
    c = _complex_form(pts, center, scale, p, False, charges, dipole_vectors, quadrupoles)
    return MultipoleExpansion.from_internal(center, scale, p, c, kind)


def form_local_from_sources(center, scale: float, p: int, points, charges=None, dipole_vectors=None,
                            quadrupoles=None) -> LocalExpansion:
    center = np.asarray(center, float)
    c = _complex_form(points, center, scale, p, True, charges, dipole_vectors, quadrupoles)
    return LocalExpansion.from_internal(center, scale, p, c)


def translate_m2m(src: MultipoleExpansion, new_center, new_scale: Optional[float] = None) -> MultipoleExpansion:
    new_center = np.asarray(new_center, float)
    h2 = src.scale if new_scale is None else float(new_scale)
    T = m2m_full((src.center - new_center) / h2, src.scale / h2, src.p)
    return MultipoleExpansion.from_internal(new_center, h2, src.p, T @ src.internal(), src.kind)


def translate_m2l(src: MultipoleExpansion, target_center, target_scale: float) -> LocalExpansion:
    """Multipole -> local; the boxes (cubes of side scale about the centers) must not touch."""
    if src.kind != "plain":
        raise ValueError("translate_m2l needs a plain multipole")
    target_center = np.asarray(target_center, float)
    gap = np.max(np.abs(target_center - src.center)) - 0.5 * (src.scale + target_scale)
    if gap < min(src.scale, target_scale) * (1 - 1e-12):
        raise SeparationError("M2L needs boxes separated by at least one box size")
    T = m2l_full((target_center - src.center) / target_scale, src.scale / target_scale, src.p)
    return LocalExpansion.from_internal(target_center, target_scale, src.p, T @ src.internal())


def translate_l2l(src: LocalExpansion, new_center, new_scale: Optional[float] = None) -> LocalExpansion:
    new_center = np.asarray(new_center, float)
    h2 = src.scale if new_scale is None else float(new_scale)
    T = l2l_full((new_center - src.center) / h2, h2 / src.scale, src.p)
    return LocalExpansion.from_internal(new_center, h2, src.p, T @ src.internal())


def _eval_complex(c: np.ndarray, p: int, center, h, points, irregular: bool):
    pts = (np.atleast_2d(np.asarray(points, float)) - center) / h
    pt = p + 2 if irregular else p
    T = np.empty((pt + 1) ** 2, dtype=np.complex128)
    J = np.empty((10, nterms(p)), dtype=np.complex128)
    out = np.empty((len(pts), 10), dtype=np.complex128)
    for i, x in enumerate(pts):
        _table(x[0], x[1], x[2], pt, irregular, T)
        _jets(T, pt, p, irregular, 10, J)
        out[i] = J @ c
    return scale_jets(out, h)


def _jet_result(vals, single):
    v, g, h = jets_to_arrays(vals)
    if single:
        return v[0], g[0], h[0]
    return v, g, h


def eval_local_jet(L: LocalExpansion, point):
    """Value, gradient and Hessian of a local expansion (complex for complex coefficients)."""
    single = np.ndim(point) == 1
    vals = _eval_complex(L.internal(), L.p, L.center, L.scale, point, False)
    if np.allclose(vals.imag, 0.0, atol=1e-13 * (1 + np.max(np.abs(vals)))):
        vals = vals.real
    return _jet_result(vals, single)


def eval_multipole_jet(M: MultipoleExpansion, point):
    single = np.ndim(point) == 1
    vals = _eval_complex(M.internal(), M.p, M.center, M.scale, point, True)
    if np.allclose(vals.imag, 0.0, atol=1e-13 * (1 + np.max(np.abs(vals)))):
        vals = vals.real
    return _jet_result(vals, single)


@dataclass(frozen=True)
class SphereGrid:
    """Gauss-Legendre colatitudes x equispaced azimuths on a sphere.

    2p colatitudes integrate the polar part exactly; 2p + 1 azimuths keep the
    modes m = p and m = -p apart, so the grid is orthonormal for all n <= p.
    """

    center: np.ndarray
    radius: float
    p: int
    points: np.ndarray = field(init=False, repr=False)
    weights: np.ndarray = field(init=False, repr=False)
    ylm_conj: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, float))
        x, w = np.polynomial.legendre.leggauss(2 * self.p)
        nphi = 2 * self.p + 1
        phi = 2 * np.pi * np.arange(nphi) / nphi
        th = np.arccos(x)
        T, PH = np.meshgrid(th, phi, indexing="ij")
        W = np.outer(w, np.full(nphi, 2 * np.pi / nphi))
        dirs = np.stack([np.sin(T) * np.cos(PH), np.sin(T) * np.sin(PH), np.cos(T)], axis=-1).reshape(-1, 3)
        object.__setattr__(self, "points", self.center + self.radius * dirs)
        object.__setattr__(self, "weights", W.reshape(-1))
        Y = eval_ynm_block(self.p, T.reshape(-1), PH.reshape(-1))
        object.__setattr__(self, "ylm_conj", _grid2full(np.conj(Y), self.p))

    @property
    def unit_points(self) -> np.ndarray:
        return (self.points - self.center) / self.radius


def project_local(grid: SphereGrid, field_samples, p: Optional[int] = None, scale: Optional[float] = None) -> LocalExpansion:
    """Local expansion of a harmonic field from its samples on ``grid``.

    L_n^m = (h / rho)^n  sum_q w_q f(x_q) conj(Y_n^m(x_q)), the discrete form of
    the orthonormal projection over the sphere of radius rho.
    """
    p = grid.p if p is None else p
    if p > grid.p:
        raise ValueError("projection order exceeds grid resolution")
    h = grid.radius if scale is None else float(scale)
    f = np.asarray(field_samples, dtype=np.complex128)
    coef = (grid.weights * f) @ grid.ylm_conj
    n, m = nm_arrays(grid.p)
    coef = coef * (h / grid.radius) ** n
    grid_c = _full2grid(coef, grid.p)[: p + 1, grid.p - p: grid.p + p + 1]
    return LocalExpansion(grid.center, h, p, grid_c)


@lru_cache(maxsize=None)
def projection_operator(p: int, radius_over_h: float) -> np.ndarray:
    """Packed internal local coefficients from samples on the unit-scaled grid: (P, nq) real."""
    g = SphereGrid(np.zeros(3), radius_over_h, p)
    N, fm, fp, sgn = _norm_factors(p)
    n, m = nm_arrays(p)
    A = (g.weights[None, :] * g.ylm_conj.T) * ((1.0 / radius_over_h) ** n * N * fp * sgn)[:, None]
    n_, m_ = nm_arrays(p)
    rows = n_ * n_ + n_ + np.abs(m_)
    Ar = A[rows]
    return np.where((m_ >= 0)[:, None], Ar.real, Ar.imag)


def unit_sphere_points(p: int, radius_over_h: float) -> np.ndarray:
    return SphereGrid(np.zeros(3), radius_over_h, p).points
