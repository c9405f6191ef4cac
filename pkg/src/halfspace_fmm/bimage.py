"""Outgoing representation of the B-image potential.

Phi_B(x) = sum_s F_s . grad_image B(x - image_s) with B(d) = R3 log(R + R3) - R,
R = (d1, d2, -d3).  Phi_B grows away from the sources, so it has no ordinary
multipole expansion.  Its second x3-derivative H is an ordinary dipole field
(quadrupole field for dislocations).  We write

    Phi_B = G + Psi

where Psi is the potential of B-type charges on two rings (colatitudes theta1
and pi - theta1 on the sphere around the box) chosen so that H - d^2 Psi / dx3^2
has no moments with n - |m| <= 1.  The remainder then has a unique decaying
inverse G = d^{-2}/dx3^2 (H - H_ring), an ordinary multipole.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
import math
from typing import Optional

import numba
import numpy as np

from ._bjet import b_jet
from .core import ConfigurationError, DomainError, ElasticModuli, PreconditionError, SeparationError, SourceBatch
from . import harmonics as hm
from .planewave import b_quadrupoles

DEFAULT_THETA = math.pi / 3
RING_RADIUS_FACTOR = math.sqrt(3.0) / 2.0
CIRCLE_THETA = math.pi / 4
S_DIAG = np.array([1.0, 1.0, -1.0])


# ---------------------------------------------------------------------------
# B-type point charges
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _b_value(r1, r2, r3):
    R = math.sqrt(r1 * r1 + r2 * r2 + r3 * r3)
    if r3 >= 0.0:
        W = R + r3
    else:
        W = (r1 * r1 + r2 * r2) / (R - r3)
    return r3 * math.log(W) - R


@numba.njit(cache=True)
def _psi_values(x, pts, q, out):
    for i in range(x.shape[0]):
        s = 0.0
        for l in range(pts.shape[0]):
            s += q[l] * _b_value(x[i, 0] - pts[l, 0], x[i, 1] - pts[l, 1], pts[l, 2] - x[i, 2])
        out[i] += s


@numba.njit(cache=True)
def _psi_jets(x, pts, q, out):
    """out[i] += value, gradient and Hessian (jet order v,x,y,z,xx,yy,zz,xy,xz,yz)."""
    jet = np.empty(35)
    for i in range(x.shape[0]):
        for l in range(pts.shape[0]):
            b_jet(x[i, 0] - pts[l, 0], x[i, 1] - pts[l, 1], pts[l, 2] - x[i, 2], jet)
            c = q[l]
            out[i, 0] += c * jet[0]
            out[i, 1] += c * jet[1]
            out[i, 2] += c * jet[2]
            out[i, 3] -= c * jet[3]
            out[i, 4] += c * jet[4]
            out[i, 7] += c * jet[5]
            out[i, 8] -= c * jet[6]
            out[i, 5] += c * jet[7]
            out[i, 9] -= c * jet[8]
            out[i, 6] += c * jet[9]


@numba.njit(cache=True)
def _phib_values(x, img, a, b, use_a, use_b, out):
    """Phi_B = sum_s a_s . grad_R B + b_s : hess_R B at R = S (x - image_s)."""
    jet = np.empty(35)
    for i in range(x.shape[0]):
        s_tot = 0.0
        for s in range(img.shape[0]):
            b_jet(x[i, 0] - img[s, 0], x[i, 1] - img[s, 1], img[s, 2] - x[i, 2], jet)
            v = 0.0
            if use_a:
                v += a[s, 0] * jet[1] + a[s, 1] * jet[2] + a[s, 2] * jet[3]
            if use_b:
                v += b[s, 0, 0] * jet[4] + b[s, 1, 1] * jet[7] + b[s, 2, 2] * jet[9]
                v += 2.0 * (b[s, 0, 1] * jet[5] + b[s, 0, 2] * jet[6] + b[s, 1, 2] * jet[8])
            s_tot += v
        out[i] += s_tot


def phib_values(points, images, dipoles=None, quadrupoles=None) -> np.ndarray:
    """Phi_B at points from image dipoles F (F . grad_image B) and quadrupoles Q (Q : hess_image B)."""
    x = np.ascontiguousarray(np.atleast_2d(points), dtype=float)
    n = len(images)
    a = np.zeros((n, 3)) if dipoles is None else -S_DIAG * np.asarray(dipoles, float)
    b = np.zeros((n, 3, 3)) if quadrupoles is None else np.asarray(quadrupoles, float) * np.outer(S_DIAG, S_DIAG)
    out = np.zeros(len(x))
    _phib_values(x, np.ascontiguousarray(images, dtype=float), np.ascontiguousarray(a), np.ascontiguousarray(b),
                 dipoles is not None, quadrupoles is not None, out)
    return out


def psi_values(points, ring_points, charges) -> np.ndarray:
    x = np.ascontiguousarray(np.atleast_2d(points), dtype=float)
    out = np.zeros(len(x))
    _psi_values(x, np.ascontiguousarray(ring_points, dtype=float), np.ascontiguousarray(charges, dtype=float), out)
    return out


def psi_jets(points, ring_points, charges, out: Optional[np.ndarray] = None) -> np.ndarray:
    x = np.ascontiguousarray(np.atleast_2d(points), dtype=float)
    if out is None:
        out = np.zeros((len(x), 10))
    _psi_jets(x, np.ascontiguousarray(ring_points, dtype=float), np.ascontiguousarray(charges, dtype=float), out)
    return out


@numba.njit(cache=True)
def _psi_values_grouped(x, rp, q, out):
    """out[k, i] = ring potential of group k (points rp[k], charges q[k]) at x[k, i]."""
    for k in range(x.shape[0]):
        for i in range(x.shape[1]):
            s = 0.0
            for l in range(rp.shape[1]):
                s += q[k, l] * _b_value(x[k, i, 0] - rp[k, l, 0], x[k, i, 1] - rp[k, l, 1], rp[k, l, 2] - x[k, i, 2])
            out[k, i] = s


@numba.njit(cache=True)
def _psi_jets_pairs(x, tidx, rp, q, cidx, out):
    """out[tidx[e]] += jets of ring group cidx[e] at x[tidx[e]]."""
    jet = np.empty(35)
    for e in range(tidx.shape[0]):
        i = tidx[e]
        k = cidx[e]
        for l in range(rp.shape[1]):
            b_jet(x[i, 0] - rp[k, l, 0], x[i, 1] - rp[k, l, 1], rp[k, l, 2] - x[i, 2], jet)
            c = q[k, l]
            out[i, 0] += c * jet[0]
            out[i, 1] += c * jet[1]
            out[i, 2] += c * jet[2]
            out[i, 3] -= c * jet[3]
            out[i, 4] += c * jet[4]
            out[i, 7] += c * jet[5]
            out[i, 8] -= c * jet[6]
            out[i, 5] += c * jet[7]
            out[i, 9] -= c * jet[8]
            out[i, 6] += c * jet[9]


@numba.njit(cache=True)
def _phib_values_ranges(x, img, a, b, s0, s1, use_a, use_b, out):
    """out[k, i] = Phi_B at x[k, i] from images s0[k]:s1[k] (strengths as in _phib_values)."""
    jet = np.empty(35)
    for k in range(x.shape[0]):
        for i in range(x.shape[1]):
            tot = 0.0
            for s in range(s0[k], s1[k]):
                b_jet(x[k, i, 0] - img[s, 0], x[k, i, 1] - img[s, 1], img[s, 2] - x[k, i, 2], jet)
                v = 0.0
                if use_a:
                    v += a[s, 0] * jet[1] + a[s, 1] * jet[2] + a[s, 2] * jet[3]
                if use_b:
                    v += b[s, 0, 0] * jet[4] + b[s, 1, 1] * jet[7] + b[s, 2, 2] * jet[9]
                    v += 2.0 * (b[s, 0, 1] * jet[5] + b[s, 0, 2] * jet[6] + b[s, 1, 2] * jet[8])
                tot += v
            out[k, i] = tot


# ---------------------------------------------------------------------------
# ring operators in scaled (unit box) coordinates
# ---------------------------------------------------------------------------


def _circle_points(theta: float, rho: float, K: int) -> np.ndarray:
    phi = 2 * np.pi * np.arange(K) / K
    return np.stack([rho * math.sin(theta) * np.cos(phi), rho * math.sin(theta) * np.sin(phi),
                     np.full(K, rho * math.cos(theta))], axis=-1)


def _axial_values(theta: float, rho: float, p: int) -> np.ndarray:
    """R_n^m(rho, theta, phi=0), real, full index."""
    pt = np.array([rho * math.sin(theta), 0.0, rho * math.cos(theta)])
    return hm.table(pt[None], p, False)[0].real


def _two_circle_fit(p_coef: int, K: int, theta: float, rho: float, p_fourier: int):
    """Real map from samples on circles at theta and pi - theta (K points each) to the
    packed coefficients (n - |m| <= 1, n <= p_coef) of a harmonic polynomial
    sum c_n^m R_n^m reproducing their Fourier modes |m| <= p_fourier."""
    P = hm.nterms(p_coef)
    ta = _axial_values(theta, rho, p_coef)
    tb = _axial_values(math.pi - theta, rho, p_coef)
    phi = 2 * np.pi * np.arange(K) / K
    A = np.zeros((P, 2 * K))
    for m in range(0, min(p_fourier, p_coef) + 1):
        e = np.exp(-1j * m * phi) / K  # Fourier mode m of each circle
        rows = []
        i0 = m * m + 2 * m
        if m + 1 <= p_coef:
            i1 = (m + 1) ** 2 + (m + 1) + m
            Mx = np.array([[ta[i0], ta[i1]], [tb[i0], tb[i1]]])
            inv = np.linalg.inv(Mx)
            fa = np.concatenate([e, np.zeros(K)])
            fb = np.concatenate([np.zeros(K), e])
            c0 = inv[0, 0] * fa + inv[0, 1] * fb
            c1 = inv[1, 0] * fa + inv[1, 1] * fb
            rows = [(m, m, c0), (m + 1, m, c1)]
        else:
            c0 = (np.concatenate([e, e])) / (ta[i0] + tb[i0])
            rows = [(m, m, c0)]
        for n, mm, c in rows:
            base = n * n + n
            A[base + mm] = c.real
            if mm > 0:
                A[base - mm] = c.imag
    return A


@dataclass(frozen=True)
class _RingOps:
    p_h: int
    K: int
    points: np.ndarray  # (2K, 3) scaled ring positions
    solve: np.ndarray  # (2K, P_h): packed H moments -> scaled ring charges
    moments: np.ndarray  # (P_h, 2K): scaled charges -> packed moments
    to_smooth: np.ndarray  # (P_h - ..., P_h): packed H -> packed G (order p_h - 2), without h^2


@lru_cache(maxsize=None)
def ring_ops(p_h: int, theta1: float = DEFAULT_THETA, rho: float = RING_RADIUS_FACTOR) -> _RingOps:
    if abs(math.cos(theta1)) < 1e-8 or abs(math.sin(theta1)) < 1e-8:
        raise ConfigurationError(f"ring colatitude {theta1} makes the moment system singular")
    K = 2 * p_h + 1
    pts = np.vstack([_circle_points(theta1, rho, K), _circle_points(math.pi - theta1, rho, K)])
    P = hm.nterms(p_h)
    # moments of unit scaled charges: conj(R(tau))
    Rt = hm.table(pts, p_h, False)
    moments = hm.pack(np.conj(Rt), p_h).T
    # solve: a ring-charge field reproducing the Fourier modes of the low moments;
    # two "circles" here are the rings themselves, in moment space
    ta = _axial_values(theta1, rho, p_h)
    tb = _axial_values(math.pi - theta1, rho, p_h)
    phi = 2 * np.pi * np.arange(K) / K
    solve = np.zeros((2 * K, P))
    for m in range(0, p_h + 1):
        i0 = m * m + 2 * m
        basis = []  # (packed index, complex weight of M_n^m) per density unknown
        if m + 1 <= p_h:
            i1 = (m + 1) ** 2 + (m + 1) + m
            inv = np.linalg.inv(np.array([[ta[i0], tb[i0]], [ta[i1], tb[i1]]]))
        else:
            i1 = None
        for part in ("re", "im"):
            if m == 0 and part == "im":
                continue
            # packed column index of Re/Im of M_n^m
            def col(n):
                b = n * n + n
                return b + m if part == "re" else b - m
            unit = 1.0 if part == "re" else 1j
            if i1 is not None:
                s1 = {col(m): inv[0, 0] * unit, col(m + 1): inv[0, 1] * unit}
                s2 = {col(m): inv[1, 0] * unit, col(m + 1): inv[1, 1] * unit}
            else:
                v = unit / (ta[i0] + tb[i0])
                s1 = {col(m): v}
                s2 = {col(m): v}
            for ring, sd in ((0, s1), (1, s2)):
                for c, s in sd.items():
                    # q_l = (1/K)[s^0 + 2 Re(s^m e^{i m phi_l})] for m > 0
                    if m == 0:
                        vals = np.full(K, (s.real) / K)
                    else:
                        vals = 2.0 * np.real(s * np.exp(1j * m * phi)) / K
                    solve[ring * K:(ring + 1) * K, c] += vals
    proj = np.eye(P) - moments @ solve
    p_g = p_h - 2
    n, m = hm.nm_arrays(p_h)
    keep = (n - np.abs(m)) >= 2
    src = np.nonzero(keep)[0]
    dst = (n[keep] - 2) ** 2 + (n[keep] - 2) + m[keep]
    shift = np.zeros((hm.nterms(p_g), P))
    shift[dst, src] = 1.0
    return _RingOps(p_h, K, pts, solve, moments, shift @ proj)


@dataclass(frozen=True)
class _PsiLocalOps:
    p: int
    samples: np.ndarray  # (2K, 3) scaled sample points
    shift_up: np.ndarray  # (P_{p+2}, P): packed L^H (order p) -> packed n+2 coefficients
    known_rows: np.ndarray  # (2K, P_{p+2}) evaluation rows of the shifted part at samples
    fit: np.ndarray  # (P, 2K) low-mode fit


@lru_cache(maxsize=None)
def psi_local_ops(p: int, rho: float = RING_RADIUS_FACTOR, theta: float = CIRCLE_THETA) -> _PsiLocalOps:
    K = 2 * p + 1
    samples = np.vstack([_circle_points(theta, rho, K), _circle_points(math.pi - theta, rho, K)])
    n, m = hm.nm_arrays(p)
    P2 = hm.nterms(p + 2)
    shift_up = np.zeros((P2, hm.nterms(p)))
    dst = (n + 2) ** 2 + (n + 2) + m
    shift_up[dst, np.arange(len(n))] = 1.0
    rows = hm.basis_jets(samples, p + 2, False, nder=1)[:, 0, :]
    fit = _two_circle_fit(p, K, theta, rho, p)
    return _PsiLocalOps(p, samples, shift_up, rows, fit)


def _complete_local(LH: np.ndarray, sample_values: np.ndarray, h: float, p: int) -> np.ndarray:
    """Local of a potential from the local of its d^2/dx3^2 and its values on the two circles."""
    ops = psi_local_ops(p)
    shifted = (h * h) * (ops.shift_up @ LH)
    rem = sample_values - ops.known_rows @ shifted
    return shifted[: hm.nterms(p)] + ops.fit @ rem


def sample_points(center, h: float, p: int) -> np.ndarray:
    return np.asarray(center, float) + h * psi_local_ops(p).samples


def psi_local_packed(ring_points: np.ndarray, charges: np.ndarray, center, h: float, p: int) -> np.ndarray:
    """Packed scaled local coefficients (order p, about center, size h) of the ring potential."""
    center = np.asarray(center, float)
    tau = (ring_points - center) / h
    LH = hm.form_coefficients(tau, np.full(len(tau), 1.0 / h), charges[:, None], None, None,
                              np.zeros(len(tau), dtype=np.int64), 1, p, True)[0, 0]
    vals = psi_values(sample_points(center, h, p), ring_points, charges)
    return _complete_local(LH, vals, h, p)


def b_local_packed(images: np.ndarray, dipoles, quadrupoles, center, h: float, p: int) -> np.ndarray:
    """Packed scaled local coefficients of Phi_B generated directly by image dipoles/quadrupoles."""
    center = np.asarray(center, float)
    tau = (images - center) / h
    n = len(images)
    LH = hm.form_coefficients(tau, np.full(n, 1.0 / h), np.zeros((n, 1)),
                              None if dipoles is None else np.asarray(dipoles)[:, None, :] / h,
                              None if quadrupoles is None else np.asarray(quadrupoles)[:, None] / (h * h),
                              np.zeros(n, dtype=np.int64), 1, p, True)[0, 0]
    vals = phib_values(sample_points(center, h, p), images, dipoles, quadrupoles)
    return _complete_local(LH, vals, h, p)


def _complete_local_batch(LH: np.ndarray, vals: np.ndarray, h: np.ndarray, p: int) -> np.ndarray:
    ops = psi_local_ops(p)
    shifted = (h * h)[:, None] * (LH @ ops.shift_up.T)
    rem = vals - shifted @ ops.known_rows.T
    return shifted[:, : hm.nterms(p)] + rem @ ops.fit.T


def psi_local_batch(ring_points: np.ndarray, charges: np.ndarray, centers: np.ndarray, h: np.ndarray,
                    p: int) -> np.ndarray:
    """Batched psi_local_packed: ring_points (k, R, 3), charges (k, R), centers (k, 3), h (k,)."""
    k, nr = charges.shape
    if k == 0:
        return np.zeros((0, hm.nterms(p)))
    tau = (ring_points - centers[:, None, :]) / h[:, None, None]
    inv_h = np.repeat(1.0 / h, nr)
    dest = np.repeat(np.arange(k, dtype=np.int64), nr)
    LH = hm.form_coefficients(tau.reshape(-1, 3), inv_h, charges.reshape(-1, 1), None, None, dest, k, p, True)[:, 0]
    x = centers[:, None, :] + h[:, None, None] * psi_local_ops(p).samples[None]
    vals = np.empty(x.shape[:2])
    _psi_values_grouped(np.ascontiguousarray(x), np.ascontiguousarray(ring_points, dtype=float),
                        np.ascontiguousarray(charges, dtype=float), vals)
    return _complete_local_batch(LH, vals, h, p)


def b_local_batch(images: np.ndarray, dipoles, quadrupoles, s0: np.ndarray, s1: np.ndarray,
                  centers: np.ndarray, h: np.ndarray, p: int) -> np.ndarray:
    """Locals of Phi_B about centers[k] (size h[k]) from the images s0[k]:s1[k]."""
    k = len(centers)
    if k == 0:
        return np.zeros((0, hm.nterms(p)))
    counts = s1 - s0
    dest = np.repeat(np.arange(k, dtype=np.int64), counts)
    idx = np.concatenate([np.arange(a, b) for a, b in zip(s0, s1)])
    hd = h[dest]
    tau = (images[idx] - centers[dest]) / hd[:, None]
    n = len(idx)
    dip = None if dipoles is None else (dipoles[idx] / hd[:, None])[:, None, :]
    quad = None if quadrupoles is None else (quadrupoles[idx] / (hd * hd)[:, None, None])[:, None]
    LH = hm.form_coefficients(tau, 1.0 / hd, np.zeros((n, 1)), dip, quad, dest, k, p, True)[:, 0]
    x = centers[:, None, :] + h[:, None, None] * psi_local_ops(p).samples[None]
    ns = len(images)
    a = np.zeros((ns, 3)) if dipoles is None else -S_DIAG * dipoles
    b = np.zeros((ns, 3, 3)) if quadrupoles is None else quadrupoles * np.outer(S_DIAG, S_DIAG)
    vals = np.empty(x.shape[:2])
    _phib_values_ranges(np.ascontiguousarray(x), np.ascontiguousarray(images, dtype=float),
                        np.ascontiguousarray(a), np.ascontiguousarray(b),
                        np.asarray(s0, dtype=np.int64), np.asarray(s1, dtype=np.int64),
                        dipoles is not None, quadrupoles is not None, vals)
    return _complete_local_batch(LH, vals, h, p)


def psi_jets_pairs(points: np.ndarray, tidx, ring_points: np.ndarray, charges: np.ndarray, cidx,
                   out: np.ndarray) -> None:
    _psi_jets_pairs(np.ascontiguousarray(points, dtype=float), np.asarray(tidx, dtype=np.int64),
                    np.ascontiguousarray(ring_points, dtype=float), np.ascontiguousarray(charges, dtype=float),
                    np.asarray(cidx, dtype=np.int64), out)


def b_local_from_sources(sources: SourceBatch, center, scale: float, p: int,
                         moduli: Optional[ElasticModuli] = None) -> hm.LocalExpansion:
    """Local expansion of Phi_B about a box well separated from the (larger) source box."""
    img = _image_sources(sources)
    quad = b_quadrupoles(sources, moduli) if sources.has_dlp else None
    packed = b_local_packed(img, sources.slp_forces, quad, center, scale, p)
    return hm.LocalExpansion.from_internal(center, scale, p, hm.unpack(packed, p))


# ---------------------------------------------------------------------------
# public types and operations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RingPair:
    """Discrete B-type charges on two rings about ``center``.

    ``samples[r, l]`` is the charge at azimuth 2 pi l / K on ring r (r = 0 at
    colatitude theta1, r = 1 at pi - theta1); ``sigma1``/``sigma2`` hold their
    Fourier coefficients s^m, m = 0..K//2, with samples = (1/K) sum_m s^m e^{i m phi}.
    """

    center: np.ndarray
    radius: float
    theta1: float
    scale: float
    sigma1: np.ndarray
    sigma2: np.ndarray
    samples: np.ndarray

    @property
    def K(self) -> int:
        return self.samples.shape[1]

    @property
    def points(self) -> np.ndarray:
        return np.vstack([_circle_points(self.theta1, self.radius, self.K),
                          _circle_points(math.pi - self.theta1, self.radius, self.K)]) + self.center

    @property
    def charges(self) -> np.ndarray:
        return self.samples.reshape(-1)


def _rings_from_charges(center, scale, theta1, radius, q_phys, K) -> RingPair:
    samples = q_phys.reshape(2, K)
    coef = np.fft.fft(samples, axis=1)  # s^m = sum_l q_l e^{-i m phi_l}
    half = K // 2 + 1
    return RingPair(np.asarray(center, float), float(radius), float(theta1), float(scale),
                    coef[0, :half], coef[1, :half], samples)


@dataclass(frozen=True)
class BFarField:
    smooth: hm.MultipoleExpansion
    rings: RingPair

    @property
    def p(self) -> int:
        return self.smooth.p


def _image_sources(sources: SourceBatch):
    return sources.positions * S_DIAG


def phiB_multipole(sources: SourceBatch, center, scale: float, p: int,
                   moduli: Optional[ElasticModuli] = None) -> hm.MultipoleExpansion:
    """Multipole (kind ``pre_dz2``) of H = d^2 Phi_B / dx3^2.

    Forces give image dipoles F; dislocations give image quadrupoles
    Q_jk = E_jk (S_j + S_k) / 2.
    """
    img = _image_sources(sources)
    dip = sources.slp_forces
    quad = None
    if sources.has_dlp:
        if moduli is None:
            raise ValueError("dislocation sources need elastic moduli")
        quad = b_quadrupoles(sources, moduli)
    if dip is None and quad is None:
        dip = np.zeros((len(sources), 3))
    return hm.form_multipole(center, scale, p, img, None, dip, quad, kind="pre_dz2")


def _check_low_order(c_full: np.ndarray, p: int):
    packed = hm.pack(c_full, p)
    low = hm.low_order_mask(p)
    norm = np.max(np.abs(packed)) if packed.size else 0.0
    if norm > 0 and np.max(np.abs(packed[low])) > 1e-12 * norm:
        raise PreconditionError("coefficients with n - |m| <= 1 must vanish before the d^-2/dz^2 shift")


def dz_inv2_shift(m: hm.MultipoleExpansion, check: bool = True) -> hm.MultipoleExpansion:
    """Plain multipole G with d^2 G / dx3^2 equal to the given ``pre_dz2`` field."""
    if m.kind != "pre_dz2":
        raise ValueError("dz_inv2_shift expects a pre_dz2 multipole")
    c = m.internal()
    if check:
        _check_low_order(c, m.p)
    packed = hm.dz_inv2_packed(hm.pack(c, m.p), m.p, m.scale)
    return hm.MultipoleExpansion.from_internal(m.center, m.scale, m.p, hm.unpack(packed, m.p), "plain")


def ring_solve(m: hm.MultipoleExpansion, theta1: float = DEFAULT_THETA, R_ring: Optional[float] = None) -> RingPair:
    """Ring charges whose moments match those of ``m`` with n - |m| <= 1."""
    radius = RING_RADIUS_FACTOR * m.scale if R_ring is None else float(R_ring)
    ops = ring_ops(m.p, float(theta1), radius / m.scale)
    q_scaled = ops.solve @ hm.pack(m.internal(), m.p)
    return _rings_from_charges(m.center, m.scale, theta1, radius, m.scale * q_scaled, ops.K)


def ring_moments(rings: RingPair, p: int) -> hm.MultipoleExpansion:
    """Multipole (kind ``pre_dz2``) of d^2/dx3^2 of the ring potential: plain charges at the ring points."""
    return hm.form_multipole(rings.center, rings.scale, p, rings.points, rings.charges, kind="pre_dz2")


def build_bfarfield(sources: SourceBatch, center, scale: float, p: int, theta1: float = DEFAULT_THETA,
                    R_ring: Optional[float] = None, moduli: Optional[ElasticModuli] = None) -> BFarField:
    """Smooth multipole of order p plus rings; H is formed at order p + 2 so G keeps order p."""
    H = phiB_multipole(sources, center, scale, p + 2, moduli)
    return bfarfield_from_pre(H, theta1, R_ring)


def bfarfield_from_pre(H: hm.MultipoleExpansion, theta1: float = DEFAULT_THETA, R_ring: Optional[float] = None) -> BFarField:
    radius = RING_RADIUS_FACTOR * H.scale if R_ring is None else float(R_ring)
    ops = ring_ops(H.p, float(theta1), radius / H.scale)
    packed = hm.pack(H.internal(), H.p)
    q_phys = H.scale * (ops.solve @ packed)
    g = (H.scale * H.scale) * (ops.to_smooth @ packed)
    p = H.p - 2
    smooth = hm.MultipoleExpansion.from_internal(H.center, H.scale, p, hm.unpack(g, p), "plain")
    return BFarField(smooth, _rings_from_charges(H.center, H.scale, theta1, radius, q_phys, ops.K))


def eval_bfarfield(f: BFarField, point):
    """Phi_B, its gradient and Hessian outside the ring sphere."""
    single = np.ndim(point) == 1
    pts = np.atleast_2d(np.asarray(point, float))
    if np.any(np.linalg.norm(pts - f.rings.center, axis=1) <= f.rings.radius):
        raise DomainError("B far field evaluated inside its ring sphere")
    v, g, h = hm.eval_multipole_jet(f.smooth, pts)
    jets = psi_jets(pts, f.rings.points, f.rings.charges)
    pv, pg, ph = hm.jets_to_arrays(jets)
    v, g, h = v + pv, g + pg, h + ph
    if single:
        return v[0], g[0], h[0]
    return v, g, h


def b_m2l(f: BFarField, target_center, target_scale: float, p: Optional[int] = None) -> hm.LocalExpansion:
    """Local expansion of Phi_B about a well separated target box.

    The smooth part is translated with the ordinary M2L; the ring potential is
    expanded directly (its d^2/dx3^2 is a plain charge field, and the few modes
    that d^2/dx3^2 annihilates are fitted from samples on two circles).
    """
    p = f.p if p is None else p
    target_center = np.asarray(target_center, float)
    src = f.smooth
    gap = np.max(np.abs(target_center - src.center)) - 0.5 * (src.scale + target_scale)
    if gap < min(src.scale, target_scale) * (1 - 1e-12):
        raise SeparationError("b_m2l needs boxes separated by at least one box size")
    T = hm.m2l_full((target_center - src.center) / target_scale, src.scale / target_scale, p, src.p)
    smooth = hm.pack(T @ src.internal(), p)
    psi = psi_local_packed(f.rings.points, f.rings.charges, target_center, target_scale, p)
    return hm.LocalExpansion.from_internal(target_center, target_scale, p, hm.unpack(smooth + psi, p))


def phi_b_direct(sources: SourceBatch, points, moduli: Optional[ElasticModuli] = None):
    """Direct Phi_B value, gradient and Hessian at points (jets from the closed-form B derivatives)."""
    from .kernels import b_potential_derivatives, b_jet_tensor

    pts = np.atleast_2d(np.asarray(points, float))
    img = _image_sources(sources)
    out_v = np.zeros(len(pts))
    out_g = np.zeros((len(pts), 3))
    out_h = np.zeros((len(pts), 3, 3))
    F = sources.slp_forces
    Q = b_quadrupoles(sources, moduli) if sources.has_dlp else None
    S = S_DIAG
    for s in range(len(img)):
        d = pts - img[s]
        R = d * S
        jets = b_potential_derivatives(R)
        t1, t2, t3, t4 = (b_jet_tensor(jets, k) for k in (1, 2, 3, 4))
        # derivatives with respect to the image position: d/dimage_j = -S_j d/dR_j
        if F is not None:
            a = -S * F[s]
            out_v += t1 @ a
            out_g += np.einsum("nlj,j->nl", t2, a) * S
            out_h += np.einsum("nlkj,j->nlk", t3, a) * S[:, None] * S[None, :]
        if Q is not None:
            b = Q[s] * np.outer(S, S)
            out_v += np.einsum("njk,jk->n", t2, b)
            out_g += np.einsum("nljk,jk->nl", t3, b) * S
            out_h += np.einsum("nlijk,jk->nli", t4, b) * S[:, None] * S[None, :]
    return out_v, out_g, out_h
