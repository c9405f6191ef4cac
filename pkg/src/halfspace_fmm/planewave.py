"""Exponential (plane-wave) expansions for fields propagating downward, toward x3 < 0.

A plane-wave expansion about center c with box size h represents

    f(x) = sum_k (w_k / M_k) sum_j W(k, j) exp(sigma_k u_j . (x - c) / h),
    u_j = (-i cos a_j, -i sin a_j, 1),  a_j = 2 pi j / M_k,

which is the quadrature of  1/|d| = int_0^inf int_0^{2pi} exp(sigma u . d) da dsigma / 2pi
for d3 < 0.  The 18-node table below keeps the error of that quadrature under
1e-6 for 1 <= -d3 <= 4 and |d1|, |d2| <= 4 (unit box).

For the B-image potential the stored amplitudes W carry a factor sigma relative
to the potential itself: the displacement component u_i^B equals
c_B sum (w/M) M_i(a) W exp(...), with M(a) = (i cos a, i sin a, 1).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from functools import lru_cache
import math
from typing import Optional

import numpy as np

from .core import DomainError, ElasticModuli, SourceBatch, UnsupportedPrecisionError
from . import harmonics as hm

QUADRATURE_TABLE = (
    (0.05278852766117, 0.13438265914335, 5),
    (0.26949859838931, 0.29457752727395, 8),
    (0.63220353174689, 0.42607819361148, 12),
    (1.11307564277608, 0.53189220776549, 16),
    (1.68939496140213, 0.61787306245538, 20),
    (2.34376200469530, 0.68863156078905, 25),
    (3.06269982907806, 0.74749099381426, 29),
    (3.83562941265296, 0.79699192718599, 34),
    (4.65424734321562, 0.83917454386997, 38),
    (5.51209386593581, 0.87570092283745, 43),
    (6.40421268377278, 0.90792943590067, 47),
    (7.32688001906175, 0.93698393742461, 51),
    (8.27740099258238, 0.96382546688788, 56),
    (9.25397180602489, 0.98932985769673, 59),
    (10.25560272374640, 1.01438284597917, 59),
    (11.28208829787774, 1.04003654374165, 51),
    (12.33406790967692, 1.06815489269567, 4),
    (13.41492024017240, 1.10907580975537, 1),
)


@dataclass(frozen=True)
class PWQuadrature:
    sigma: np.ndarray
    weights: np.ndarray
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def node_count(self) -> int:
        return len(self.sigma)

    @property
    def flat_sigma(self) -> np.ndarray:
        return np.repeat(self.sigma, self.counts)

    @property
    def flat_weight(self) -> np.ndarray:
        """w_k / M_k for every exponential."""
        return np.repeat(self.weights / self.counts, self.counts)

    @property
    def flat_alpha(self) -> np.ndarray:
        return np.concatenate([2 * np.pi * np.arange(M) / M for M in self.counts])

    @property
    def flat_node(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.sigma)), self.counts)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sigma", "weight", "count"])
        for s, wt, m in QUADRATURE_TABLE:
            w.writerow([f"{s:.14f}", f"{wt:.14f}", m])
        return buf.getvalue()


SUPPORTED_PRECISIONS = (2, 3, 6)


def load_quadrature(precision: int = 6) -> PWQuadrature:
    """The 18-node table; it is also used for 2 and 3 digit requests."""
    if precision > 6:
        raise UnsupportedPrecisionError(f"no exponential quadrature for {precision} digits")
    if precision < 1:
        raise UnsupportedPrecisionError(f"precision must be positive, got {precision}")
    t = np.array(QUADRATURE_TABLE)
    return PWQuadrature(t[:, 0].copy(), t[:, 1].copy(), t[:, 2].astype(int))


@lru_cache(maxsize=None)
def _default_quad() -> PWQuadrature:
    return load_quadrature(6)


def _directions(q: PWQuadrature) -> np.ndarray:
    a = q.flat_alpha
    return np.stack([-1j * np.cos(a), -1j * np.sin(a), np.ones_like(a, dtype=complex)], axis=-1)


def pw_reciprocal_check(q: PWQuadrature, P, Q) -> float:
    """Quadrature value of 1/|P - Qbar| where Qbar = (Q1, Q2, -Q3) is the image of source Q."""
    P = np.asarray(P, float)
    Q = np.asarray(Q, float)
    d = P - np.array([Q[0], Q[1], -Q[2]])
    if not (1.0 <= -d[2] <= 4.0 and abs(d[0]) <= 4.0 and abs(d[1]) <= 4.0):
        raise DomainError(f"separation {d} outside the validity region of the quadrature")
    e = np.exp(q.flat_sigma * (_directions(q) @ d))
    return float(np.real(np.sum(q.flat_weight * e)))


@dataclass(frozen=True)
class PlaneWaveExpansion:
    center: np.ndarray
    scale: float
    coeffs: np.ndarray
    component: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, float))
        c = np.asarray(self.coeffs, dtype=np.complex128)
        if c.shape != (_default_quad().total,):
            raise ValueError(f"plane-wave coefficients must have length {_default_quad().total}")
        object.__setattr__(self, "coeffs", c)

    def ragged(self) -> list:
        """Coefficients split per quadrature node, W[k] of length M_k."""
        q = _default_quad()
        return np.split(self.coeffs, np.cumsum(q.counts)[:-1])

    def evaluate(self, points, component: Optional[int] = None) -> np.ndarray:
        """Sum the expansion at points below the box; component i applies M_i(a)."""
        q = _default_quad()
        pts = (np.atleast_2d(np.asarray(points, float)) - self.center) / self.scale
        e = np.exp(q.flat_sigma[None, :] * (pts @ _directions(q).T))
        amp = q.flat_weight * self.coeffs * component_factor(component)
        return np.real(e @ amp)

    def __add__(self, other: "PlaneWaveExpansion") -> "PlaneWaveExpansion":
        return PlaneWaveExpansion(self.center, self.scale, self.coeffs + other.coeffs, self.component)


def component_factor(component: Optional[int]) -> np.ndarray:
    """M_i(a) = (i cos a, i sin a, 1) for component i in 1..3; ones otherwise."""
    q = _default_quad()
    a = q.flat_alpha
    if component is None:
        return np.ones_like(a)
    return {1: 1j * np.cos(a), 2: 1j * np.sin(a), 3: np.ones_like(a, dtype=complex)}[component]


def _image_positions(sources: SourceBatch) -> np.ndarray:
    return sources.positions * np.array([1.0, 1.0, -1.0])


def form_pw_b_slp(sources: SourceBatch, center, scale: float = 1.0) -> PlaneWaveExpansion:
    """W(k,j) = sum_s (F . u_j) exp(sigma_k u_j . (c - image_s) / h)."""
    q = _default_quad()
    U = _directions(q)
    rel = (np.asarray(center, float) - _image_positions(sources)) / scale
    e = np.exp(q.flat_sigma[None, :] * (rel @ U.T))
    amp = sources.forces_or_zero() @ U.T
    return PlaneWaveExpansion(center, scale, np.sum(amp * e, axis=0))


def b_quadrupoles(sources: SourceBatch, moduli: ElasticModuli) -> np.ndarray:
    """Image-side quadrupole Q_jk = E_jk (S_j + S_k) / 2, S = diag(1, 1, -1)."""
    E = sources.dislocation_tensors(moduli)
    S = np.array([1.0, 1.0, -1.0])
    return E * (0.5 * (S[:, None] + S[None, :]))


def form_pw_b_dlp(sources: SourceBatch, center, scale: float = 1.0, *, moduli: ElasticModuli) -> PlaneWaveExpansion:
    """W(k,j) = -sigma_k sum_s (u_j . Q_s . u_j) exp(sigma_k u_j . (c - image_s) / h)."""
    q = _default_quad()
    U = _directions(q)
    rel = (np.asarray(center, float) - _image_positions(sources)) / scale
    e = np.exp(q.flat_sigma[None, :] * (rel @ U.T))
    Q = b_quadrupoles(sources, moduli)
    amp = np.einsum("aj,sjk,ak->sa", U, Q, U)
    return PlaneWaveExpansion(center, scale, -q.flat_sigma * np.sum(amp * e, axis=0))


# ---------------------------------------------------------------------------
# batched operators on packed internal coefficients
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def mp_to_pw_operator(p: int) -> np.ndarray:
    """Complex (558, P) map from packed scaled multipole coefficients to amplitudes W."""
    q = _default_quad()
    n, m = hm.nm_arrays(p)
    sig = q.flat_sigma[:, None]
    a = q.flat_alpha[:, None]
    X = sig ** n[None, :] * np.where((n + m) % 2 == 0, 1.0, -1.0)[None, :] * ((-1j) ** m)[None, :] * np.exp(1j * m[None, :] * a)
    # compose with unpacking: full = U packed
    P = hm.nterms(p)
    U = hm.unpack(np.eye(P), p)  # (P packed rows, P full)
    return X @ U.T


@lru_cache(maxsize=None)
def pw_to_local_operator(p: int) -> np.ndarray:
    """Real (P, 2*558) map from [Re V, Im V] to packed scaled local coefficients."""
    q = _default_quad()
    n, m = hm.nm_arrays(p)
    Y = (q.flat_weight[None, :] * q.flat_sigma[None, :] ** n[:, None]
         * (1j ** m)[:, None] * np.exp(-1j * m[:, None] * q.flat_alpha[None, :]))
    re = np.hstack([Y.real, -Y.imag])
    im = np.hstack([Y.imag, Y.real])
    base = n * n + n
    am = np.abs(m)
    sign = np.where(am % 2 == 1, -1.0, 1.0)[:, None]
    pos = base + am
    neg = base - am
    # packed slot for (n, m >= 0): (Re L^m + (-1)^m Re L^-m) / 2 ; for (n, -m): (Im L^m - (-1)^m Im L^-m) / 2
    out = np.where((m >= 0)[:, None], 0.5 * (re[pos] + sign * re[neg]), 0.5 * (im[pos] - sign * im[neg]))
    return out


def pw_shift_factors(offset) -> np.ndarray:
    """exp(sigma u . offset) for an offset in box units (target center minus source center)."""
    return _shift_cached(tuple(float(v) for v in offset))


@lru_cache(maxsize=4096)
def _shift_cached(offset) -> np.ndarray:
    q = _default_quad()
    return np.exp(q.flat_sigma * (_directions(q) @ np.array(offset)))


@lru_cache(maxsize=None)
def inverse_sigma_squared() -> np.ndarray:
    s = _default_quad().flat_sigma
    return 1.0 / (s * s)


def pw_to_local_packed(V: np.ndarray, p: int) -> np.ndarray:
    """Batched conversion (..., 558) complex -> (..., P) packed real."""
    A = pw_to_local_operator(p)
    stacked = np.concatenate([V.real, V.imag], axis=-1)
    return stacked @ A.T


# ---------------------------------------------------------------------------
# public conversions
# ---------------------------------------------------------------------------


def mp_to_pw(mp: hm.MultipoleExpansion, q: Optional[PWQuadrature] = None) -> PlaneWaveExpansion:
    """Plane-wave form of a multipole field, valid below the box.

    A ``pre_dz2`` multipole H (the field whose second x3-derivative is the B
    potential) is converted with the 1/sigma^2 factor, and the amplitudes are
    rescaled by -sigma/h so that they follow the B-image amplitude convention.
    """
    packed = hm.pack(mp.internal(), mp.p)
    W = mp_to_pw_operator(mp.p) @ packed
    if mp.kind == "pre_dz2":
        s = _default_quad().flat_sigma
        W = W * (mp.scale * mp.scale) * inverse_sigma_squared()
        W = W * (-s / mp.scale)
    return PlaneWaveExpansion(mp.center, mp.scale, W, None)


def pw_translate(src: PlaneWaveExpansion, new_center) -> PlaneWaveExpansion:
    new_center = np.asarray(new_center, float)
    off = (new_center - src.center) / src.scale
    q = _default_quad()
    fac = np.exp(q.flat_sigma * (_directions(q) @ off))
    return PlaneWaveExpansion(new_center, src.scale, src.coeffs * fac, src.component)


def pw_to_local(src: PlaneWaveExpansion, p: int, component: Optional[int] = None) -> hm.LocalExpansion:
    """Local expansion about the expansion center of the field selected by ``component``.

    ``component=None`` reproduces f itself; 1..3 apply M_i(a), giving u_i^B / c_B
    for amplitudes formed from B-image sources.
    """
    V = src.coeffs * component_factor(component)
    packed = pw_to_local_packed(V, p)
    return hm.LocalExpansion.from_internal(src.center, src.scale, p, hm.unpack(packed, p))


def b_potential_local(src: PlaneWaveExpansion, p: int) -> hm.LocalExpansion:
    """Local expansion of the B potential itself (correct up to an additive constant)."""
    s = _default_quad().flat_sigma
    V = src.coeffs * (-src.scale / s)
    packed = pw_to_local_packed(V, p)
    return hm.LocalExpansion.from_internal(src.center, src.scale, p, hm.unpack(packed, p))


def b_displacement_factor(moduli: ElasticModuli) -> float:
    """c_B = (1 - alpha) / (4 pi mu alpha)."""
    return (1.0 - moduli.alpha) / (4.0 * math.pi * moduli.mu * moduli.alpha)
