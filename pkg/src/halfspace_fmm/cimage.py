"""Far field of the C image through two ordinary Laplace potentials.

With V = 1/|x - image| and derivatives taken with respect to the image position,

    u^C_i = x3 c_C (d_i Phi_C - delta_i3 H),   c_C = 1 / (4 pi mu),

where for a force F at depth xi3

    Phi_C = -(2 - alpha) F3 V + alpha xi3 (F1, F2, -F3) . grad V,
    H     = -(2 - alpha) (F1, F2, -F3) . grad V,

and a dislocation with tensor E contributes the dipole (2 alpha - 2) S E e3 and
quadrupole alpha xi3 S E S to Phi_C, and the quadrupole -(2 - alpha) S E S to H.
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

from .core import DomainError, ElasticModuli, FieldSample, SourceBatch, field_sample
from . import harmonics as hm

S_DIAG = np.array([1.0, 1.0, -1.0])


def c_factor(moduli: ElasticModuli) -> float:
    return 1.0 / (4.0 * math.pi * moduli.mu)


def channel_strengths(positions, F, E, alpha: float):
    """Charges, dipoles and quadrupoles of (Phi_C, H) at the image points.

    Returns q (n, 2), dip (n, 2, 3), quad (n, 2, 3, 3) or None for absent parts.
    """
    n = len(positions)
    xi3 = positions[:, 2]
    q = np.zeros((n, 2))
    dip = np.zeros((n, 2, 3))
    quad = None
    if F is not None:
        SF = F * S_DIAG
        q[:, 0] = -(2.0 - alpha) * F[:, 2]
        dip[:, 0] = alpha * xi3[:, None] * SF
        dip[:, 1] = -(2.0 - alpha) * SF
    if E is not None:
        SES = E * np.outer(S_DIAG, S_DIAG)
        dip[:, 0] += (2.0 * alpha - 2.0) * S_DIAG * E[:, :, 2]
        quad = np.zeros((n, 2, 3, 3))
        quad[:, 0] = alpha * xi3[:, None, None] * SES
        quad[:, 1] = -(2.0 - alpha) * SES
    return q, dip, quad


@dataclass(frozen=True)
class CFarField:
    phiC: hm.MultipoleExpansion
    h: hm.MultipoleExpansion

    def __post_init__(self):
        a, b = self.phiC, self.h
        if a.p != b.p or a.scale != b.scale or not np.array_equal(a.center, b.center):
            raise ValueError("Phi_C and H expansions must share center, scale and order")


def build_cfarfield(sources: SourceBatch, center, scale: float, p: int, moduli: ElasticModuli) -> CFarField:
    img = sources.positions * S_DIAG
    E = sources.dislocation_tensors(moduli) if sources.has_dlp else None
    q, dip, quad = channel_strengths(sources.positions, sources.slp_forces, E, moduli.alpha)
    exps = []
    for ch in range(2):
        exps.append(hm.form_multipole(center, scale, p, img, q[:, ch], dip[:, ch],
                                      None if quad is None else quad[:, ch]))
    return CFarField(exps[0], exps[1])


def c_fields_from_jets(x3, phi_jets: np.ndarray, h_jets: np.ndarray, cc: float):
    """Displacement and gradient of the C image from (n, 10) jets of Phi_C and H."""
    x3 = np.asarray(x3, float)
    g = cc * phi_jets[:, 1:4].copy()
    g[:, 2] -= cc * h_jets[:, 0]
    _, _, hess = hm.jets_to_arrays(phi_jets)
    dg = cc * hess
    dg[:, 2, :] -= cc * h_jets[:, 1:4]
    u = x3[:, None] * g
    grad = x3[:, None, None] * dg
    grad[:, :, 2] += g
    return u, grad


def eval_c_contribution(f: CFarField, point, needs_strain: bool = True, *, moduli: ElasticModuli) -> FieldSample:
    point = np.asarray(point, float)
    if np.linalg.norm(point - f.phiC.center) <= f.phiC.scale * math.sqrt(3) / 2:
        raise DomainError("C far field evaluated inside the source box sphere")
    vp, gp, hp = hm.eval_multipole_jet(f.phiC, point)
    vh, gh, _ = hm.eval_multipole_jet(f.h, point)
    pj = np.concatenate([[vp], gp, [hp[0, 0], hp[1, 1], hp[2, 2], hp[0, 1], hp[0, 2], hp[1, 2]]])[None]
    hj = np.concatenate([[vh], gh, np.zeros(6)])[None]
    u, grad = c_fields_from_jets(np.array([point[2]]), pj, hj, c_factor(moduli))
    if not needs_strain:
        grad = np.zeros_like(grad)
    return field_sample(u[0], grad[0], moduli)
