"""Domain types shared by every module: elastic moduli, source/target batches,
image coordinates and field samples."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

UNIT_NORMAL_TOL = 1e-12


class HalfspaceFmmError(Exception):
    """Base class for all library errors."""


class InvalidModuliError(HalfspaceFmmError, ValueError):
    pass


class ValidationError(HalfspaceFmmError, ValueError):
    pass


class SingularEvaluationError(HalfspaceFmmError, ArithmeticError):
    pass


class DomainError(HalfspaceFmmError, ValueError):
    """A point lies outside the region where a representation is valid."""


class SeparationError(HalfspaceFmmError, ValueError):
    pass


class UnsupportedPrecisionError(HalfspaceFmmError, ValueError):
    pass


class PreconditionError(HalfspaceFmmError, ValueError):
    pass


class ConfigurationError(HalfspaceFmmError, ValueError):
    pass


@dataclass(frozen=True)
class ElasticModuli:
    """Lamé coefficients with the derived ratio alpha = (lambda+mu)/(lambda+2mu)."""

    lam: float
    mu: float
    alpha: float = field(init=False)

    def __post_init__(self) -> None:
        lam, mu = float(self.lam), float(self.mu)
        if not (np.isfinite(lam) and np.isfinite(mu)):
            raise InvalidModuliError(f"non-finite moduli ({lam}, {mu})")
        if mu == 0.0 or lam + 2.0 * mu == 0.0:
            raise InvalidModuliError(f"degenerate moduli lambda={lam}, mu={mu}")
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "alpha", (lam + mu) / (lam + 2.0 * mu))


def moduli_from_lame(lam: float, mu: float) -> ElasticModuli:
    return ElasticModuli(lam, mu)


def tilde_moduli(m: ElasticModuli) -> ElasticModuli:
    """Moduli (lambda+4mu, -mu); their alpha equals 2 - alpha(m)."""
    return ElasticModuli(m.lam + 4.0 * m.mu, -m.mu)


def _as_points(a, name: str) -> np.ndarray:
    arr = np.array(a, dtype=float, copy=True)
    if arr.ndim == 1 and arr.size == 3:
        arr = arr.reshape(1, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValidationError(f"{name} must have shape (n, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SourceBatch:
    """Point forces and/or point dislocations strictly below the free surface.

    ``slp_forces`` holds force vectors F; ``dlp_strengths`` and ``dlp_normals``
    hold dislocation vectors D and unit orientations nu.
    """

    positions: np.ndarray
    slp_forces: Optional[np.ndarray] = None
    dlp_strengths: Optional[np.ndarray] = None
    dlp_normals: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        pos = _as_points(self.positions, "positions")
        object.__setattr__(self, "positions", pos)
        n = len(pos)
        if n and np.any(pos[:, 2] >= 0.0):
            bad = int(np.argmax(pos[:, 2] >= 0.0))
            raise ValidationError(f"source {bad} has x3 = {pos[bad, 2]!r}; sources need x3 < 0")
        if self.slp_forces is not None:
            f = _as_points(self.slp_forces, "slp_forces")
            if len(f) != n:
                raise ValidationError("slp_forces length does not match positions")
            object.__setattr__(self, "slp_forces", f)
        if (self.dlp_strengths is None) != (self.dlp_normals is None):
            raise ValidationError("dlp_strengths and dlp_normals must be given together")
        if self.dlp_strengths is not None:
            d = _as_points(self.dlp_strengths, "dlp_strengths")
            nu = _as_points(self.dlp_normals, "dlp_normals")
            if len(d) != n or len(nu) != n:
                raise ValidationError("dislocation arrays do not match positions")
            norms = np.linalg.norm(nu, axis=1)
            if n and np.max(np.abs(norms - 1.0)) > UNIT_NORMAL_TOL:
                bad = int(np.argmax(np.abs(norms - 1.0)))
                raise ValidationError(f"normal {bad} has norm {norms[bad]!r}, expected 1")
            object.__setattr__(self, "dlp_strengths", d)
            object.__setattr__(self, "dlp_normals", nu)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def has_slp(self) -> bool:
        return self.slp_forces is not None

    @property
    def has_dlp(self) -> bool:
        return self.dlp_strengths is not None

    def forces_or_zero(self) -> np.ndarray:
        if self.slp_forces is None:
            return np.zeros((len(self), 3))
        return self.slp_forces

    def dislocation_tensors(self, moduli: ElasticModuli) -> np.ndarray:
        """E = lambda (nu.D) I + mu (D nu^T + nu D^T), shape (n, 3, 3); zeros without DLP data."""
        if self.dlp_strengths is None:
            return np.zeros((len(self), 3, 3))
        return dislocation_tensor(self.dlp_strengths, self.dlp_normals, moduli)

    def subset(self, idx) -> "SourceBatch":
        return SourceBatch(
            self.positions[idx],
            None if self.slp_forces is None else self.slp_forces[idx],
            None if self.dlp_strengths is None else self.dlp_strengths[idx],
            None if self.dlp_normals is None else self.dlp_normals[idx],
        )


def dislocation_tensor(d, nu, moduli: ElasticModuli) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    nu = np.asarray(nu, dtype=float)
    dot = np.einsum("...i,...i->...", d, nu)
    e = moduli.mu * (d[..., :, None] * nu[..., None, :] + nu[..., :, None] * d[..., None, :])
    e[..., [0, 1, 2], [0, 1, 2]] += moduli.lam * dot[..., None]
    return e


@dataclass(frozen=True)
class TargetBatch:
    positions: np.ndarray

    def __post_init__(self) -> None:
        pos = _as_points(self.positions, "positions")
        if len(pos) and np.any(pos[:, 2] > 0.0):
            bad = int(np.argmax(pos[:, 2] > 0.0))
            raise ValidationError(f"target {bad} has x3 = {pos[bad, 2]!r}; targets need x3 <= 0")
        object.__setattr__(self, "positions", pos)

    def __len__(self) -> int:
        return len(self.positions)


@dataclass(frozen=True)
class ImageCoords:
    R1: float
    R2: float
    R3: float
    R: float


def image_coords(target, source) -> ImageCoords:
    """Coordinates of a target relative to the image of ``source``, with R3 = -(x3 + xi3)."""
    x = np.asarray(target, dtype=float)
    xi = np.asarray(source, dtype=float)
    if x[2] > 0.0 or xi[2] >= 0.0:
        raise ValidationError("image_coords needs target x3 <= 0 and source x3 < 0")
    r1, r2, r3 = x[0] - xi[0], x[1] - xi[1], -(x[2] + xi[2])
    return ImageCoords(float(r1), float(r2), float(r3), float(np.sqrt(r1 * r1 + r2 * r2 + r3 * r3)))


def strain_from_grad(grad_u: np.ndarray) -> np.ndarray:
    return 0.5 * (grad_u + np.swapaxes(grad_u, -1, -2))


def stress_from_strain(strain: np.ndarray, moduli: ElasticModuli) -> np.ndarray:
    tr = np.trace(strain, axis1=-2, axis2=-1)
    return moduli.lam * tr[..., None, None] * np.eye(3) + 2.0 * moduli.mu * strain


@dataclass(frozen=True)
class FieldSample:
    u: np.ndarray
    grad_u: np.ndarray
    strain: np.ndarray
    stress: np.ndarray


class FieldBatch:
    """Displacement and gradient at many targets; strain and stress are assembled on demand.

    Behaves as a read-only sequence of :class:`FieldSample`.
    """

    def __init__(self, u: np.ndarray, grad_u: np.ndarray, moduli: ElasticModuli):
        self.u = np.asarray(u, dtype=float)
        self.grad_u = np.asarray(grad_u, dtype=float)
        self.moduli = moduli
        self._strain = None
        self._stress = None

    @property
    def strain(self) -> np.ndarray:
        if self._strain is None:
            self._strain = strain_from_grad(self.grad_u)
        return self._strain

    @property
    def stress(self) -> np.ndarray:
        if self._stress is None:
            self._stress = stress_from_strain(self.strain, self.moduli)
        return self._stress

    def __len__(self) -> int:
        return len(self.u)

    def __getitem__(self, i: int) -> FieldSample:
        return FieldSample(self.u[i].copy(), self.grad_u[i].copy(), self.strain[i].copy(), self.stress[i].copy())

    def __iter__(self) -> Iterator[FieldSample]:
        for i in range(len(self)):
            yield self[i]

    def __add__(self, other: "FieldBatch") -> "FieldBatch":
        return FieldBatch(self.u + other.u, self.grad_u + other.grad_u, self.moduli)

    def as_rows(self) -> np.ndarray:
        """Rows u1..u3, e11,e22,e33,e12,e13,e23, s11,s22,s33,s12,s13,s23."""
        e, s = self.strain, self.stress
        ii = [0, 1, 2, 0, 0, 1]
        jj = [0, 1, 2, 1, 2, 2]
        return np.hstack([self.u, e[:, ii, jj], s[:, ii, jj]])


def field_sample(u, grad_u, moduli: ElasticModuli) -> FieldSample:
    u = np.asarray(u, dtype=float)
    g = np.asarray(grad_u, dtype=float)
    e = strain_from_grad(g)
    return FieldSample(u, g, e, stress_from_strain(e, moduli))
