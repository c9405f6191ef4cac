"""Adaptive FMM driver for the half-space displacement, strain and stress.

Three evaluations are combined:

* free-space Kelvin field: four harmonic channels on a tree over sources and targets;
* images: one tree over image points and targets carrying the A image (four
  channels), the C image (Phi_C and H) and the B potential Phi_B, whose far
  field is a multipole of d^2 Phi_B / dx3^2 split into a smooth multipole plus
  ring charges;
* optionally, the A image alone through the tilde-moduli identity on reflected
  targets (``run_a_image_fmm``), kept as an independent route.

All harmonic channels share the same translation operators.  Every channel is
expanded with value, gradient and Hessian so displacement gradients come out
of the same pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math
import time
from typing import Dict, List, Optional, Tuple

import numba
import numpy as np

from . import bimage as bi
from . import harmonics as hm
from . import planewave as pw
from .cimage import c_factor, c_fields_from_jets, channel_strengths
from .core import (
    ConfigurationError,
    ElasticModuli,
    FieldBatch,
    SourceBatch,
    TargetBatch,
    UnsupportedPrecisionError,
    dislocation_tensor,
    tilde_moduli,
)
from .kernels import PIECE_A, PIECE_B, PIECE_C, KernelSelector, image_blocks, kelvin_blocks, source_arrays
from .octree import InteractionLists, Tree, compute_lists

PRECISION_ORDER = {2: 12, 3: 16, 6: 24}
DEFAULT_LEAF = {2: 30, 3: 30, 6: 60}
S_DIAG = np.array([1.0, 1.0, -1.0])
_EVAL_CHUNK = 4096


@dataclass(frozen=True)
class FmmConfig:
    """Precision digits, expansion order and tree parameters.

    ``p`` and ``leaf_size`` default from the precision.  ``use_plane_waves``
    defaults to True for precisions 2 and 3 only.  ``threads`` is a hint: the
    compiled kernels run single-threaded, so results never depend on it.
    """

    precision: int = 3
    p: Optional[int] = None
    leaf_size: Optional[int] = None
    max_depth: int = 30
    threads: int = 1
    use_plane_waves: Optional[bool] = None

    def __post_init__(self):
        if self.precision not in PRECISION_ORDER:
            if isinstance(self.precision, int) and self.precision > 6:
                raise UnsupportedPrecisionError(f"precision {self.precision} exceeds the supported 6 digits")
            raise ConfigurationError(f"precision must be one of 2, 3, 6; got {self.precision!r}")
        p_table = PRECISION_ORDER[self.precision]
        if self.p is None:
            object.__setattr__(self, "p", p_table)
        elif self.p != p_table:
            raise ConfigurationError(f"order p={self.p} is inconsistent with precision {self.precision} (p={p_table})")
        if self.leaf_size is None:
            object.__setattr__(self, "leaf_size", DEFAULT_LEAF[self.precision])
        if self.leaf_size < 1:
            raise ConfigurationError("leaf size must be at least 1")
        if not 0 <= self.max_depth <= 30:
            raise ConfigurationError("max_depth must lie in [0, 30]")
        if self.threads < 1:
            raise ConfigurationError("thread count must be positive")
        if self.use_plane_waves is None:
            object.__setattr__(self, "use_plane_waves", self.precision <= 3)


@dataclass
class EvaluationReport:
    p: int
    leaf_size: int
    timings: Dict[str, float] = field(default_factory=dict)
    boxes: Dict[str, int] = field(default_factory=dict)
    levels: Dict[str, int] = field(default_factory=dict)
    counts: Dict[str, int] = field(default_factory=dict)
    error: Optional[float] = None

    @property
    def total_time(self) -> float:
        return float(sum(self.timings.values()))

    def add_time(self, key: str, dt: float) -> None:
        self.timings[key] = self.timings.get(key, 0.0) + max(dt, 0.0)

    def add_count(self, key: str, n: int) -> None:
        self.counts[key] = self.counts.get(key, 0) + int(n)

    def as_dict(self) -> dict:
        return {"p": self.p, "leaf_size": self.leaf_size, "timings": dict(self.timings),
                "total_time": self.total_time, "boxes": dict(self.boxes), "levels": dict(self.levels),
                "counts": dict(self.counts), "error": self.error}


class _Timer:
    def __init__(self, report: Optional[EvaluationReport], key: str):
        self.report, self.key = report, key

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        if self.report is not None:
            self.report.add_time(self.key, time.perf_counter() - self.t0)


# ---------------------------------------------------------------------------
# generic harmonic engine
# ---------------------------------------------------------------------------


@dataclass
class _Strengths:
    """Per-source harmonic strengths in tree order (nch channels)."""

    q: np.ndarray  # (ns, nch)
    dip: Optional[np.ndarray] = None  # (ns, nch, 3)
    quad: Optional[np.ndarray] = None  # (ns, nch, 3, 3)


@dataclass
class _BStrengths:
    """Image dipoles F / quadrupoles Q of d^2 Phi_B / dx3^2, tree order."""

    dip: Optional[np.ndarray]
    quad: Optional[np.ndarray]


@dataclass
class _EngineResult:
    jets: np.ndarray  # (nt, nch, 10), sorted target order
    bjets: Optional[np.ndarray]  # (nt, 10) or None
    near_t0: np.ndarray
    near_t1: np.ndarray
    near_s0: np.ndarray
    near_s1: np.ndarray


def _ranges(starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    counts = ends - starts
    if counts.sum() == 0:
        return np.zeros(0, dtype=np.int64)
    offs = np.repeat(starts - np.concatenate([[0], np.cumsum(counts)[:-1]]), counts)
    return np.arange(counts.sum(), dtype=np.int64) + offs


def _pairs(lists: List[List[int]], rows: np.ndarray, cols_ok: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a, b = [], []
    for r in rows:
        for c in lists[r]:
            if cols_ok[c]:
                a.append(r)
                b.append(c)
    return np.array(a, dtype=np.int64), np.array(b, dtype=np.int64)


def _octant(lattice: np.ndarray) -> np.ndarray:
    return 4 * (lattice[:, 0] & 1) + 2 * (lattice[:, 1] & 1) + (lattice[:, 2] & 1)


def _scale_strengths(st: _Strengths, inv_h: np.ndarray, idx: np.ndarray):
    dip = None if st.dip is None else st.dip[idx] * inv_h[:, None, None]
    quad = None if st.quad is None else st.quad[idx] * (inv_h * inv_h)[:, None, None, None]
    return st.q[idx], dip, quad


def _upward(tree: Tree, coeffs: np.ndarray, has_s: np.ndarray, p: int) -> None:
    ops = hm.m2m_child_operators(p)
    for lvl in range(tree.nlevels - 1, 0, -1):
        boxes = np.nonzero((tree.level == lvl) & has_s)[0]
        if len(boxes) == 0:
            continue
        oc = _octant(tree.lattice[boxes])
        for o in range(8):
            sel = boxes[oc == o]
            if len(sel):
                coeffs[tree.parent[sel]] += coeffs[sel] @ ops[o].T


def _downward(tree: Tree, coeffs: np.ndarray, has_t: np.ndarray, p: int) -> None:
    ops = hm.l2l_child_operators(p)
    for lvl in range(1, tree.nlevels):
        boxes = np.nonzero((tree.level == lvl) & has_t)[0]
        if len(boxes) == 0:
            continue
        oc = _octant(tree.lattice[boxes])
        for o in range(8):
            sel = boxes[oc == o]
            if len(sel):
                coeffs[sel] += coeffs[tree.parent[sel]] @ ops[o].T


def _run_engine(tree: Tree, lists: InteractionLists, spos: np.ndarray, tpos: np.ndarray, st: _Strengths,
                bst: Optional[_BStrengths], p: int, use_pw: bool, report: Optional[EvaluationReport]) -> _EngineResult:
    nb = len(tree)
    nch = st.q.shape[1]
    P = hm.nterms(p)
    h = tree.side
    ctr = tree.center
    has_s = tree.src_end > tree.src_start
    has_t = tree.tgt_end > tree.tgt_start
    leaf = tree.is_leaf
    use_b = bst is not None

    # Step 1: leaf multipoles
    with _Timer(report, "upward"):
        M = np.zeros((nb, nch, P))
        src_leaves = np.nonzero(leaf & has_s)[0]
        counts = tree.src_end[src_leaves] - tree.src_start[src_leaves]
        idx = _ranges(tree.src_start[src_leaves], tree.src_end[src_leaves])
        dest = np.repeat(np.arange(len(src_leaves), dtype=np.int64), counts)
        owner = src_leaves[dest]
        inv_h = 1.0 / h[owner]
        tau = (spos[idx] - ctr[owner]) * inv_h[:, None]
        q, dip, quad = _scale_strengths(st, inv_h, idx)
        if len(idx):
            M[src_leaves] = hm.form_coefficients(tau, inv_h, q, dip, quad, dest, len(src_leaves), p, False)
        _upward(tree, M, has_s, p)
        if use_b:
            pb = p + 2
            MH = np.zeros((nb, hm.nterms(pb)))
            if len(idx):
                bd = None if bst.dip is None else (bst.dip[idx] * inv_h[:, None])[:, None, :]
                bq = None if bst.quad is None else (bst.quad[idx] * (inv_h * inv_h)[:, None, None])[:, None]
                MH[src_leaves] = hm.form_coefficients(tau, inv_h, np.zeros((len(idx), 1)), bd, bq, dest,
                                                      len(src_leaves), pb, False)[:, 0]
            _upward(tree, MH, has_s, pb)
            rops = bi.ring_ops(pb)
            G = (h * h)[:, None] * (MH @ rops.to_smooth.T)
            qring = h[:, None] * (MH @ rops.solve.T)
            rpts = ctr[:, None, :] + h[:, None, None] * rops.points[None]

    L = np.zeros((nb, nch, P))
    LB = np.zeros((nb, P)) if use_b else None
    tboxes = np.nonzero(has_t)[0]

    # Step 4: list 2
    with _Timer(report, "list2"):
        tb, sb = _pairs(lists.L2, tboxes, has_s)
        off = tree.lattice[tb] - tree.lattice[sb] if len(tb) else np.zeros((0, 3), dtype=np.int64)
        via_pw = (off[:, 2] <= -2) if use_pw else np.zeros(len(tb), dtype=bool)
        cache = hm.m2l_cache(p)
        m2l_t, m2l_s, m2l_o = tb[~via_pw], sb[~via_pw], off[~via_pw]
        if report is not None:
            report.add_count("m2l_pairs", len(m2l_t))
            report.add_count("pw_pairs", int(via_pw.sum()))
        if len(m2l_t):
            keys, inv = np.unique(m2l_o, axis=0, return_inverse=True)
            inv = inv.reshape(-1)
            for k, key in enumerate(keys):
                sel = np.nonzero(inv == k)[0]
                op = cache.get(key)
                t, s = m2l_t[sel], m2l_s[sel]
                L[t] += M[s] @ op.T
                if use_b:
                    LB[t] += G[s] @ op.T
            if use_b:
                LB_psi = bi.psi_local_batch(rpts[m2l_s], qring[m2l_s], ctr[m2l_t], h[m2l_t], p)
                np.add.at(LB, m2l_t, LB_psi)
        if via_pw.any():
            _plane_wave_pass(tree, tb[via_pw], sb[via_pw], off[via_pw], M, L,
                             MH if use_b else None, LB, p)

    # Step 3: list 4
    with _Timer(report, "list4"):
        lt, ls = _pairs(lists.L4, tboxes, has_s)
        if report is not None:
            report.add_count("list4_pairs", len(lt))
        if len(lt):
            counts = tree.src_end[ls] - tree.src_start[ls]
            idx = _ranges(tree.src_start[ls], tree.src_end[ls])
            dest = np.repeat(np.arange(len(lt), dtype=np.int64), counts)
            owner = lt[dest]
            inv_h = 1.0 / h[owner]
            tau = (spos[idx] - ctr[owner]) * inv_h[:, None]
            q, dip, quad = _scale_strengths(st, inv_h, idx)
            vals = hm.form_coefficients(tau, inv_h, q, dip, quad, dest, len(lt), p, True)
            np.add.at(L, lt, vals)
            if use_b:
                vb = bi.b_local_batch(spos, bst.dip, bst.quad, tree.src_start[ls], tree.src_end[ls],
                                      ctr[lt], h[lt], p)
                np.add.at(LB, lt, vb)

    # Step 5: parent to child
    with _Timer(report, "downward"):
        _downward(tree, L, has_t, p)
        if use_b:
            _downward(tree, LB, has_t, p)

    nt = len(tpos)
    jets = np.zeros((nt, nch, 10))
    bjets = np.zeros((nt, 10)) if use_b else None
    tgt_leaves = np.nonzero(leaf & has_t)[0]
    tleaf = np.repeat(tgt_leaves, tree.tgt_end[tgt_leaves] - tree.tgt_start[tgt_leaves])
    tidx_all = _ranges(tree.tgt_start[tgt_leaves], tree.tgt_end[tgt_leaves])

    # Step 6: local evaluation
    with _Timer(report, "evaluate_local"):
        for a in range(0, len(tidx_all), _EVAL_CHUNK):
            ti = tidx_all[a:a + _EVAL_CHUNK]
            bx = tleaf[a:a + _EVAL_CHUNK]
            hh = h[bx]
            basis = hm.basis_jets((tpos[ti] - ctr[bx]) / hh[:, None], p, False)
            jets[ti] = hm.scale_jets(np.einsum("ndk,nck->ncd", basis, L[bx]), hh[:, None])
            if use_b:
                bjets[ti] = hm.scale_jets(np.einsum("ndk,nk->nd", basis, LB[bx]), hh)

    # Step 8: list 3
    with _Timer(report, "list3"):
        l3t, l3s = _pairs(lists.L3, tgt_leaves, has_s)
        if report is not None:
            report.add_count("list3_pairs", len(l3t))
        if len(l3t):
            counts = tree.tgt_end[l3t] - tree.tgt_start[l3t]
            ti_all = _ranges(tree.tgt_start[l3t], tree.tgt_end[l3t])
            ci_all = np.repeat(l3s, counts)
            for a in range(0, len(ti_all), _EVAL_CHUNK):
                ti = ti_all[a:a + _EVAL_CHUNK]
                ci = ci_all[a:a + _EVAL_CHUNK]
                hh = h[ci]
                basis = hm.basis_jets((tpos[ti] - ctr[ci]) / hh[:, None], p, True)
                np.add.at(jets, ti, hm.scale_jets(np.einsum("ndk,nck->ncd", basis, M[ci]), hh[:, None]))
                if use_b:
                    np.add.at(bjets, ti, hm.scale_jets(np.einsum("ndk,nk->nd", basis, G[ci]), hh))
            if use_b:
                uc, cinv = np.unique(ci_all, return_inverse=True)
                bi.psi_jets_pairs(tpos, ti_all, rpts[uc], qring[uc], cinv.reshape(-1), bjets)

    # Step 7 pairs (evaluated by the caller's kernel)
    nt_, ns_ = _pairs(lists.L1, tgt_leaves, has_s & leaf)
    if report is not None:
        report.add_count("near_pairs", len(nt_))
    return _EngineResult(jets, bjets, tree.tgt_start[nt_], tree.tgt_end[nt_], tree.src_start[ns_], tree.src_end[ns_])


def _plane_wave_pass(tree: Tree, tb, sb, off, M, L, MH, LB, p: int) -> None:
    """Down-going list-2 transfers through plane waves, grouped by level."""
    X = pw.mp_to_pw_operator(p)
    XB = pw.mp_to_pw_operator(p + 2) if MH is not None else None
    inv_s2 = pw.inverse_sigma_squared()
    h = tree.side
    lvl_of = tree.level[tb]
    for lvl in np.unique(lvl_of):
        sel = np.nonzero(lvl_of == lvl)[0]
        us, s_inv = np.unique(sb[sel], return_inverse=True)
        ut, t_inv = np.unique(tb[sel], return_inverse=True)
        s_inv = s_inv.reshape(-1)
        t_inv = t_inv.reshape(-1)
        W = M[us] @ X.T
        V = np.zeros((len(ut),) + W.shape[1:], dtype=complex)
        if MH is not None:
            hl = h[us[0]]
            WB = (hl * hl) * (MH[us] @ XB.T) * inv_s2
            VB = np.zeros((len(ut), WB.shape[1]), dtype=complex)
        o = off[sel]
        keys, k_inv = np.unique(o, axis=0, return_inverse=True)
        k_inv = k_inv.reshape(-1)
        for k, key in enumerate(keys):
            g = np.nonzero(k_inv == k)[0]
            fac = pw.pw_shift_factors(key)
            V[t_inv[g]] += W[s_inv[g]] * fac
            if MH is not None:
                VB[t_inv[g]] += WB[s_inv[g]] * fac
        L[ut] += pw.pw_to_local_packed(V, p)
        if MH is not None:
            LB[ut] += pw.pw_to_local_packed(VB, p)


# ---------------------------------------------------------------------------
# Kelvin-form channels
# ---------------------------------------------------------------------------


def _kelvin_form_strengths(pos: np.ndarray, G: Optional[np.ndarray], E: Optional[np.ndarray], origin) -> _Strengths:
    """Channels phi_j = sum G_j / r and phi_4 = sum (s - o).G / r, with dislocation tensors as dipoles."""
    n = len(pos)
    rel = pos - origin
    q = np.zeros((n, 4))
    dip = None
    if G is not None:
        q[:, :3] = G
        q[:, 3] = np.einsum("ni,ni->n", rel, G)
    if E is not None:
        dip = np.zeros((n, 4, 3))
        dip[:, :3] = E
        q[:, 3] += np.trace(E, axis1=1, axis2=2)
        dip[:, 3] = np.einsum("njk,nj->nk", E, rel)
    return _Strengths(q, dip)


def _kelvin_form_fields(jets: np.ndarray, x: np.ndarray, origin, c1: float, c2: float):
    """u_i = c1 phi_i - c2 x_j d_i phi_j + c2 d_i phi_4 and its gradient g[:, i, l] = d_l u_i."""
    v, g, H = hm.jets_to_arrays(jets)
    rel = x - origin
    u = c1 * v[:, :3] - c2 * np.einsum("nj,nji->ni", rel, g[:, :3]) + c2 * g[:, 3]
    grad = (c1 * g[:, :3] - c2 * np.swapaxes(g[:, :3], 1, 2)
            - c2 * np.einsum("nj,njil->nil", rel, H[:, :3]) + c2 * H[:, 3])
    return u, grad


def _kelvin_constants(moduli: ElasticModuli) -> Tuple[float, float]:
    k = 8.0 * math.pi * moduli.mu
    return (2.0 - moduli.alpha) / k, moduli.alpha / k


def _unsort(sorted_vals: np.ndarray, perm: np.ndarray) -> np.ndarray:
    out = np.empty_like(sorted_vals)
    out[perm] = sorted_vals
    return out


def _build(points_src, points_tgt, cfg: FmmConfig, report: Optional[EvaluationReport], key: str):
    with _Timer(report, "tree"):
        tree = Tree(points_src, points_tgt, cfg.leaf_size, cfg.max_depth)
    with _Timer(report, "lists"):
        lists = compute_lists(tree)
    if report is not None:
        report.boxes[key] = len(tree)
        report.levels[key] = tree.nlevels
    return tree, lists


def _near_arrays(res: _EngineResult):
    return (np.ascontiguousarray(res.near_t0, dtype=np.int64), np.ascontiguousarray(res.near_t1, dtype=np.int64),
            np.ascontiguousarray(res.near_s0, dtype=np.int64), np.ascontiguousarray(res.near_s1, dtype=np.int64))


# ---------------------------------------------------------------------------
# public passes
# ---------------------------------------------------------------------------


def _check_inputs(sources: SourceBatch, targets: TargetBatch):
    if not isinstance(sources, SourceBatch) or not isinstance(targets, TargetBatch):
        raise TypeError("expected a SourceBatch and a TargetBatch")


def run_kelvin_fmm(sources: SourceBatch, targets: TargetBatch, moduli: ElasticModuli, cfg: FmmConfig,
                   report: Optional[EvaluationReport] = None) -> FieldBatch:
    """Free-space Kelvin field of all sources at the targets."""
    _check_inputs(sources, targets)
    nt = len(targets)
    if len(sources) == 0 or nt == 0:
        return FieldBatch(np.zeros((nt, 3)), np.zeros((nt, 3, 3)), moduli)
    tree, lists = _build(sources.positions, targets.positions, cfg, report, "kelvin")
    sp, tp = tree.src_perm, tree.tgt_perm
    pos, F, E, use_f, use_e = source_arrays(sources, moduli)
    spos, tpos = pos[sp], np.ascontiguousarray(targets.positions[tp])
    origin = tree.root_center
    st = _kelvin_form_strengths(spos, F[sp] if use_f else None, E[sp] if use_e else None, origin)
    res = _run_engine(tree, lists, spos, tpos, st, None, cfg.p, False, report)
    with _Timer(report, "assemble"):
        c1, c2 = _kelvin_constants(moduli)
        u, g = _kelvin_form_fields(res.jets, tpos, origin, c1, c2)
    with _Timer(report, "near"):
        t0, t1, s0, s1 = _near_arrays(res)
        kelvin_blocks(tpos, np.ascontiguousarray(spos), np.ascontiguousarray(F[sp]), np.ascontiguousarray(E[sp]),
                      moduli, use_f, use_e, t0, t1, s0, s1, u, g)
    return FieldBatch(_unsort(u, tp), _unsort(g, tp), moduli)


def run_bc_image_fmm(sources: SourceBatch, targets: TargetBatch, moduli: ElasticModuli, cfg: FmmConfig,
                     flags: int = PIECE_A | PIECE_B | PIECE_C,
                     report: Optional[EvaluationReport] = None) -> FieldBatch:
    """Image pieces selected by ``flags`` on one tree over the image points and the targets.

    Sources are given at their physical positions; the tree holds their images.
    The A image rides along as four more harmonic channels unless excluded.
    """
    _check_inputs(sources, targets)
    nt = len(targets)
    if len(sources) == 0 or nt == 0 or not flags:
        return FieldBatch(np.zeros((nt, 3)), np.zeros((nt, 3, 3)), moduli)
    if flags & PIECE_B and moduli.alpha == 0.0:
        from .core import InvalidModuliError
        raise InvalidModuliError("the B image is undefined for alpha = 0")
    images = sources.positions * S_DIAG
    tree, lists = _build(images, targets.positions, cfg, report, "image")
    sp, tp = tree.src_perm, tree.tgt_perm
    pos, F, E, use_f, use_e = source_arrays(sources, moduli)
    pos_s, F_s, E_s = pos[sp], F[sp], E[sp]
    ipos = images[sp]
    tpos = np.ascontiguousarray(targets.positions[tp])
    origin = tree.root_center
    alpha = moduli.alpha

    blocks_q, blocks_d, blocks_qq = [], [], []
    want_a, want_b, want_c = bool(flags & PIECE_A), bool(flags & PIECE_B), bool(flags & PIECE_C)
    SS = np.outer(S_DIAG, S_DIAG)
    if want_a:
        sa = _kelvin_form_strengths(ipos, F_s * S_DIAG if use_f else None, E_s * SS if use_e else None, origin)
        blocks_q.append(sa.q)
        blocks_d.append(sa.dip if sa.dip is not None else np.zeros(sa.q.shape + (3,)))
        blocks_qq.append(np.zeros(sa.q.shape + (3, 3)))
    if want_c:
        q, d, qq = channel_strengths(pos_s, F_s if use_f else None, E_s if use_e else None, alpha)
        blocks_q.append(q)
        blocks_d.append(d)
        blocks_qq.append(qq if qq is not None else np.zeros(q.shape + (3, 3)))
    if blocks_q:
        st = _Strengths(np.concatenate(blocks_q, axis=1), np.concatenate(blocks_d, axis=1),
                        np.concatenate(blocks_qq, axis=1) if (want_c and use_e) else None)
    else:
        st = _Strengths(np.zeros((len(ipos), 1)))
    bst = None
    if want_b:
        bst = _BStrengths(F_s if use_f else None,
                          (pw.b_quadrupoles(sources, moduli)[sp]) if use_e else None)
    res = _run_engine(tree, lists, ipos, tpos, st, bst, cfg.p, bool(cfg.use_plane_waves), report)

    with _Timer(report, "assemble"):
        u = np.zeros((nt, 3))
        g = np.zeros((nt, 3, 3))
        ch = 0
        if want_a:
            k = 8.0 * math.pi * moduli.mu
            ua, ga = _kelvin_form_fields(res.jets[:, 0:4], tpos, origin, alpha / k, (2.0 - alpha) / k)
            u += S_DIAG * ua
            g += S_DIAG[None, :, None] * ga
            ch = 4
        if want_c:
            uc, gc = c_fields_from_jets(tpos[:, 2], res.jets[:, ch], res.jets[:, ch + 1], c_factor(moduli))
            u += uc
            g += gc
        if want_b:
            cb = pw.b_displacement_factor(moduli)
            _, gb, hb = hm.jets_to_arrays(res.bjets)
            u += cb * S_DIAG * gb
            g += cb * S_DIAG[None, :, None] * hb
    with _Timer(report, "near"):
        t0, t1, s0, s1 = _near_arrays(res)
        image_blocks(tpos, np.ascontiguousarray(pos_s), np.ascontiguousarray(F_s), np.ascontiguousarray(E_s),
                     moduli, flags, use_f, use_e, t0, t1, s0, s1, u, g)
    return FieldBatch(_unsort(u, tp), _unsort(g, tp), moduli)


def run_a_image_fmm(sources: SourceBatch, targets: TargetBatch, moduli: ElasticModuli, cfg: FmmConfig,
                    report: Optional[EvaluationReport] = None) -> FieldBatch:
    """A image as a free-space field with moduli (lambda + 4 mu, -mu) at reflected targets.

    Forces enter with a minus sign; dislocations use the tilde dislocation
    tensor plus the harmonic term (nu.D)/(2 pi) grad(1/|y - xi|), carried as a
    fifth channel only when dislocations are present.
    """
    _check_inputs(sources, targets)
    nt = len(targets)
    if len(sources) == 0 or nt == 0:
        return FieldBatch(np.zeros((nt, 3)), np.zeros((nt, 3, 3)), moduli)
    tm = tilde_moduli(moduli)
    refl = targets.positions * S_DIAG
    tree, lists = _build(sources.positions, refl, cfg, report, "a_image")
    sp, tp = tree.src_perm, tree.tgt_perm
    pos, F, E, use_f, use_e = source_arrays(sources, moduli)
    spos = pos[sp]
    ypos = np.ascontiguousarray(refl[tp])
    origin = tree.root_center
    Et = dislocation_tensor(sources.dlp_strengths, sources.dlp_normals, tm)[sp] if use_e else None
    st = _kelvin_form_strengths(spos, -F[sp] if use_f else None, Et, origin)
    if use_e:
        corr = np.einsum("ni,ni->n", sources.dlp_strengths, sources.dlp_normals)[sp] / (2.0 * math.pi)
        q = np.concatenate([st.q, corr[:, None]], axis=1)
        dip = np.concatenate([st.dip, np.zeros((len(spos), 1, 3))], axis=1)
        st = _Strengths(q, dip)
    res = _run_engine(tree, lists, spos, ypos, st, None, cfg.p, False, report)
    with _Timer(report, "assemble"):
        c1, c2 = _kelvin_constants(tm)
        u, gy = _kelvin_form_fields(res.jets[:, :4], ypos, origin, c1, c2)
        if use_e:
            _, gc, hc = hm.jets_to_arrays(res.jets[:, 4])
            u += gc
            gy += hc
        g = gy.copy()
        g[:, :, 2] *= -1.0
    with _Timer(report, "near"):
        t0, t1, s0, s1 = _near_arrays(res)
        tx = np.ascontiguousarray(ypos * S_DIAG)
        image_blocks(tx, np.ascontiguousarray(spos), np.ascontiguousarray(F[sp]), np.ascontiguousarray(E[sp]),
                     moduli, PIECE_A, use_f, use_e, t0, t1, s0, s1, u, g)
    return FieldBatch(_unsort(u, tp), _unsort(g, tp), moduli)


def fmm_evaluate(sources: SourceBatch, targets: TargetBatch, moduli: ElasticModuli,
                 cfg: Optional[FmmConfig] = None, sel: Optional[KernelSelector] = None
                 ) -> Tuple[FieldBatch, EvaluationReport]:
    """Displacement, strain and stress of the selected pieces at the targets.

    The returned FieldBatch is a sequence of FieldSample with array access to
    u, grad_u, strain and stress.
    """
    cfg = FmmConfig() if cfg is None else cfg
    sel = KernelSelector.full_halfspace() if sel is None else sel
    report = EvaluationReport(cfg.p, cfg.leaf_size)
    nt = len(targets)
    out = FieldBatch(np.zeros((nt, 3)), np.zeros((nt, 3, 3)), moduli)
    if sel.kelvin:
        out = out + run_kelvin_fmm(sources, targets, moduli, cfg, report)
    if sel.image_flags:
        out = out + run_bc_image_fmm(sources, targets, moduli, cfg, sel.image_flags, report)
    return out, report


@numba.njit(cache=True)
def _laplace_blocks(tx, sx, q, bt0, bt1, bs0, bs1, v, g):
    """Direct q/r and its gradient over blocks; coincident points are skipped."""
    for b in range(bt0.shape[0]):
        for t in range(bt0[b], bt1[b]):
            for s in range(bs0[b], bs1[b]):
                d0 = tx[t, 0] - sx[s, 0]
                d1 = tx[t, 1] - sx[s, 1]
                d2 = tx[t, 2] - sx[s, 2]
                r2 = d0 * d0 + d1 * d1 + d2 * d2
                if r2 == 0.0:
                    continue
                ir = 1.0 / math.sqrt(r2)
                w = q[s] * ir
                v[t] += w
                w *= ir * ir
                g[t, 0] -= w * d0
                g[t, 1] -= w * d1
                g[t, 2] -= w * d2


def laplace_fmm(sources, charges, targets, cfg: Optional[FmmConfig] = None,
                report: Optional[EvaluationReport] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Potential sum q / |x - s| and its gradient (single harmonic channel; reference cost)."""
    cfg = FmmConfig() if cfg is None else cfg
    sources = np.asarray(sources, float).reshape(-1, 3)
    targets = np.asarray(targets, float).reshape(-1, 3)
    charges = np.asarray(charges, float).reshape(-1)
    nt = len(targets)
    if len(sources) == 0 or nt == 0:
        return np.zeros(nt), np.zeros((nt, 3))
    tree, lists = _build(sources, targets, cfg, report, "laplace")
    sp, tp = tree.src_perm, tree.tgt_perm
    spos, tpos = sources[sp], np.ascontiguousarray(targets[tp])
    res = _run_engine(tree, lists, spos, tpos, _Strengths(charges[sp, None]), None, cfg.p, False, report)
    v = res.jets[:, 0, 0].copy()
    g = res.jets[:, 0, 1:4].copy()
    with _Timer(report, "near"):
        t0, t1, s0, s1 = _near_arrays(res)
        _laplace_blocks(tpos, np.ascontiguousarray(spos), np.ascontiguousarray(charges[sp]), t0, t1, s0, s1, v, g)
    return _unsort(v, tp), _unsort(g, tp)
