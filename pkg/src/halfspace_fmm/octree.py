"""Adaptive octree and the four interaction lists of the adaptive FMM.

Boxes are identified by (level, integer lattice coordinates); every geometric
predicate is evaluated in integer arithmetic.  Points are reordered depth-first,
so the sources (and, separately, the targets) of every box occupy a contiguous
range of the sorted order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import json
import warnings
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import ValidationError

ROOT_INFLATION = 1e-12
_OCTANTS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.int64)


@dataclass(frozen=True)
class Box:
    index: int
    level: int
    lattice: Tuple[int, int, int]
    center: np.ndarray
    side: float
    parent: int
    children: Tuple[int, ...]
    sources: np.ndarray
    targets: np.ndarray

    @property
    def is_leaf(self) -> bool:
        return len(self.children) == 0


class Tree:
    """Adaptive octree over sources and targets (either set may be empty)."""

    def __init__(self, sources: np.ndarray, targets: np.ndarray, leaf_size: int, max_depth: int = 30):
        if leaf_size < 1:
            raise ValidationError("leaf size must be at least 1")
        if not 0 <= max_depth <= 30:
            raise ValidationError("max_depth must be between 0 and 30")
        sources = np.asarray(sources, dtype=float).reshape(-1, 3)
        targets = np.asarray(targets, dtype=float).reshape(-1, 3)
        pts = np.vstack([sources, targets])
        if not np.all(np.isfinite(pts)):
            raise ValidationError("tree points must be finite")
        self.leaf_size = int(leaf_size)
        self.max_depth = int(max_depth)
        self.nsrc = len(sources)
        self.ntgt = len(targets)
        if len(pts) == 0:
            lo, hi = np.zeros(3), np.ones(3)
        else:
            lo, hi = pts.min(axis=0), pts.max(axis=0)
        mid = 0.5 * (lo + hi)
        side = float(np.max(hi - lo))
        if side == 0.0:
            side = max(1.0, float(np.max(np.abs(mid))))
        side *= 1.0 + ROOT_INFLATION
        self.root_center = mid
        self.root_side = side
        self.origin = mid - 0.5 * side
        scale = float(1 << max_depth)
        keys = np.floor((pts - self.origin) / side * scale).astype(np.int64)
        np.clip(keys, 0, (1 << max_depth) - 1, out=keys)
        self._build(keys)
        is_src = np.zeros(len(pts), dtype=bool)
        is_src[: self.nsrc] = True
        order = self.perm
        s_flag = is_src[order]
        cs = np.concatenate([[0], np.cumsum(s_flag)])
        ct = np.concatenate([[0], np.cumsum(~s_flag)])
        self.src_start = cs[self.start]
        self.src_end = cs[self.end]
        self.tgt_start = ct[self.start]
        self.tgt_end = ct[self.end]
        self.src_perm = order[s_flag]
        self.tgt_perm = order[~s_flag] - self.nsrc
        self.side = self.root_side / (2.0 ** self.level)
        self.center = self.origin + (self.lattice + 0.5) * self.side[:, None]

    def _build(self, keys: np.ndarray) -> None:
        D = self.max_depth
        perm = np.arange(len(keys))
        level = [0]
        lattice = [(0, 0, 0)]
        parent = [-1]
        start = [0]
        end = [len(keys)]
        children: List[List[int]] = [[]]
        frontier = [0]
        capped = False
        lvl = 0
        while frontier:
            nxt = []
            for b in frontier:
                a, e = start[b], end[b]
                if e - a <= self.leaf_size:
                    continue
                if lvl >= D:
                    capped = True
                    continue
                bit = D - 1 - lvl
                seg = perm[a:e]
                k = keys[seg]
                octant = (((k[:, 0] >> bit) & 1) << 2) | (((k[:, 1] >> bit) & 1) << 1) | ((k[:, 2] >> bit) & 1)
                o = np.argsort(octant, kind="stable")
                perm[a:e] = seg[o]
                counts = np.bincount(octant, minlength=8)
                pos = a
                lx, ly, lz = lattice[b]
                for oc in range(8):
                    c = int(counts[oc])
                    if c == 0:
                        continue
                    idx = len(level)
                    level.append(lvl + 1)
                    di, dj, dk = _OCTANTS[oc]
                    lattice.append((2 * lx + int(di), 2 * ly + int(dj), 2 * lz + int(dk)))
                    parent.append(b)
                    start.append(pos)
                    end.append(pos + c)
                    children.append([])
                    children[b].append(idx)
                    nxt.append(idx)
                    pos += c
            frontier = nxt
            lvl += 1
        if capped:
            warnings.warn(f"leaves at max_depth {D} hold more than {self.leaf_size} points", RuntimeWarning)
        self.perm = perm
        self.level = np.array(level, dtype=np.int64)
        self.lattice = np.array(lattice, dtype=np.int64).reshape(-1, 3)
        self.parent = np.array(parent, dtype=np.int64)
        self.start = np.array(start, dtype=np.int64)
        self.end = np.array(end, dtype=np.int64)
        self.children = [tuple(c) for c in children]
        self.nlevels = int(self.level.max()) + 1

    def __len__(self) -> int:
        return len(self.level)

    @property
    def is_leaf(self) -> np.ndarray:
        return np.array([len(c) == 0 for c in self.children])

    def leaves(self) -> np.ndarray:
        return np.nonzero(self.is_leaf)[0]

    def boxes_at(self, level: int) -> np.ndarray:
        return np.nonzero(self.level == level)[0]

    def nsources(self, b: int) -> int:
        return int(self.src_end[b] - self.src_start[b])

    def ntargets(self, b: int) -> int:
        return int(self.tgt_end[b] - self.tgt_start[b])

    def box(self, b: int) -> Box:
        return Box(int(b), int(self.level[b]), tuple(int(v) for v in self.lattice[b]), self.center[b].copy(),
                   float(self.side[b]), int(self.parent[b]), self.children[b],
                   self.src_perm[self.src_start[b]:self.src_end[b]].copy(),
                   self.tgt_perm[self.tgt_start[b]:self.tgt_end[b]].copy())


def build_tree(points=None, s: int = 60, max_depth: int = 30, *, sources=None, targets=None) -> Tree:
    """Adaptive octree; ``points`` are treated as sources when no separate sets are given."""
    if points is not None:
        if sources is not None or targets is not None:
            raise ValidationError("give either points or sources/targets")
        sources, targets = points, np.zeros((0, 3))
    if sources is None:
        sources = np.zeros((0, 3))
    if targets is None:
        targets = np.zeros((0, 3))
    return Tree(sources, targets, s, max_depth)


def adjacent(la: int, a, lb: int, b) -> bool:
    """Closed cubes (level, lattice) share at least one point."""
    if la > lb:
        la, a, lb, b = lb, b, la, a
    k = 1 << (lb - la)
    for d in range(3):
        lo = a[d] * k
        hi = (a[d] + 1) * k
        if b[d] > hi or b[d] + 1 < lo:
            return False
    return True


@dataclass
class InteractionLists:
    colleagues: List[List[int]]
    L1: List[List[int]]
    L2: List[List[int]]
    L3: List[List[int]]
    L4: List[List[int]]

    def for_box(self, b: int) -> dict:
        return {"colleagues": self.colleagues[b], "L1": self.L1[b], "L2": self.L2[b],
                "L3": self.L3[b], "L4": self.L4[b]}


def compute_lists(tree: Tree) -> InteractionLists:
    nb = len(tree)
    level = tree.level
    lat = tree.lattice
    lookup: Dict[Tuple[int, int, int, int], int] = {}
    for b in range(nb):
        lookup[(int(level[b]), int(lat[b, 0]), int(lat[b, 1]), int(lat[b, 2]))] = b
    offsets = [(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)]
    colleagues: List[List[int]] = []
    for b in range(nb):
        l = int(level[b])
        x, y, z = (int(v) for v in lat[b])
        col = []
        for i, j, k in offsets:
            c = lookup.get((l, x + i, y + j, z + k))
            if c is not None:
                col.append(c)
        colleagues.append(sorted(col))

    L1: List[set] = [set() for _ in range(nb)]
    L2: List[List[int]] = [[] for _ in range(nb)]
    L3: List[set] = [set() for _ in range(nb)]
    L4: List[set] = [set() for _ in range(nb)]
    children = tree.children

    for b in range(1, nb):
        cand = [d for c in colleagues[int(tree.parent[b])] for d in children[c]]
        cand = np.array(cand, dtype=np.int64)
        far = np.max(np.abs(lat[cand] - lat[b]), axis=1) > 1
        L2[b] = cand[far].tolist()

    for b in range(nb):
        if children[b]:
            continue
        lb, ab = int(level[b]), lat[b]
        L1[b].add(b)
        stack = [c for c in colleagues[b] if c != b]
        while stack:
            c = stack.pop()
            if not children[c]:
                L1[b].add(c)
                L1[c].add(b)
                continue
            for d in children[c]:
                if adjacent(lb, ab, int(level[d]), lat[d]):
                    stack.append(d)
                else:
                    L3[b].add(d)
                    L4[d].add(b)
    return InteractionLists(colleagues, [sorted(s) for s in L1], [sorted(v) for v in L2],
                            [sorted(s) for s in L3], [sorted(s) for s in L4])


def brute_force_lists(tree: Tree) -> InteractionLists:
    """Lists straight from the definitions by pairwise tests (for validation)."""
    nb = len(tree)
    level, lat = tree.level, tree.lattice
    leaf = tree.is_leaf
    par = tree.parent

    def adj(a, b):
        return adjacent(int(level[a]), lat[a], int(level[b]), lat[b])

    def ancestors(b):
        out = []
        while b >= 0:
            out.append(b)
            b = int(par[b])
        return out

    colleagues = [[c for c in range(nb) if level[c] == level[b] and adj(b, c)] for b in range(nb)]
    L1, L2, L3, L4 = ([[] for _ in range(nb)] for _ in range(4))
    for b in range(nb):
        if b > 0:
            pc = set(colleagues[int(par[b])])
            L2[b] = [d for d in range(nb) if int(par[d]) in pc and level[d] == level[b] and not adj(b, d)]
        if leaf[b]:
            L1[b] = [c for c in range(nb) if leaf[c] and adj(b, c)]
            col = set(colleagues[b])
            for d in range(nb):
                if level[d] <= level[b] or adj(b, d):
                    continue
                anc = ancestors(d)
                if not any(a in col for a in anc):
                    continue
                if adj(b, int(par[d])):
                    L3[b].append(d)
    for b in range(nb):
        for d in L3[b]:
            L4[d].append(b)
    return InteractionLists([sorted(c) for c in colleagues], [sorted(v) for v in L1], [sorted(v) for v in L2],
                            [sorted(v) for v in L3], [sorted(v) for v in L4])


def dump_json(tree: Tree, lists: Optional[InteractionLists] = None) -> str:
    boxes = []
    for b in range(len(tree)):
        entry = {"id": b, "level": int(tree.level[b]), "lattice": [int(v) for v in tree.lattice[b]],
                 "sources": tree.nsources(b), "targets": tree.ntargets(b), "children": list(tree.children[b])}
        if lists is not None:
            entry["list_sizes"] = {k: len(v) for k, v in lists.for_box(b).items()}
        boxes.append(entry)
    return json.dumps({"root_center": tree.root_center.tolist(), "root_side": tree.root_side, "boxes": boxes})
