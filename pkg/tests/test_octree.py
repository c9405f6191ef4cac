import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from halfspace_fmm.core import ValidationError
from halfspace_fmm.octree import adjacent, brute_force_lists, build_tree, compute_lists, dump_json


def clustered(seed, n):
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-1, 1, (rng.integers(1, 5), 3))
    spread = 10.0 ** rng.uniform(-3, 0, len(centers))
    which = rng.integers(0, len(centers), n)
    return centers[which] + spread[which, None] * rng.standard_normal((n, 3))


def test_single_point_tree():
    t = build_tree([[0.3, -0.2, -1.0]], s=1)
    assert len(t) == 1 and t.nlevels == 1
    L = compute_lists(t)
    assert L.for_box(0) == {"colleagues": [0], "L1": [0], "L2": [], "L3": [], "L4": []}


def test_cube_corners_split_once():
    pts = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], float)
    t = build_tree(pts, s=1)
    assert len(t) == 9 and t.nlevels == 2
    assert all(t.nsources(b) == 1 for b in t.leaves())
    L = compute_lists(t)
    for b in t.leaves():
        assert len(L.L1[b]) == 8 and L.L2[b] == [] and L.L3[b] == []


def test_leaves_respect_capacity_and_partition_points():
    pts = clustered(0, 10000)
    t = build_tree(pts, s=40)
    leaves = t.leaves()
    assert max(t.nsources(b) for b in leaves) <= 40
    assert sum(t.nsources(b) for b in leaves) == 10000
    assert sorted(np.concatenate([t.box(b).sources for b in leaves]).tolist()) == list(range(10000))
    for b in range(len(t)):
        bx = t.box(b)
        if bx.children:
            assert sum(t.nsources(c) for c in bx.children) == t.nsources(b)
        lo, hi = bx.center - bx.side / 2, bx.center + bx.side / 2
        inside = pts[bx.sources]
        assert np.all(inside >= lo - 1e-12) and np.all(inside <= hi + 1e-12)


def test_separate_sources_and_targets():
    rng = np.random.default_rng(1)
    src, tgt = rng.uniform(-1, 0, (300, 3)), rng.uniform(0, 1, (200, 3))
    t = build_tree(sources=src, targets=tgt, s=20)
    leaves = t.leaves()
    assert sum(t.ntargets(b) for b in leaves) == 200
    assert max(t.nsources(b) + t.ntargets(b) for b in leaves) <= 20
    assert sorted(np.concatenate([t.box(b).targets for b in leaves]).tolist()) == list(range(200))


def test_input_validation():
    with pytest.raises(ValidationError):
        build_tree([[0, 0, 0]], s=0)
    with pytest.raises(ValidationError):
        build_tree([[0, 0, np.nan]])
    with pytest.raises(ValidationError):
        build_tree([[0, 0, 0]], sources=[[0, 0, 0]])


def test_coincident_points_stop_at_max_depth():
    with pytest.warns(RuntimeWarning):
        t = build_tree(np.zeros((5, 3)) + [0, 0, -1], s=2, max_depth=4)
    assert t.nlevels == 5


def test_adjacency_in_integers():
    assert adjacent(1, (0, 0, 0), 1, (1, 1, 1))
    assert not adjacent(1, (0, 0, 0), 2, (3, 0, 0))
    assert adjacent(1, (0, 0, 0), 2, (2, 0, 0))
    assert adjacent(3, (1, 2, 3), 3, (1, 2, 3))


def test_lists_match_definitions_on_random_trees():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        t = build_tree(clustered(seed, int(rng.integers(20, 400))), s=int(rng.integers(1, 12)))
        fast, slow = compute_lists(t), brute_force_lists(t)
        for name in ("colleagues", "L1", "L2", "L3", "L4"):
            assert getattr(fast, name) == getattr(slow, name), (seed, name)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(50, 2000), st.integers(1, 30))
def test_list_bounds_and_duality(seed, n, s):
    t = build_tree(clustered(seed, n), s=s)
    L = compute_lists(t)
    leaf = t.is_leaf
    for b in range(len(t)):
        assert len(L.colleagues[b]) <= 27
        assert len(L.L2[b]) <= 189
        for d in L.L3[b]:
            assert b in L.L4[d]
            assert leaf[b]
        for d in L.L4[b]:
            assert d in L.L3[b] or b in L.L3[d]
        if not leaf[b]:
            assert L.L1[b] == [] and L.L3[b] == []


def test_json_dump():
    t = build_tree(clustered(3, 200), s=10)
    L = compute_lists(t)
    doc = json.loads(dump_json(t, L))
    assert len(doc["boxes"]) == len(t)
    assert doc["boxes"][0]["sources"] == 200
    assert set(doc["boxes"][0]["list_sizes"]) == {"colleagues", "L1", "L2", "L3", "L4"}
    assert "list_sizes" not in json.loads(dump_json(t))["boxes"][0]
