import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

import oracles as o
from halfspace_fmm import kernels as k
from halfspace_fmm.core import (
    ElasticModuli,
    SingularEvaluationError,
    SourceBatch,
    TargetBatch,
    image_coords,
)

MOD = ElasticModuli(1.3, 0.7)
UNIT = ElasticModuli(1.0, 1.0)

PIECES = {
    "kelvin": (k.kelvin_slp, k.kelvin_dlp, o.kelvin_matrix),
    "A": (k.mindlin_A_slp, k.mindlin_A_dlp, o.a_matrix),
    "B": (k.mindlin_B_slp, k.mindlin_B_dlp, o.b_matrix),
    "C": (k.mindlin_C_slp, k.mindlin_C_dlp, o.x3c_matrix),
    "full": (
        lambda P, Q, F, m: k.mindlin_full(P, Q, F, moduli=m),
        lambda P, Q, D, nu, m: k.mindlin_full(P, Q, D=D, nu=nu, moduli=m),
        o.mindlin_matrix,
    ),
}


def random_pairs(n, seed):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        P = rng.uniform(-1, 1, 3)
        P[2] = -abs(P[2])
        Q = rng.uniform(-1, 1, 3)
        Q[2] = -abs(Q[2]) - 0.1
        nu = rng.standard_normal(3)
        out.append((P, Q, rng.standard_normal(3), rng.standard_normal(3), nu / np.linalg.norm(nu)))
    return out


def rel(a, b):
    return np.linalg.norm(np.asarray(a) - np.asarray(b)) / np.linalg.norm(b)


def test_kelvin_examples():
    s = k.kelvin_slp([1, 0, -1], [0, 0, -1], [1, 0, 0], UNIT)
    np.testing.assert_allclose(s.u, [1 / (4 * math.pi), 0, 0], rtol=1e-15, atol=1e-18)
    s = k.kelvin_slp([1, 0, -1], [0, 0, -1], [0, 1, 0], UNIT)
    np.testing.assert_allclose(s.u, [0, 1 / (6 * math.pi), 0], rtol=1e-15, atol=1e-18)


@pytest.mark.parametrize("name", list(PIECES))
def test_zero_strength_gives_zero(name):
    slp, dlp, _ = PIECES[name]
    P, Q = [0.2, 0.1, -0.5], [0.0, 0.3, -1.0]
    assert not np.any(slp(P, Q, [0, 0, 0], MOD).u)
    z = dlp(P, Q, [0, 0, 0], [0, 0, 1], MOD)
    assert not np.any(z.u) and not np.any(z.grad_u)


@pytest.mark.parametrize("name", list(PIECES))
def test_slp_matches_transcribed_matrix(name):
    slp, _, mat = PIECES[name]
    for P, Q, F, _, _ in random_pairs(40, 1):
        assert rel(slp(P, Q, F, MOD).u, o.slp_u(mat, P, Q, F, MOD.lam, MOD.mu)) < 1e-13


@pytest.mark.parametrize("name", list(PIECES))
def test_gradients_match_finite_differences(name):
    slp, dlp, _ = PIECES[name]
    for P, Q, F, D, nu in random_pairs(25, 2):
        g = o.grad_fd(lambda x: slp(x, Q, F, MOD).u, P)
        assert rel(slp(P, Q, F, MOD).grad_u, g) < 1e-6
        g = o.grad_fd(lambda x: dlp(x, Q, D, nu, MOD).u, P)
        assert rel(dlp(P, Q, D, nu, MOD).grad_u, g) < 1e-6


@pytest.mark.parametrize("name", list(PIECES))
def test_dlp_matches_source_differences(name):
    _, dlp, mat = PIECES[name]
    for P, Q, _, D, nu in random_pairs(25, 3):
        ref = o.dlp_u_fd(mat, P, Q, D, nu, MOD.lam, MOD.mu)
        assert rel(dlp(P, Q, D, nu, MOD).u, ref) < 1e-7


def test_kelvin_dlp_symmetric_in_d_and_nu():
    for P, Q, _, D, nu in random_pairs(10, 4):
        a = k.kelvin_dlp(P, Q, D, nu, MOD).u
        b = k.kelvin_dlp(P, Q, nu, D, MOD).u
        assert rel(b, a) < 1e-14


def test_a_trick_equals_direct_formula():
    for P, Q, F, _, _ in random_pairs(50, 5):
        trick = k.mindlin_A_slp(P, Q, F, MOD)
        direct = k.mindlin_image(P, Q, F, None, None, MOD, k.PIECE_A)
        assert rel(trick.u, o.slp_u(o.a_matrix, P, Q, F, MOD.lam, MOD.mu)) < 1e-14
        assert rel(trick.grad_u, direct.grad_u) < 1e-13


def test_a_dlp_correction_vanishes_for_orthogonal_d():
    P, Q = np.array([0.3, -0.2, -0.4]), np.array([0.1, 0.1, -0.9])
    D, nu = np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0])
    tm = k.tilde_moduli(MOD)
    ref = k.kelvin_dlp(P * [1, 1, -1], Q, D, nu, tm)
    res = k.mindlin_A_dlp(P, Q, D, nu, MOD)
    np.testing.assert_allclose(res.u, ref.u, rtol=1e-14)


def test_b_potential_jet_example():
    j = k.b_potential_jet(image_coords([0, 0, -0.5], [0, 0, -0.5]))
    assert j.value == pytest.approx(math.log(2) - 1, rel=1e-15)
    assert j.gradient[2] == pytest.approx(math.log(2), rel=1e-15)
    assert j.hessian[2, 2] == pytest.approx(1.0, rel=1e-15)
    assert j.hessian[0, 0] == pytest.approx(-0.5, rel=1e-15)
    assert j.hessian[0, 2] == 0.0


def random_R(n, seed):
    rng = np.random.default_rng(seed)
    R = rng.uniform(-2, 2, (n, 3))
    R[:, 2] = np.abs(R[:, 2]) + 0.05
    return R


def test_b_potential_second_derivatives():
    for R in random_R(100, 6):
        j = k.b_potential_jet(image_coords([R[0], R[1], -R[2] / 2], [0, 0, -R[2] / 2]))
        Rn = np.linalg.norm(R)
        assert j.hessian[2, 2] == pytest.approx(1 / Rn, rel=1e-13)
        np.testing.assert_array_equal(j.hessian, j.hessian.T)
        # B is harmonic (its Hessian is traceless)
        assert abs(np.trace(j.hessian)) < 1e-12 * np.abs(j.hessian).max()


def test_b_potential_derivatives_match_finite_differences():
    h = 1e-5
    for R in random_R(30, 7):
        jets = k.b_potential_derivatives(R)[0]
        for order in (1, 2, 3, 4):
            T = k.b_jet_tensor(jets, order)
            lower = lambda x: k.b_jet_tensor(k.b_potential_derivatives(x)[0], order - 1)
            for l in range(3):
                d = np.zeros(3)
                d[l] = h
                fd = (lower(R + d) - lower(R - d)) / (2 * h)
                assert np.max(np.abs(T[..., l] - fd)) <= 1e-6 * max(1.0, np.abs(T).max())


def test_b_potential_singular():
    c = image_coords([0, 0, -1], [0, 0, -1])
    object.__setattr__(c, "R", 0.0)
    with pytest.raises(SingularEvaluationError):
        k.b_potential_jet(c)


def test_b_explicit_and_potential_forms_agree():
    # the library builds B from the potential; the oracle transcribes the explicit components
    for P, Q, F, _, _ in random_pairs(100, 8):
        assert rel(k.mindlin_B_slp(P, Q, F, MOD).u, o.slp_u(o.b_matrix, P, Q, F, MOD.lam, MOD.mu)) < 1e-13


def test_b_axisymmetric_vertical_force():
    P, Q = [0.4, -0.3, -0.2], [0.4, -0.3, -0.7]
    u = k.mindlin_B_slp(P, Q, [0, 0, 1], MOD).u
    cb = (1 - MOD.alpha) / (4 * math.pi * MOD.mu * MOD.alpha)
    R = 0.9
    assert u[:2] == pytest.approx([0, 0], abs=1e-16)
    assert u[2] == pytest.approx(cb / R, rel=1e-14)


def test_c_vanishes_on_surface_but_gradient_does_not():
    s = k.mindlin_C_slp([0.3, 0.2, 0.0], [0, 0, -1], [0.5, -1, 2], MOD)
    assert not np.any(s.u)
    assert np.abs(s.grad_u[:, 2]).max() > 0


@pytest.mark.parametrize("seed", range(3))
def test_traction_free_surface(seed):
    rng = np.random.default_rng(seed)
    for _ in range(50):
        P = np.append(rng.uniform(-2, 2, 2), 0.0)
        Q = np.append(rng.uniform(-1, 1, 2), -rng.uniform(0.05, 2))
        F = rng.standard_normal(3)
        D = rng.standard_normal(3)
        nu = rng.standard_normal(3)
        nu /= np.linalg.norm(nu)
        s = k.mindlin_full(P, Q, F, D, nu, moduli=MOD).stress
        assert np.abs(s[:, 2]).max() <= 1e-10 * np.abs(s).max()


def test_deep_limit_approaches_kelvin():
    d = np.array([0.3, -0.2, 0.1])
    F = np.array([1.0, 2.0, -0.5])
    diffs = []
    for depth in (10.0, 100.0, 1000.0):
        Q = np.array([0, 0, -depth])
        full = k.mindlin_full(Q + d, Q, F, moduli=MOD).u
        kel = k.kelvin_slp(Q + d, Q, F, MOD).u
        diffs.append(rel(full, kel))
    assert diffs[0] > diffs[1] > diffs[2]
    assert diffs[2] < 1e-2 * diffs[0] * 1.5


def test_scalar_potentials_are_harmonic():
    # B and C (without its x3 factor) are derivatives of harmonic potentials
    h = 3e-4
    Q = np.array([0.1, -0.2, -1.0])
    F = np.array([0.3, 0.5, -0.7])
    for P, *_ in random_pairs(10, 9):
        x = P - [0, 0, 0.3]
        for mat in (o.b_matrix, o.c_matrix):
            lap = -6 * mat(x, Q, MOD.lam, MOD.mu) @ F
            for l in range(3):
                d = np.zeros(3)
                d[l] = h
                lap += mat(x + d, Q, MOD.lam, MOD.mu) @ F + mat(x - d, Q, MOD.lam, MOD.mu) @ F
            lap /= h * h
            scale = np.linalg.norm(mat(x, Q, MOD.lam, MOD.mu) @ F) / np.linalg.norm(x - Q * [1, 1, -1]) ** 2
            assert np.abs(lap).max() <= 1e-5 * scale


vec = arrays(np.float64, 3, elements=st.floats(-5, 5))


@settings(max_examples=40, deadline=None)
@given(vec, vec, st.floats(-3, 3), st.floats(-3, 3))
def test_linearity_in_strengths(F1, F2, a, b):
    P, Q = np.array([0.2, 0.4, -0.3]), np.array([-0.1, 0.2, -0.8])
    nu = np.array([0.0, 0.6, 0.8])
    for name, (slp, dlp, _) in PIECES.items():
        lhs = slp(P, Q, a * F1 + b * F2, MOD).u
        rhs = a * slp(P, Q, F1, MOD).u + b * slp(P, Q, F2, MOD).u
        assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-14 * (1 + np.abs(rhs).max()))
        lhs = dlp(P, Q, a * F1 + b * F2, nu, MOD).u
        rhs = a * dlp(P, Q, F1, nu, MOD).u + b * dlp(P, Q, F2, nu, MOD).u
        assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-14 * (1 + np.abs(rhs).max()))


def test_direct_sum_single_pair_matches_pointwise():
    P, Q, F, D, nu = random_pairs(1, 10)[0]
    src = SourceBatch([Q], [F], [D], [nu])
    res = k.direct_sum(src, TargetBatch([P]), k.KernelSelector.full_halfspace(), MOD)
    ref = k.mindlin_full(P, Q, F, D, nu, moduli=MOD)
    np.testing.assert_allclose(res.u[0], ref.u, rtol=1e-14)
    np.testing.assert_allclose(res.grad_u[0], ref.grad_u, rtol=1e-13, atol=1e-16)


def test_direct_sum_cancelling_sources():
    Q = [0.1, 0.2, -0.5]
    src = SourceBatch([Q, Q], [[1, 2, 3], [-1, -2, -3]])
    res = k.direct_sum(src, TargetBatch([[0.5, 0.5, -0.1]]), k.KernelSelector.full_halfspace(), MOD)
    assert np.abs(res.u).max() < 1e-15


def test_direct_sum_selector_pieces_add_up():
    pairs = random_pairs(30, 11)
    src = SourceBatch([p[1] for p in pairs], [p[2] for p in pairs], [p[3] for p in pairs], [p[4] for p in pairs])
    tgt = TargetBatch([p[0] for p in pairs])
    full = k.direct_sum(src, tgt, k.KernelSelector.full_halfspace(), MOD)
    acc = None
    for sel in (k.KernelSelector(kelvin=True), k.KernelSelector(imageA=True),
                k.KernelSelector(imageB=True), k.KernelSelector(imageC=True)):
        r = k.direct_sum(src, tgt, sel, MOD)
        acc = r if acc is None else acc + r
    assert rel(acc.u, full.u) < 1e-13


def test_direct_sum_reports_coincident_pair():
    src = SourceBatch([[0, 0, -1], [1, 1, -1]], [[1, 0, 0], [0, 1, 0]])
    with pytest.raises(SingularEvaluationError, match="target 0 coincides with source 1"):
        k.direct_sum(src, TargetBatch([[1, 1, -1]]), k.KernelSelector.kelvin_only(), MOD)


def test_selector_needs_a_piece():
    with pytest.raises(ValueError):
        k.KernelSelector()
    assert k.KernelSelector.full_halfspace().is_full
