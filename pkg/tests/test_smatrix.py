import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smalldiv.constants import random_pair, random_site_matrix, random_site_set
from smalldiv.lattice import SiteBox, SiteSet
from smalldiv.smatrix import (PerturbationHypothesisError, ShapeError, SiteMatrix, algebra_check,
                              column_matrix, default_K0, interpolation_check, l2_opnorm,
                              left_inverse_perturbed, line_constant, line_decay_bound, matmul,
                              restrict, row_group, smoothing_bounds, snorm, sobolev_action_check,
                              sobolev_norm, weight_sum)

from oracles import brute_snorm, lattice_sum


def box(N=2, nu=1, d=1):
    return SiteBox((0,) * nu, (0,) * d, N)


def test_weight_sum_matches_brute():
    for b, p, R in [(1, 4, 7), (2, 4, 6), (3, 2.5, 3)]:
        assert weight_sum(b, p, R) == pytest.approx(lattice_sum(b, p, R), rel=1e-12)


def test_K0_is_integer_and_dominates_embedding_sum():
    K0 = default_K0(2, 2.0)
    assert K0 == math.ceil(K0)
    assert K0 >= 16 * weight_sum(2, 4.0)


@pytest.mark.parametrize("s", [0.0, 1.0, 2.5, 7.0])
def test_identity_norm(s):
    I = SiteMatrix.identity(box(2))
    assert snorm(I, s, 1.0) == pytest.approx(1.0)


@pytest.mark.parametrize("s", [0.0, 1.5, 3.0])
def test_single_block_norm(s):
    B = box(3)
    E = np.zeros((len(B), len(B)), complex)
    r = B.index(B.site(0).__class__.make((3,), (1,), 0))
    c = B.index(B.site(0).__class__.make((0,), (-1,), 1))
    E[r, c] = 2.0
    assert snorm(SiteMatrix(B, B, E), s, 1.0) == pytest.approx(2 * 3 ** s)


def test_snorm_against_brute_force(rng):
    for _ in range(25):
        M1, M2 = random_pair(rng)
        for M in (M1, M2, M1 @ M2):
            for s in (0.0, 2.0, 3.5):
                ref = brute_snorm(M.rows, M.cols, M.entries, s, 7.0)
                assert snorm(M, s, 7.0) == pytest.approx(ref, rel=1e-12, abs=1e-14)


def test_negative_s_rejected():
    with pytest.raises(ValueError):
        snorm(SiteMatrix.identity(box(1)), -1.0, 1.0)


def test_snorm_monotone_in_s(rng, consts):
    for _ in range(50):
        M = random_site_matrix(rng, random_site_set(rng), random_site_set(rng))
        vals = [snorm(M, s, consts.K0) for s in np.linspace(0, 8, 9)]
        assert all(a <= b * (1 + 1e-14) for a, b in zip(vals, vals[1:]))


def test_l2_opnorm_examples():
    B = SiteSet(np.array([[0, 0, 0], [0, 0, 1]]), 1, 1)
    assert l2_opnorm(SiteMatrix.identity(B)) == pytest.approx(1.0)
    assert l2_opnorm(SiteMatrix(B, B, np.diag([3.0, -4j]))) == pytest.approx(4.0)
    with pytest.raises(ShapeError):
        l2_opnorm(SiteMatrix.zeros(SiteSet.empty(1, 1), B))


def test_l2_below_s0_norm(rng, consts):
    for _ in range(200):
        M = random_site_matrix(rng, random_site_set(rng), random_site_set(rng))
        if M.entries.any():
            assert l2_opnorm(M) <= snorm(M, consts.s0, consts.K0)


def test_matmul_identity_and_shape(rng):
    M, _ = random_pair(rng)
    assert np.allclose((M @ SiteMatrix.identity(M.cols)).entries, M.entries)
    with pytest.raises(ShapeError):
        matmul(M, SiteMatrix.identity(box(1)))


def test_algebra_200_pairs(rng, consts):
    for _ in range(200):
        M1, M2 = random_pair(rng)
        assert algebra_check(M1, M2, consts.s0, consts.K0).holds


def test_power_estimate(rng, consts):
    B = random_site_set(rng)
    for _ in range(30):
        M = random_site_matrix(rng, B, B)
        base = snorm(M, consts.s0, consts.K0)
        P = M
        for n in range(2, 6):
            P = P @ M
            assert snorm(P, consts.s0, consts.K0) <= base ** n * (1 + 1e-10)


def test_interpolation_identity_reduction(rng, consts):
    # with M2 = I the inequality needs Cs >= 2 - |||M1|||_{s0} |||I|||_s / |||M1|||_s
    for _ in range(30):
        M1 = random_site_matrix(rng, random_site_set(rng), box(2))
        I = SiteMatrix.identity(box(2))
        assert interpolation_check(M1, I, 4.0, consts.s0, 2.0, 1.0).holds


def test_interpolation_diagonal_at_s0(rng, consts):
    for _ in range(50):
        B = random_site_set(rng)
        M1 = random_site_matrix(rng, B, B, "diagonal")
        M2 = random_site_matrix(rng, B, B, "diagonal")
        assert interpolation_check(M1, M2, consts.s0, consts.s0, 1.0, consts.K0).holds


def test_interpolation_sparse_calibrated(rng, consts):
    s = consts.s0 + 2
    for _ in range(200):
        D, C, B = (random_site_set(rng) for _ in range(3))
        M1 = random_site_matrix(rng, D, C, "sparse")
        M2 = random_site_matrix(rng, C, B, "sparse")
        assert interpolation_check(M1, M2, s, consts.s0, consts.C(s), consts.K0).holds


def test_interpolation_rejects_small_s(consts):
    I = SiteMatrix.identity(box(1))
    with pytest.raises(ValueError):
        interpolation_check(I, I, 1.0, 2.0, 1.0, 1.0)


def test_vector_consistency(rng, consts):
    B = box(2)
    w = rng.standard_normal(len(B)) + 1j * rng.standard_normal(len(B))
    for s in (0.0, 2.0, 5.0):
        assert snorm(column_matrix(w, B), s, consts.K0) == pytest.approx(
            sobolev_norm(w, B, s, consts.K0), rel=1e-12)


def test_sobolev_action(rng, consts):
    for s in (consts.s0, 3.0, 5.0):
        for _ in range(50):
            B, C = random_site_set(rng), random_site_set(rng)
            M = random_site_matrix(rng, C, B)
            w = rng.standard_normal(len(B)) + 1j * rng.standard_normal(len(B))
            assert sobolev_action_check(M, w, s, consts.s0, consts.C(s), consts.K0).holds


def test_restrict(rng, consts):
    M = random_site_matrix(rng, box(2), box(2))
    R = restrict(M)
    assert np.array_equal(R.entries, M.entries)
    for _ in range(20):
        rows, cols = M.rows.subset(rng.random(len(M.rows)) < 0.5), M.cols.subset(rng.random(len(M.cols)) < 0.5)
        sub = restrict(M, rows, cols)
        for s in (0, 2, 4):
            assert snorm(sub, s, consts.K0) <= snorm(M, s, consts.K0) * (1 + 1e-14)
    line = row_group(M, (1, -1))
    assert len(line.rows) == 2 and np.array_equal(line.entries, M.entries[M.rows.lookup([[1, -1, 0], [1, -1, 1]])])
    with pytest.raises(Exception):
        restrict(M, box(3), None)


def test_smoothing_far_support(rng, consts):
    B = box(4)
    for _ in range(20):
        M = random_site_matrix(rng, B, B, "decay")
        dist = np.abs(B.spatial[:, None] - B.spatial[None]).max(axis=2)
        M = M.with_entries(M.entries * (dist >= 4))
        bound, actual = smoothing_bounds(M, 4, 2.0, 4.0, consts.K0)
        assert actual <= bound * (1 + 1e-12)
        assert bound == pytest.approx(4.0 ** -2 * snorm(M, 4.0, consts.K0))


def test_smoothing_banded(rng, consts):
    B = box(4)
    for _ in range(20):
        M = random_site_matrix(rng, B, B, "decay")
        dist = np.abs(B.spatial[:, None] - B.spatial[None]).max(axis=2)
        M = M.with_entries(M.entries * (dist <= 3))
        bound, actual = smoothing_bounds(M, 3, 2.0, 2.0, consts.K0)
        assert bound == pytest.approx(actual)
        bound, actual = smoothing_bounds(M, 3, 2.0, 5.0, consts.K0)
        assert actual <= bound * (1 + 1e-12)
        bound, actual = smoothing_bounds(M, 3, 2.0, 2.0, consts.K0, which="l2")
        assert actual <= bound


def test_smoothing_support_violation(rng, consts):
    M = random_site_matrix(rng, box(3), box(3), "decay")
    with pytest.raises(ValueError):
        smoothing_bounds(M, 2, 1.0, 2.0, consts.K0)


def test_line_decay(rng, consts):
    assert line_decay_bound(SiteMatrix.zeros(box(1), box(1)), 1.0, consts.K0).holds
    for _ in range(50):
        M = random_site_matrix(rng, random_site_set(rng), random_site_set(rng))
        assert line_decay_bound(M, 1.0, consts.K0).holds
    # a single line: equality with the defining sum up to the factor K1
    M = random_site_matrix(rng, box(2), box(2), "decay")
    line = row_group(M, (0, 0))
    w = line_decay_bound(line, 1.0, consts.K0, K1=1.0)
    assert w.lhs <= w.rhs * (1 + 1e-12)
    assert line_constant(2, R=12) == pytest.approx(math.sqrt(lattice_sum(2, 4, 12)), rel=1e-12)


def test_left_inverse_zero_perturbation(rng, consts):
    B = box(1)
    M = random_site_matrix(rng, B, B, "decay").with_entries(np.eye(len(B)) * 3 + 0.1 * rng.standard_normal((len(B),) * 2))
    Minv = SiteMatrix(B, B, np.linalg.inv(M.entries))
    NP = left_inverse_perturbed(Minv, SiteMatrix.zeros(B, B), K0=consts.K0, s0=consts.s0)
    assert np.array_equal(NP.entries, Minv.entries)


def test_left_inverse_identity_case(rng, consts):
    B = box(1)
    I = SiteMatrix.identity(B)
    E = random_site_matrix(rng, B, B, "decay")
    scale = 0.4 / (snorm(E, consts.s0, consts.K0) * snorm(I, consts.s0, consts.K0))
    P = E.scale(scale)
    NP = left_inverse_perturbed(I, P, K0=consts.K0, s0=consts.s0)
    assert snorm(NP, consts.s0, consts.K0) <= 2 * snorm(I, consts.s0, consts.K0)
    assert np.allclose(NP.entries @ (np.eye(len(B)) + P.entries), np.eye(len(B)), atol=1e-12)


def test_left_inverse_rectangular(rng, consts):
    # a tall M with a left inverse; the perturbed left inverse stays a left inverse
    C, B = box(2), box(1)
    for _ in range(20):
        M = random_site_matrix(rng, C, B, "decay")
        Minv = SiteMatrix(B, C, np.linalg.pinv(M.entries))
        E = random_site_matrix(rng, C, B, "decay")
        P = E.scale(0.3 / (snorm(Minv, consts.s0, consts.K0) * snorm(E, consts.s0, consts.K0)))
        NP, rep = left_inverse_perturbed(Minv, P, (consts.s0, 4.0), K0=consts.K0, s0=consts.s0,
                                         return_report=True)
        assert np.abs(NP.entries @ (M.entries + P.entries) - np.eye(len(B))).max() < 1e-9
        assert rep.norms[consts.s0] <= 2 * snorm(Minv, consts.s0, consts.K0)
        # higher-s bound with the frozen constant
        s = 4.0
        rhs = consts.C(s) * (snorm(Minv, s, consts.K0) + snorm(Minv, consts.s0, consts.K0) ** 2 * snorm(P, s, consts.K0))
        assert rep.norms[s] <= rhs


def test_left_inverse_refuses(rng, consts):
    B = box(1)
    I = SiteMatrix.identity(B)
    with pytest.raises(PerturbationHypothesisError) as exc:
        left_inverse_perturbed(I, I, K0=consts.K0, s0=consts.s0)
    assert exc.value.norm_inv > 0 and exc.value.norm_pert > 0


def test_hermitian_flag_checked():
    B = box(1)
    E = np.triu(np.ones((len(B), len(B))))
    with pytest.raises(ValueError):
        SiteMatrix(B, B, E, hermitian=True)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_algebra_property(seed):
    from smalldiv.constants import get_constants
    c = get_constants(1, 1, 2.0, 8.0)
    rng = np.random.default_rng(seed)
    M1, M2 = random_pair(rng)
    assert algebra_check(M1, M2, c.s0, c.K0).holds
