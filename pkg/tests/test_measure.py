import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smalldiv.measure import (BoxFamily, ParameterBox, ThetaBadSet, binomial_halfwidth,
                              classify_parameter, clip, contains, csv_lines, enclosure,
                              free_theta_lines, gate_bad_lambdas, interval_complexity,
                              l2_inverse_gate, loglog_slope, measure_of, melnikov_constant,
                              melnikov_initial_set, merge, oversampling_audit, sweep_measure,
                              theta_bad_set, weyl_delta, xi_monotonicity)
from smalldiv.nls_operator import StateSpectrum, preset
from smalldiv.separation import WindowError

LAM = 0.9


def linear_asm():
    return preset("cubic-d1").assembly()


def cubic_asm():
    plus = np.zeros((9, 9), complex)
    plus[4, 3] = plus[4, 5] = plus[3, 4] = plus[5, 4] = 0.05
    return preset("cubic-d1").assembly(StateSpectrum.from_plus(plus, 1, 1))


# --- intervals

@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(-10, 10), st.floats(0, 3)), max_size=12))
def test_merge_is_a_disjoint_union(raw):
    ivs = [(a, a + w) for a, w in raw]
    m = merge(ivs)
    assert all(m[k][1] < m[k + 1][0] for k in range(len(m) - 1))
    assert measure_of(m) <= sum(b - a for a, b in ivs) + 1e-12
    xs = np.linspace(-11, 14, 401)
    brute = np.array([any(a < x < b for a, b in ivs) for x in xs])
    got = contains(m, xs)
    edge = np.array([any(abs(x - e) < 1e-12 for iv in ivs for e in iv) for x in xs])
    assert np.array_equal(got[~edge], brute[~edge])


def test_clip():
    assert clip([(-2, -1), (0, 3), (5, 6)], 1, 5.5) == [(1, 3), (5, 5.5)]


# --- theta bad sets

def test_free_bad_set_is_explicit():
    asm, N, tau = linear_asm(), 2, 1.0
    seg = (-3.0, 3.0)
    bs = theta_bad_set(asm, 0.0, LAM, (0,), N, tau, theta_range=seg)
    thr = 2 * N ** (-tau)
    c = free_theta_lines(asm, LAM, N, (0,))
    expect = clip(merge(zip(c - thr, c + thr)), *seg)
    assert len(bs.intervals) == len(expect)
    for (a, b), (x, y) in zip(bs.intervals, expect):
        assert a == pytest.approx(x, abs=1e-9) and b == pytest.approx(y, abs=1e-9)
    assert not bs.flags


def test_covering_is_sound(rng):
    asm, N, tau = cubic_asm(), 2, 2.0
    seg = (-1.5, 1.5)
    bs = theta_bad_set(asm, 0.01, LAM, (0,), N, tau, theta_range=seg)
    fam = BoxFamily(asm, 0.01, LAM, N, (0,))
    ths = rng.uniform(*seg, 300)
    m = np.array([fam.m(t) for t in ths])
    inside = contains(bs.intervals, ths)
    assert np.all(inside[m < bs.threshold - 1e-10])
    assert np.all(~inside[m > bs.threshold + 1e-10])
    # the core level set lies inside the level-2 set
    assert np.all(contains(bs.intervals, np.array([0.5 * (a + b) for a, b in bs.core])))


def test_bad_set_measure_bound():
    # each eigenvalue branch is 1-Lipschitz: |B| <= 2 * level * (number of branches)
    asm, N, tau = cubic_asm(), 2, 2.0
    bs = theta_bad_set(asm, 0.01, LAM, (1,), N, tau, theta_range=(-2.0, 2.0))
    assert bs.measure <= 2 * bs.threshold * len(BoxFamily(asm, 0.01, LAM, N, (1,)).A0)
    outer = enclosure(asm, 0.01, LAM, N, (1,), bs.threshold, (-2.0, 2.0))
    assert measure_of(bs.intervals) <= measure_of(outer) + 1e-12


def test_far_from_free_lines_is_empty():
    asm, N = cubic_asm(), 2
    c = np.sort(free_theta_lines(asm, LAM, N, (0,)))
    k = np.argmax(np.diff(c))
    mid = 0.5 * (c[k] + c[k + 1])
    # large tau shrinks the level set inside a gap of the free lines
    bs = theta_bad_set(asm, 0.01, LAM, (0,), N, 6.0, theta_range=(mid - 0.05, mid + 0.05))
    assert bs.intervals == [] and bs.core == []


def test_resolution_guard():
    with pytest.raises(ValueError):
        theta_bad_set(linear_asm(), 0.0, LAM, (0,), 2, 2.0, resolution=0.1)


def test_oversampling_audit_clean():
    asm, N, tau = cubic_asm(), 2, 2.0
    th = float(free_theta_lines(asm, LAM, N, (0,))[3])
    out = oversampling_audit(asm, 0.01, LAM, (0,), N, tau, (th - 0.2, th + 0.2))
    assert out["violations"] == 0 and out["bad_samples"] > 0


# --- complexity and weak goodness

def test_complexity_counts():
    N, tau = 2, 1.0
    L = N ** (-tau)
    assert interval_complexity(ThetaBadSet((0,), N, tau, [], 2 * L), N, tau) == (0, 0.0)
    bs = ThetaBadSet((0,), N, tau, [(0.0, 3 * L)], 2 * L, core=[(L, 2 * L)])
    Q, bound = interval_complexity(bs, N, tau)
    assert Q == 3 and bound == pytest.approx(6.0)
    # components missing the core are not refined
    bs = ThetaBadSet((0,), N, tau, [(0.0, 3 * L), (5.0, 6.0)], 2 * L, core=[(L, 2 * L)])
    assert interval_complexity(bs, N, tau)[0] == 3


def test_free_parameter_is_weakly_good():
    pc = classify_parameter(linear_asm(), 0.0, LAM, 4, 4.0)
    assert pc.good and pc.method == "enclosure" and pc.interval_count <= pc.budget


def test_zero_budget_rejects():
    assert not classify_parameter(linear_asm(), 0.0, LAM, 2, 2.0, budget_exponent=0).good


def test_bad_sets_nest_in_tau():
    asm, seg = cubic_asm(), (-1.5, 1.5)
    sets = [theta_bad_set(asm, 0.01, LAM, (0,), 2, t, theta_range=seg) for t in (1.0, 2.0, 3.0)]
    for big, small in zip(sets, sets[1:]):
        assert small.measure <= big.measure
        mids = np.array([0.5 * (a + b) for a, b in small.intervals])
        assert np.all(contains(big.intervals, mids))


def test_window_must_cover_shell():
    with pytest.raises(WindowError):
        classify_parameter(linear_asm(), 0.0, LAM, 3, 2.0, j0_window=2)


# --- L2 gate

def test_gate_fails_on_resonance_and_matches_eigvalsh():
    asm, N, tau = linear_asm(), 3, 2.0
    bad = gate_bad_lambdas(asm, 0.0, N, tau)
    assert bad
    lam = 0.5 * sum(bad[0])
    assert not l2_inverse_gate(asm, 0.0, lam, N, tau)
    assert not l2_inverse_gate(asm, 0.0, lam, N, tau, exact=True)
    good = l2_inverse_gate(asm, 0.0, LAM, N, tau)
    assert good.passed == l2_inverse_gate(asm, 0.0, LAM, N, tau, exact=True).passed


def test_gate_covering_contains_exact_failures(rng):
    asm, N, tau = cubic_asm(), 2, 2.0
    outer = gate_bad_lambdas(asm, 0.01, N, tau)
    inner = gate_bad_lambdas(asm, 0.01, N, tau, inner=True)
    assert measure_of(inner) <= measure_of(outer)
    for lam in rng.uniform(0.5, 1.5, 40):
        g = l2_inverse_gate(asm, 0.01, lam, N, tau, exact=True)
        if not g.passed:
            assert contains(outer, lam)[0]
        if contains(inner, lam)[0]:
            assert not g.passed


def test_weyl_delta_zero_at_eps_zero():
    assert weyl_delta(cubic_asm(), 0.0) == 0.0
    assert weyl_delta(cubic_asm(), 0.02) == pytest.approx(2 * weyl_delta(cubic_asm(), 0.01))


# --- sweeps

def test_sweep_and_csv_are_deterministic():
    box = ParameterBox((0.0, 0.01), (0.8, 1.0), (2, 3))
    a = sweep_measure(cubic_asm(), box, 4, 4.0)
    b = sweep_measure(cubic_asm(), box, 4, 4.0)
    assert a.sample_count == 6
    assert csv_lines(a.rows) == csv_lines(b.rows)
    assert csv_lines(a.rows)[0].startswith("N,eps,lambda")
    assert 0 <= a.bad_fraction <= 1


def test_parameter_box_grid_guard():
    with pytest.raises(ValueError):
        ParameterBox(grid=(1, 5))


def test_loglog_slope():
    xs = [2, 4, 8]
    assert loglog_slope(xs, [x ** -1.5 for x in xs]) == pytest.approx(-1.5)
    assert math.isnan(loglog_slope(xs, [1, 0, 1]))


def test_binomial_halfwidth():
    assert binomial_halfwidth(0, 0) == 0.0
    hw = binomial_halfwidth(5, 100)
    assert 0 < hw < 0.5
    assert binomial_halfwidth(50, 400) < binomial_halfwidth(50 // 4, 100)


# --- Melnikov

def test_melnikov_set_shrinks_with_gamma():
    asm = linear_asm()
    fr = [melnikov_initial_set(asm, 4, gamma=g).bad_fraction for g in (0.2, 0.02, 0.002, 0.0)]
    assert fr == sorted(fr, reverse=True) and fr[-1] == 0.0
    M = melnikov_initial_set(asm, 4, gamma=0.1)
    assert M.bad_fraction == pytest.approx(M.grid_fraction(), abs=2e-3)


def test_melnikov_constant_is_stable():
    out = melnikov_constant(linear_asm(), 4, [0.01, 0.02, 0.05])
    assert out["spread"] <= 2


def test_melnikov_closed_form_for_constant_potential():
    from smalldiv.nls_operator import OperatorAssembly, PotentialSpectrum
    asm = OperatorAssembly.linear(PotentialSpectrum(1.0, {}, 1.0, 1), 1, np.array([1.0]))
    M = melnikov_initial_set(asm, 2, tau1=2, gamma=0.1)
    r = 0.1 / 4
    # bad lam solve |lam l -+ (j^2 + 1)| < r for 1 <= |l| <= 2, |j| <= 2
    expect = []
    for l in (1, 2):
        for mu in (1.0, 2.0, 5.0):
            expect.append(((mu - r) / l, (mu + r) / l))
    expect = clip(merge(expect), 0.5, 1.5)
    assert len(M.intervals) == len(expect)
    assert measure_of(M.intervals) == pytest.approx(measure_of(expect))


def test_xi_monotonicity():
    out = xi_monotonicity(cubic_asm(), 0.01, 2, (0,), 0.3, np.linspace(0.7, 1.3, 7))
    assert out["passed"] and out["min_slope"] >= out["bound"]
