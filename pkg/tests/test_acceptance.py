"""Acceptance criteria, each at its stated tolerance.

A summary line per criterion is printed at the end of the pytest run.
"""
import time

import numpy as np
import pytest

from smalldiv import cli
from smalldiv import nash_moser as nm
from smalldiv.constants import get_constants, property_suite, random_site_matrix
from smalldiv.lattice import SiteBox
from smalldiv.measure import (ParameterBox, free_theta_lines, measure_scaling, melnikov_constant,
                              oversampling_audit)
from smalldiv.multiscale import ScaleParams, multiscale_invert, planted_instance
from smalldiv.nls_operator import (StateSpectrum, assemble_submatrix, covariance_check,
                                   diagonal_scale, preset)
from smalldiv.separation import BoxGoodness, build_bad_clusters, chain_partition
from smalldiv.smatrix import SiteMatrix, default_K0, left_inverse_perturbed, snorm

from oracles import brute_components

SEED = 20240611
LAM = 0.9
PAR = ScaleParams.desk(2)


def bump_state():
    plus = np.zeros((9, 9), complex)
    plus[4, 3] = plus[4, 5] = plus[3, 4] = plus[5, 4] = 0.05
    return StateSpectrum.from_plus(plus, 1, 1)


@pytest.fixture(scope="module")
def cubic():
    return preset("cubic-d1")


@pytest.fixture(scope="module")
def nm_run(cubic):
    t = time.perf_counter()
    state, verdict = nm.run(nm.SolverConfig(), cubic)
    return state, verdict, time.perf_counter() - t


def test_01_snorm_algebra(acceptance):
    t = time.perf_counter()
    consts = get_constants(1, 1, 2.0, 8.0, SEED)
    n_alg, f_alg = property_suite(consts, SEED, 1000, s_list=[])         # calibration corpus
    n_int, f_int = property_suite(consts, SEED + 1, 1000)               # disjoint corpus
    dt = time.perf_counter() - t
    ok = not f_alg and not f_int and dt <= 60
    acceptance(1, ok, f"{n_alg} algebra + {n_int} disjoint checks, "
                      f"{len(f_alg) + len(f_int)} violations, {dt:.1f} s")
    assert not f_alg, str(f_alg[0])
    assert not f_int, str(f_int[0])
    assert dt <= 60


def test_02_left_inverse_perturbation(acceptance):
    rng = np.random.default_rng(SEED + 2)
    K0, s0 = default_K0(2, 2.0), 2.0
    C, B = SiteBox((0,), (0,), 2), SiteBox((0,), (0,), 1)
    worst_res, worst_ratio = 0.0, 0.0
    for _ in range(200):
        M = random_site_matrix(rng, C, B, "decay")
        Minv = SiteMatrix(B, C, np.linalg.pinv(M.entries))
        E = random_site_matrix(rng, C, B)
        if snorm(E, s0, K0) == 0:
            continue
        P = E.scale(rng.uniform(0.05, 0.5) / (snorm(Minv, s0, K0) * snorm(E, s0, K0)))
        NP = left_inverse_perturbed(Minv, P, K0=K0, s0=s0)
        res = np.abs(NP.entries @ (M.entries + P.entries) - np.eye(len(B))).max()
        worst_res = max(worst_res, res)
        worst_ratio = max(worst_ratio, snorm(NP, s0, K0) / snorm(Minv, s0, K0))
    ok = worst_res <= 1e-9 and worst_ratio <= 2
    acceptance(2, ok, f"200 instances, max |N_P(M+P) - I| = {worst_res:.2e}, "
                      f"max |N_P|/|N| = {worst_ratio:.3f}")
    assert ok


def test_03_covariance(acceptance, cubic):
    rng = np.random.default_rng(SEED + 3)
    worst = 0.0
    for _ in range(100):
        plus = 0.2 * (rng.standard_normal((7, 7)) + 1j * rng.standard_normal((7, 7)))
        asm = cubic.assembly(StateSpectrum.from_plus(plus, 1, 1))
        eps, lam, theta = rng.uniform(0, 0.5), rng.uniform(0.5, 1.5), rng.uniform(-3, 3)
        N, l1, j1 = int(rng.integers(1, 9)), int(rng.integers(-8, 9)), int(rng.integers(-4, 5))
        dev = covariance_check(asm, eps, lam, theta, N, l1, j1)
        scale = diagonal_scale(asm, lam, theta, SiteBox((l1,), (j1,), N))
        worst = max(worst, dev / scale)
    acceptance(3, worst <= 1e-12, f"100 instances, max deviation / scale = {worst:.2e}")
    assert worst <= 1e-12


def test_04_multiscale_exactness(acceptance):
    rng = np.random.default_rng(SEED + 4)
    K0 = default_K0(2, PAR.s0)
    errs, passes = [], 0
    for _ in range(50):
        A, info = planted_instance(rng, 3, PAR)
        _, cert = multiscale_invert(A, PAR, N=3, K0=K0, strict=False)
        assert cert.extras["bad"] == len(info["seeds"]) > 0
        errs.append(cert.extras["frobenius_rel_error"])
        passes += bool(cert.passed)
    worst = max(errs)
    ok = worst <= 1e-7 and passes >= 45
    acceptance(4, ok, f"50 planted instances, max Frobenius error {worst:.2e}, "
                      f"certificate passes {passes}/50")
    assert worst <= 1e-7
    assert passes >= 45


def _resonant_thetas(asm, eps, N, l0s, per):
    out = []
    for l0 in l0s:
        box = SiteBox((l0,), (0,), N)
        A = assemble_submatrix(asm, eps, LAM, 0.0, box).entries
        Y = np.where(box.bit == 0, -1.0, 1.0)
        th = -np.linalg.eigvals(Y[:, None] * A)
        th = np.sort(th[np.abs(th.imag) < 1e-9].real)
        out += th[np.argsort(np.abs(th))[:per]].tolist()
    return out


def test_05_cluster_contract(acceptance, cubic):
    N, Np, eps = 4, 16, 0.01
    asm = cubic.assembly(bump_state())
    K0 = default_K0(2, PAR.s0)
    thetas = np.linspace(-2.0 * N * N, 2.0 * N * N, 950).tolist()
    thetas += _resonant_thetas(asm, eps, N, range(-5, 5), 5)
    assert len(thetas) == 1000
    g = BoxGoodness(asm, eps, LAM, PAR, N, K0)
    bad, nonempty, bfs_checked, worst_diam, worst_sep = [], 0, 0, 0, np.inf
    for th in thetas:
        part = build_bad_clusters(asm, PAR, eps, LAM, th, N, Np, K0=K0, goodness=g)
        if not part.passed:
            bad.append(th)
        if len(part):
            nonempty += 1
            worst_diam = max(worst_diam, part.diam_max)
            if len(part) > 1:
                worst_sep = min(worst_sep, part.min_sep)
            # oracle: chain components of the singular set by brute-force BFS
            S = part.components[0]
            for c in part.components[1:]:
                S = S.union(c)
            if len(S) <= 500:
                got = sorted(sorted(S.lookup(c.array).tolist())
                             for c in chain_partition(S, part.M).clusters)
                assert got == brute_components(S.array, part.M)
                bfs_checked += 1
    ok = not bad and worst_diam <= N ** PAR.C1 and worst_sep > N * N
    acceptance(5, ok, f"1000 theta, {nonempty} nonempty partitions, max diam {worst_diam} "
                      f"<= {N ** PAR.C1}, min sep {worst_sep}, {bfs_checked} BFS-checked")
    assert not bad, f"partition contract fails at theta = {bad[:5]}"
    assert nonempty > 0 and bfs_checked == nonempty


def test_06_eigenvalue_certification(acceptance, cubic):
    rng = np.random.default_rng(SEED + 6)
    N, tau, eps = 4, 4.0, 0.01
    asm = cubic.assembly(bump_state())
    violations, bad_samples, samples = 0, 0, 0
    for k in range(100):
        j0 = (int(rng.integers(-3, 4)),)
        lam = float(rng.uniform(0.5, 1.5))
        if k % 2 == 0:
            # centred near a free resonance so the segment is not trivially good
            c = free_theta_lines(asm, lam, N, j0)
            mid = float(rng.choice(c)) + rng.uniform(-0.01, 0.01)
        else:
            mid = float(rng.uniform(-2.0 * N * N, 2.0 * N * N))
        out = oversampling_audit(asm, eps, lam, j0, N, tau, (mid - 0.02, mid + 0.02))
        violations += out["violations"]
        bad_samples += out["bad_samples"]
        samples += out["samples"]
    acceptance(6, violations == 0, f"100 segments, {samples} audit samples "
                                   f"({bad_samples} below threshold), {violations} crossings")
    assert violations == 0 and bad_samples > 0


def test_07_measure_scaling(acceptance, cubic):
    t = time.perf_counter()
    asm = cubic.assembly(bump_state())
    sc = measure_scaling(asm, ParameterBox((0.0, 1e-3), grid=(3, 41)), [4, 8, 16], 4.0)
    mel = melnikov_constant(cubic.assembly(), 4, [0.05, 0.1, 0.2])
    dt = time.perf_counter() - t
    ok = sc["slope"] <= -0.5 and mel["spread"] <= 2 and dt <= 600
    acceptance(7, ok, f"bad fractions {[f'{x:.2e}' for x in sc['fraction']]}, slope "
                      f"{sc['slope']:.2f}; Melnikov C spread {mel['spread']:.3f}, {dt:.1f} s")
    assert sc["slope"] <= -0.5
    assert mel["spread"] <= 2
    assert dt <= 600


def test_08_nash_moser_convergence(acceptance, cubic, nm_run):
    t = time.perf_counter()
    state, verdict, dt_run = nm_run
    r_full = state.history[-1]["residual"]["r_full"]
    incs = nm.increments(state)
    zero, v0 = nm.run(nm.SolverConfig(eps=0.0), cubic)
    es, errs = [1e-3, 5e-4, 2.5e-4], []
    for e in es:
        st, v = nm.run(nm.SolverConfig(eps=e, certify=False), cubic)
        assert v == "converged"
        errs.append((st.u - nm.linear_response(cubic, e, LAM, st.u.N)).norm(2.0, default_K0(2, 2.0)))
    slope = float(np.polyfit(np.log(es), np.log(errs), 1)[0])
    dt = dt_run + time.perf_counter() - t
    zero_exact = v0 == "converged" and not np.any(zero.u.to_vector())
    ok = (verdict == "converged" and state.n == 2 and max(r_full.values()) <= 1e-8
          and nm.superlinear(incs) and zero_exact and slope >= 1.8 and dt <= 120)
    acceptance(8, ok, f"{verdict} at N={state.u.N}, r_full {max(r_full.values()):.1e}, "
                      f"increments {[f'{x:.1e}' for x in incs]}, eps=0 exact {zero_exact}, "
                      f"slope {slope:.2f}, {dt:.1f} s")
    assert verdict == "converged" and state.n == 2
    assert max(r_full.values()) <= 1e-8
    assert nm.superlinear(incs)
    assert zero_exact
    assert slope >= 1.8
    assert dt <= 120


def test_09_reality_invariant(acceptance, nm_run):
    state = nm_run[0]
    drifts = [rec["reality_drift"] for rec in state.history]
    ok = len(drifts) == 3 and max(drifts) <= 1e-10
    acceptance(9, ok, f"drift before restoration per stage {[f'{x:.1e}' for x in drifts]}")
    assert ok


def test_10_sweep_determinism(acceptance, tmp_path):
    cfgp = tmp_path / "sweep.json"
    cfgp.write_text('{"schema_version": 1, "sweep": {"grid": [3, 11], "Ns": [4, 8]}}')
    outs = []
    for name in ("a", "b"):
        assert cli.main(["sweep", "--config", str(cfgp), "--out", str(tmp_path / name)]) == 0
        outs.append((tmp_path / name / "sweep.csv").read_bytes())
    ok = outs[0] == outs[1]
    acceptance(10, ok, f"two sweeps, {len(outs[0].splitlines()) - 1} rows, byte-identical {ok}")
    assert ok
