"""Nash-Moser type iteration for the forced NLS on growing Galerkin boxes.

Stage 0 solves the truncated problem on H_0 by the contraction
F_0(u) = eps L_0^{-1} P_0 (f(u) + g).  Stage n + 1 linearizes at u_n,
factorizes L_{n+1}(u_n) = P_{n+1}(L_omega - eps Df(u_n)) densely and iterates

    F_{n+1}(h) = -L_{n+1}^{-1} (r_n + R_n(h)),

where r_n is the projected residual of u_n and R_n(h) the quadratic Taylor
remainder.  The multiscale certificate of L_{n+1}^{-1} is computed alongside;
it never replaces the dense solve.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg as sla

from .lattice import SiteBox
from .measure import l2_inverse_gate, melnikov_initial_set
from .multiscale import HypothesisViolation, NeumannHypothesisError, ScaleParams, multiscale_invert
from .nls_operator import (OperatorAssembly, Problem, StateSpectrum, apply_Lomega,
                           assemble_submatrix, nonlinear_term)
from .smatrix import PerturbationHypothesisError, SiteMatrix, default_K0, snorm

log = logging.getLogger(__name__)


class Excluded(RuntimeError):
    """The parameter (eps, lam) fails a gate at some stage."""

    def __init__(self, stage, reason):
        self.stage = stage
        super().__init__(f"parameter excluded at stage {stage}: {reason}")


class Stagnation(RuntimeError):
    pass


@dataclass
class SolverConfig:
    N0: int = 4
    n_max: int = 3              # number of stages, stage 0 included
    eps: float = 1e-3
    lam: float = 0.9
    sigma: float | None = None
    gamma: float = 0.1
    tau1: float | None = None   # default d + nu
    tau: float = 4.0
    profile: str = "desk"
    tol: float = 1e-12          # relative increment of the inner fixed-point loops
    inner_max: int = 50
    target: float | None = None
    box_factor: int = 2
    certify: bool = True
    Ns: tuple | None = None     # explicit truncation schedule

    def schedule(self, n: int) -> int:
        """desk: N_n = N0 2^n; paper: N_n = N0^(2^n)."""
        if self.Ns is not None:
            return int(self.Ns[n])
        if self.profile == "paper":
            return int(self.N0 ** (2 ** n))
        return int(self.N0 * 2 ** n)

    def params(self, b: int) -> ScaleParams:
        return ScaleParams.paper(b) if self.profile == "paper" else ScaleParams.desk(b)

    def sigma_value(self, b: int) -> float:
        if self.sigma is not None:
            return self.sigma
        p = self.params(b)
        return p.tau_prime + p.delta * p.s1 + 2

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ResidualReport:
    stage: int
    r_proj: dict
    r_full: dict
    contraction: float = math.nan

    def to_dict(self):
        return {"stage": self.stage, "r_proj": {str(k): v for k, v in self.r_proj.items()},
                "r_full": {str(k): v for k, v in self.r_full.items()},
                "contraction": self.contraction}


@dataclass
class IterationState:
    n: int
    u: StateSpectrum
    norms: dict
    history: list = field(default_factory=list)

    @property
    def N(self):
        return self.u.N


# ---------------------------------------------------------------------------
# residuals

def galerkin_residual(u: StateSpectrum, problem: Problem, eps, lam, N) -> StateSpectrum:
    """P_N (L_omega u - eps (f(u) + g)) for u supported in the box of radius N."""
    base = OperatorAssembly.linear(problem.potential, problem.nu, problem.omega_bar)
    u = u.resize(N)
    Lu = apply_Lomega(u, lam, base, out_N=N)
    if eps == 0:
        return Lu
    return Lu - nonlinear_term(u, problem.nonlinearity, N).scale(eps)


def residual(u: StateSpectrum, problem: Problem, eps, lam, box_factor: int = 2, *,
             stage: int = -1, K0=None, s_list=None) -> ResidualReport:
    """Projected and full residual norms of (P_n) at s0 and s1."""
    par = ScaleParams.desk(u.b)
    K0 = default_K0(u.b, par.s0) if K0 is None else K0
    s_list = (par.s0, par.s1) if s_list is None else s_list
    rp = galerkin_residual(u, problem, eps, lam, u.N)
    rf = galerkin_residual(u, problem, eps, lam, box_factor * u.N)
    return ResidualReport(stage, {s: rp.norm(s, K0) for s in s_list},
                          {s: rf.norm(s, K0) for s in s_list})


# ---------------------------------------------------------------------------

def _box(N, nu, d):
    return SiteBox((0,) * nu, (0,) * d, N)


class Solver:
    """LU handle h -> L^{-1} h on a state box."""

    def __init__(self, A: SiteMatrix):
        self.A = A
        self.box = A.rows
        self.lu = sla.lu_factor(A.entries)

    def __call__(self, h: StateSpectrum) -> StateSpectrum:
        w = sla.lu_solve(self.lu, h.resize(self.box.radius).to_vector())
        return StateSpectrum.from_vector(w, self.box)

    def inverse(self) -> np.ndarray:
        return sla.lu_solve(self.lu, np.eye(self.A.shape[0]))


def _fixed_point(step, h0: StateSpectrum, tol, cap, K0, s, ref=0.0):
    """Iterate h <- step(h); returns (h, increments, contraction estimate).

    Increments are measured relative to max(||h||_s, ref).
    """
    h = h0
    incs = []
    for _ in range(cap):
        new = step(h)
        d = (new - h).norm(s, K0)
        incs.append(d)
        h = new
        scale = max(h.norm(s, K0), ref)
        if d <= tol * max(scale, 1e-300) or d == 0.0:
            break
        # ratios below the roundoff floor carry no information
        floor = 1e3 * np.finfo(float).eps * max(scale, 1e-300)
        if len(incs) >= 3 and incs[-2] > floor and d > floor and d >= incs[-2]:
            raise Stagnation(f"inner contraction ratio {d / incs[-2]:.3g} >= 1")
    else:
        raise Stagnation(f"fixed point not converged in {cap} iterations")
    ratios = [incs[k + 1] / incs[k] for k in range(min(3, len(incs) - 1)) if incs[k] > 0]
    return h, incs, (max(ratios) if ratios else 0.0)


def init_stage(cfg: SolverConfig, problem: Problem) -> IterationState:
    """u_0 on H_0 by the contraction F_0, after the first Melnikov gate."""
    nu, d, b = problem.nu, problem.d, problem.nu + problem.d
    par = cfg.params(b)
    K0 = default_K0(b, par.s0)
    N0 = cfg.schedule(0)
    base = OperatorAssembly.linear(problem.potential, nu, problem.omega_bar)
    tau1 = d + nu if cfg.tau1 is None else cfg.tau1
    mel = melnikov_initial_set(base, N0, tau1, cfg.gamma)
    if not mel(cfg.lam):
        raise Excluded(0, f"first Melnikov condition fails at lambda = {cfg.lam}")
    box = _box(N0, nu, d)
    L0 = Solver(assemble_submatrix(base, 0.0, cfg.lam, 0.0, box))
    L0inv = SiteMatrix(box, box, L0.inverse())
    L0_s1 = snorm(L0inv, par.s1, K0)
    L0_bound = 2 * N0 ** (tau1 + par.s1) / cfg.gamma
    u = StateSpectrum.zeros(nu, d, N0)
    incs, ratio = [], 0.0
    if cfg.eps != 0:
        def F0(v):
            return L0(nonlinear_term(v, problem.nonlinearity, N0).scale(cfg.eps))
        u, incs, ratio = _fixed_point(F0, u, cfg.tol, cfg.inner_max, K0, par.s1)
    drift = u.reality_drift()
    u = u.restore()
    sigma = cfg.sigma_value(b)
    rho0 = N0 ** (-sigma)
    rec = {"stage": 0, "N": N0, "h_s1": u.norm(par.s1, K0), "inner_increments": incs,
           "contraction": ratio, "reality_drift": drift, "L_inv_s1": L0_s1,
           "L_inv_bound": L0_bound, "rho": rho0, "above_rho": bool(u.norm(par.s1, K0) > rho0),
           "melnikov_bad_fraction": mel.bad_fraction}
    rep = residual(u, problem, cfg.eps, cfg.lam, cfg.box_factor, stage=0, K0=K0)
    rep.contraction = ratio
    rec["residual"] = rep.to_dict()
    norms = {s: u.norm(s, K0) for s in (par.s0, par.s1, par.S)}
    return IterationState(0, u, norms, [rec])


def _window_scale(N_next, chi):
    """Smallest window scale N >= 3 with 4 N^chi >= diam H_{n+1} = 2 N_{n+1}."""
    n = 3
    while 4 * n ** chi < 2 * N_next:
        n += 1
    return n


def linearized_inverse(state: IterationState, cfg: SolverConfig, problem: Problem, N_next: int):
    """(solve handle, certificate dict) for L_{n+1}(u_n) on H_{n+1}."""
    nu, d, b = problem.nu, problem.d, problem.nu + problem.d
    par = cfg.params(b)
    K0 = default_K0(b, par.s0)
    asm = problem.assembly(state.u) if cfg.eps else \
        OperatorAssembly.linear(problem.potential, nu, problem.omega_bar)
    gate = l2_inverse_gate(asm, cfg.eps, cfg.lam, N_next, cfg.tau)
    if not gate.passed:
        raise Excluded(state.n + 1, f"L2 gate fails at N = {N_next} "
                                    f"(min |eig| = {gate.min_abs_eig:.3g} < N^-tau)")
    A = assemble_submatrix(asm, cfg.eps, cfg.lam, 0.0, _box(N_next, nu, d))
    solver = Solver(A)
    cert = {"gate": gate.method, "gate_min_abs_eig": gate.min_abs_eig}
    if cfg.certify:
        cert.update(_certificate(A, par, K0, N_next))
    return solver, cert


def _certificate(A, par, K0, N_next):
    Nw = _window_scale(N_next, par.chi)
    s_grid = [par.s1, par.S]
    out = {"window_scale": Nw}
    try:
        Ainv, c = multiscale_invert(A, par, N=Nw, K0=K0, s_grid=s_grid, strict=False)
    except (NeumannHypothesisError, PerturbationHypothesisError, HypothesisViolation) as exc:
        out.update({"multiscale": "hypothesis failure", "error": str(exc), "pass": False})
        return out
    bound = {s: N_next ** (par.tau_prime + par.delta * s) for s in s_grid}
    out.update({"multiscale": "ok", "exact": c.extras["exact"],
                "frobenius_rel_error": c.extras["frobenius_rel_error"],
                "bad": c.extras["bad"], "violations": c.extras["violations"],
                "measured": {str(s): c.measured[s] for s in s_grid},
                "bound": {str(s): bound[s] for s in s_grid},
                "certificate_pass": bool(c.passed),
                "pass": bool(all(c.measured[s] <= bound[s] for s in s_grid))})
    return out


def iterate_stage(state: IterationState, cfg: SolverConfig, problem: Problem) -> IterationState:
    nu, d, b = problem.nu, problem.d, problem.nu + problem.d
    par = cfg.params(b)
    K0 = default_K0(b, par.s0)
    n1 = state.n + 1
    N1 = cfg.schedule(n1)
    solver, cert = linearized_inverse(state, cfg, problem, N1)
    u = state.u.resize(N1)
    r = galerkin_residual(u, problem, cfg.eps, cfg.lam, N1)
    r_norm = r.norm(par.s1, K0)
    h = StateSpectrum.zeros(nu, d, N1)
    incs, ratio = [], 0.0
    if r_norm > 0:
        # chord form of F_{n+1}: h - L^{-1} P(L_omega (u + h) - eps F(u + h))
        def F(hh):
            return hh - solver(galerkin_residual(u + hh, problem, cfg.eps, cfg.lam, N1))
        h, incs, ratio = _fixed_point(F, h, cfg.tol, cfg.inner_max, K0, par.s1,
                                      ref=u.norm(par.s1, K0))
    new = u + h
    drift = new.reality_drift()
    if drift > 1e-10:
        log.warning("reality drift %.3g at stage %d; restoring", drift, n1)
    new = new.restore()
    sigma = cfg.sigma_value(b)
    rec = {"stage": n1, "N": N1, "r_proj_in_s1": r_norm, "h_s1": h.norm(par.s1, K0),
           "h_S": h.norm(par.S, K0), "rho": N1 ** (-sigma - 1),
           "inner_increments": incs, "contraction": ratio, "reality_drift": drift,
           "drift_flag": bool(drift > 1e-10), "certificate": cert}
    rep = residual(new, problem, cfg.eps, cfg.lam, cfg.box_factor, stage=n1, K0=K0)
    rep.contraction = ratio
    rec["residual"] = rep.to_dict()
    norms = {s: new.norm(s, K0) for s in (par.s0, par.s1, par.S)}
    return IterationState(n1, new, norms, state.history + [rec])


def run(cfg: SolverConfig, problem: Problem):
    """(final state, verdict) with verdict in converged / excluded-at-stage-n / stagnated."""
    b = problem.nu + problem.d
    par = cfg.params(b)
    try:
        state = init_stage(cfg, problem)
    except Excluded as exc:
        return _empty(cfg, problem, str(exc)), f"excluded-at-stage-{exc.stage}"
    except Stagnation as exc:
        return _empty(cfg, problem, str(exc)), "stagnated"
    while True:
        full = state.history[-1]["residual"]["r_full"][str(par.s1)]
        target = cfg.target if cfg.target is not None else 1e-10 * (1 + state.norms[par.s1])
        if full <= target and (cfg.eps == 0 or state.n + 1 >= cfg.n_max):
            return state, "converged"
        if state.n + 1 >= cfg.n_max:
            return state, "stagnated"
        try:
            state = iterate_stage(state, cfg, problem)
        except Excluded as exc:
            state.history.append({"stage": exc.stage, "error": str(exc)})
            return state, f"excluded-at-stage-{exc.stage}"
        except Stagnation as exc:
            state.history.append({"stage": state.n + 1, "error": str(exc)})
            return state, "stagnated"


def _empty(cfg, problem, msg):
    u = StateSpectrum.zeros(problem.nu, problem.d, cfg.schedule(0))
    return IterationState(0, u, {}, [{"stage": 0, "error": msg}])


# ---------------------------------------------------------------------------
# diagnostics

def linear_response(problem: Problem, eps, lam, N) -> StateSpectrum:
    """eps L_omega^{-1} g on the box of radius N."""
    base = OperatorAssembly.linear(problem.potential, problem.nu, problem.omega_bar)
    solver = Solver(assemble_submatrix(base, 0.0, lam, 0.0, _box(N, problem.nu, problem.d)))
    zero = StateSpectrum.zeros(problem.nu, problem.d, N)
    return solver(nonlinear_term(zero, problem.nonlinearity, N)).scale(eps)


def increments(state: IterationState) -> list:
    return [rec["h_s1"] for rec in state.history if "h_s1" in rec]


def superlinear(incs) -> bool:
    """Strictly decreasing increments with decreasing consecutive ratios."""
    if len(incs) < 3 or any(x <= 0 for x in incs):
        return False
    ratios = [incs[k + 1] / incs[k] for k in range(len(incs) - 1)]
    return all(r < 1 for r in ratios) and all(ratios[k + 1] < ratios[k]
                                              for k in range(len(ratios) - 1))


def taylor_remainder(u: StateSpectrum, h: StateSpectrum, problem: Problem, s, K0, R=None):
    """||F(u + h) - F(u) - DF(u) h||_s with F(u) = f(rho) u (forcing dropped)."""
    from .nls_operator import linearized_action
    nl = problem.nonlinearity
    R = 3 * max(u.N, h.N) if R is None else R
    Fu = nonlinear_term(u, nl, R, forcing=False)
    Fuh = nonlinear_term(u + h, nl, R, forcing=False)
    Dh = linearized_action(u, h, nl, R)
    return (Fuh - Fu - Dh).norm(s, K0)


def smoothing_check(u: StateSpectrum, N, s, r, K0=1.0) -> dict:
    """||P_N u||_{s+r} <= N^r ||u||_s and ||P_N^perp u||_s <= N^{-r} ||u||_{s+r}."""
    P = u.resize(N)
    Pperp = u - P.resize(u.N)
    return {"low": (P.norm(s + r, K0), N ** r * u.norm(s, K0)),
            "high": (Pperp.norm(s, K0), N ** (-r) * u.norm(s + r, K0))}


def run_record(cfg: SolverConfig, problem: Problem, state: IterationState, verdict, seconds=None):
    return {"config": cfg.to_dict(), "problem": problem.name, "verdict": verdict,
            "final_N": state.u.N, "norms": {str(k): v for k, v in state.norms.items()},
            "history": state.history, "seconds": seconds}
