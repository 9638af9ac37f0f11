"""The multiscale step: from N-good windows and an L2 bound to decay of A^{-1}.

Sites of E split into good sites G (regular, or N-regular through a window
F whose inverse is N-good) and bad sites B.  On G the system Au = h is
solved for u_G in terms of u_B (semi-reduction), leaving A' u_B = Z h on the
bad sites (reduction).  A left inverse V of A' with decay is built from the
cluster structure of B, and

    (A^{-1})_B = V Z,        (A^{-1})_G = M + N V Z.

All steps are exact factorizations up to Neumann truncation, so the output is
compared with the dense inverse.
"""
from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla

from .lattice import SiteBox, SiteSet
from .smatrix import (
    PerturbationHypothesisError, SiteMatrix, default_K0, l2_opnorm, left_inverse_perturbed,
    restrict, snorm,
)

log = logging.getLogger(__name__)


class NeumannHypothesisError(ValueError):
    """|||Gamma^G|||_{s0} > 1/2 in the semi-reduction."""

    def __init__(self, norm):
        self.norm = norm
        super().__init__(f"semi-reduction needs |||Gamma^G|||_s0 <= 1/2, measured {norm:.4g}; "
                         "Theta is too small for this off-diagonal size")


class HypothesisViolation(ValueError):
    def __init__(self, violations: dict):
        self.violations = violations
        super().__init__("multiscale hypotheses violated: " + "; ".join(
            f"{k}: {v}" for k, v in violations.items()))


# ---------------------------------------------------------------------------

@dataclass
class ScaleParams:
    delta: float
    tau: float
    tau_prime: float
    chi: float
    C1: float
    Theta: float
    s0: float
    s1: float
    S: float
    b: int
    profile: str = "desk"

    @property
    def kappa(self) -> float:
        return self.tau_prime + self.b + self.s0

    def inequalities(self) -> dict:
        """name -> (lhs, rhs, holds) for the exponent relations of the multiscale step."""
        b, k = self.b, self.kappa
        rows = {
            "tau_prime > 2 tau + b + 1": (self.tau_prime, 2 * self.tau + b + 1),
            "chi (tau' - 2 tau - b) > 3 (kappa + (s0 + b) C1)":
                (self.chi * (self.tau_prime - 2 * self.tau - b), 3 * (k + (self.s0 + b) * self.C1)),
            "chi delta > C1": (self.chi * self.delta, self.C1),
            "s1 > 3 kappa + chi (tau + b) + C1 s0":
                (self.s1, 3 * k + self.chi * (self.tau + b) + self.C1 * self.s0),
            "0 < delta < 1/2": (0.5 - self.delta, 0.0),
        }
        return {n: (lhs, rhs, bool(lhs > rhs)) for n, (lhs, rhs) in rows.items()}

    def validate(self):
        bad = {n: f"{l:.4g} vs {r:.4g}" for n, (l, r, ok) in self.inequalities().items() if not ok}
        if bad and self.profile == "paper":
            raise ValueError(f"profile 'paper' violates {bad}")
        for n, msg in bad.items():
            log.info("desk profile: %s fails (%s), reported only", n, msg)
        return bad

    @classmethod
    def desk(cls, b: int, Theta: float = 10.0):
        return cls(0.25, 4.0, 14.0, 2.0, 2.0, Theta, 2.0, 5.0, 8.0, b, "desk")

    @classmethod
    def paper(cls, b: int, tau: float | None = None, Theta: float = 10.0, s0: float | None = None):
        """Exponents chosen to satisfy every relation, with the smallest admissible margins."""
        s0 = float(b // 2 + 1) if s0 is None else s0
        tau = float(b + 2) if tau is None else tau
        delta, C1 = 0.25, 2.0
        tp = 2 * tau + b + 2
        kappa = tp + b + s0
        chi = math.floor(max(C1 / delta, 3 * (kappa + (s0 + b) * C1) / (tp - 2 * tau - b))) + 1
        s1 = math.floor(3 * kappa + chi * (tau + b) + C1 * s0) + 1
        S = 12 * tp + 8 * (s1 + 1)
        p = cls(delta, tau, tp, float(chi), C1, Theta, s0, float(s1), float(S), b, "paper")
        p.validate()
        return p

    def with_theta(self, Theta):
        return replace(self, Theta=float(Theta))

    def s_grid(self, lo=None, hi=None, step=0.5):
        lo = self.s0 if lo is None else lo
        hi = self.s1 if hi is None else hi
        n = int(round((hi - lo) / step))
        return [lo + k * step for k in range(n + 1)]


def default_theta(T: SiteMatrix, s1: float, K0: float) -> float:
    """Theta = 10 (1 + |||T|||_{s1})."""
    return 10.0 * (1.0 + snorm(T, s1, K0))


@dataclass
class GoodnessCertificate:
    N: float
    s_grid: list
    measured: dict
    bound: dict
    passed: bool
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def f(x):
            return float(x) if math.isfinite(x) else str(x)
        return {"N": self.N, "s_grid": list(self.s_grid),
                "measured": {str(s): f(v) for s, v in self.measured.items()},
                "bound": {str(s): f(v) for s, v in self.bound.items()},
                "pass": bool(self.passed),
                "extras": {k: (f(v) if isinstance(v, float) else v) for k, v in self.extras.items()}}


def _inverse(A: np.ndarray):
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            lu = sla.lu_factor(A, check_finite=True)
    except (ValueError, sla.LinAlgError):
        return None
    if np.min(np.abs(np.diag(lu[0]))) == 0.0:
        return None
    return sla.lu_solve(lu, np.eye(A.shape[0]))


def n_good_certificate(A: SiteMatrix, N: float, params: ScaleParams, K0: float,
                       s_grid=None, Ainv: SiteMatrix | None = None) -> GoodnessCertificate:
    """A is N-good: invertible, diam <= 4N and |||A^{-1}|||_s <= N^{tau' + delta s}."""
    s_grid = params.s_grid() if s_grid is None else list(s_grid)
    bound = {s: N ** (params.tau_prime + params.delta * s) for s in s_grid}
    diam = A.rows.diameter()
    if Ainv is None:
        inv = _inverse(A.entries)
        if inv is None:
            return GoodnessCertificate(N, s_grid, {s: math.inf for s in s_grid}, bound, False,
                                       {"singular": True, "diameter": diam})
        Ainv = SiteMatrix(A.cols, A.rows, inv)
    measured = {s: snorm(Ainv, s, K0) for s in s_grid}
    ok = all(measured[s] <= bound[s] for s in s_grid) and diam <= 4 * N
    return GoodnessCertificate(N, s_grid, measured, bound, ok, {"diameter": diam})


def direct_subcertifier(N, params, K0, s_grid=None):
    def cert(AF: SiteMatrix):
        return n_good_certificate(AF, N, params, K0, s_grid)
    return cert


# ---------------------------------------------------------------------------
# classification

@dataclass
class Window:
    center: tuple
    sites: SiteSet
    cert: GoodnessCertificate
    margin: np.ndarray   # d(k, E \ F) for every k in E


@dataclass
class SiteClassification:
    E: SiteSet
    regular: SiteSet
    N_regular: SiteSet
    good: SiteSet
    bad: SiteSet
    witness: dict            # index into E -> window center, for N-regular sites
    windows: dict            # center -> Window

    def summary(self) -> dict:
        return {"E": len(self.E), "regular": len(self.regular), "N_regular": len(self.N_regular),
                "bad": len(self.bad),
                "windows": len(self.windows),
                "good_windows": sum(w.cert.passed for w in self.windows.values())}


def _window_centers(E: SiteSet, N: int):
    lo = np.floor(E.spatial.min(axis=0) / N).astype(int) * N
    hi = np.ceil(E.spatial.max(axis=0) / N).astype(int) * N
    axes = [np.arange(a, b_ + 1, N) for a, b_ in zip(lo, hi)]
    return np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)


def _window(A: SiteMatrix, c, N, subcertifier) -> Window:
    E = A.rows
    inside = (np.abs(E.spatial - c) <= 2 * N).all(axis=1)
    F = E.subset(inside)
    rest = E.subset(~inside)
    margin = rest.distance_to(E.array)
    if len(F) == 0:
        cert = GoodnessCertificate(N, [], {}, {}, False, {"empty": True})
    else:
        cert = subcertifier(restrict(A, F, F))
    return Window(tuple(int(x) for x in c), F, cert, margin)


def classify_sites(A: SiteMatrix, N: int, params: ScaleParams, subcertifier=None,
                   K0: float | None = None) -> SiteClassification:
    """Regular sites by |A_k^k| >= Theta; N-regular ones by a stride-N search over windows."""
    E = A.rows
    if A.cols != E:
        raise ValueError("classification needs a square matrix on one site set")
    K0 = default_K0(E.b, params.s0) if K0 is None else K0
    subcertifier = subcertifier or direct_subcertifier(N, params, K0)
    diag = np.abs(np.diag(A.entries))
    regular = diag >= params.Theta
    centers = _window_centers(E, N)
    windows: dict = {}
    witness = {}
    nreg = np.zeros(len(E), dtype=bool)
    for k in np.flatnonzero(~regular):
        dist = np.abs(centers - E.spatial[k]).max(axis=1)
        for ci in np.argsort(dist, kind="stable"):
            if dist[ci] > N:
                break
            c = tuple(int(x) for x in centers[ci])
            if c not in windows:
                windows[c] = _window(A, centers[ci], N, subcertifier)
            w = windows[c]
            if w.margin[k] >= N and w.cert.passed:
                nreg[k] = True
                witness[int(k)] = c
                break
    good = regular | nreg
    return SiteClassification(E, E.subset(regular), E.subset(nreg), E.subset(good),
                              E.subset(~good), witness, windows)


# ---------------------------------------------------------------------------
# reductions

@dataclass
class ReductionReport:
    gamma_s0: float
    measured: dict = field(default_factory=dict)


def semi_reduce(A: SiteMatrix, classification: SiteClassification, params: ScaleParams,
                K0: float | None = None):
    """(M, N, report) with u_G = N u_B + M h whenever A u = h."""
    E = A.rows
    K0 = default_K0(E.b, params.s0) if K0 is None else K0
    G, B = classification.good, classification.bad
    gi = E.lookup(G.array)
    Afull = A.entries
    nG = len(G)
    Gam = np.zeros((nG, len(E)), dtype=complex)
    L = np.zeros((nG, len(E)), dtype=complex)
    reg = classification.regular.contains(G.array)
    for r in np.flatnonzero(reg):
        k = gi[r]
        a = Afull[k, k]
        Gam[r] = Afull[k] / a
        Gam[r, k] = 0.0
        L[r, k] = 1.0 / a
    # N-regular rows, processed window by window
    by_window: dict = {}
    for r in np.flatnonzero(~reg):
        by_window.setdefault(classification.witness[int(gi[r])], []).append(r)
    for c, rs in by_window.items():
        F = classification.windows[c].sites
        fi = E.lookup(F.array)
        out = np.setdiff1d(np.arange(len(E)), fi)
        AFinv = _inverse(Afull[np.ix_(fi, fi)])
        pos = F.lookup(E.array[gi[rs]])
        Gam[np.ix_(rs, out)] = AFinv[pos] @ Afull[np.ix_(fi, out)]
        L[np.ix_(rs, fi)] = AFinv[pos]
    bi = E.lookup(B.array)
    GamG = SiteMatrix(G, G, Gam[:, gi])
    g_s0 = snorm(GamG, params.s0, K0)
    if g_s0 > 0.5:
        raise NeumannHypothesisError(g_s0)
    IG = np.eye(nG) + GamG.entries
    lu = sla.lu_factor(IG)
    Mmat = SiteMatrix(G, E, sla.lu_solve(lu, L))
    Nmat = SiteMatrix(G, B, -sla.lu_solve(lu, Gam[:, bi]) if len(B) else np.zeros((nG, 0)))
    rep = ReductionReport(g_s0, {"M_s0": snorm(Mmat, params.s0, K0),
                                 "N_s0": snorm(Nmat, params.s0, K0) if len(B) else 0.0,
                                 "Gamma_G_s0": g_s0})
    return Mmat, Nmat, rep


def reduce_bad(A: SiteMatrix, Mmat: SiteMatrix, Nmat: SiteMatrix, regular: SiteSet | None = None,
               Ainv: np.ndarray | None = None):
    """A' = A^B + A^G N and Z = I_E - A^G M (A' u_B = Z h), with consistency checks."""
    E = A.rows
    G, B = Mmat.rows, Nmat.cols
    gi, bi = E.lookup(G.array), E.lookup(B.array)
    AG = A.entries[:, gi]
    Ap = SiteMatrix(E, B, A.entries[:, bi] + AG @ Nmat.entries)
    Z = SiteMatrix(E, E, np.eye(len(E)) - AG @ Mmat.entries)
    checks = {}
    scale = max(float(np.abs(np.diag(A.entries)).max()), 1.0)
    if regular is not None and len(regular):
        ri = E.lookup(regular.array)
        checks["regular_rows"] = float(max(np.abs(Ap.entries[ri]).max(initial=0.0),
                                           np.abs(Z.entries[ri]).max(initial=0.0))) / scale
    if Ainv is not None and len(B):
        checks["left_inverse"] = float(np.abs(Ainv[bi] @ Ap.entries - np.eye(len(B))).max())
    return Ap, Z, checks


@dataclass
class LeftInverseReport:
    step1_product: float
    step3_product: float
    V_s0: float
    W0_s0: float
    V_left_residual: float
    localization_residual: float
    bound_exponent: float


def _cluster_masks(rows: SiteSet, clusters, radius):
    """For each cluster, the rows within `radius` of it."""
    return [c.distance_to(rows.array) <= radius for c in clusters]


def left_inverse_decay(Aprime: SiteMatrix, clusters, params: ScaleParams, *, AinvB: SiteMatrix,
                       N: int, K0: float | None = None):
    """A left inverse V of A' built through the cluster-local matrix D.

    `AinvB` is a known left inverse of A' (the B rows of A^{-1}).
    """
    E, B = Aprime.rows, Aprime.cols
    K0 = default_K0(E.b, params.s0) if K0 is None else K0
    clusters = list(getattr(clusters, "clusters", clusters))
    colset = np.zeros((len(clusters), len(B)), dtype=bool)
    for a, c in enumerate(clusters):
        colset[a] = c.contains(B.array)
    if not np.array_equal(colset.sum(axis=0), np.ones(len(B), dtype=int)):
        raise ValueError("clusters must partition the bad sites")
    near = np.array(_cluster_masks(E, clusters, N * N / 4.0)).reshape(len(clusters), len(E))
    # mask[k', k] = True when (k, k') lies in some Omega_a x Omega'_a
    mask = np.einsum("ar,ac->rc", near.astype(int), colset.astype(int)) > 0
    D = SiteMatrix(E, B, np.where(mask, Aprime.entries, 0))
    R = Aprime - D
    # step I: perturb the known left inverse of A' (L2 hypothesis)
    try:
        W = left_inverse_perturbed(AinvB, -R, K0=K0, s0=params.s0, norm="l2")
    except PerturbationHypothesisError as exc:
        raise PerturbationHypothesisError(exc.norm_inv, exc.norm_pert, "l2, step I") from None
    step1 = l2_opnorm(AinvB) * (l2_opnorm(R) if np.any(R.entries) else 0.0)
    # step II: localize
    W0 = SiteMatrix(B, E, np.where(mask.T, W.entries, 0))
    loc = float(np.abs((W.entries - W0.entries) @ D.entries).max(initial=0.0))
    # step III: perturb back (s0 hypothesis)
    w0 = snorm(W0, params.s0, K0)
    step3 = w0 * snorm(R, params.s0, K0)
    try:
        V = left_inverse_perturbed(W0, R, K0=K0, s0=params.s0, norm="s0")
    except PerturbationHypothesisError as exc:
        raise PerturbationHypothesisError(exc.norm_inv, exc.norm_pert, "s0, step III") from None
    res = float(np.abs(V.entries @ Aprime.entries - np.eye(len(B))).max(initial=0.0))
    p = params
    expo = 2 * p.chi * p.tau + p.kappa + 2 * (p.s0 + p.b) * p.C1
    rep = LeftInverseReport(step1, step3, snorm(V, params.s0, K0), w0, res, loc, expo)
    return V, rep


# ---------------------------------------------------------------------------

def multiscale_invert(A: SiteMatrix, params: ScaleParams, clusters=None, *, N: int,
                      K0: float | None = None, Upsilon: float | None = None,
                      classification: SiteClassification | None = None, subcertifier=None,
                      s_grid=None, strict: bool = True):
    """(A^{-1}, certificate) by the multiscale factorization, checked against dense inversion.

    E must have diameter <= 4 N' with N' = N^chi.  When `clusters` is None the
    bad sites are grouped into N^2-chains.
    """
    t0 = time.perf_counter()
    E = A.rows
    K0 = default_K0(E.b, params.s0) if K0 is None else K0
    Np = N ** params.chi
    s_grid = [params.s0, params.s1, params.S] if s_grid is None else list(s_grid)
    off = A.offdiag_part()
    dense = _inverse(A.entries)
    violations = {}
    Ts1 = snorm(off, params.s1, K0)
    if Upsilon is not None and Ts1 > Upsilon:
        violations["H1"] = f"|||A - Diag A|||_s1 = {Ts1:.4g} > Upsilon = {Upsilon:.4g}"
    if dense is None:
        violations["H2"] = "A is singular"
    else:
        l2 = float(1.0 / np.abs(sla.eigvalsh(A.entries)).min()) if A.hermitian \
            else float(sla.svdvals(dense)[0])
        if l2 > Np ** params.tau:
            violations["H2"] = f"||A^-1||_0 = {l2:.4g} > N'^tau = {Np ** params.tau:.4g}"
    if E.diameter() > 4 * Np:
        violations["diam"] = f"diam(E) = {E.diameter()} > 4 N' = {4 * Np:.4g}"
    if classification is None:
        classification = classify_sites(A, N, params, subcertifier, K0)
    bad = classification.bad
    if clusters is None and len(bad):
        from .separation import chain_partition
        clusters = chain_partition(bad, N * N).clusters
    clusters = list(getattr(clusters, "clusters", clusters or []))
    if len(bad):
        h3 = _check_clusters(clusters, bad, N, params)
        if h3:
            violations["H3"] = h3
    if violations and strict:
        raise HypothesisViolation(violations)

    Mmat, Nmat, red = semi_reduce(A, classification, params, K0)
    G, B = Mmat.rows, Nmat.cols
    out = np.zeros((len(E), len(E)), dtype=complex)
    gi = E.lookup(G.array)
    extras = {"Theta": params.Theta, "Gamma_G_s0": red.gamma_s0, "bad": len(B), "good": len(G),
              "clusters": len(clusters), "T_s1": Ts1}
    if len(B) == 0:
        out[gi] = Mmat.entries
    else:
        Ap, Z, checks = reduce_bad(A, Mmat, Nmat, classification.regular, dense)
        bi = E.lookup(B.array)
        AinvB = SiteMatrix(B, E, dense[bi])
        V, lrep = left_inverse_decay(Ap, clusters, params, AinvB=AinvB, N=N, K0=K0)
        VZ = V.entries @ Z.entries
        out[bi] = VZ
        out[gi] = Mmat.entries + Nmat.entries @ VZ
        extras.update({"regular_rows": checks.get("regular_rows", 0.0),
                       "step1_product": lrep.step1_product, "step3_product": lrep.step3_product,
                       "V_s0": lrep.V_s0, "W0_s0": lrep.W0_s0,
                       "V_left_residual": lrep.V_left_residual,
                       "localization_residual": lrep.localization_residual})
    Ainv = SiteMatrix(E, E, out)
    err = float(np.linalg.norm(out - dense) / np.linalg.norm(dense)) if dense is not None else math.inf
    extras["frobenius_rel_error"] = err
    extras["exact"] = bool(err <= 1e-7)
    measured = {s: snorm(Ainv, s, K0) for s in s_grid}
    bound = {s: 0.25 * Np ** params.tau_prime * (Np ** (params.delta * s) + snorm(off, s, K0))
             for s in s_grid}
    passed = all(measured[s] <= bound[s] for s in s_grid)
    extras["seconds"] = time.perf_counter() - t0
    extras["violations"] = violations
    return Ainv, GoodnessCertificate(Np, s_grid, measured, bound, passed, extras)


def _check_clusters(clusters, bad: SiteSet, N, params) -> str:
    msgs = []
    cover = SiteSet.empty(bad.nu, bad.d)
    for c in clusters:
        cover = cover.union(c)
        if c.diameter() > N ** params.C1:
            msgs.append(f"cluster diameter {c.diameter()} > N^C1 = {N ** params.C1:.4g}")
    if cover != bad:
        msgs.append("clusters do not partition the bad set")
    for a in range(len(clusters)):
        for b_ in range(a + 1, len(clusters)):
            d = int(clusters[a].distance_to(clusters[b_].array).min())
            if d < N * N:
                msgs.append(f"clusters {a}, {b_} at distance {d} < N^2")
    return "; ".join(msgs)


def box_instance(asm, eps, lam, theta, N, chi=2.0):
    """The box E of radius N^chi/2 around the origin and A restricted to it."""
    from .nls_operator import assemble_submatrix
    Np = int(round(N ** chi))
    box = SiteBox((0,) * asm.nu, (0,) * asm.d, Np)
    return assemble_submatrix(asm, eps, lam, theta, box)


def planted_instance(rng, N: int, params: ScaleParams, *, nu: int = 1, d: int = 1,
                     n_clusters: int | None = None, amp: float = 0.04, tries: int = 200):
    """A Hermitian matrix on E = box of radius N^chi with planted bad sites.

    Off the seeds every diagonal entry has modulus >= Theta and the
    off-diagonal part couples nearest neighbours with entries of size <= amp.
    Each seed site has zero diagonal and no local coupling, so every window
    containing it is singular and the seed is N-bad.  A partner site farther
    than 3N away, with diagonal in [1, 3] (singular but N-regular), is coupled
    to the seed by a long-range entry t in [0.3, 1]; this lifts the spectrum
    of E to about t^2/3.
    Returns (A, info) with the seed and partner sites.
    """
    Np = int(round(N ** params.chi))
    E = SiteBox((0,) * nu, (0,) * d, Np)
    b = nu + d
    n_clusters = int(rng.integers(1, 3)) if n_clusters is None else n_clusters
    pts = E.lattice_points
    for _ in range(tries):
        seeds = pts[rng.choice(len(pts), n_clusters, replace=False)]
        ds = np.abs(seeds[:, None] - seeds[None]).max(axis=2)
        if n_clusters > 1 and ds[np.triu_indices(n_clusters, 1)].min() <= N * N:
            continue
        far = (np.abs(pts[:, None] - seeds[None]).max(axis=2) > 3 * N).all(axis=1)
        if far.sum() < n_clusters:
            continue
        partners = pts[rng.choice(np.flatnonzero(far), n_clusters, replace=False)]
        dp = np.abs(partners[:, None] - partners[None]).max(axis=2)
        if n_clusters > 1 and dp[np.triu_indices(n_clusters, 1)].min() <= 2 * N:
            continue
        break
    else:
        raise RuntimeError("could not place separated seeds")
    n = len(E)
    sgn = rng.choice([-1.0, 1.0], n)
    diag = sgn * rng.uniform(params.Theta, 3 * params.Theta, n)
    dist = np.abs(E.spatial[:, None] - E.spatial[None]).max(axis=2)
    T = (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))) * amp / 2
    T = np.where(dist == 1, T, 0)
    T = np.triu(T, 1)
    T = T + T.conj().T
    seed_idx, part_idx = [], []
    for p, f in zip(seeds, partners):
        a = int(rng.integers(2))
        ks = E.lookup(np.concatenate([p, [a]]))[0]
        kf = E.lookup(np.concatenate([f, [a]]))[0]
        T[ks] = 0
        T[:, ks] = 0
        diag[ks] = 0.0
        diag[kf] = rng.choice([-1.0, 1.0]) * rng.uniform(1.0, 3.0)
        t = rng.uniform(0.3, 1.0)
        T[ks, kf] = T[kf, ks] = t
        seed_idx.append(int(ks))
        part_idx.append(int(kf))
    A = SiteMatrix(E, E, T + np.diag(diag), hermitian=True)
    info = {"seeds": E.subset(np.array(seed_idx)), "partners": E.subset(np.array(part_idx)),
            "N_prime": Np}
    return A, info
