"""Bad parameter sets from eigenvalues of the truncated operators.

For fixed (eps, lam) the box matrix A_{N,j0}(theta) = A_{N,j0}(0) + theta Y is
Hermitian with ||Y||_0 = 1, so every eigenvalue is 1-Lipschitz in theta.  The
scanner in `theta_bad_set` uses this to certify whole gaps between samples.

At eps = 0 the box spectrum is explicit: mu_k(j0) -+ (lam w.l + theta), with
mu_k the eigenvalues of -Delta + V on |j - j0| <= N.  Weyl's inequality keeps
the true spectrum within delta = eps ||T1||_0 of it.  That enclosure
restricts the scanner to thin windows around the free resonances and, on its
own, gives rigorous outer coverings for large sweeps.
"""
from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .lattice import SiteBox
from .nls_operator import LAMBDA_RANGE, assemble_submatrix, free_box_eigenvalues, t1_schur_bound

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# interval arithmetic on the line

def merge(intervals) -> list:
    """Sorted disjoint union of (lo, hi) pairs."""
    iv = sorted((float(a), float(b)) for a, b in intervals if b > a)
    out = []
    for a, b in iv:
        if out and a <= out[-1][1]:
            out[-1] = (out[-1][0], max(out[-1][1], b))
        else:
            out.append((a, b))
    return out


def clip(intervals, lo, hi) -> list:
    return [(max(a, lo), min(b, hi)) for a, b in intervals if min(b, hi) > max(a, lo)]


def measure_of(intervals) -> float:
    return float(sum(b - a for a, b in intervals))


def contains(intervals, x) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.zeros(x.shape, dtype=bool)
    for a, b in intervals:
        out |= (x > a) & (x < b)
    return out


# ---------------------------------------------------------------------------

@dataclass
class ThetaBadSet:
    j0: tuple
    N: int
    tau: float
    intervals: list              # level set {min |eig| < threshold}
    threshold: float
    core: list = field(default_factory=list)   # the N^{-tau} level set inside
    samples: int = 0
    flags: list = field(default_factory=list)

    @property
    def measure(self) -> float:
        return measure_of(self.intervals)


@dataclass
class ParameterBox:
    eps_range: tuple = (0.0, 1e-3)
    lambda_range: tuple = LAMBDA_RANGE
    grid: tuple = (3, 41)

    def __post_init__(self):
        if min(self.grid) < 2:
            raise ValueError("grid resolutions must be >= 2")

    def nodes(self):
        eps = np.linspace(*self.eps_range, self.grid[0])
        lam = np.linspace(*self.lambda_range, self.grid[1])
        return eps, lam


@dataclass
class BadSetEstimate:
    N: int
    bad_fraction: float
    sample_count: int
    complexity_max: int
    halfwidth: float = 0.0
    measure_fraction: float = 0.0     # certified lambda-measure of the L2-gate failures
    weak_bad_fraction: float = 0.0
    rows: list = field(default_factory=list)


def _box(asm, N, j0, l0=None):
    l0 = (0,) * asm.nu if l0 is None else l0
    return SiteBox(l0, tuple(np.atleast_1d(j0)), N)


def _ysign(box):
    return np.where(box.bit == 0, -1.0, 1.0)


class BoxFamily:
    """theta -> sorted eigenvalues of A_{N,j0}(eps, lam, theta)."""

    def __init__(self, asm, eps, lam, N, j0, herm_tol=1e-12):
        self.box = _box(asm, N, j0)
        A = assemble_submatrix(asm, eps, lam, 0.0, self.box, herm_tol=herm_tol)
        self.A0 = A.entries
        self.y = _ysign(self.box)
        self.evals = 0
        self.failures = []

    def eig(self, theta) -> np.ndarray | None:
        self.evals += 1
        M = self.A0 + np.diag(theta * self.y)
        try:
            return sla.eigvalsh(M)
        except sla.LinAlgError:
            self.failures.append(float(theta))
            return None

    def m(self, theta) -> float:
        ev = self.eig(theta)
        return math.nan if ev is None else float(np.abs(ev).min())


def weyl_delta(asm, eps) -> float:
    return abs(eps) * t1_schur_bound(asm) if eps else 0.0


def free_theta_lines(asm, lam, N, j0):
    """Points theta* where a free eigenvalue of A_{N,j0}(0, lam, theta) vanishes."""
    ev = free_box_eigenvalues(asm, lam, 0.0, N, None, np.atleast_1d(j0))
    # a = 0 branch: mu - t - theta,  a = 1 branch: mu + t + theta
    return np.concatenate([ev[0].ravel(), -ev[1].ravel()])


def enclosure(asm, eps, lam, N, j0, level, theta_range=None, inner=False) -> list:
    """Outer (or inner) covering of {theta : min |eig| < level} from the Weyl enclosure."""
    delta = weyl_delta(asm, eps)
    r = level - delta if inner else level + delta
    if r <= 0:
        return []
    c = free_theta_lines(asm, lam, N, j0)
    iv = merge(zip(c - r, c + r))
    return clip(iv, *theta_range) if theta_range is not None else iv


def theta_range_for(N, d) -> tuple:
    return (-11.0 * d * N * N, 11.0 * d * N * N)


# ---------------------------------------------------------------------------
# the certified scanner

def _refine(fam, thr, a, ma, b, mb, tol, depth, out, flags):
    """Classify [a, b] given samples; appends bad subintervals to `out`.

    A sample at theta with value m certifies its status on |theta' - theta| < |m - thr|.
    """
    stack = [(a, ma, b, mb, 0)]
    while stack:
        a, ma, b, mb, k = stack.pop()
        ra, rb = abs(ma - thr), abs(mb - thr)
        ga, gb = ma >= thr, mb >= thr
        if b - a <= ra + rb or b - a <= tol or k >= depth:
            if ga and gb:
                if b - a > ra + rb:
                    # unresolved at the depth cap: keep it as bad (conservative)
                    flags.append(("unresolved", a, b))
                    out.append((a + ra, b - rb))
                continue
            if not ga and not gb:
                out.append((a, b))
                continue
            # one boundary inside: place it where the certified regions meet
            cut = a + ra if ga else b - rb
            cut = min(max(cut, a), b)
            out.append((cut, b) if ga else (a, cut))
            continue
        lo, hi = a + (ra if ga else 0.0), b - (rb if gb else 0.0)
        if lo >= hi:
            lo, hi = a, b
        c = 0.5 * (lo + hi)
        mc = fam.m(c)
        if math.isnan(mc):
            flags.append(("solver", c))
            out.append((a, b))
            continue
        stack.append((c, mc, b, mb, k + 1))
        stack.append((a, ma, c, mc, k + 1))


def scan(fam: BoxFamily, thr: float, windows, step: float, tol: float = 1e-11, depth: int = 60):
    """Certified {theta : min |eig| < thr} inside `windows`; outside it is assumed empty."""
    out, flags = [], []
    for lo, hi in windows:
        n = max(2, int(math.ceil((hi - lo) / step)) + 1)
        ths = np.linspace(lo, hi, n)
        ms = [fam.m(t) for t in ths]
        for i in range(n - 1):
            a, b, ma, mb = ths[i], ths[i + 1], ms[i], ms[i + 1]
            if math.isnan(ma) or math.isnan(mb):
                flags.append(("solver", a))
                out.append((a, b))
                continue
            _refine(fam, thr, a, ma, b, mb, tol, depth, out, flags)
    return merge(out), flags


def theta_bad_set(asm, eps, lam, j0, N, tau, resolution=None, *, theta_range=None,
                  level: float = 2.0) -> ThetaBadSet:
    """B_{level,N}(j0; eps, lam): theta with an eigenvalue of modulus < level N^{-tau}.

    The N^{-tau} level set is returned as `core`.  The scan covers I_N
    (or `theta_range`), sampling each enclosure window with step `resolution`
    and bisecting wherever the Lipschitz certificate does not close a gap.
    """
    base = N ** (-tau)
    resolution = base / 4 if resolution is None else resolution
    if resolution > base / 4 * (1 + 1e-12):
        raise ValueError(f"resolution {resolution:.3g} above N^-tau/4 = {base / 4:.3g}")
    theta_range = theta_range_for(N, asm.d) if theta_range is None else theta_range
    j0 = tuple(int(x) for x in np.atleast_1d(j0))
    fam = BoxFamily(asm, eps, lam, N, j0)
    thr = level * base
    win = enclosure(asm, eps, lam, N, j0, thr, theta_range)
    # widen by one step so that every window has a certified good sample at each end
    win = clip(merge((a - resolution, b + resolution) for a, b in win), *theta_range)
    iv, flags = scan(fam, thr, win, resolution)
    core_win = enclosure(asm, eps, lam, N, j0, base, theta_range)
    core_win = clip(merge((a - resolution, b + resolution) for a, b in core_win), *theta_range)
    core, f2 = scan(fam, base, core_win, resolution)
    flags += f2 + [("solver", t) for t in fam.failures]
    if fam.failures:
        log.warning("eigenvalue solver failed at %d theta samples", len(fam.failures))
    return ThetaBadSet(j0, N, tau, iv, thr, core, fam.evals, flags)


def enclosure_bad_set(asm, eps, lam, j0, N, tau, *, theta_range=None, level=2.0) -> ThetaBadSet:
    """Outer covering from the Weyl enclosure alone (no eigenvalue solves)."""
    theta_range = theta_range_for(N, asm.d) if theta_range is None else theta_range
    base = N ** (-tau)
    j0 = tuple(int(x) for x in np.atleast_1d(j0))
    iv = enclosure(asm, eps, lam, N, j0, level * base, theta_range)
    core = enclosure(asm, eps, lam, N, j0, base, theta_range)
    return ThetaBadSet(j0, N, tau, iv, level * base, core, 0, [("enclosure", weyl_delta(asm, eps))])


def refine_intervals(intervals, length) -> list:
    """Split every interval into ceil(|I|/length) equal pieces of length <= length."""
    out = []
    for a, b in intervals:
        k = max(1, int(math.ceil((b - a) / length - 1e-9)))
        edges = np.linspace(a, b, k + 1)
        out += list(zip(edges[:-1], edges[1:]))
    return out


def interval_complexity(bs: ThetaBadSet, N, tau):
    """(Q, 2 |B_2| N^tau): pieces of length <= N^{-tau} covering the N^{-tau} level set.

    Only components of the 2N^{-tau} level set meeting the core are refined;
    by the Lipschitz property such components have length >= 2 N^{-tau}.
    """
    L = N ** (-tau)
    if not bs.intervals:
        return 0, 0.0
    hit = [iv for iv in bs.intervals if not bs.core or any(
        c[0] < iv[1] and c[1] > iv[0] for c in bs.core)]
    Q = len(refine_intervals(hit, L))
    return Q, 2.0 * bs.measure * N ** tau


def complexity_budget(N, d, nu, exponent=None) -> float:
    return float(N) ** (2 * d + nu + 4 if exponent is None else exponent)


@dataclass
class ParameterClass:
    good: bool
    counts: dict
    worst_j0: tuple
    interval_count: int
    budget: float
    method: str


def classify_parameter(asm, eps, lam, N, tau, j0_window=None, *, exact=False,
                       budget_exponent=None, resolution=None) -> ParameterClass:
    """Weak N-goodness of (eps, lam): every B^0_N(j0) is covered within budget.

    The window must contain every |j0| < 2N; for |j0| >= 2N the closed-form
    bound on the level-set measure applies instead.  Coverings come from the
    enclosure, falling back to the scanner when the enclosure exceeds the budget
    (or always with exact=True).
    """
    J = 2 * N - 1 if j0_window is None else int(j0_window)
    if J < 2 * N - 1:
        from .separation import WindowError
        raise WindowError(f"j0 window {J} does not cover |j0| < 2N = {2 * N}")
    budget = complexity_budget(N, asm.d, asm.nu, budget_exponent)
    side = np.arange(-J, J + 1)
    js = np.stack([g.ravel() for g in np.meshgrid(*([side] * asm.d), indexing="ij")], axis=1)
    counts, method = {}, "enclosure"
    for j0 in js:
        key = tuple(int(x) for x in j0)
        bs = theta_bad_set(asm, eps, lam, key, N, tau, resolution) if exact else \
            enclosure_bad_set(asm, eps, lam, key, N, tau)
        Q, _ = interval_complexity(bs, N, tau)
        if Q > budget and not exact:
            bs = theta_bad_set(asm, eps, lam, key, N, tau, resolution)
            Q, _ = interval_complexity(bs, N, tau)
            method = "scan"
        counts[key] = Q
    worst = max(counts, key=lambda k: (counts[k], k))
    return ParameterClass(all(q <= budget for q in counts.values()), counts, worst, counts[worst],
                          budget, "scan" if exact else method)


# ---------------------------------------------------------------------------
# L2 gate and lambda-measures

def free_lambda_lines(asm, N, j0=None, theta=0.0):
    """(mu, w.l) pairs: at eps = 0 the eigenvalues of A_N(lam, theta) are mu -+ (lam w.l + theta)."""
    mu = asm.potential.spectrum(N, j0)
    side = np.arange(-N, N + 1)
    ls = np.stack([g.ravel() for g in np.meshgrid(*([side] * asm.nu), indexing="ij")], axis=1)
    wl = ls @ asm.omega_bar
    return mu, wl


def _lambda_intervals(mu, wl, r, theta=0.0, lam_range=LAMBDA_RANGE):
    """lam in lam_range with |mu -+ (lam w.l + theta)| < r for some (mu, l, sign)."""
    lo, hi = lam_range
    out = []
    for w in wl:
        for sgn in (1.0, -1.0):
            # sgn = +1: mu - lam w - theta ; sgn = -1: mu + lam w + theta
            c = sgn * mu - theta
            if abs(w) < 1e-15:
                if np.any(np.abs(c) < r):
                    return [(lo, hi)]
                continue
            a, b = (c - r) / w, (c + r) / w
            out += list(zip(np.minimum(a, b), np.maximum(a, b)))
    return clip(merge(out), lo, hi)


def gate_bad_lambdas(asm, eps, N, tau, lam_range=LAMBDA_RANGE, inner=False) -> list:
    """Outer (inner) covering of {lam : min |eig A_N(eps, lam, 0)| < N^{-tau}}."""
    thr = N ** (-tau)
    delta = weyl_delta(asm, eps)
    r = thr - delta if inner else thr + delta
    if r <= 0:
        return []
    mu, wl = free_lambda_lines(asm, N)
    return _lambda_intervals(mu, wl, r, 0.0, lam_range)


@dataclass
class GateResult:
    passed: bool
    min_abs_eig: float
    method: str
    flagged: bool = False

    def __bool__(self):
        return bool(self.passed)


def l2_inverse_gate(asm, eps, lam, N, tau, *, exact=False) -> GateResult:
    """||A_N(eps, lam, 0)^{-1}||_0 <= N^tau, i.e. min |eig| >= N^{-tau}."""
    thr = N ** (-tau)
    delta = weyl_delta(asm, eps)
    if not exact:
        ev = free_box_eigenvalues(asm, lam, 0.0, N)
        m0 = float(np.abs(ev).min())
        if m0 - delta >= thr:
            return GateResult(True, m0, "enclosure")
        if m0 + delta < thr:
            return GateResult(False, m0, "enclosure")
    A = assemble_submatrix(asm, eps, lam, 0.0, _box(asm, N, (0,) * asm.d))
    try:
        m = float(np.abs(sla.eigvalsh(A.entries)).min())
    except sla.LinAlgError:
        return GateResult(False, math.nan, "eigvalsh", True)
    return GateResult(m >= thr, m, "eigvalsh")


# ---------------------------------------------------------------------------

def binomial_halfwidth(k, n, z=1.96) -> float:
    """Wilson 95% half-width for k successes out of n."""
    if n == 0:
        return 0.0
    p = k / n
    den = 1 + z * z / n
    return float(z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den)


def sweep_measure(asm, box: ParameterBox, N, tau, *, j0_window=None, pmap=map) -> BadSetEstimate:
    """Classify every (eps, lam) node of the grid; u (hence T1) is frozen across nodes."""
    eps_grid, lam_grid = box.nodes()
    nodes = [(float(e), float(l)) for e in eps_grid for l in lam_grid]
    rows = list(pmap(functools.partial(_node_at, asm, N, tau, j0_window), nodes))
    bad = sum(1 for r in rows if not (r["good_weak"] and r["good_l2"]))
    weak_bad = sum(1 for r in rows if not r["good_weak"])
    Lam = box.lambda_range[1] - box.lambda_range[0]
    if Lam > 0:
        mf = float(np.mean([measure_of(gate_bad_lambdas(asm, e, N, tau, box.lambda_range)) / Lam
                            for e in eps_grid]))
    else:
        # degenerate lambda range: the fraction of failing nodes
        mf = float(np.mean([not r["good_l2"] for r in rows]))
    cmax = max(r["interval_count"] for r in rows)
    return BadSetEstimate(N, bad / len(rows), len(rows), cmax, binomial_halfwidth(bad, len(rows)),
                          mf, weak_bad / len(rows), rows)


def _node_at(asm, N, tau, j0_window, node):
    return _node(asm, node[0], node[1], N, tau, j0_window)


def _node(asm, eps, lam, N, tau, j0_window):
    pc = classify_parameter(asm, eps, lam, N, tau, j0_window)
    g = l2_inverse_gate(asm, eps, lam, N, tau)
    return {"N": N, "eps": eps, "lambda": lam, "good_weak": pc.good, "good_l2": g.passed,
            "worst_j0": pc.worst_j0, "interval_count": pc.interval_count}


CSV_COLUMNS = ("N", "eps", "lambda", "good_weak", "good_l2", "worst_j0", "interval_count")


def csv_lines(rows) -> list:
    out = [",".join(CSV_COLUMNS)]
    for r in sorted(rows, key=lambda r: (r["N"], r["eps"], r["lambda"])):
        out.append(",".join([str(r["N"]), repr(float(r["eps"])), repr(float(r["lambda"])),
                             str(int(r["good_weak"])), str(int(r["good_l2"])),
                             " ".join(str(x) for x in r["worst_j0"]), str(r["interval_count"])]))
    return out


def loglog_slope(xs, ys) -> float:
    """Least-squares slope of log y against log x (math.nan if any y <= 0)."""
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    if np.any(ys <= 0):
        return math.nan
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


def measure_scaling(asm, box: ParameterBox, Ns, tau) -> dict:
    """Certified bad-lambda fraction of the L2 gate for each N, with its log-log slope."""
    eps_grid, _ = box.nodes()
    Lam = box.lambda_range[1] - box.lambda_range[0]
    frac = [float(np.mean([measure_of(gate_bad_lambdas(asm, e, N, tau, box.lambda_range)) / Lam
                           for e in eps_grid])) for N in Ns]
    return {"N": list(Ns), "fraction": frac, "slope": loglog_slope(Ns, frac)}


# ---------------------------------------------------------------------------
# first Melnikov conditions

@dataclass
class MelnikovSet:
    N0: int
    tau1: float
    gamma: float
    intervals: list
    mu: np.ndarray
    lam_range: tuple = LAMBDA_RANGE

    @property
    def threshold(self) -> float:
        return self.gamma * self.N0 ** (-self.tau1)

    @property
    def bad_fraction(self) -> float:
        return measure_of(self.intervals) / (self.lam_range[1] - self.lam_range[0])

    def __call__(self, lam) -> bool:
        return not bool(contains(self.intervals, lam)[0])

    def grid_fraction(self, n=20001) -> float:
        lam = np.linspace(*self.lam_range, n)
        return float(contains(self.intervals, lam).mean())


def melnikov_initial_set(asm, N0, tau1=None, gamma=0.1, lam_range=LAMBDA_RANGE) -> MelnikovSet:
    """lam with |+-lam w.l + mu_j| >= gamma N0^{-tau1} for all |l| <= N0 and mu_j of E_{N0,0}."""
    tau1 = asm.d + asm.nu if tau1 is None else tau1
    mu, wl = free_lambda_lines(asm, N0)
    iv = _lambda_intervals(mu, wl, gamma * N0 ** (-tau1), 0.0, lam_range)
    return MelnikovSet(N0, tau1, gamma, iv, mu, lam_range)


def melnikov_constant(asm, N0, gammas, tau1=None) -> dict:
    """C(gamma) = bad fraction / gamma for each gamma, and max/min ratio."""
    Cs = {g: melnikov_initial_set(asm, N0, tau1, g).bad_fraction / g for g in gammas}
    vals = list(Cs.values())
    return {"C": Cs, "spread": max(vals) / min(vals) if min(vals) > 0 else math.inf}


# ---------------------------------------------------------------------------
# audits

def oversampling_audit(asm, eps, lam, j0, N, tau, segment, factor=10, resolution=None) -> dict:
    """Scan `segment` and compare with a `factor` times finer uniform sampling.

    A violation is a fine sample whose status disagrees with the scanned
    covering by more than the boundary tolerance.
    """
    base = N ** (-tau)
    resolution = base / 4 if resolution is None else resolution
    thr = 2 * base
    bs = theta_bad_set(asm, eps, lam, j0, N, tau, resolution, theta_range=segment)
    fam = BoxFamily(asm, eps, lam, N, j0)
    n = int(math.ceil((segment[1] - segment[0]) / resolution)) * factor + 1
    ths = np.linspace(*segment, n)
    m = np.array([fam.m(t) for t in ths])
    inside = contains(bs.intervals, ths)
    tol = 1e-9
    near_edge = np.zeros(n, dtype=bool)
    for a, b in bs.intervals:
        near_edge |= (np.abs(ths - a) < tol) | (np.abs(ths - b) < tol)
    crossings = int(np.sum(((m < thr) != inside) & ~near_edge))
    return {"samples": n, "violations": crossings, "intervals": len(bs.intervals),
            "bad_samples": int(np.sum(m < thr)), "scan_evals": bs.samples}


def xi_monotonicity(asm, eps, N, j0, eta, xis) -> dict:
    """Branches of xi -> eig(xi (D_j + T2 - eps T1) -+ (w.l + eta)) rise with slope >= beta0/2.

    This is A(eps, 1/xi, eta/xi) / (1/xi); branches are paired by sorted order.
    """
    xis = np.sort(np.asarray(xis, float))
    box = _box(asm, N, j0)
    H = assemble_submatrix(asm, eps, 1.0, 0.0, box).entries - np.diag(asm.diagonal(box, 1.0, 0.0)) \
        + np.diag(asm.diagonal(box, 0.0, 0.0))
    shift = asm.diagonal(box, 1.0, eta) - asm.diagonal(box, 0.0, 0.0)
    ev = np.array([sla.eigvalsh(x * H + np.diag(shift)) for x in xis])
    slopes = np.diff(ev, axis=0) / np.diff(xis)[:, None]
    return {"min_slope": float(slopes.min()), "bound": asm.potential.beta0 / 2,
            "passed": bool(slopes.min() >= asm.potential.beta0 / 2)}
