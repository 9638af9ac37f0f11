"""Site-indexed complex matrices and their s-norm calculus.

A :class:`SiteMatrix` is a dense complex matrix whose rows and columns are
labelled by ordered site sets.  Sites sharing the same lattice point
i = (l, j) form a block of size at most 2x2; the s-norm

    |||M|||_s^2 = K0 * sum_n [M(n)]^2 <n>^{2s},   <n> = max(|n|, 1),

uses the largest spectral norm [M(n)] of a block at offset n = i - i'.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .lattice import SiteSet, LatticeError


class ShapeError(ValueError):
    pass


class PerturbationHypothesisError(ValueError):
    """The smallness hypothesis of the left-inverse perturbation failed."""

    def __init__(self, norm_inv, norm_pert, norm_kind="s0"):
        self.norm_inv = norm_inv
        self.norm_pert = norm_pert
        super().__init__(
            f"perturbation hypothesis violated ({norm_kind}): |N| = {norm_inv:.6g}, "
            f"|P| = {norm_pert:.6g}, product {norm_inv * norm_pert:.6g} > 1/2")


class SeriesStagnation(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# lattice sums

def weight_sum(b: int, p: float, R: int = 50) -> float:
    """sum over |n| <= R of <n>^{-p}, n in Z^b, summed shell by shell."""
    r = np.arange(1, R + 1, dtype=float)
    shells = (2 * r + 1) ** b - (2 * r - 1) ** b
    return 1.0 + float(np.sum(shells * r ** (-p)))


def default_K0(b: int, s0: float, R: int = 50) -> float:
    """K0 = ceil(4^{s0} * sum_{|n|<=R} <n>^{-2 s0})."""
    return float(math.ceil(4.0 ** s0 * weight_sum(b, 2 * s0, R)))


def line_constant(b: int, R: int = 200) -> float:
    """K(b) = (sum_n <n>^{-2b})^{1/2}, constant of the decay-along-lines bound."""
    return math.sqrt(weight_sum(b, 2 * b, R))


def bracket(n: np.ndarray) -> np.ndarray:
    """<n> = max(|n|_inf, 1) row-wise."""
    n = np.atleast_2d(n)
    return np.maximum(np.abs(n).max(axis=1, initial=0), 1)


# ---------------------------------------------------------------------------

def _groups(ss: SiteSet):
    """Distinct lattice points of a site set and the group index of every site."""
    if len(ss) == 0:
        return np.zeros((0, ss.b), dtype=np.int64), np.zeros(0, dtype=np.int64)
    pts, inv = np.unique(ss.spatial, axis=0, return_inverse=True)
    return pts, inv.ravel()


def block_norms(rows: SiteSet, cols: SiteSet, E: np.ndarray):
    """Spectral norms of the (<= 2x2) blocks between lattice points.

    Returns (row_points, col_points, mags) with mags[p, q] = |M_{i_p}^{i'_q}|.
    """
    pr, ir = _groups(rows)
    pc, ic = _groups(cols)
    blk = np.zeros((len(pr), 2, len(pc), 2), dtype=complex)
    blk[ir[:, None], rows.bit[:, None], ic[None, :], cols.bit[None, :]] = E
    a, b_ = blk[:, 0, :, 0], blk[:, 0, :, 1]
    c, d = blk[:, 1, :, 0], blk[:, 1, :, 1]
    fro = (np.abs(a) ** 2 + np.abs(b_) ** 2) + (np.abs(c) ** 2 + np.abs(d) ** 2)
    det = np.abs(a * d - b_ * c)
    disc = np.sqrt(np.maximum(fro * fro - 4.0 * det * det, 0.0))
    mags = np.sqrt(np.maximum(0.5 * (fro + disc), 0.0))
    return pr, pc, mags


@dataclass(frozen=True)
class SNormProfile:
    """Nonzero per-offset maxima [M(n)] of a matrix."""
    offsets: np.ndarray    # (m, b) integer offsets n
    weights: np.ndarray    # (m,) values [M(n)] >= 0

    def snorm(self, s: float, K0: float) -> float:
        if s < 0:
            raise ValueError(f"s must be >= 0, got {s}")
        if self.weights.size == 0:
            return 0.0
        w = self.weights * bracket(self.offsets).astype(float) ** s
        return float(math.sqrt(K0) * np.linalg.norm(w))

    def support_radius(self) -> int:
        """max |n| over offsets carrying a nonzero block."""
        if self.weights.size == 0:
            return 0
        return int(np.abs(self.offsets).max(axis=1, initial=0).max())

    def min_radius(self) -> int:
        if self.weights.size == 0:
            return 0
        return int(np.abs(self.offsets).max(axis=1, initial=0).min())


def _profile(rows, cols, E) -> SNormProfile:
    b = rows.b
    if E.size == 0:
        return SNormProfile(np.zeros((0, b), dtype=np.int64), np.zeros(0))
    pr, pc, mags = block_norms(rows, cols, E)
    lo = pr.min(axis=0) - pc.max(axis=0)
    hi = pr.max(axis=0) - pc.min(axis=0)
    shape = tuple(int(x) for x in hi - lo + 1)
    diff = pr[:, None, :] - pc[None, :, :] - lo
    flat = np.ravel_multi_index(tuple(np.moveaxis(diff, -1, 0)), shape)
    grid = np.zeros(int(np.prod(shape)))
    np.maximum.at(grid, flat.ravel(), mags.ravel())
    nz = np.flatnonzero(grid)
    offs = np.stack(np.unravel_index(nz, shape), axis=1) + lo
    return SNormProfile(offs.astype(np.int64), grid[nz])


class SiteMatrix:
    """Dense complex matrix with rows labelled by C and columns by B (M in M^B_C).

    Instances are treated as immutable: the entry array is made read-only.
    """

    def __init__(self, rows: SiteSet, cols: SiteSet, entries, *, hermitian: bool = False,
                 herm_tol: float = 1e-12):
        E = np.array(entries, dtype=complex, copy=True)
        if E.ndim != 2 or E.shape != (len(rows), len(cols)):
            raise ShapeError(f"entries of shape {E.shape} for |C| x |B| = {len(rows)} x {len(cols)}")
        if rows.nu != cols.nu or rows.d != cols.d:
            raise LatticeError("row and column site sets live on different lattices")
        E.setflags(write=False)
        self.rows = rows
        self.cols = cols
        self.entries = E
        self.hermitian = hermitian
        if hermitian:
            res = self.hermitian_residual()
            scale = max(np.abs(E).max(initial=0.0), 1.0)
            if res > herm_tol * scale:
                raise ValueError(f"Hermitian flag set but residual {res:.3g} exceeds tolerance")
        self._profile = None

    # --- basic structure
    @property
    def shape(self):
        return self.entries.shape

    @property
    def b(self):
        return self.rows.b

    def __repr__(self):
        return f"SiteMatrix({self.shape[0]}x{self.shape[1]})"

    def hermitian_residual(self) -> float:
        if self.shape[0] != self.shape[1] or self.rows != self.cols:
            return float("inf")
        return float(np.abs(self.entries - self.entries.conj().T).max(initial=0.0))

    def profile(self) -> SNormProfile:
        if self._profile is None:
            self._profile = _profile(self.rows, self.cols, self.entries)
        return self._profile

    def with_entries(self, E, **kw) -> "SiteMatrix":
        return SiteMatrix(self.rows, self.cols, E, **kw)

    @classmethod
    def identity(cls, ss: SiteSet) -> "SiteMatrix":
        return cls(ss, ss, np.eye(len(ss)), hermitian=True)

    @classmethod
    def zeros(cls, rows: SiteSet, cols: SiteSet) -> "SiteMatrix":
        return cls(rows, cols, np.zeros((len(rows), len(cols))))

    def diag_part(self) -> "SiteMatrix":
        """Diag(M): keep only the entries with equal row and column site."""
        E = np.zeros(self.shape, dtype=complex)
        idx = self.cols.lookup(self.rows.array, strict=False)
        r = np.flatnonzero(idx >= 0)
        E[r, idx[r]] = self.entries[r, idx[r]]
        return self.with_entries(E)

    def offdiag_part(self) -> "SiteMatrix":
        return self.with_entries(self.entries - self.diag_part().entries)

    def __add__(self, other):
        _same_frame(self, other)
        return self.with_entries(self.entries + other.entries)

    def __sub__(self, other):
        _same_frame(self, other)
        return self.with_entries(self.entries - other.entries)

    def __neg__(self):
        return self.with_entries(-self.entries)

    def scale(self, c) -> "SiteMatrix":
        return self.with_entries(c * self.entries)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def H(self) -> "SiteMatrix":
        return SiteMatrix(self.cols, self.rows, self.entries.conj().T)


def _same_frame(A, B):
    if A.rows != B.rows or A.cols != B.cols:
        raise ShapeError("site sets differ")


# ---------------------------------------------------------------------------
# norms

def snorm(M: SiteMatrix, s: float, K0: float) -> float:
    """|||M|||_s with constant K0."""
    if s < 0:
        raise ValueError(f"s must be >= 0, got {s}")
    return M.profile().snorm(s, K0)


def sobolev_norm(w, sites: SiteSet, s: float, K0: float) -> float:
    """||w||_s = sqrt(K0 sum_i |w_i|^2 <i>^{2s}), |w_i| the C^2 norm of the pair at i."""
    w = np.asarray(w, dtype=complex).ravel()
    if w.size != len(sites):
        raise ShapeError("vector length does not match the site set")
    pts, inv = _groups(sites)
    mass = np.zeros(len(pts))
    np.add.at(mass, inv, np.abs(w) ** 2)
    wt = bracket(pts).astype(float) ** (2 * s)
    return float(math.sqrt(K0 * np.sum(mass * wt)))


def column_matrix(w, sites: SiteSet) -> SiteMatrix:
    """A vector as a one-column matrix whose column sits at the origin."""
    origin = SiteSet(np.zeros((1, sites.b + 1), dtype=np.int64), sites.nu, sites.d)
    return SiteMatrix(sites, origin, np.asarray(w, dtype=complex).reshape(-1, 1))


def l2_opnorm(M: SiteMatrix) -> float:
    """Largest singular value."""
    if M.entries.size == 0:
        raise ShapeError("empty matrix")
    if M.hermitian:
        ev = sla.eigvalsh(M.entries)
        return float(np.abs(ev).max())
    return float(sla.svdvals(M.entries)[0])


def matmul(M1: SiteMatrix, M2: SiteMatrix) -> SiteMatrix:
    """Product M1 M2 with M1 in M^C_D and M2 in M^B_C."""
    if M1.cols != M2.rows:
        raise ShapeError(f"inner site sets differ ({len(M1.cols)} vs {len(M2.rows)} sites)")
    return SiteMatrix(M1.rows, M2.cols, M1.entries @ M2.entries)


def restrict(M: SiteMatrix, rows: SiteSet | None = None, cols: SiteSet | None = None) -> SiteMatrix:
    """Entrywise extraction M^{B'}_{C'} for C' subset of rows and B' subset of cols."""
    rows = M.rows if rows is None else rows
    cols = M.cols if cols is None else cols
    try:
        ri = M.rows.lookup(rows.array)
        ci = M.cols.lookup(cols.array)
    except LatticeError as exc:
        raise LatticeError(f"restriction to a non-subset: {exc}") from None
    return SiteMatrix(rows, cols, M.entries[np.ix_(ri, ci)])


def row_group(M: SiteMatrix, i) -> SiteMatrix:
    """The line M_{{i}}: all rows whose lattice point is i."""
    i = np.asarray(i, dtype=np.int64)
    mask = (M.rows.spatial == i).all(axis=1)
    return restrict(M, M.rows.subset(mask), None)


# ---------------------------------------------------------------------------
# inequality witnesses

@dataclass
class Witness:
    holds: bool
    lhs: float
    rhs: float
    terms: dict = field(default_factory=dict)


def interpolation_check(M1, M2, s, s0, Cs, K0, rtol=1e-10) -> Witness:
    """Check |||M1 M2|||_s <= 1/2 |||M1|||_{s0}|||M2|||_s + Cs/2 |||M1|||_s |||M2|||_{s0}."""
    if s < s0:
        raise ValueError(f"interpolation needs s >= s0 (s={s}, s0={s0})")
    P = matmul(M1, M2)
    a0, as_ = snorm(M1, s0, K0), snorm(M1, s, K0)
    b0, bs = snorm(M2, s0, K0), snorm(M2, s, K0)
    lhs = snorm(P, s, K0)
    rhs = 0.5 * a0 * bs + 0.5 * Cs * as_ * b0
    return Witness(lhs <= rhs * (1 + rtol), lhs, rhs,
                   {"M1_s0": a0, "M1_s": as_, "M2_s0": b0, "M2_s": bs})


def interpolation_ratio(M1, M2, s, s0, K0) -> float:
    """Smallest Cs making the interpolation inequality hold for this pair."""
    P = matmul(M1, M2)
    a0, as_ = snorm(M1, s0, K0), snorm(M1, s, K0)
    b0, bs = snorm(M2, s0, K0), snorm(M2, s, K0)
    denom = 0.5 * as_ * b0
    if denom == 0.0:
        return 0.0
    return max(0.0, (snorm(P, s, K0) - 0.5 * a0 * bs) / denom)


def algebra_check(M1, M2, s0, K0, rtol=1e-10) -> Witness:
    lhs = snorm(matmul(M1, M2), s0, K0)
    rhs = snorm(M1, s0, K0) * snorm(M2, s0, K0)
    return Witness(lhs <= rhs * (1 + rtol), lhs, rhs)


def sobolev_action_check(M, w, s, s0, Cs, K0, rtol=1e-10) -> Witness:
    """||M w||_s <= 1/2 |||M|||_{s0} ||w||_s + Cs/2 |||M|||_s ||w||_{s0}."""
    Mw = M.entries @ np.asarray(w, dtype=complex).ravel()
    lhs = sobolev_norm(Mw, M.rows, s, K0)
    ws, w0 = sobolev_norm(w, M.cols, s, K0), sobolev_norm(w, M.cols, s0, K0)
    rhs = 0.5 * snorm(M, s0, K0) * ws + 0.5 * Cs * snorm(M, s, K0) * w0
    return Witness(lhs <= rhs * (1 + rtol), lhs, rhs)


def smoothing_bounds(M: SiteMatrix, N: int, s: float, s2: float, K0: float, which: str = "decay"):
    """(bound, actual) for the smoothing inequality matching the support of M.

    If M vanishes for |i - i'| < N:  |||M|||_s <= N^{-(s2-s)} |||M|||_{s2}.
    If M vanishes for |i - i'| > N:  |||M|||_{s2} <= N^{s2-s} |||M|||_s (which="decay")
    or |||M|||_s <= N^{s+b} ||M||_0 (which="l2").  The l2 bound is the
    asymptotic form, valid once K0 (2N+1)^b <= N^{2b}.
    """
    if N < 2:
        raise ValueError("N must be >= 2")
    if s2 < s:
        raise ValueError("need s2 >= s")
    prof = M.profile()
    if prof.weights.size == 0:
        return 0.0, 0.0
    lo, hi = prof.min_radius(), prof.support_radius()
    if lo >= N and which == "decay":
        return N ** (-(s2 - s)) * prof.snorm(s2, K0), prof.snorm(s, K0)
    if hi <= N:
        if which == "l2":
            return N ** (s + M.b) * l2_opnorm(M), prof.snorm(s, K0)
        return N ** (s2 - s) * prof.snorm(s, K0), prof.snorm(s2, K0)
    raise ValueError(f"support condition violated for N={N}: offsets span [{lo}, {hi}]")


def line_decay_bound(M: SiteMatrix, s: float, K0: float, K1: float | None = None) -> Witness:
    """|||M|||_s <= K1 max_i |||M_{{i}}|||_{s+b}."""
    b = M.b
    if K1 is None:
        K1 = line_constant(b)
    lhs = snorm(M, s, K0)
    if M.entries.size == 0:
        return Witness(True, lhs, 0.0)
    pr, pc, mags = block_norms(M.rows, M.cols, M.entries)
    br = bracket((pr[:, None, :] - pc[None, :, :]).reshape(-1, b)).reshape(mags.shape)
    lines = np.sqrt(K0 * np.sum(mags ** 2 * br.astype(float) ** (2 * (s + b)), axis=1))
    rhs = K1 * float(lines.max(initial=0.0))
    return Witness(lhs <= rhs * (1 + 1e-12), lhs, rhs, {"K1": K1})


# ---------------------------------------------------------------------------
# perturbation of left inverses

@dataclass
class PerturbationReport:
    terms: int
    hypothesis: float
    norms: dict


def left_inverse_perturbed(Minv: SiteMatrix, P: SiteMatrix, s_list=(), *, K0: float, s0: float,
                           norm: str = "s0", rtol: float = 1e-14, max_terms: int = 200,
                           return_report: bool = False):
    """Left inverse N_P = sum_p (-1)^p (N P)^p N of M + P, given a left inverse N of M.

    The hypothesis |N| |P| <= 1/2 is checked in the s0-norm (norm="s0") or in
    the L2 operator norm (norm="l2").  The Neumann series stops when a term
    falls below `rtol` relative to the partial sum.
    """
    if Minv.cols != P.rows or Minv.rows != P.cols:
        raise ShapeError("P must have the shape of M (transpose of its left inverse)")
    if norm == "s0":
        nN, nP = snorm(Minv, s0, K0), snorm(P, s0, K0)
        size = lambda X: X.profile().snorm(s0, K0)
    elif norm == "l2":
        nN = l2_opnorm(Minv) if Minv.entries.size else 0.0
        nP = l2_opnorm(P) if P.entries.size else 0.0
        size = lambda X: float(np.linalg.norm(X.entries))
    else:
        raise ValueError(f"unknown norm {norm!r}")
    if nN * nP > 0.5:
        raise PerturbationHypothesisError(nN, nP, norm)
    X = Minv.entries @ P.entries
    term = Minv.entries.copy()
    total = term.copy()
    k = 0
    rows, cols = Minv.rows, Minv.cols
    while True:
        k += 1
        if k > max_terms:
            raise SeriesStagnation(f"Neumann series not converged after {max_terms} terms")
        term = -(X @ term)
        total += term
        t_size = size(SiteMatrix(rows, cols, term))
        if t_size <= rtol * max(size(SiteMatrix(rows, cols, total)), 1e-300):
            break
        if not np.isfinite(t_size):
            raise SeriesStagnation("Neumann series diverged")
    NP = SiteMatrix(rows, cols, total)
    if not return_report:
        return NP
    norms = {float(s): snorm(NP, s, K0) for s in s_list}
    return NP, PerturbationReport(k, nN * nP, norms)
