"""Linearized vector NLS operators in the space-time Fourier basis.

Fourier coefficients of functions on T^nu x T^d are stored as dense arrays of
shape (2R+1,)*b indexed by (l + R, j + R).  A pair u = (u+, u-) on the box
|(l, j)| <= N is a :class:`StateSpectrum`; the box vector layout interleaves
the component bit, matching :class:`SiteBox` (index 2*ravel(l, j) + a).

The assembled matrix is

    A(eps, lam, theta) = D(lam) + T2 - eps T1 + theta Y,

with diagonal -lam w.l + |j|^2 + m - theta on u+ sites (a=0) and
+lam w.l + |j|^2 + m + theta on u- sites (a=1).
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.linalg as sla
import scipy.signal

from .lattice import SiteBox, LatticeError
from .smatrix import SiteMatrix, Witness, snorm

LAMBDA_RANGE = (0.5, 1.5)
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class RealityError(ValueError):
    """u is not in U, i.e. u- differs from the conjugate of u+."""


class AliasingError(ArithmeticError):
    pass


class NonHermitianError(ValueError):
    pass


class PositivityError(ValueError):
    pass


# ---------------------------------------------------------------------------
# coefficient arrays

def _radius(arr: np.ndarray) -> int:
    return (arr.shape[0] - 1) // 2


def pad_coeffs(arr: np.ndarray, R: int) -> np.ndarray:
    """Zero-pad or truncate a centred coefficient array to radius R."""
    r = _radius(arr)
    if R == r:
        return arr.copy()
    out = np.zeros((2 * R + 1,) * arr.ndim, dtype=arr.dtype)
    k = min(R, r)
    src = tuple(slice(r - k, r + k + 1) for _ in range(arr.ndim))
    dst = tuple(slice(R - k, R + k + 1) for _ in range(arr.ndim))
    out[dst] = arr[src]
    return out


def reflect(arr: np.ndarray) -> np.ndarray:
    """c_n -> c_{-n}."""
    return arr[(slice(None, None, -1),) * arr.ndim]


def tail_norm(arr: np.ndarray, R: int) -> float:
    """l2 norm of the coefficients with |n| > R."""
    inner = pad_coeffs(pad_coeffs(arr, R), _radius(arr))
    return float(np.linalg.norm(arr - inner))


def to_grid(coeffs: np.ndarray, M: int) -> np.ndarray:
    """Values on the uniform M^b grid of a trigonometric polynomial."""
    R = _radius(coeffs)
    if 2 * R + 1 > M:
        raise AliasingError(f"grid of size {M} too small for radius {R}")
    full = np.zeros((M,) * coeffs.ndim, dtype=complex)
    idx = np.arange(-R, R + 1) % M
    full[np.ix_(*([idx] * coeffs.ndim))] = coeffs
    return np.fft.ifftn(full) * M ** coeffs.ndim


def from_grid(values: np.ndarray, R: int) -> np.ndarray:
    """Centred Fourier coefficients up to radius R of grid values."""
    M = values.shape[0]
    if 2 * R + 1 > M:
        raise AliasingError(f"grid of size {M} too small for radius {R}")
    full = np.fft.fftn(values) / M ** values.ndim
    idx = np.arange(-R, R + 1) % M
    return full[np.ix_(*([idx] * values.ndim))]


def grid_points(nu: int, d: int, M: int):
    """(phi, x) with phi of shape (nu, M, ..., M) and x of shape (d, M, ..., M)."""
    t = 2 * np.pi * np.arange(M) / M
    mesh = np.meshgrid(*([t] * (nu + d)), indexing="ij")
    return np.array(mesh[:nu]).reshape((nu,) + (M,) * (nu + d)), \
        np.array(mesh[nu:]).reshape((d,) + (M,) * (nu + d))


def sobolev(arr: np.ndarray, s: float, K0: float = 1.0) -> float:
    """sqrt(K0 sum |c_n|^2 <n>^{2s}) for a centred coefficient array."""
    R = _radius(arr)
    ax = np.abs(np.arange(-R, R + 1))
    br = np.maximum(np.max(np.meshgrid(*([ax] * arr.ndim), indexing="ij"), axis=0), 1)
    return float(math.sqrt(K0 * np.sum(np.abs(arr) ** 2 * br.astype(float) ** (2 * s))))


# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PotentialSpectrum:
    """V(x) = m + V0(x) through the mean m and the coefficients (V0)_j, j in Z^d."""
    m: float
    v0: dict
    beta0: float
    d: int = 1

    def __post_init__(self):
        v0 = {tuple(int(x) for x in k): complex(c) for k, c in self.v0.items()}
        if any(len(k) != self.d for k in v0):
            raise ValueError("potential coefficient of wrong dimension")
        if abs(v0.get((0,) * self.d, 0.0)) > 0:
            raise ValueError("V0 must have zero mean")
        for k, c in v0.items():
            if abs(v0.get(tuple(-x for x in k), 0.0) - c.conjugate()) > 1e-14 * max(1, abs(c)):
                raise RealityError(f"V0 not real: coefficient at {k}")
        object.__setattr__(self, "v0", v0)
        if self.beta0 <= 0:
            raise ValueError("beta0 must be positive")

    @classmethod
    def cosine(cls, m: float, amp: float, d: int = 1, beta0: float | None = None):
        """V = m + amp * sum_k cos(x_k)."""
        v0 = {}
        for k in range(d):
            e = [0] * d
            e[k] = 1
            v0[tuple(e)] = amp / 2
            e[k] = -1
            v0[tuple(e)] = amp / 2
        beta0 = 0.5 * (m - d * abs(amp)) if beta0 is None else beta0
        return cls(m, v0, beta0, d)

    @property
    def radius(self) -> int:
        return max((max(abs(x) for x in k) for k, c in self.v0.items() if c != 0), default=0)

    def v0_array(self, R: int | None = None) -> np.ndarray:
        R = self.radius if R is None else R
        out = np.zeros((2 * R + 1,) * self.d, dtype=complex)
        for k, c in self.v0.items():
            if max(abs(x) for x in k) <= R:
                out[tuple(x + R for x in k)] = c
        return out

    def truncated_operator(self, N: int, j0=None) -> np.ndarray:
        """-Delta + V on |j - j0| <= N, in ravel order of the j box."""
        j0 = np.zeros(self.d, dtype=int) if j0 is None else np.asarray(j0)
        side = np.arange(-N, N + 1)
        js = np.stack([g.ravel() for g in np.meshgrid(*([side] * self.d), indexing="ij")], axis=1) + j0
        diff = js[:, None, :] - js[None, :, :]
        R = self.radius
        H = np.zeros((len(js), len(js)), dtype=complex)
        if R:
            v = self.v0_array(R)
            ok = (np.abs(diff) <= R).all(axis=2)
            d_ok = diff[ok] + R
            H[ok] = v[tuple(d_ok.T)]
        H[np.diag_indices(len(js))] += (js ** 2).sum(axis=1) + self.m
        return H

    def spectrum(self, N: int, j0=None) -> np.ndarray:
        return sla.eigvalsh(self.truncated_operator(N, j0))

    def verify(self, N: int) -> float:
        """Smallest eigenvalue on the box |j| <= N; error if below beta0."""
        mu = float(self.spectrum(N)[0])
        if mu < self.beta0:
            raise PositivityError(f"-Delta + V has eigenvalue {mu:.6g} < beta0 = {self.beta0}")
        return mu

    def shifted(self, sigma: float) -> "PotentialSpectrum":
        return replace(self, m=self.m + sigma)


class StateSpectrum:
    """Coefficients (u+_{l,j}, u-_{l,j}) on the box |(l, j)| <= N."""

    def __init__(self, plus, minus, nu: int, d: int):
        plus = np.array(plus, dtype=complex)
        minus = np.array(minus, dtype=complex)
        if plus.shape != minus.shape or plus.ndim != nu + d or len(set(plus.shape)) != 1 \
                or plus.shape[0] % 2 != 1:
            raise LatticeError(f"state arrays of shape {plus.shape} for b = {nu + d}")
        self.plus = plus
        self.minus = minus
        self.nu = nu
        self.d = d

    @property
    def N(self) -> int:
        return _radius(self.plus)

    @property
    def b(self):
        return self.nu + self.d

    def __repr__(self):
        return f"StateSpectrum(N={self.N}, nu={self.nu}, d={self.d})"

    @classmethod
    def zeros(cls, nu, d, N):
        z = np.zeros((2 * N + 1,) * (nu + d), dtype=complex)
        return cls(z, z, nu, d)

    @classmethod
    def from_plus(cls, plus, nu, d):
        """The state in U with the given u+."""
        plus = np.asarray(plus, dtype=complex)
        return cls(plus, reflect(plus).conj(), nu, d)

    @classmethod
    def from_vector(cls, w, box: SiteBox):
        """From a vector in the layout of a box centred at the origin."""
        if any(box.center.l) or any(box.center.j):
            raise LatticeError("state boxes are centred at the origin")
        w = np.asarray(w, dtype=complex).ravel()
        shape = (2 * box.radius + 1,) * box.b
        return cls(w[0::2].reshape(shape), w[1::2].reshape(shape), box.nu, box.d)

    def to_vector(self) -> np.ndarray:
        w = np.empty(2 * self.plus.size, dtype=complex)
        w[0::2] = self.plus.ravel()
        w[1::2] = self.minus.ravel()
        return w

    def box(self) -> SiteBox:
        return SiteBox((0,) * self.nu, (0,) * self.d, max(self.N, 1))

    def reality_drift(self) -> float:
        """max |u-_{l,j} - conj(u+_{-l,-j})|."""
        return float(np.abs(self.minus - reflect(self.plus).conj()).max(initial=0.0))

    def restore(self) -> "StateSpectrum":
        """Orthogonal projection onto U."""
        plus = 0.5 * (self.plus + reflect(self.minus).conj())
        return StateSpectrum.from_plus(plus, self.nu, self.d)

    def resize(self, N: int) -> "StateSpectrum":
        return StateSpectrum(pad_coeffs(self.plus, N), pad_coeffs(self.minus, N), self.nu, self.d)

    def tail(self, N: int) -> float:
        return math.hypot(tail_norm(self.plus, N), tail_norm(self.minus, N))

    def norm(self, s: float, K0: float = 1.0) -> float:
        return math.hypot(sobolev(self.plus, s, K0), sobolev(self.minus, s, K0))

    def __add__(self, other):
        N = max(self.N, other.N)
        a, b_ = self.resize(N), other.resize(N)
        return StateSpectrum(a.plus + b_.plus, a.minus + b_.minus, self.nu, self.d)

    def __sub__(self, other):
        return self + other.scale(-1.0)

    def scale(self, c) -> "StateSpectrum":
        return StateSpectrum(c * self.plus, c * self.minus, self.nu, self.d)

    def copy(self):
        return StateSpectrum(self.plus.copy(), self.minus.copy(), self.nu, self.d)


# ---------------------------------------------------------------------------
# nonlinearity

@dataclass
class NonlinearityData:
    """f(phi, x, rho) real, its rho-derivative and the forcing g(phi, x).

    The callables act on grid arrays: phi has shape (nu, ...), x has shape
    (d, ...), rho has the trailing grid shape.
    """
    f: Callable
    fprime: Callable
    g: Callable
    name: str = "custom"
    grid: int | None = None

    @classmethod
    def cubic(cls, g=None):
        return cls(lambda phi, x, rho: rho, lambda phi, x, rho: np.ones_like(rho),
                   g if g is not None else forcing_cos, "cubic")

    @classmethod
    def linear(cls, g=None):
        return cls(lambda phi, x, rho: np.zeros_like(rho), lambda phi, x, rho: np.zeros_like(rho),
                   g if g is not None else forcing_cos, "linear")


def forcing_cos(phi, x):
    """g = cos(phi_1) cos(x_1)."""
    return np.cos(phi[0]) * np.cos(x[0]) + 0j


def forcing_zero(phi, x):
    return np.zeros(phi.shape[1:], dtype=complex)


def default_grid(N_in: int, R_out: int) -> int:
    """At least four times the working truncation, and alias-free for quadratic products."""
    M = max(4 * max(N_in, 1), 2 * N_in + R_out + 1, 2 * R_out + 1)
    return M + (M % 2)


def _values(u: StateSpectrum, M: int):
    return to_grid(u.plus, M), to_grid(u.minus, M)


def _check_reality(u: StateSpectrum, tol=1e-10):
    drift = u.reality_drift()
    scale = max(1.0, float(np.abs(u.plus).max(initial=0.0)))
    if drift > tol * scale:
        raise RealityError(f"reality constraint violated: drift {drift:.3g}")


def _pq_on_grid(u, nl, M):
    up, um = _values(u, M)
    rho_c = up * um
    rho = rho_c.real
    phi, x = grid_points(u.nu, u.d, M)
    f = nl.f(phi, x, rho)
    fp = nl.fprime(phi, x, rho)
    return np.asarray(f + fp * rho, dtype=complex), np.asarray(fp * up * up, dtype=complex), rho_c


def compute_pq(u: StateSpectrum, nl: NonlinearityData, R: int | None = None, *,
               M: int | None = None, check: bool = True, alias_tol: float = 1e-8):
    """Fourier coefficients of p = f + f' rho and q = f' (u+)^2, rho = |u+|^2.

    Coefficients are returned up to radius R (default 2 N).  With `check`
    the computation is repeated on the doubled grid and an AliasingError is
    raised when any coefficient moves by more than `alias_tol`.
    """
    _check_reality(u)
    R = 2 * u.N if R is None else R
    M = M or nl.grid or default_grid(u.N, R)

    def once(M):
        p, q, rho_c = _pq_on_grid(u, nl, M)
        scale = max(1.0, float(np.abs(rho_c).max()))
        if np.abs(rho_c.imag).max(initial=0.0) > 1e-10 * scale:
            raise RealityError("u+ u- is not real on the grid")
        return from_grid(p, R), from_grid(q, R), p

    pc, qc, pgrid = once(M)
    if np.abs(pgrid.imag).max(initial=0.0) > 1e-10 * max(1.0, np.abs(pgrid).max()):
        raise RealityError("p is not real-valued on the grid")
    if check:
        p2, q2, _ = once(2 * M)
        dev = max(np.abs(p2 - pc).max(initial=0.0), np.abs(q2 - qc).max(initial=0.0))
        if dev > alias_tol:
            raise AliasingError(f"grid {M} too coarse: doubling changes coefficients by {dev:.3g}")
    # exact Hermitian symmetry of p (real function)
    pc = 0.5 * (pc + reflect(pc).conj())
    return pc, qc


def nonlinear_term(u: StateSpectrum, nl: NonlinearityData, R: int | None = None, *,
                   M: int | None = None, forcing: bool = True) -> StateSpectrum:
    """F(u) = (f(rho) u+ + g, f(rho) u- + conj g) up to radius R (default 3 N)."""
    R = 3 * u.N if R is None else R
    M = M or nl.grid or default_grid(u.N, R)
    M = max(M, 4 * u.N + R + 1 + (4 * u.N + R + 1) % 2)
    up, um = _values(u, M)
    rho = (up * um).real
    phi, x = grid_points(u.nu, u.d, M)
    f = nl.f(phi, x, rho)
    vp, vm = f * up, f * um
    if forcing:
        g = nl.g(phi, x)
        vp = vp + g
        vm = vm + np.conj(g)
    return StateSpectrum(from_grid(vp, R), from_grid(vm, R), u.nu, u.d)


def forcing_coeffs(nl: NonlinearityData, nu, d, R: int, M: int | None = None) -> StateSpectrum:
    M = M or max(4 * R, 16)
    phi, x = grid_points(nu, d, M)
    g = nl.g(phi, x)
    return StateSpectrum(from_grid(g, R), from_grid(np.conj(g), R), nu, d)


def linearized_action(u: StateSpectrum, h: StateSpectrum, nl: NonlinearityData,
                      R: int | None = None, M: int | None = None) -> StateSpectrum:
    """(Df)(u) h = T1 h evaluated pseudo-spectrally."""
    R = max(u.N, h.N) if R is None else R
    Nmax = max(u.N, h.N)
    M = M or max(default_grid(Nmax, R), 4 * Nmax + R + 1)
    M += M % 2
    p, q, _ = _pq_on_grid(u, nl, M)
    hp, hm = to_grid(h.resize(Nmax).plus, M), to_grid(h.resize(Nmax).minus, M)
    qbar = np.conj(q)
    return StateSpectrum(from_grid(p * hp + q * hm, R), from_grid(qbar * hp + p * hm, R),
                         u.nu, u.d)


# ---------------------------------------------------------------------------
# frequencies

def default_omega_bar(nu: int) -> np.ndarray:
    if nu == 1:
        return np.array([1.0])
    if nu == 2:
        return np.array([1.0, GOLDEN])
    raise ValueError("default frequency vectors exist for nu = 1, 2 only")


def diophantine_certificate(omega, L: int, tau0: float | None = None):
    """(gamma0, tau0) with |omega . l| >= gamma0 |l|^{-tau0} for 0 < |l| <= L.

    gamma0 is the exact minimum over the finite range, found by enumeration.
    """
    omega = np.asarray(omega, dtype=float)
    nu = len(omega)
    tau0 = float(nu) if tau0 is None else tau0
    side = np.arange(-L, L + 1)
    ls = np.stack([g.ravel() for g in np.meshgrid(*([side] * nu), indexing="ij")], axis=1)
    n = np.abs(ls).max(axis=1)
    ls, n = ls[n > 0], n[n > 0]
    gamma0 = float(np.min(np.abs(ls @ omega) * n.astype(float) ** tau0))
    return gamma0, tau0


# ---------------------------------------------------------------------------
# assembly

@dataclass
class OperatorAssembly:
    """Fourier data of A(eps, lam, theta): potential, p and q coefficients, omega_bar.

    p and q are centred arrays over Z^b; offsets beyond their radius are zero.
    """
    potential: PotentialSpectrum
    p: np.ndarray
    q: np.ndarray
    omega_bar: np.ndarray
    nu: int
    d: int
    diophantine: tuple = field(default=(float("nan"), float("nan")))

    def __post_init__(self):
        self.omega_bar = np.asarray(self.omega_bar, dtype=float).reshape(self.nu)
        if self.potential.d != self.d:
            raise ValueError("potential dimension differs from d")
        if self.p.shape != self.q.shape or self.p.ndim != self.b:
            raise ValueError("p and q must be centred arrays of the same radius over Z^b")
        self.p.setflags(write=False)
        self.q.setflags(write=False)

    @property
    def b(self):
        return self.nu + self.d

    @property
    def radius(self) -> int:
        return _radius(self.p)

    @classmethod
    def linear(cls, potential, nu, omega_bar=None):
        w = default_omega_bar(nu) if omega_bar is None else omega_bar
        z = np.zeros((1,) * (nu + potential.d), dtype=complex)
        return cls(potential, z, z.copy(), w, nu, potential.d)

    @classmethod
    def from_state(cls, potential, u: StateSpectrum, nl: NonlinearityData, omega_bar=None,
                   R: int | None = None, check: bool = True):
        w = default_omega_bar(u.nu) if omega_bar is None else omega_bar
        p, q = compute_pq(u, nl, R, check=check)
        return cls(potential, p, q, w, u.nu, u.d)

    def with_pq(self, p, q) -> "OperatorAssembly":
        return replace(self, p=np.asarray(p, dtype=complex), q=np.asarray(q, dtype=complex))

    def with_potential(self, potential) -> "OperatorAssembly":
        return replace(self, potential=potential)

    # --- pieces on a box
    def diagonal(self, box: SiteBox, lam: float, theta: float = 0.0) -> np.ndarray:
        """d_{i,a} = -+ lam w.l + |j|^2 + m -+ theta (minus sign for a = 0)."""
        sgn = 2.0 * box.bit - 1.0
        wl = box.time @ self.omega_bar
        jj = (box.space ** 2).sum(axis=1)
        return sgn * (lam * wl + theta) + jj + self.potential.m

    def diagonal_arrays(self, N: int, lam: float, theta: float = 0.0):
        """The diagonal on the origin box of radius N as (u+ array, u- array)."""
        side = np.arange(-N, N + 1)
        g = np.meshgrid(*([side] * self.b), indexing="ij")
        wl = sum(self.omega_bar[k] * g[k] for k in range(self.nu))
        jj = sum(g[self.nu + k] ** 2 for k in range(self.d)) + self.potential.m
        return jj - (lam * wl + theta), jj + (lam * wl + theta)

    def T1_entries(self, box) -> np.ndarray:
        pts = box.spatial
        diff = pts[:, None, :] - pts[None, :, :]
        R = self.radius
        ok = (np.abs(diff) <= R).all(axis=2)
        idx = tuple(np.moveaxis(np.where(ok[..., None], diff + R, 0), -1, 0))
        P = np.where(ok, self.p[idx], 0)
        Q = np.where(ok, self.q[idx], 0)
        # conj(q_{i'-i}) for the (1, 0) block
        Qb = np.where(ok, np.conj(reflect(self.q)[idx]), 0)
        a = box.bit
        ar, ac = a[:, None], a[None, :]
        return np.where(ar == ac, P, np.where(ar == 0, Q, Qb))

    def T2_entries(self, box) -> np.ndarray:
        pts = box.spatial
        nu = self.nu
        R = self.potential.radius
        n = len(box)
        if R == 0:
            return np.zeros((n, n), dtype=complex)
        dl = pts[:, None, :nu] - pts[None, :, :nu]
        dj = pts[:, None, nu:] - pts[None, :, nu:]
        ok = (dl == 0).all(axis=2) & (np.abs(dj) <= R).all(axis=2) \
            & (box.bit[:, None] == box.bit[None, :])
        v = self.potential.v0_array(R)
        idx = tuple(np.moveaxis(np.where(ok[..., None], dj + R, 0), -1, 0))
        return np.where(ok, v[idx], 0)

    def T_entries(self, box, eps: float) -> np.ndarray:
        E = self.T2_entries(box)
        if eps != 0:
            E = E - eps * self.T1_entries(box)
        return E


def _check_lambda(lam):
    lo, hi = LAMBDA_RANGE
    if not lo <= lam <= hi:
        raise ValueError(f"lambda = {lam} outside [{lo}, {hi}]")


def assemble_submatrix(asm: OperatorAssembly, eps: float, lam: float, theta: float,
                       box: SiteBox, *, herm_tol: float = 1e-12) -> SiteMatrix:
    """A_{box}(eps, lam, theta) as a Hermitian SiteMatrix."""
    _check_lambda(lam)
    if box.nu != asm.nu or box.d != asm.d:
        raise LatticeError("box lives on a different lattice")
    E = asm.T_entries(box, eps)
    diag = asm.diagonal(box, lam, theta)
    E[np.diag_indices(len(box))] += diag
    scale = max(float(np.abs(diag).max(initial=0.0)), 1.0)
    res = float(np.abs(E - E.conj().T).max(initial=0.0))
    if res > herm_tol * scale:
        raise NonHermitianError(f"assembled matrix not Hermitian: residual {res:.3g}")
    return SiteMatrix(box, box, E, hermitian=True, herm_tol=np.inf)


def box_matrix(asm, eps, lam, theta, N, l0=None, j0=None) -> SiteMatrix:
    l0 = (0,) * asm.nu if l0 is None else l0
    j0 = (0,) * asm.d if j0 is None else j0
    return assemble_submatrix(asm, eps, lam, theta, SiteBox(l0, j0, N))


def diagonal_scale(asm, lam, theta, box) -> float:
    return max(float(np.abs(asm.diagonal(box, lam, theta)).max()), 1.0)


def covariance_check(asm, eps, lam, theta, N, l1, j1) -> float:
    """max |A_{N,l1,j1}(theta) - A_{N,0,j1}(theta + lam w.l1)| entrywise."""
    l1 = tuple(int(x) for x in np.atleast_1d(l1))
    j1 = tuple(int(x) for x in np.atleast_1d(j1))
    A = box_matrix(asm, eps, lam, theta, N, l1, j1)
    shift = lam * float(np.dot(asm.omega_bar, l1))
    B = box_matrix(asm, eps, lam, theta + shift, N, None, j1)
    return float(np.abs(A.entries - B.entries).max())


def t1_decay_check(asm: OperatorAssembly, box: SiteBox, s: float, K0: float, K: float = 2.0):
    """|||T1|||_s <= K ||(q, p)||_s (K = 2 from [T1(n)] <= |p_n| + max(|q_n|, |q_{-n}|))."""
    T1 = SiteMatrix(box, box, asm.T1_entries(box))
    lhs = snorm(T1, s, K0)
    rhs = K * math.hypot(sobolev(asm.p, s, K0), sobolev(asm.q, s, K0))
    return Witness(lhs <= rhs * (1 + 1e-12), lhs, rhs, {"K": K})


def apply_Lomega(u: StateSpectrum, lam: float, asm: OperatorAssembly, *, out_N: int | None = None,
                 return_tail: bool = False, theta: float = 0.0):
    """L_omega u = D u + V0 * u in Fourier coefficients, on the box of radius out_N.

    The part of the V0 convolution falling outside the output box is dropped;
    its l2 norm is returned with `return_tail`.
    """
    out_N = u.N if out_N is None else out_N
    uu = u.resize(out_N)
    dp, dm = asm.diagonal_arrays(out_N, lam, theta)
    out = StateSpectrum(dp * uu.plus, dm * uu.minus, u.nu, u.d)
    tail = 0.0
    Rv = asm.potential.radius
    if Rv:
        ker = asm.potential.v0_array().reshape((1,) * u.nu + (2 * Rv + 1,) * u.d)
        parts = []
        for arr in (u.plus, u.minus):
            full = scipy.signal.convolve(arr, ker, mode="full", method="direct")
            # full has radius u.N + Rv in j but u.N in l
            full = _square(full, u.nu, u.N, Rv)
            tail = math.hypot(tail, tail_norm(full, out_N) if _radius(full) > out_N else 0.0)
            parts.append(pad_coeffs(full, out_N))
        out = StateSpectrum(out.plus + parts[0], out.minus + parts[1], u.nu, u.d)
    return (out, tail) if return_tail else out


def _square(full, nu, N, Rv):
    """Pad the l axes of a convolution output so that all axes share one radius."""
    pad = [(Rv, Rv)] * nu + [(0, 0)] * (full.ndim - nu)
    return np.pad(full, pad) if Rv else full


# ---------------------------------------------------------------------------
# presets and tables

@dataclass
class Problem:
    """Everything that defines one forced NLS instance."""
    name: str
    nu: int
    d: int
    potential: PotentialSpectrum
    nonlinearity: NonlinearityData
    omega_bar: np.ndarray

    def assembly(self, u: StateSpectrum | None = None, R: int | None = None):
        if u is None:
            return OperatorAssembly.linear(self.potential, self.nu, self.omega_bar)
        return OperatorAssembly.from_state(self.potential, u, self.nonlinearity, self.omega_bar, R)


PRESETS = ("cubic-d1", "linear-forced", "cubic-d2", "cubic-nu2")


def preset(name: str) -> Problem:
    """Built-in problems: V = 1 + 0.3 cos x, g = cos(phi) cos(x) and f = rho (cubic) or 0."""
    if name == "cubic-d1":
        return Problem(name, 1, 1, PotentialSpectrum.cosine(1.0, 0.3, 1),
                       NonlinearityData.cubic(), default_omega_bar(1))
    if name == "linear-forced":
        return Problem(name, 1, 1, PotentialSpectrum.cosine(1.0, 0.3, 1),
                       NonlinearityData.linear(), default_omega_bar(1))
    if name == "cubic-d2":
        return Problem(name, 1, 2, PotentialSpectrum.cosine(1.0, 0.2, 2),
                       NonlinearityData.cubic(), default_omega_bar(1))
    if name == "cubic-nu2":
        return Problem(name, 2, 1, PotentialSpectrum.cosine(1.0, 0.3, 1),
                       NonlinearityData.cubic(), default_omega_bar(2))
    raise KeyError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")


def write_table(path, coeffs: np.ndarray, nu: int, d: int):
    """Text table: header 'nu d N', then one line 'l_1..l_nu j_1..j_d re im' per nonzero."""
    R = _radius(coeffs)
    lines = [f"{nu} {d} {R}"]
    for idx in itertools.product(range(2 * R + 1), repeat=nu + d):
        c = coeffs[idx]
        if c != 0:
            lab = " ".join(str(k - R) for k in idx)
            lines.append(f"{lab} {c.real:.17g} {c.imag:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_table(path):
    """Inverse of write_table: returns (coeffs, nu, d)."""
    rows = [ln.split() for ln in Path(path).read_text().splitlines()
            if ln.strip() and not ln.lstrip().startswith("#")]
    if not rows or len(rows[0]) != 3:
        raise ValueError(f"{path}: missing 'nu d N' header")
    nu, d, R = (int(x) for x in rows[0])
    out = np.zeros((2 * R + 1,) * (nu + d), dtype=complex)
    for k, r in enumerate(rows[1:], start=2):
        if len(r) != nu + d + 2:
            raise ValueError(f"{path}: line {k} has {len(r)} fields, expected {nu + d + 2}")
        idx = tuple(int(x) + R for x in r[:nu + d])
        if min(idx) < 0 or max(idx) > 2 * R:
            raise ValueError(f"{path}: line {k} outside the declared truncation {R}")
        out[idx] = complex(float(r[-2]), float(r[-1]))
    return out, nu, d


def potential_from_table(coeffs, nu, d, m: float, beta0: float) -> PotentialSpectrum:
    """V0 from a table whose entries all sit at l = 0."""
    R = _radius(coeffs)
    v0 = {}
    for idx in itertools.product(range(2 * R + 1), repeat=nu + d):
        c = coeffs[idx]
        if c != 0:
            if any(k != R for k in idx[:nu]):
                raise ValueError("potential table has entries with l != 0")
            v0[tuple(k - R for k in idx[nu:])] = c
    return PotentialSpectrum(m, v0, beta0, d)


def forcing_from_table(coeffs, nu, d):
    """g(phi, x) = sum c_{l,j} e^{i(l.phi + j.x)} from a coefficient table."""
    R = _radius(coeffs)
    idx = np.argwhere(coeffs != 0)
    modes, vals = idx - R, coeffs[tuple(idx.T)]

    def g(phi, x):
        out = np.zeros(phi.shape[1:], dtype=complex)
        for n, c in zip(modes, vals):
            arg = sum(n[k] * phi[k] for k in range(nu)) + sum(n[nu + k] * x[k] for k in range(d))
            out += c * np.exp(1j * arg)
        return out
    return g


# ---------------------------------------------------------------------------
# spectra of box restrictions

def t1_schur_bound(asm: OperatorAssembly) -> float:
    """sum_n [T1(n)] (with the bound |p_n| + max(|q_n|, |q_{-n}|) per block): >= ||T1||_0."""
    return float(np.sum(np.abs(asm.p)) + np.sum(np.maximum(np.abs(asm.q), np.abs(reflect(asm.q)))))


def free_box_eigenvalues(asm: OperatorAssembly, lam: float, theta: float, N: int,
                         l0=None, j0=None, mu=None) -> np.ndarray:
    """Eigenvalues of the eps = 0 box matrix A_{N,l0,j0}(0, lam, theta), shape (2, L, K).

    At eps = 0 the box is a direct sum over (l, a) of -Delta + V on |j - j0| <= N
    shifted by -+(lam w.l + theta); axis 0 is a, axis 1 runs over the (2N+1)^nu
    time indices, axis 2 over the eigenvalues mu_k of the spatial block.
    """
    l0 = np.zeros(asm.nu, dtype=int) if l0 is None else np.atleast_1d(l0)
    mu = asm.potential.spectrum(N, j0) if mu is None else mu
    side = np.arange(-N, N + 1)
    ls = np.stack([g.ravel() for g in np.meshgrid(*([side] * asm.nu), indexing="ij")], axis=1) + l0
    t = lam * (ls @ asm.omega_bar) + theta
    return np.stack([mu[None, :] - t[:, None], mu[None, :] + t[:, None]])
