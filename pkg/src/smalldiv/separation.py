"""Singular sites, M-chains and the cluster partition of the N-bad sites.

A site k = (l, j, a) is singular when |A_k^k| < Theta and N-singular when the
box A_{N,l,j} around it is not N-good.  Sites that are both (and |l| <= N')
are grouped into equivalence classes of 2N^2-chains; inflating each class by
N gives clusters that contain every N-bad site.

N-goodness of a box is first screened with a rigorous L2 argument: at eps = 0
the box spectrum is explicit, Weyl's inequality moves it by at most
eps ||T1||_0, and a small L2 norm of the inverse bounds every s-norm on a
box of diameter 2N.  Only boxes failing the screen are inverted.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components, shortest_path
from scipy.spatial import cKDTree

from .lattice import SiteBox, SiteSet
from .multiscale import ScaleParams, direct_subcertifier
from .nls_operator import assemble_submatrix, free_box_eigenvalues, t1_schur_bound
from .smatrix import default_K0, weight_sum


class WindowError(ValueError):
    pass


@dataclass
class ClusterPartition:
    clusters: list
    N: int
    C1: float
    diam_max: int
    min_sep: float
    M: int = 0
    passed: bool = True
    chain_max: int = 0
    chain_bound: float = math.inf
    components: list = field(default_factory=list)

    def __len__(self):
        return len(self.clusters)

    def report(self) -> dict:
        return {"clusters": len(self.clusters), "sizes": [len(c) for c in self.clusters],
                "diameters": [c.diameter() for c in self.clusters],
                "diam_max": self.diam_max, "diam_bound": self.N ** self.C1,
                "min_sep": self.min_sep if math.isfinite(self.min_sep) else None,
                "sep_bound": self.N ** 2, "chain_max": self.chain_max,
                "chain_bound": self.chain_bound, "pass": self.passed}


# ---------------------------------------------------------------------------
# chains

def chain_components(nodes: SiteSet, M: float):
    """Labels of the connected components of the graph |k - k'| <= M."""
    n = len(nodes)
    if n == 0:
        return 0, np.zeros(0, dtype=int), np.zeros((0, 2), dtype=int)
    tree = cKDTree(nodes.array.astype(float))
    pairs = tree.query_pairs(r=M + 1e-9, p=np.inf, output_type="ndarray")
    g = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    count, labels = connected_components(g, directed=False)
    return count, labels, pairs


def set_distance(X: SiteSet, Y: SiteSet) -> float:
    if len(X) == 0 or len(Y) == 0:
        return math.inf
    d, _ = cKDTree(Y.array.astype(float)).query(X.array.astype(float), p=np.inf)
    return float(np.min(d))


def chain_partition(nodes: SiteSet, M: float, C1: float = 2.0, N: int | None = None):
    """Equivalence classes of M-chains in `nodes`, with diameters and separations."""
    if M < 2:
        raise ValueError("chain step M must be >= 2")
    count, labels, pairs = chain_components(nodes, M)
    comps = [nodes.subset(labels == c) for c in range(count)]
    comps.sort(key=lambda c: tuple(c.array[0]))
    diam = max((c.diameter() for c in comps), default=0)
    sep = min((set_distance(comps[a], comps[b]) for a in range(count) for b in range(a + 1, count)),
              default=math.inf)
    chain = 0
    for c in range(count):
        idx = np.flatnonzero(labels == c)
        if len(idx) > 1:
            chain = max(chain, _graph_diameter(nodes.subset(idx), M))
    N = int(round(math.sqrt(M))) if N is None else N
    return ClusterPartition(comps, N, C1, diam, sep, int(M), sep > M, chain)


def _graph_diameter(sub: SiteSet, M) -> int:
    n = len(sub)
    _, _, pairs = chain_components(sub, M)
    g = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n)).tocsr()
    dist = shortest_path(g, method="D", directed=False, unweighted=True)
    return int(dist[np.isfinite(dist)].max())


# ---------------------------------------------------------------------------
# singular and N-singular sites

def shell_bound(asm, eps, lam, theta, Theta, Nprime) -> float:
    """Singular sites have |j|^2 below this (from the closed-form diagonal)."""
    w = lam * float(np.abs(asm.omega_bar).max())
    p0 = abs(asm.p[(asm.radius,) * asm.b]) if asm.radius >= 0 else 0.0
    return Theta + abs(asm.potential.m) + abs(theta) + asm.nu * w * Nprime + abs(eps) * p0


def screen_threshold(N, params: ScaleParams, K0, s_grid=None) -> float:
    """c with ||A^{-1}||_0 <= c  =>  a box of radius N is N-good.

    Every 2x2 block of the inverse is bounded by its L2 norm and the offsets
    of a box of radius N satisfy |n| <= 2N, so
    |||A^{-1}|||_s^2 <= K0 sum_{|n| <= 2N} <n>^{2s} ||A^{-1}||_0^2.
    """
    s_grid = params.s_grid() if s_grid is None else s_grid
    return min(N ** (params.tau_prime + params.delta * s)
               / math.sqrt(K0 * weight_sum(params.b, -2 * s, 2 * N)) for s in s_grid)


class BoxGoodness:
    """N-goodness of the boxes A_{N,l,j}(eps, lam, theta), screened then certified."""

    def __init__(self, asm, eps, lam, params: ScaleParams, N: int, K0=None, subcertifier=None,
                 screen: bool = True):
        self.asm, self.eps, self.lam, self.N = asm, eps, lam, N
        self.params = params
        self.K0 = default_K0(asm.b, params.s0) if K0 is None else K0
        self.subcertifier = subcertifier or direct_subcertifier(N, params, self.K0)
        # the screen is only sound for the direct N-good test
        self.cut = 1.0 / screen_threshold(N, params, self.K0) if screen else math.inf
        self.delta = abs(eps) * t1_schur_bound(asm) if eps else 0.0
        self._mu = {}
        self.certified = 0

    def mu(self, j):
        j = tuple(int(x) for x in j)
        if j not in self._mu:
            self._mu[j] = self.asm.potential.spectrum(self.N, np.array(j))
        return self._mu[j]

    def singular(self, points, theta) -> np.ndarray:
        """N-singular flags for lattice points (l, j)."""
        points = np.asarray(points, dtype=np.int64).reshape(-1, self.asm.b)
        nu = self.asm.nu
        out = np.zeros(len(points), dtype=bool)
        for r, pt in enumerate(points):
            ev = free_box_eigenvalues(self.asm, self.lam, theta, self.N, pt[:nu], None,
                                      self.mu(pt[nu:]))
            if np.abs(ev).min() - self.delta >= self.cut:
                continue
            box = SiteBox(tuple(pt[:nu]), tuple(pt[nu:]), self.N)
            A = assemble_submatrix(self.asm, self.eps, self.lam, theta, box)
            self.certified += 1
            out[r] = not self.subcertifier(A).passed
        return out


def _window_sites(nu, d, Nprime, J):
    side_l = np.arange(-Nprime, Nprime + 1)
    side_j = np.arange(-J, J + 1)
    mesh = np.meshgrid(*([side_l] * nu + [side_j] * d), indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=1)


def singular_sites(asm, eps, lam, theta, N, Nprime, Theta, subcertifier=None, *,
                   params: ScaleParams | None = None, K0=None, window: int | None = None,
                   goodness: BoxGoodness | None = None) -> SiteSet:
    """S_N: sites with |l| <= N' that are singular and N-singular."""
    params = params or ScaleParams.desk(asm.b, Theta)
    shell = shell_bound(asm, eps, lam, theta, Theta, Nprime)
    Jw = int(math.isqrt(int(math.ceil(shell)))) + 1
    if window is not None and window < Jw:
        raise WindowError(f"spatial window {window} below the singular shell radius {Jw}")
    J = Jw if window is None else window
    pts = _window_sites(asm.nu, asm.d, Nprime, J)
    nu = asm.nu
    wl = pts[:, :nu] @ asm.omega_bar
    jj = (pts[:, nu:] ** 2).sum(axis=1)
    p0 = asm.p[(asm.radius,) * asm.b].real
    base = jj + asm.potential.m - eps * p0
    d0 = base - (lam * wl + theta)
    d1 = base + (lam * wl + theta)
    sing = np.stack([np.abs(d0) < Theta, np.abs(d1) < Theta], axis=1)
    cand = np.flatnonzero(sing.any(axis=1))
    goodness = goodness or BoxGoodness(asm, eps, lam, params, N, K0, subcertifier)
    nsing = goodness.singular(pts[cand], theta)
    keep = cand[nsing]
    rows = []
    for a in (0, 1):
        sel = keep[sing[keep, a]]
        rows.append(np.column_stack([pts[sel], np.full(len(sel), a)]))
    arr = np.vstack(rows) if rows else np.zeros((0, asm.b + 1), dtype=np.int64)
    return SiteSet(arr, asm.nu, asm.d)


def _inflate(comp: SiteSet, N, Nprime, nu) -> SiteSet:
    """{k : d(k, comp) <= N} intersected with |l| <= N'."""
    lo = comp.spatial.min(axis=0) - N
    hi = comp.spatial.max(axis=0) + N
    axes = [np.arange(a, b_ + 1) for a, b_ in zip(lo, hi)]
    pts = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
    pts = pts[(np.abs(pts[:, :nu]) <= Nprime).all(axis=1)]
    arr = np.vstack([np.column_stack([pts, np.full(len(pts), a)]) for a in (0, 1)])
    cand = SiteSet(arr, comp.nu, comp.d)
    return cand.subset(comp.distance_to(cand.array) <= N)


def build_bad_clusters(asm, params: ScaleParams, eps, lam, theta, N, Nprime, *, K0=None,
                       subcertifier=None, window=None, chain_C=None,
                       goodness: BoxGoodness | None = None) -> ClusterPartition:
    """Clusters Omega_a covering the N-bad sites with |l| <= N'."""
    goodness = goodness or BoxGoodness(asm, eps, lam, params, N, K0, subcertifier)
    S = singular_sites(asm, eps, lam, theta, N, Nprime, params.Theta, params=params,
                       window=window, goodness=goodness)
    M = 2 * N * N
    pre = chain_partition(S, M, params.C1, N)
    clusters = [_inflate(c, N, Nprime, asm.nu) for c in pre.clusters]
    diam = max((c.diameter() for c in clusters), default=0)
    sep = min((set_distance(clusters[a], clusters[b])
               for a in range(len(clusters)) for b in range(a + 1, len(clusters))), default=math.inf)
    C = params.C1 / 3.0 if chain_C is None else chain_C
    bound = (M * N) ** C
    ok = diam <= N ** params.C1 and sep > N ** 2 and pre.chain_max <= bound
    return ClusterPartition(clusters, N, params.C1, diam, sep, M, ok, pre.chain_max, bound,
                            pre.clusters)


def n_bad_sites(asm, params, eps, lam, theta, N, box: SiteBox, goodness: BoxGoodness) -> SiteSet:
    """Exhaustive N-bad sites of a box: not regular and within N of an N-singular site."""
    pts = box.lattice_points
    lo = pts.min(axis=0) - N
    hi = pts.max(axis=0) + N
    axes = [np.arange(a, b_ + 1) for a, b_ in zip(lo, hi)]
    halo = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
    nsing = goodness.singular(halo, theta)
    S = halo[nsing]
    A_diag = asm.diagonal(box, lam, theta) - eps * asm.p[(asm.radius,) * asm.b].real
    regular = np.abs(A_diag) >= params.Theta
    if len(S) == 0:
        return box.subset(np.zeros(len(box), dtype=bool))
    Sset = SiteSet(np.vstack([np.column_stack([S, np.full(len(S), a)]) for a in (0, 1)]),
                   asm.nu, asm.d)
    near = Sset.distance_to(box.array) <= N
    return box.subset(near & ~regular)


def time_fiber_count_check(asm, eps, lam, theta, Nprime, j1, subcertifier=None, *, N,
                           params: ScaleParams | None = None, K0=None):
    """(#N-singular sites (l1, j1, a1) with |l1| <= N', 2 N^{2d+nu+4})."""
    params = params or ScaleParams.desk(asm.b)
    g = BoxGoodness(asm, eps, lam, params, N, K0, subcertifier)
    side = np.arange(-Nprime, Nprime + 1)
    ls = np.stack([x.ravel() for x in np.meshgrid(*([side] * asm.nu), indexing="ij")], axis=1)
    pts = np.column_stack([ls, np.tile(np.atleast_1d(j1), (len(ls), 1))])
    count = 2 * int(g.singular(pts, theta).sum())
    return count, 2 * N ** (2 * asm.d + asm.nu + 4)
