"""Index arithmetic on the space-time Fourier lattice Z^nu x Z^d x {0, 1}.

A site is k = (l, j, a) with a time frequency l, a space frequency j and a
component bit a selecting u+ (a=0) or u- (a=1).  Bulk operations work on
integer arrays of shape (n, nu + d + 1); the small frozen dataclasses below
are the scalar interface.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

# Sites are packed into one int64 key for sorting and lookup.  Each lattice
# coordinate gets _BITS bits after an offset, the bit a gets the lowest bit.
_BITS = 16
_OFF = 1 << (_BITS - 1)


class LatticeError(ValueError):
    pass


@dataclass(frozen=True)
class MultiIndex:
    l: tuple
    j: tuple

    def __post_init__(self):
        object.__setattr__(self, "l", tuple(int(x) for x in self.l))
        object.__setattr__(self, "j", tuple(int(x) for x in self.j))

    @property
    def nu(self):
        return len(self.l)

    @property
    def d(self):
        return len(self.j)

    def norm(self) -> int:
        """Sup norm max(|l|, |j|)."""
        return max((abs(x) for x in self.l + self.j), default=0)

    def jnorm2(self) -> int:
        """Squared Euclidean norm of the space part."""
        return sum(x * x for x in self.j)

    def __sub__(self, other):
        _check_dims(self, other)
        return MultiIndex(tuple(a - b for a, b in zip(self.l, other.l)),
                          tuple(a - b for a, b in zip(self.j, other.j)))

    def __add__(self, other):
        _check_dims(self, other)
        return MultiIndex(tuple(a + b for a, b in zip(self.l, other.l)),
                          tuple(a + b for a, b in zip(self.j, other.j)))


@dataclass(frozen=True)
class Site:
    i: MultiIndex
    a: int

    def __post_init__(self):
        if self.a not in (0, 1):
            raise LatticeError(f"component bit must be 0 or 1, got {self.a}")

    @classmethod
    def make(cls, l, j, a) -> "Site":
        return cls(MultiIndex(tuple(l), tuple(j)), int(a))

    @property
    def l(self):
        return self.i.l

    @property
    def j(self):
        return self.i.j

    def as_tuple(self):
        return self.i.l + self.i.j + (self.a,)


def _check_dims(x, y):
    if len(x.l) != len(y.l) or len(x.j) != len(y.j):
        raise LatticeError(
            f"dimension mismatch: (nu, d) = ({len(x.l)}, {len(x.j)}) vs ({len(y.l)}, {len(y.j)})")


def sup_distance(k: Site, k2: Site) -> int:
    """|k - k2| = max(|i - i2|, |a - a2|)."""
    _check_dims(k.i, k2.i)
    return max((k.i - k2.i).norm(), abs(k.a - k2.a))


def shift_time(k: Site, l1) -> Site:
    """Translate the time part of a site by l1."""
    l1 = tuple(int(x) for x in np.atleast_1d(l1))
    if len(l1) != len(k.l):
        raise LatticeError(f"shift of length {len(l1)} for nu = {len(k.l)}")
    return Site(MultiIndex(tuple(a + b for a, b in zip(k.l, l1)), k.j), k.a)


# ---------------------------------------------------------------------------
# Array-level site sets

def encode(arr: np.ndarray) -> np.ndarray:
    """Pack an (n, b+1) site array into int64 keys that sort lexicographically."""
    arr = np.asarray(arr, dtype=np.int64)
    b = arr.shape[1] - 1
    if 1 + _BITS * b > 63:
        raise LatticeError(f"lattice dimension b = {b} too large for key packing")
    if arr.size and np.abs(arr[:, :b]).max(initial=0) >= _OFF:
        raise LatticeError("lattice coordinate out of packable range")
    key = np.zeros(arr.shape[0], dtype=np.int64)
    for c in range(b):
        key = (key << _BITS) | (arr[:, c] + _OFF)
    return (key << 1) | arr[:, b]


def sup_dist_matrix(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Pairwise sup distances between two site arrays."""
    x = np.asarray(x)
    y = np.asarray(y)
    return np.abs(x[:, None, :] - y[None, :, :]).max(axis=2)


class SiteSet:
    """An ordered finite set of sites, stored in canonical (lexicographic) order."""

    def __init__(self, arr, nu: int, d: int, *, presorted: bool = False):
        arr = np.asarray(arr, dtype=np.int64).reshape(-1, nu + d + 1)
        if arr.size and not np.isin(arr[:, -1], (0, 1)).all():
            raise LatticeError("component bit must be 0 or 1")
        keys = encode(arr)
        if not presorted:
            keys, idx = np.unique(keys, return_index=True)
            arr = arr[idx]
        arr.setflags(write=False)
        keys.setflags(write=False)
        self.nu = nu
        self.d = d
        self.array = arr
        self.keys = keys

    @property
    def b(self):
        return self.nu + self.d

    def __len__(self):
        return self.array.shape[0]

    def __iter__(self):
        for k in range(len(self)):
            yield self.site(k)

    def __eq__(self, other):
        return (isinstance(other, SiteSet) and other.nu == self.nu and other.d == self.d
                and np.array_equal(other.keys, self.keys))

    def __hash__(self):
        return hash((self.nu, self.d, self.keys.tobytes()))

    def __repr__(self):
        return f"{type(self).__name__}(n={len(self)}, nu={self.nu}, d={self.d})"

    @property
    def spatial(self) -> np.ndarray:
        """The (l, j) parts, shape (n, b)."""
        return self.array[:, :self.b]

    @property
    def time(self) -> np.ndarray:
        return self.array[:, :self.nu]

    @property
    def space(self) -> np.ndarray:
        return self.array[:, self.nu:self.b]

    @property
    def bit(self) -> np.ndarray:
        return self.array[:, -1]

    def site(self, k: int) -> Site:
        row = self.array[k]
        return Site.make(row[:self.nu], row[self.nu:self.b], row[-1])

    @property
    def sites(self):
        return list(self)

    def lookup(self, arr, *, strict: bool = True) -> np.ndarray:
        """Indices of the sites in `arr`; -1 (or an error) for missing ones."""
        keys = encode(np.asarray(arr, dtype=np.int64).reshape(-1, self.b + 1))
        if len(self) == 0:
            pos = np.zeros(len(keys), dtype=np.int64)
            ok = np.zeros(len(keys), dtype=bool)
        else:
            pos = np.minimum(np.searchsorted(self.keys, keys), len(self) - 1)
            ok = self.keys[pos] == keys
        if strict and not np.all(ok):
            raise LatticeError(f"{np.count_nonzero(~ok)} sites not in the set")
        return np.where(ok, pos, -1)

    def index(self, k: Site) -> int:
        return int(self.lookup(np.array([k.as_tuple()]))[0])

    def contains(self, arr) -> np.ndarray:
        return self.lookup(arr, strict=False) >= 0

    def subset(self, mask_or_idx) -> "SiteSet":
        return SiteSet(self.array[mask_or_idx], self.nu, self.d)

    def union(self, other: "SiteSet") -> "SiteSet":
        return SiteSet(np.vstack([self.array, other.array]), self.nu, self.d)

    def difference(self, other: "SiteSet") -> "SiteSet":
        return self.subset(~other.contains(self.array))

    def issubset(self, other: "SiteSet") -> bool:
        return bool(np.all(other.contains(self.array)))

    def diameter(self) -> int:
        if len(self) == 0:
            return 0
        ext = self.spatial.max(axis=0) - self.spatial.min(axis=0)
        return int(max(ext.max(initial=0), np.ptp(self.bit)))

    def distance_to(self, arr) -> np.ndarray:
        """For each site in `arr`, the sup distance to this set."""
        arr = np.asarray(arr).reshape(-1, self.b + 1)
        if len(self) == 0:
            return np.full(arr.shape[0], np.iinfo(np.int64).max)
        out = np.empty(arr.shape[0], dtype=np.int64)
        step = max(1, 4_000_000 // max(len(self), 1))
        for s in range(0, arr.shape[0], step):
            out[s:s + step] = sup_dist_matrix(arr[s:s + step], self.array).min(axis=1)
        return out

    @classmethod
    def empty(cls, nu, d):
        return cls(np.zeros((0, nu + d + 1), dtype=np.int64), nu, d)


class SiteBox(SiteSet):
    """All sites (l, j, a) with |l - l0| <= N, |j - j0| <= N, a in {0, 1}."""

    def __init__(self, l0, j0, N: int):
        if int(N) < 1:
            raise LatticeError(f"box radius must be >= 1, got {N}")
        l0 = tuple(int(x) for x in np.atleast_1d(l0))
        j0 = tuple(int(x) for x in np.atleast_1d(j0))
        nu, d = len(l0), len(j0)
        N = int(N)
        center = np.array(l0 + j0, dtype=np.int64)
        side = np.arange(-N, N + 1)
        grids = np.meshgrid(*([side] * (nu + d)), indexing="ij")
        pts = np.stack([g.ravel() for g in grids], axis=1) + center
        arr = np.empty((2 * pts.shape[0], nu + d + 1), dtype=np.int64)
        arr[0::2, :-1] = pts
        arr[1::2, :-1] = pts
        arr[0::2, -1] = 0
        arr[1::2, -1] = 1
        super().__init__(arr, nu, d, presorted=True)
        self.center = MultiIndex(l0, j0)
        self.radius = N

    def __repr__(self):
        return f"SiteBox(center={self.center}, N={self.radius})"

    def lookup(self, arr, *, strict: bool = True) -> np.ndarray:
        arr = np.asarray(arr, dtype=np.int64).reshape(-1, self.b + 1)
        N = self.radius
        rel = arr[:, :-1] - np.array(self.center.l + self.center.j)
        ok = (np.abs(rel) <= N).all(axis=1)
        if strict and not ok.all():
            raise LatticeError(f"{np.count_nonzero(~ok)} sites not in the box")
        rel = np.where(ok[:, None], rel + N, 0)
        flat = np.ravel_multi_index(tuple(rel.T), (2 * N + 1,) * self.b) if self.b else 0
        return np.where(ok, 2 * flat + arr[:, -1], -1)

    @cached_property
    def lattice_points(self) -> np.ndarray:
        """The (2N+1)^b spatial points, in canonical order."""
        return self.array[0::2, :-1]


def box_sites(l0, j0, N: int) -> SiteBox:
    """Sites of the box of radius N centred at (l0, j0), in canonical order."""
    return SiteBox(l0, j0, N)
