"""Calibrated constants of the s-norm calculus and the constants manifest.

K0 is fixed from a lattice sum; the interpolation constants C(s) are never
available in closed form, so they are calibrated on a seeded corpus of random
matrix pairs (largest observed ratio times a safety factor) and frozen in a
JSON manifest.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .lattice import SiteBox, SiteSet
from .smatrix import SiteMatrix, default_K0, interpolation_ratio, line_constant

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
SAFETY = 2.0
DEFAULT_SEED = 20240611


class ManifestError(ValueError):
    pass


# ---------------------------------------------------------------------------
# random corpus

KINDS = ("decay", "sparse", "banded", "toeplitz", "diagonal")


def random_site_set(rng, nu=1, d=1, radius=2, keep=None) -> SiteSet:
    box = SiteBox((0,) * nu, (0,) * d, radius)
    keep = rng.uniform(0.4, 1.0) if keep is None else keep
    mask = rng.random(len(box)) < keep
    if not mask.any():
        mask[rng.integers(len(box))] = True
    return box.subset(mask)


def _cgauss(rng, shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2)


def random_site_matrix(rng, rows: SiteSet, cols: SiteSet, kind: str | None = None) -> SiteMatrix:
    """A random matrix with a controlled off-diagonal profile."""
    kind = KINDS[rng.integers(len(KINDS))] if kind is None else kind
    dist = np.abs(rows.spatial[:, None, :] - cols.spatial[None, :, :]).max(axis=2)
    if kind == "decay":
        E = _cgauss(rng, dist.shape) * np.exp(-rng.uniform(0.3, 2.0) * dist)
    elif kind == "sparse":
        E = _cgauss(rng, dist.shape) * (rng.random(dist.shape) < rng.uniform(0.05, 0.3))
    elif kind == "banded":
        r = int(rng.integers(0, 3))
        E = _cgauss(rng, dist.shape) * (dist <= r)
    elif kind == "toeplitz":
        # nonnegative Toeplitz profile: the regime where products add up coherently
        R = int(dist.max(initial=0)) + 1
        h = rng.random(R + 1) * np.exp(-rng.uniform(0.0, 1.5) * np.arange(R + 1))
        same = rows.bit[:, None] == cols.bit[None, :]
        E = h[dist] * same
    elif kind == "diagonal":
        same = (rows.array[:, None, :] == cols.array[None, :, :]).all(axis=2)
        E = _cgauss(rng, dist.shape) * same
    else:
        raise ValueError(f"unknown matrix kind {kind!r}")
    return SiteMatrix(rows, cols, rng.uniform(0.1, 3.0) * E)


def random_pair(rng, nu=1, d=1, radius=2):
    """M1 in M^C_D and M2 in M^B_C on random subsets of a small box."""
    D = random_site_set(rng, nu, d, radius)
    C = random_site_set(rng, nu, d, radius)
    B = random_site_set(rng, nu, d, radius)
    return random_site_matrix(rng, D, C), random_site_matrix(rng, C, B)


def corpus(seed: int, count: int, nu=1, d=1, radius=2):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        yield random_pair(rng, nu, d, radius)


# ---------------------------------------------------------------------------

def default_s_grid(s0: float, S: float, step: float = 0.5):
    n = int(round((S - s0) / step))
    return [float(s0 + k * step) for k in range(n + 1)]


def calibrate_Cs(s_grid, s0, K0, seed, count=1000, nu=1, d=1, radius=2) -> dict:
    """C(s) = SAFETY * max ratio over the corpus, with C(s0) = 1 and C >= 1."""
    worst = {s: 0.0 for s in s_grid}
    for M1, M2 in corpus(seed, count, nu, d, radius):
        for s in s_grid:
            if s > s0:
                worst[s] = max(worst[s], interpolation_ratio(M1, M2, s, s0, K0))
    out = {}
    for s in s_grid:
        out[s] = 1.0 if s <= s0 else max(1.0, SAFETY * worst[s])
    # enforce monotonicity in s so that looking up the next grid point is safe
    run = 1.0
    for s in sorted(out):
        run = max(run, out[s])
        out[s] = run
    return out


@dataclass
class Constants:
    """K0, the line constant and the frozen C(s) table for one (nu, d, s0)."""
    nu: int
    d: int
    s0: float
    K0: float
    K1: float
    Cs_table: dict = field(default_factory=dict)
    seed: int = DEFAULT_SEED
    corpus_size: int = 1000

    @property
    def b(self):
        return self.nu + self.d

    @classmethod
    def build(cls, nu=1, d=1, s0=2.0, S=8.0, seed=DEFAULT_SEED, corpus_size=1000, s_grid=None):
        b = nu + d
        K0 = default_K0(b, s0)
        grid = default_s_grid(s0, S) if s_grid is None else sorted(float(s) for s in s_grid)
        table = calibrate_Cs(grid, s0, K0, seed, corpus_size, nu, d)
        return cls(nu, d, float(s0), K0, line_constant(b), table, seed, corpus_size)

    def C(self, s: float) -> float:
        """Frozen C(s): the table value at the smallest grid point >= s."""
        if s <= self.s0:
            return 1.0
        above = [t for t in self.Cs_table if t >= s - 1e-12]
        if not above:
            new = calibrate_Cs([float(s)], self.s0, self.K0, self.seed, self.corpus_size,
                               self.nu, self.d)
            val = max(new[float(s)], max(self.Cs_table.values(), default=1.0))
            self.Cs_table[float(s)] = val
            return val
        return self.Cs_table[min(above)]

    # --- manifest I/O
    def to_json(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "nu": self.nu, "d": self.d, "b": self.b,
            "s0": self.s0, "K0": self.K0, "K1": self.K1,
            "seed": self.seed, "corpus_size": self.corpus_size,
            "safety_factor": SAFETY,
            "C_s": [[s, self.Cs_table[s]] for s in sorted(self.Cs_table)],
        }

    @classmethod
    def from_json(cls, data: dict) -> "Constants":
        try:
            if data["version"] != MANIFEST_VERSION:
                raise ManifestError(f"manifest version {data['version']} unsupported")
            c = cls(int(data["nu"]), int(data["d"]), float(data["s0"]), float(data["K0"]),
                    float(data["K1"]), {float(s): float(v) for s, v in data["C_s"]},
                    int(data["seed"]), int(data["corpus_size"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"malformed manifest: {exc}") from None
        if c.K0 != default_K0(c.b, c.s0):
            raise ManifestError("manifest K0 inconsistent with (b, s0)")
        if not c.Cs_table or any(v < 1.0 or not math.isfinite(v) for v in c.Cs_table.values()):
            raise ManifestError("manifest C(s) table invalid")
        return c

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Constants":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ManifestError(f"manifest is not valid JSON: {exc}") from None
        return cls.from_json(data)


def load_or_build(path, nu=1, d=1, s0=2.0, S=8.0, seed=DEFAULT_SEED, corpus_size=1000):
    """Load a manifest, rebuilding (with a warning) when absent, corrupted or mismatched."""
    path = Path(path)
    if path.exists():
        try:
            c = Constants.load(path)
            if (c.nu, c.d, c.s0, c.seed) == (nu, d, float(s0), seed) and max(c.Cs_table) >= S:
                return c, False
            log.warning("constants manifest %s does not match the request; regenerating", path)
        except ManifestError as exc:
            log.warning("constants manifest %s unusable (%s); regenerating", path, exc)
    c = Constants.build(nu, d, s0, S, seed, corpus_size)
    path.parent.mkdir(parents=True, exist_ok=True)
    c.save(path)
    return c, True


_CACHE: dict = {}


def get_constants(nu=1, d=1, s0=2.0, S=8.0, seed=DEFAULT_SEED) -> Constants:
    """Process-wide cache of calibrated constants."""
    key = (nu, d, float(s0), float(S), seed)
    if key not in _CACHE:
        _CACHE[key] = Constants.build(nu, d, s0, S, seed)
    return _CACHE[key]


# ---------------------------------------------------------------------------
# property suite

@dataclass
class SuiteFailure:
    inequality: str
    seed: int
    index: int
    s: float
    lhs: float
    rhs: float

    def __str__(self):
        return (f"{self.inequality} fails at s={self.s:g} on pair {self.index} of corpus seed "
                f"{self.seed}: {self.lhs:.6g} > {self.rhs:.6g}")


def property_suite(consts: Constants, seed: int, count: int = 1000, s_list=None,
                   override_C=None, rtol=1e-10) -> tuple[int, list]:
    """Algebra and interpolation inequalities over a seeded corpus.

    Returns (number of checks, failures).  `override_C` replaces every C(s)
    and exists for fault injection.
    """
    from .smatrix import algebra_check, interpolation_check
    s_list = sorted(s for s in consts.Cs_table if s > consts.s0) if s_list is None else s_list
    checks, fails = 0, []
    for i, (M1, M2) in enumerate(corpus(seed, count, consts.nu, consts.d)):
        w = algebra_check(M1, M2, consts.s0, consts.K0, rtol)
        checks += 1
        if not w.holds:
            fails.append(SuiteFailure("algebra", seed, i, consts.s0, w.lhs, w.rhs))
        for s in s_list:
            Cs = consts.C(s) if override_C is None else override_C
            w = interpolation_check(M1, M2, s, consts.s0, Cs, consts.K0, rtol)
            checks += 1
            if not w.holds:
                fails.append(SuiteFailure("interpolation", seed, i, s, w.lhs, w.rhs))
    return checks, fails
