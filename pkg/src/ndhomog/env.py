"""Stationary random coefficient fields on the unit lattice.

Randomness lives on the sites ``z`` of ``Z^d``. Each site carries a 64-bit
seed obtained by hashing ``(base_seed, z)``, so a single site can be
resampled, and the whole lattice translated, without storing anything but
the base seed and a small table of overrides.

Unit cells are centered on lattice sites: the point ``x`` belongs to the
cell of ``z = floor(x + 1/2)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "Law",
    "FieldSpec",
    "SiteSeedLattice",
    "MatrixField",
    "InvalidSpec",
    "sample_environment",
    "realize_field",
    "translate",
    "resample_site",
    "site_of",
]

KINDS = (
    "scalar_checkerboard",
    "diagonal_iid",
    "full_symmetric",
    "radial_counterexample",
    "constant",
)

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_AXIS_MULT = (
    np.uint64(0xD6E8FEB86659FD93),
    np.uint64(0xA0761D6478BD642F),
    np.uint64(0xE7037ED1A0B428DB),
    np.uint64(0x8EBC6AF09C88C6E3),
    np.uint64(0x589965CC75374CC3),
    np.uint64(0x1D8E4E27C47D124F),
)


class InvalidSpec(ValueError):
    """Raised when a field specification cannot produce admissible matrices."""


def _splitmix(x):
    # vectorized splitmix64 finalizer; uint64 arithmetic wraps silently
    x = (x + _GOLDEN) & _MASK
    x = ((x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _MASK
    x = ((x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _MASK
    return x ^ (x >> np.uint64(31))


def hash_seed(base_seed: int, *parts: int) -> int:
    """Derive a 64-bit seed from a base seed and integer tags."""
    with np.errstate(over="ignore"):
        x = np.array([base_seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
        for k, p in enumerate(parts):
            tag = np.array([p & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
            x = _splitmix(x ^ (tag * _AXIS_MULT[k % len(_AXIS_MULT)]))
    return int(x[0])


def _site_hash(base_seed: int, sites: np.ndarray) -> np.ndarray:
    sites = np.asarray(sites, dtype=np.int64)
    x = np.full(sites.shape[0], base_seed & 0xFFFFFFFFFFFFFFFF, dtype=np.uint64)
    for k in range(sites.shape[1]):
        x = _splitmix(x ^ (sites[:, k].view(np.uint64) * _AXIS_MULT[k]))
    return x


def _uniform(seeds: np.ndarray, stream: int) -> np.ndarray:
    """Uniform [0, 1) variates, one per seed, for a given stream index."""
    offset = np.uint64(((stream + 1) * 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF)
    x = _splitmix((seeds + offset) & _MASK)
    return (x >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


@dataclass(frozen=True)
class Law:
    """A one-dimensional law: finite support with weights, or uniform on [low, high]."""

    values: tuple[float, ...] = ()
    probs: tuple[float, ...] = ()
    low: float | None = None
    high: float | None = None

    def __post_init__(self):
        if self.values:
            probs = self.probs or tuple([1.0 / len(self.values)] * len(self.values))
            if len(probs) != len(self.values):
                raise InvalidSpec("values and probs differ in length")
            if min(probs) < 0 or abs(sum(probs) - 1.0) > 1e-12:
                raise InvalidSpec("probabilities must be nonnegative and sum to 1")
            object.__setattr__(self, "values", tuple(float(v) for v in self.values))
            object.__setattr__(self, "probs", tuple(float(p) for p in probs))
        elif self.low is None or self.high is None or self.high < self.low:
            raise InvalidSpec("a law needs either values or an interval low <= high")

    @property
    def is_discrete(self) -> bool:
        return bool(self.values)

    def support(self) -> tuple[float, float]:
        if self.values:
            return min(self.values), max(self.values)
        return float(self.low), float(self.high)

    def quantile(self, u: np.ndarray) -> np.ndarray:
        if self.values:
            cdf = np.cumsum(self.probs)
            cdf[-1] = 1.0
            idx = np.searchsorted(cdf, u, side="right")
            return np.asarray(self.values)[np.minimum(idx, len(self.values) - 1)]
        return self.low + (self.high - self.low) * u

    def mean(self) -> float:
        if self.values:
            return float(np.dot(self.values, self.probs))
        return 0.5 * (self.low + self.high)

    def to_dict(self) -> dict:
        if self.values:
            return {"values": list(self.values), "probs": list(self.probs)}
        return {"low": self.low, "high": self.high}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Law":
        if "values" in d:
            return cls(values=tuple(d["values"]), probs=tuple(d.get("probs", ())))
        return cls(low=float(d["low"]), high=float(d["high"]))


@dataclass(frozen=True)
class FieldSpec:
    """Law of a random coefficient field.

    Kinds
    -----
    scalar_checkerboard
        ``A = a(z) Id`` with ``a`` drawn from ``law``.
    diagonal_iid
        ``A = diag(a_1, ..., a_d)``, axis ``k`` drawn from ``axis_laws[k]``
        (a single law is reused for every axis).
    full_symmetric
        Off-diagonal entries uniform in ``[-offdiag, offdiag]``, diagonal
        ``lam + sum_j |a_ij| + s_i`` with a uniform slack ``s_i`` chosen so
        that all eigenvalues stay in ``[lam, Lam]`` and every row is
        diagonally dominant.
    radial_counterexample
        Deterministic ``A1 = Lam xx^T/|x|^2 + (I - xx^T/|x|^2)`` or ``A2``
        with the two eigenvalues swapped, blended linearly to ``Id`` inside
        ``|x| < 1``.
    constant
        The deterministic matrix ``matrix``.
    """

    kind: str
    dim: int = 2
    lam: float = 1.0
    Lam: float = 4.0
    ell: float | None = None
    smoothing_radius: float = 0.0
    law: Law | None = None
    axis_laws: tuple[Law, ...] = ()
    offdiag: float = 0.0
    variant: str = "A1"
    matrix: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidSpec(f"unknown field kind {self.kind!r}")
        d = int(self.dim)
        if d < 2:
            raise InvalidSpec("dimension must be at least 2")
        if not (0 < self.lam <= self.Lam):
            raise InvalidSpec("need 0 < lam <= Lam")
        ell = 2.0 * np.sqrt(d) if self.ell is None else float(self.ell)
        if ell < 2.0 * np.sqrt(d) - 1e-12:
            raise InvalidSpec(f"ell must be at least 2*sqrt(d) = {2 * np.sqrt(d):.6g}")
        object.__setattr__(self, "ell", ell)
        if not (0.0 <= self.smoothing_radius <= 0.5):
            raise InvalidSpec("smoothing_radius must lie in [0, 1/2]")
        tol = 1e-12
        if self.kind == "scalar_checkerboard":
            if self.law is None:
                raise InvalidSpec("scalar_checkerboard needs a law")
            lo, hi = self.law.support()
            if lo < self.lam - tol or hi > self.Lam + tol:
                raise InvalidSpec("checkerboard values outside [lam, Lam]")
        elif self.kind == "diagonal_iid":
            laws = self.axis_laws or ((self.law,) if self.law else ())
            if not laws:
                raise InvalidSpec("diagonal_iid needs axis laws")
            if len(laws) == 1:
                laws = laws * d
            if len(laws) != d:
                raise InvalidSpec("need one law per axis")
            for lw in laws:
                lo, hi = lw.support()
                if lo < self.lam - tol or hi > self.Lam + tol:
                    raise InvalidSpec("axis values outside [lam, Lam]")
            object.__setattr__(self, "axis_laws", tuple(laws))
        elif self.kind == "full_symmetric":
            if self.offdiag < 0:
                raise InvalidSpec("offdiag must be nonnegative")
            worst = self.lam + 2.0 * (d - 1) * self.offdiag
            if worst > self.Lam + tol:
                raise InvalidSpec(
                    f"offdiag={self.offdiag} admits eigenvalues up to {worst:.6g} > Lam={self.Lam}"
                )
        elif self.kind == "radial_counterexample":
            if self.variant not in ("A1", "A2"):
                raise InvalidSpec("variant must be A1 or A2")
            if self.lam > 1.0:
                raise InvalidSpec("radial fields have eigenvalue 1, need lam <= 1")
        elif self.kind == "constant":
            if self.matrix is None:
                raise InvalidSpec("constant kind needs a matrix")
            m = np.asarray(self.matrix, dtype=float)
            if m.shape != (d, d) or not np.array_equal(m, m.T):
                raise InvalidSpec("matrix must be symmetric d x d")
            ev = np.linalg.eigvalsh(m)
            if ev[0] < self.lam - tol or ev[-1] > self.Lam + tol:
                raise InvalidSpec("matrix eigenvalues outside [lam, Lam]")
            object.__setattr__(self, "matrix", tuple(tuple(float(v) for v in r) for r in m))

    @property
    def ell_eff(self) -> float:
        return self.ell + 2.0 * self.smoothing_radius

    @property
    def random(self) -> bool:
        return self.kind not in ("radial_counterexample", "constant")

    def mean_matrix(self) -> np.ndarray:
        """Expectation of A(x) (a representative constant for deterministic kinds)."""
        d = self.dim
        if self.kind == "scalar_checkerboard":
            return self.law.mean() * np.eye(d)
        if self.kind == "diagonal_iid":
            return np.diag([lw.mean() for lw in self.axis_laws])
        if self.kind == "full_symmetric":
            # off-diagonals are centered; the slack is uniform on its room,
            # so the diagonal averages to the midpoint of [lam, Lam]
            return 0.5 * (self.lam + self.Lam) * np.eye(d)
        if self.kind == "constant":
            return np.asarray(self.matrix)
        return 0.5 * (1.0 + self.Lam) * np.eye(d)

    def site_law(self) -> Law | None:
        """Law of the scalar site value for scalar checkerboards."""
        return self.law if self.kind == "scalar_checkerboard" else None

    # serialization -------------------------------------------------------
    def to_dict(self) -> dict:
        out = {
            "kind": self.kind,
            "dim": self.dim,
            "lam": self.lam,
            "Lam": self.Lam,
            "ell": self.ell,
            "smoothing_radius": self.smoothing_radius,
        }
        if self.law is not None:
            out["law"] = self.law.to_dict()
        if self.kind == "diagonal_iid":
            out["axis_laws"] = [lw.to_dict() for lw in self.axis_laws]
        if self.kind == "full_symmetric":
            out["offdiag"] = self.offdiag
        if self.kind == "radial_counterexample":
            out["variant"] = self.variant
        if self.matrix is not None:
            out["matrix"] = [list(r) for r in self.matrix]
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "FieldSpec":
        d = dict(d)
        if "law" in d and d["law"] is not None:
            d["law"] = Law.from_dict(d["law"])
        if "axis_laws" in d:
            d["axis_laws"] = tuple(Law.from_dict(x) for x in d["axis_laws"])
        if d.get("matrix") is not None:
            d["matrix"] = tuple(tuple(r) for r in d["matrix"])
        return cls(**d)

    @classmethod
    def checkerboard(cls, values=(1.0, 4.0), probs=None, dim=2, **kw) -> "FieldSpec":
        vals = tuple(float(v) for v in values)
        lam = kw.pop("lam", min(vals))
        Lam = kw.pop("Lam", max(vals))
        return cls(
            kind="scalar_checkerboard",
            dim=dim,
            lam=lam,
            Lam=Lam,
            law=Law(values=vals, probs=tuple(probs) if probs else ()),
            **kw,
        )

    @classmethod
    def constant(cls, matrix, **kw) -> "FieldSpec":
        m = np.atleast_2d(np.asarray(matrix, dtype=float))
        ev = np.linalg.eigvalsh(m)
        kw.setdefault("lam", float(ev[0]))
        kw.setdefault("Lam", float(ev[-1]))
        return cls(kind="constant", dim=m.shape[0], matrix=tuple(map(tuple, m)), **kw)


@dataclass(frozen=True)
class SiteSeedLattice:
    """Per-site seeds ``hash(base_seed, z + shift)``, with explicit overrides.

    ``overrides`` is keyed by absolute (unshifted) site coordinates, so a
    translated lattice keeps the surgery applied before translation.
    """

    base_seed: int
    dim: int
    shift: tuple[int, ...] = ()
    overrides: tuple[tuple[tuple[int, ...], int], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "base_seed", int(self.base_seed) & 0xFFFFFFFFFFFFFFFF)
        if not self.shift:
            object.__setattr__(self, "shift", (0,) * self.dim)
        object.__setattr__(self, "overrides", tuple(sorted(self.overrides)))

    def seeds(self, sites) -> np.ndarray:
        """Seeds at the given sites (array of shape (n, d), in local coordinates)."""
        sites = np.atleast_2d(np.asarray(sites, dtype=np.int64))
        absolute = sites + np.asarray(self.shift, dtype=np.int64)
        out = _site_hash(self.base_seed, absolute)
        for z, s in self.overrides:
            hit = np.all(absolute == np.asarray(z, dtype=np.int64), axis=1)
            out[hit] = np.uint64(s)
        return out

    def seed_at(self, z) -> int:
        return int(self.seeds(np.asarray(z)[None, :])[0])

    def uniforms(self, sites, stream: int = 0) -> np.ndarray:
        """Independent uniform variates attached to each site."""
        return _uniform(self.seeds(sites), stream)


@dataclass(frozen=True, eq=False)
class MatrixField:
    """A realized coefficient field ``x -> A(x)``.

    ``eval`` takes points of shape (n, d) and returns matrices of shape
    (n, d, d). Site matrices are memoized per site only implicitly, by
    being cheap to recompute from the hash.
    """

    spec: FieldSpec
    lattice: SiteSeedLattice | None = None
    func: Callable[[np.ndarray], np.ndarray] | None = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.spec.dim

    @property
    def ell_eff(self) -> float:
        return self.spec.ell_eff

    @classmethod
    def from_function(cls, func, dim: int, lam: float, Lam: float, ell=None) -> "MatrixField":
        """Wrap a deterministic matrix-valued function (used for smooth test fields)."""
        spec = FieldSpec(kind="constant", dim=dim, lam=lam, Lam=Lam, ell=ell,
                         matrix=tuple(map(tuple, np.eye(dim) * lam)))
        return cls(spec=spec, lattice=None, func=func)

    def site_matrices(self, sites) -> np.ndarray:
        """Cell matrices for an array of sites, shape (n, d, d)."""
        sp = self.spec
        d = sp.dim
        sites = np.atleast_2d(np.asarray(sites, dtype=np.int64))
        n = sites.shape[0]
        if sp.kind == "constant":
            return np.broadcast_to(np.asarray(sp.matrix), (n, d, d)).copy()
        seeds = self.lattice.seeds(sites)
        out = np.zeros((n, d, d))
        if sp.kind == "scalar_checkerboard":
            a = sp.law.quantile(_uniform(seeds, 0))
            for i in range(d):
                out[:, i, i] = a
        elif sp.kind == "diagonal_iid":
            for i in range(d):
                out[:, i, i] = sp.axis_laws[i].quantile(_uniform(seeds, i))
        elif sp.kind == "full_symmetric":
            stream = 0
            for i in range(d):
                for j in range(i + 1, d):
                    v = sp.offdiag * (2.0 * _uniform(seeds, stream) - 1.0)
                    out[:, i, j] = v
                    out[:, j, i] = v
                    stream += 1
            rows = np.abs(out).sum(axis=2)
            for i in range(d):
                room = np.maximum(sp.Lam - sp.lam - 2.0 * rows[:, i], 0.0)
                out[:, i, i] = sp.lam + rows[:, i] + room * _uniform(seeds, stream + i)
        else:
            raise InvalidSpec(f"kind {sp.kind} has no site matrices")
        return out

    def _radial(self, x: np.ndarray) -> np.ndarray:
        sp = self.spec
        d = sp.dim
        r = np.linalg.norm(x, axis=1)
        safe = np.where(r > 0, r, 1.0)
        xh = x / safe[:, None]
        P = xh[:, :, None] * xh[:, None, :]
        eye = np.eye(d)[None]
        if sp.variant == "A1":
            A = sp.Lam * P + (eye - P)
        else:
            A = P + sp.Lam * (eye - P)
        t = np.minimum(r, 1.0)[:, None, None]
        return t * A + (1.0 - t) * eye

    def eval(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.func is not None:
            return np.asarray(self.func(x), dtype=float)
        sp = self.spec
        if sp.kind == "radial_counterexample":
            return self._radial(x)
        if sp.kind == "constant":
            return np.broadcast_to(np.asarray(sp.matrix), (x.shape[0], sp.dim, sp.dim)).copy()
        rho = sp.smoothing_radius
        base = np.floor(x + 0.5).astype(np.int64)
        if rho == 0.0:
            return self._site_lookup(base)
        # tensor-product linear blend across a band of width 2*rho at each face
        frac = x + 0.5 - base
        up = np.clip((frac - 1.0 + rho) / (2.0 * rho), 0.0, 0.5)
        down = np.clip((rho - frac) / (2.0 * rho), 0.0, 0.5)
        out = np.zeros((x.shape[0], sp.dim, sp.dim))
        for corner in np.ndindex(*(3,) * sp.dim):
            off = np.asarray(corner) - 1
            w = np.ones(x.shape[0])
            for k, o in enumerate(off):
                if o == 1:
                    w = w * up[:, k]
                elif o == -1:
                    w = w * down[:, k]
                else:
                    w = w * (1.0 - up[:, k] - down[:, k])
            live = w > 0
            if not live.any():
                continue
            out[live] += w[live, None, None] * self._site_lookup(base[live] + off)
        return out

    def _site_lookup(self, sites: np.ndarray) -> np.ndarray:
        lo = sites.min(axis=0)
        ext = sites.max(axis=0) - lo + 1
        if np.prod(ext.astype(float)) <= 4.0 * len(sites):
            # dense box of sites: evaluate once per site, then gather
            box = np.stack(np.meshgrid(*[np.arange(e) for e in ext], indexing="ij"), -1)
            mats = self.site_matrices(box.reshape(-1, len(ext)) + lo)
            flat = np.ravel_multi_index(tuple((sites - lo).T), tuple(ext))
            return mats[flat]
        uniq, inv = np.unique(sites, axis=0, return_inverse=True)
        return self.site_matrices(uniq)[inv.reshape(-1)]

    def __call__(self, x) -> np.ndarray:
        return self.eval(x)


def site_of(x) -> np.ndarray:
    """Lattice site whose unit cell contains ``x``."""
    return np.floor(np.asarray(x, dtype=float) + 0.5).astype(np.int64)


def sample_environment(spec: FieldSpec, base_seed: int) -> SiteSeedLattice:
    """Lattice of site seeds for ``spec``; a pure function of ``base_seed``."""
    return SiteSeedLattice(base_seed=int(base_seed), dim=spec.dim)


def realize_field(lattice: SiteSeedLattice | None, spec: FieldSpec) -> MatrixField:
    if lattice is not None and lattice.dim != spec.dim:
        raise InvalidSpec("lattice and spec dimensions differ")
    if spec.random and lattice is None:
        raise InvalidSpec("random kinds need a lattice")
    return MatrixField(spec=spec, lattice=lattice)


def translate(lattice: SiteSeedLattice, z: Sequence[int]) -> SiteSeedLattice:
    """The shifted environment ``(T_z A)(x) = A(x + z)``."""
    z = tuple(int(v) for v in z)
    shift = tuple(a + b for a, b in zip(lattice.shift, z))
    return SiteSeedLattice(lattice.base_seed, lattice.dim, shift, lattice.overrides)


def resample_site(lattice: SiteSeedLattice, z: Sequence[int], fresh_seed: int) -> SiteSeedLattice:
    """Replace the seed at local site ``z`` by ``fresh_seed``."""
    absolute = tuple(int(a) + int(b) for a, b in zip(z, lattice.shift))
    fresh = int(fresh_seed) & 0xFFFFFFFFFFFFFFFF
    kept = {k: v for k, v in lattice.overrides if k != absolute}
    hashed = int(_site_hash(lattice.base_seed, np.asarray([absolute]))[0])
    if fresh != hashed:
        kept[absolute] = fresh
    return SiteSeedLattice(lattice.base_seed, lattice.dim, lattice.shift, tuple(kept.items()))
