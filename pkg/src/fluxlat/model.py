"""Lattice, hopping kernel, static disorder and position observables.

The infinite cubic lattice is truncated to a periodic ring/box Z_N^d.  All
position observables use the minimal-image convention: coordinates are taken
in (-N/2, N/2], with +N/2 kept at the boundary for even N.
"""

from dataclasses import dataclass, field

import numpy as np

from . import rng as _rng


class ModelError(ValueError):
    """Invalid model construction (bad hopping support, size mismatch, ...)."""


def minimal_image(x, extent):
    """Map ring coordinates to representatives in (-N/2, N/2].

    Accepts scalars or arrays; works componentwise.  The boundary point of an
    even ring goes to +N/2, which fixes the sign of the position observable.
    """
    m = np.mod(x, extent)
    return np.where(m > extent // 2, m - extent, m) if np.ndim(m) else (m - extent if m > extent // 2 else m)


@dataclass(frozen=True)
class LatticeSpec:
    """Periodic lattice Z_N^d with N sites per axis."""

    dimension: int
    extent: int

    def __post_init__(self):
        if self.dimension < 1:
            raise ModelError("lattice dimension must be >= 1")
        if self.extent < 2:
            raise ModelError("lattice extent must be >= 2")

    @property
    def n_sites(self):
        return self.extent**self.dimension

    def site_coords(self):
        """(n_sites, d) integer array of raw coordinates in [0, N)^d.

        Row order matches the flat site index (C order, axis 0 slowest).
        """
        grids = np.meshgrid(*[np.arange(self.extent)] * self.dimension, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    def positions(self):
        """(n_sites, d) minimal-image coordinates of every site."""
        return minimal_image(self.site_coords(), self.extent)

    def site_index(self, coords):
        """Flat index of coordinate rows (wrapped mod N)."""
        coords = np.mod(np.asarray(coords), self.extent)
        return np.ravel_multi_index(coords.T, (self.extent,) * self.dimension)


@dataclass(frozen=True)
class HoppingKernel:
    """Finite-support hopping amplitudes h(zeta) on Z^d \\ {0}.

    entries maps displacement tuples to complex amplitudes.  Self-adjointness
    requires h(-zeta) = conj(h(zeta)) with both displacements present.
    """

    entries: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.entries:
            raise ModelError("hopping support is empty")
        cleaned = {}
        d = None
        for zeta, amp in self.entries.items():
            zeta = tuple(int(z) for z in zeta)
            if d is None:
                d = len(zeta)
            elif len(zeta) != d:
                raise ModelError("hopping displacements have mixed dimensions")
            if all(z == 0 for z in zeta):
                raise ModelError("hopping kernel must not contain zeta = 0")
            cleaned[zeta] = complex(amp)
        object.__setattr__(self, "entries", cleaned)

    @property
    def dimension(self):
        return len(next(iter(self.entries)))

    def displacements(self):
        zs = sorted(self.entries)
        return np.array(zs, dtype=int), np.array([self.entries[z] for z in zs])

    @property
    def m0(self):
        """Operator-norm bound sum |h(zeta)|."""
        return float(sum(abs(a) for a in self.entries.values()))

    @property
    def m1(self):
        """Short-range moment sum |zeta| |h(zeta)|."""
        return float(sum(np.linalg.norm(z) * abs(a) for z, a in self.entries.items()))

    @property
    def m(self):
        """Growth rate sum (1 + |zeta|) |h(zeta)| of the a-priori bound."""
        return self.m0 + self.m1

    def is_self_adjoint(self, tol=1e-14):
        for zeta, amp in self.entries.items():
            neg = tuple(-z for z in zeta)
            if neg not in self.entries or abs(self.entries[neg] - np.conj(amp)) > tol:
                return False
        return True

    def gram_matrix(self):
        """d x d matrix sum |h(zeta)|^2 zeta zeta^T.

        Positive definiteness is equivalent to the non-degeneracy condition
        sum |k.zeta|^2 |h(zeta)|^2 > 0 for every k != 0.
        """
        zs, amps = self.displacements()
        return np.einsum("s,si,sj->ij", np.abs(amps) ** 2, zs, zs)

    def is_nondegenerate(self, tol=1e-12):
        g = self.gram_matrix()
        return bool(np.linalg.eigvalsh(g).min() > tol * max(1.0, np.abs(g).max()))

    @classmethod
    def nearest_neighbor(cls, dimension, amplitude=1.0):
        entries = {}
        for axis in range(dimension):
            for sign in (+1, -1):
                zeta = tuple(sign if i == axis else 0 for i in range(dimension))
                entries[zeta] = amplitude
        return cls(entries)


def validate_hopping(hopping, dimension):
    """Validation report for a hopping kernel in the given dimension.

    Returns {self_adjoint, m0, m1, m, nondegenerate}.  Rejects empty support
    and entries at zeta = 0 (enforced at construction).
    """
    if hopping.dimension != dimension:
        raise ModelError(
            f"hopping displacements are {hopping.dimension}-dimensional, lattice is {dimension}-dimensional"
        )
    return {
        "self_adjoint": hopping.is_self_adjoint(),
        "m0": hopping.m0,
        "m1": hopping.m1,
        "m": hopping.m,
        "nondegenerate": hopping.is_nondegenerate(),
    }


@dataclass(frozen=True)
class DisorderSpec:
    """Static disorder law: none, uniform(lambda) on [-l, l], or bernoulli(lambda) +-l."""

    kind: str
    lam: float = 0.0

    KINDS = ("none", "uniform", "bernoulli")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ModelError(f"unknown disorder kind {self.kind!r}; expected one of {self.KINDS}")
        if self.lam < 0:
            raise ModelError("disorder strength lambda must be >= 0")
        if self.kind == "none":
            object.__setattr__(self, "lam", 0.0)

    @property
    def enumerable(self):
        """True when the disorder space can be enumerated exactly (needed by fiber solvers)."""
        return self.kind in ("none", "bernoulli")

    def values(self):
        """Support of the per-site law for enumerable kinds."""
        if self.kind == "none":
            return np.array([0.0])
        if self.kind == "bernoulli":
            return np.array([+self.lam, -self.lam])
        raise ModelError("uniform disorder has no finite enumeration; it is only allowed in Monte Carlo paths")


@dataclass(frozen=True)
class DisorderSample:
    """A realization of the static potential, stored pre-multiplied by lambda."""

    values: np.ndarray
    lam: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)
        if self.lam > 0 and np.abs(v).max(initial=0.0) > self.lam + 1e-12:
            raise ModelError("disorder sample exceeds its stated strength")


def sample_disorder(spec, lattice, seed, sample_index=0):
    """Draw an i.i.d. per-site disorder field, deterministic in (seed, sample_index)."""
    gen = _rng.stream(seed, _rng.DISORDER, sample_index)
    n = lattice.n_sites
    if spec.kind == "none":
        vals = np.zeros(n)
    elif spec.kind == "uniform":
        vals = gen.uniform(-spec.lam, spec.lam, size=n)
    else:
        vals = spec.lam * (2.0 * gen.integers(0, 2, size=n) - 1.0)
    return DisorderSample(values=vals, lam=spec.lam)


def build_hamiltonian(lattice, hopping, omega):
    """Dense H = H0 + U on the periodic lattice.

    H[x, y] = h(minimal_image(x - y)) off the diagonal and H[x, x] = U(x).
    The hopping support must satisfy max |zeta_i| < N/2 so that periodic
    wrapping never aliases two kernel entries.
    """
    if hopping.dimension != lattice.dimension:
        raise ModelError("hopping/lattice dimension mismatch")
    vals = np.asarray(omega.values, dtype=float)
    if vals.shape != (lattice.n_sites,):
        raise ModelError(f"disorder sample has {vals.size} values for {lattice.n_sites} sites")
    zs, amps = hopping.displacements()
    if np.abs(zs).max() >= lattice.extent / 2:
        raise ModelError(
            f"hopping range {np.abs(zs).max()} reaches the wrap boundary of N={lattice.extent}; need max|zeta| < N/2"
        )
    n = lattice.n_sites
    coords = lattice.site_coords()
    H = np.zeros((n, n), dtype=complex)
    idx = np.arange(n)
    for zeta, amp in zip(zs, amps):
        # H psi(x) = sum_zeta h(zeta) psi(x - zeta)  =>  H[x, x-zeta] = h(zeta)
        src = lattice.site_index(coords - zeta)
        H[idx, src] += amp
    H[idx, idx] = vals
    herm = np.abs(H - H.conj().T).max()
    if herm > 1e-14 * max(1.0, np.abs(H).max()):
        raise ModelError(f"assembled Hamiltonian is not Hermitian (deviation {herm:.2e})")
    return H


class PositionMoments:
    """Total mass, second-moment matrix and characteristic function of a site distribution."""

    def __init__(self, total, M, weights, positions):
        self.total = total
        self.M = M
        self._weights = weights
        self._positions = positions

    def charfn(self, k):
        """sum_x exp(i k.x) p(x) with minimal-image x; charfn(0) equals the total mass exactly."""
        k = np.atleast_1d(np.asarray(k, dtype=float))
        return complex(np.sum(self._weights * np.exp(1j * (self._positions @ k))))


def position_moments(p, lattice):
    """Second moments M_ij = sum_x x_i x_j p(x) of nonnegative site weights."""
    p = np.asarray(p, dtype=float)
    if p.shape != (lattice.n_sites,):
        raise ModelError("weight vector does not match the lattice")
    if p.min(initial=0.0) < -1e-12 * max(1.0, np.abs(p).max()):
        raise ModelError("position_moments requires nonnegative weights")
    pos = lattice.positions().astype(float)
    M = np.einsum("s,si,sj->ij", p, pos, pos)
    M = 0.5 * (M + M.T)
    return PositionMoments(total=float(p.sum()), M=M, weights=p, positions=pos)
