"""Dynamic environment: independent per-site continuous-time Markov chains.

Conventions.  A chain is specified by its rate matrix Q (row sums zero,
off-diagonal rates nonnegative).  The semigroup of interest conditions on the
FUTURE of the stationary process,

    T_t f(a) = E[f(alpha(0)) | alpha(t) = a],

and its generator in L2(pi) is B = -diag(pi)^-1 Q^T diag(pi), so that
T_t = exp(-tB); for reversible chains B = -Q.  Joint (multi-site) objects are
Kronecker sums/products of the single-site ones.  All inner products are in
L2 of the stationary measure; `to_ortho` maps function values to coordinates
in which that inner product is Euclidean.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from . import linops
from . import rng as _rng

DENSE_JOINT_BUDGET = 4096


class ChainError(ValueError):
    """Invalid chain specification or degenerate dynamics."""


def _strong_components(adj):
    n = adj.shape[0]
    reach = np.eye(n, dtype=bool) | adj
    for _ in range(int(np.ceil(np.log2(max(n, 2))))):
        reach = reach | (reach @ reach)
    comp_of = -np.ones(n, dtype=int)
    comps = []
    for i in range(n):
        if comp_of[i] >= 0:
            continue
        members = np.where(reach[i] & reach[:, i])[0]
        comp_of[members] = len(comps)
        comps.append(members)
    return comps


def stationary_distribution(Q):
    """Stationary law pi of an irreducible CTMC generator: pi^T Q = 0, sum pi = 1, pi > 0."""
    Q = np.asarray(Q, dtype=float)
    S = Q.shape[0]
    if Q.shape != (S, S):
        raise ChainError("rate matrix must be square")
    scale = max(1.0, np.abs(Q).max())
    if np.abs(Q.sum(axis=1)).max() > 1e-12 * scale:
        raise ChainError("rate matrix rows must sum to zero")
    if (Q - np.diag(np.diag(Q))).min() < -1e-14 * scale:
        raise ChainError("off-diagonal rates must be nonnegative")
    comps = _strong_components(Q > 0)
    if len(comps) > 1:
        bad = sorted(int(s) for s in comps[1])
        raise ChainError(f"chain is reducible: states {bad} do not communicate with state {int(comps[0][0])}")
    A = np.vstack([Q.T, np.ones(S)])
    b = np.zeros(S + 1)
    b[-1] = 1.0
    pi, *_ = np.linalg.lstsq(A, b, rcond=None)
    if pi.min() <= 0:
        raise ChainError("stationary distribution is not strictly positive")
    resid = np.abs(pi @ Q).max()
    if resid > 1e-10 * scale:
        raise ChainError(f"stationary distribution residual {resid:.2e}")
    return pi


@dataclass(frozen=True)
class SiteChainSpec:
    """Single-site chain: labelled states, rate matrix and the noise observable.

    The observable is one value per state in [-1, 1] with stationary mean zero.
    """

    states: tuple
    rates: np.ndarray
    observable: np.ndarray

    def __post_init__(self):
        Q = np.asarray(self.rates, dtype=float)
        v = np.asarray(self.observable, dtype=float)
        states = tuple(str(s) for s in self.states)
        S = len(states)
        if S < 2:
            raise ChainError("chain needs at least two states")
        if Q.shape != (S, S) or v.shape != (S,):
            raise ChainError("rates/observable shapes do not match the state list")
        if np.abs(v).max() > 1.0 + 1e-12:
            raise ChainError("observable must take values in [-1, 1]")
        pi = stationary_distribution(Q)
        if abs(float(pi @ v)) > 1e-12:
            raise ChainError("observable must have zero stationary mean")
        Q.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "rates", Q)
        object.__setattr__(self, "observable", v)

    @property
    def n_states(self):
        return len(self.states)

    @classmethod
    def telegraph(cls, gamma=1.0):
        """Symmetric two-state chain with observable +-1 (the default noise)."""
        if gamma <= 0:
            raise ChainError("telegraph rate gamma must be positive")
        Q = np.array([[-gamma, gamma], [gamma, -gamma]])
        return cls(states=("+", "-"), rates=Q, observable=np.array([1.0, -1.0]))


@dataclass(frozen=True)
class GeneratorB:
    """Generator of the future-conditioned semigroup on the joint state space.

    Holds the single-site pieces; joint dense matrices are assembled on demand
    (budget: S^n <= 4096 states).  `tilde` quantities are expressed in
    orthonormal coordinates f -> sqrt(pi) * f of L2(pi).
    """

    chain: SiteChainSpec
    n_sites: int
    pi_site: np.ndarray = field(repr=False)
    B_site: np.ndarray = field(repr=False)
    Btilde_site: np.ndarray = field(repr=False)
    gap: float
    sector_b: float
    sector_q: float
    reversible: bool

    @property
    def n_joint(self):
        return self.chain.n_states ** self.n_sites

    @property
    def tau(self):
        return 1.0 / self.gap

    def weights(self):
        """Joint stationary probabilities, flat index with site 0 slowest."""
        w = self.pi_site
        for _ in range(self.n_sites - 1):
            w = np.kron(w, self.pi_site)
        return w

    def _check_budget(self):
        if self.n_joint > DENSE_JOINT_BUDGET:
            raise ChainError(
                f"joint state space {self.n_joint} exceeds the dense budget {DENSE_JOINT_BUDGET}"
            )

    def joint_matrix(self, tilde=False):
        """Dense Kronecker-sum generator on the joint space (function or ortho coordinates)."""
        self._check_budget()
        site = self.Btilde_site if tilde else self.B_site
        S, n = self.chain.n_states, self.n_sites
        out = np.zeros((S**n, S**n))
        for i in range(n):
            term = np.kron(np.kron(np.eye(S**i), site), np.eye(S ** (n - i - 1)))
            out += term
        return out

    def to_ortho(self, f):
        return np.sqrt(self.weights()) * np.asarray(f)

    def from_ortho(self, c):
        return np.asarray(c) / np.sqrt(self.weights())

    def inner(self, f, g):
        """L2(mu_A) inner product of joint-state functions."""
        return complex(np.sum(self.weights() * np.conj(f) * g))

    def mean(self, f):
        return complex(np.sum(self.weights() * np.asarray(f)))

    def tensor_apply(self, site_matrix, f):
        """Apply the Kronecker product (site_matrix per site) to a joint function."""
        S, n = self.chain.n_states, self.n_sites
        t = np.asarray(f).reshape((S,) * n)
        for axis in range(n):
            t = np.tensordot(site_matrix, t, axes=([1], [axis]))
            t = np.moveaxis(t, 0, axis)
        return t.reshape(-1)


def build_generator_B(spec, n_sites):
    """Assemble the joint generator metadata for n independent copies of a chain."""
    if n_sites < 1:
        raise ChainError("n_sites must be >= 1")
    if spec.n_states**n_sites > DENSE_JOINT_BUDGET:
        raise ChainError(
            f"joint state space {spec.n_states**n_sites} exceeds the dense budget {DENSE_JOINT_BUDGET}"
        )
    Q = spec.rates
    pi = stationary_distribution(Q)
    B_site = -np.diag(1.0 / pi) @ Q.T @ np.diag(pi)
    sq = np.sqrt(pi)
    # Orthonormal coordinates of L2(pi): Btilde = D^{1/2} B D^{-1/2}, D = diag(pi).
    Btilde = np.diag(sq) @ B_site @ np.diag(1.0 / sq)
    reversible = bool(np.abs(pi[:, None] * Q - (pi[:, None] * Q).T).max() <= 1e-12 * max(1.0, np.abs(Q).max()))

    # Gap of the Hermitian part restricted to mean-zero functions; for a
    # Kronecker sum of identical sites it equals the single-site gap.
    herm = 0.5 * (Btilde + Btilde.T)
    basis = sla.null_space(sq[None, :])
    evals = np.linalg.eigvalsh(basis.T @ herm @ basis)
    gap = float(evals.min())
    if gap < 1e-12:
        raise ChainError("no spectral gap at numerical precision")

    if reversible:
        b, q = 0.0, 0.0
    else:
        gen = _rng.stream(0, _rng.PROBE, spec.n_states, n_sites)
        probes = linops.random_probes(spec.n_states, 500, gen)
        quads = []
        for f in probes:
            val = np.vdot(f, Btilde @ f)
            quads.append((val.real, val.imag, 1.0))
        b, q = linops.sector_fit(quads)

    return GeneratorB(
        chain=spec,
        n_sites=n_sites,
        pi_site=pi,
        B_site=B_site,
        Btilde_site=Btilde,
        gap=gap,
        sector_b=b,
        sector_q=q,
        reversible=reversible,
    )


def spectral_gap(B):
    """Smallest nonzero eigenvalue of the Hermitian part on mean-zero functions (= 1/tau)."""
    return B.gap


def backward_expectation(B, f, t):
    """T_t^dagger f = E[f(alpha(t)) | alpha(0) = .] on the joint space."""
    if t < 0:
        raise ChainError("backward_expectation requires t >= 0")
    P = sla.expm(t * B.chain.rates)
    return B.tensor_apply(P, np.asarray(f, dtype=float))


def check_mixing(B, f, g, t_grid):
    """Max violation of the exponential-mixing bound over the time grid.

    lhs = |E[f(alpha(t)) g(alpha(0))] - E f E g|, rhs = |f|_2 |g|_2 exp(-t/tau),
    with exact expectations under pi and the exact semigroup.
    """
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    w = B.weights()
    nf = np.sqrt(float(np.sum(w * f * f)))
    ng = np.sqrt(float(np.sum(w * g * g)))
    mf = float(np.sum(w * f))
    mg = float(np.sum(w * g))
    worst = -np.inf
    for t in np.atleast_1d(t_grid):
        corr = float(np.sum(w * g * backward_expectation(B, f, t)))
        lhs = abs(corr - mf * mg)
        rhs = nf * ng * np.exp(-t * B.gap)
        worst = max(worst, lhs - rhs)
    return worst


def apply_B_inverse(B, f):
    """B^-1 f for mean-zero f on the joint space (two-sided inverse to 1e-10)."""
    f = np.asarray(f, dtype=complex)
    nrm = np.sqrt(abs(B.inner(f, f))) or 1.0
    if abs(B.mean(f)) > 1e-10 * max(1.0, nrm):
        raise ChainError("apply_B_inverse requires a mean-zero input")
    c = B.to_ortho(f)
    Bt = B.joint_matrix(tilde=True)
    s = np.sqrt(B.weights())
    # Deflate the kernel direction sqrt(pi); the solution stays mean-zero.
    x = linops.solve_refined(Bt + np.outer(s, s), c)
    return B.from_ortho(x)


def nondegeneracy_chi(spec, lattice):
    """Non-degeneracy constant of the noise observable on the given lattice.

    chi = min over x != 0 of the stationary L2 distance^2 between B^-1 v
    shifted to x and at the origin.  Enumerated exactly on small joint
    spaces, otherwise via the per-site independence shortcut.
    """
    n = lattice.n_sites
    v = spec.observable
    if np.abs(v).max() <= 1e-12:
        raise ChainError("degenerate dynamic noise")
    S = spec.n_states
    exact = S**n <= DENSE_JOINT_BUDGET
    if not exact:
        warnings.warn(
            "joint space too large for exact enumeration; using the per-site independence shortcut for chi",
            RuntimeWarning,
        )
        B1 = build_generator_B(spec, 1)
        w = apply_B_inverse(B1, v.astype(complex))
        chi = 2.0 * float(np.real(B1.inner(w, w)))
    else:
        B = build_generator_B(spec, n)
        digits = np.stack(
            np.unravel_index(np.arange(S**n), (S,) * n), axis=1
        )  # joint code -> per-site states, site 0 slowest
        vj = v[digits[:, 0]].astype(complex)
        w = apply_B_inverse(B, vj)
        weights = B.weights()
        chi = np.inf
        for x in range(1, n):
            wx = w.reshape((S,) * n)
            # v(sigma_x a) depends on site x; B^-1 of it is w evaluated at site x.
            shifted = v[digits[:, x]].astype(complex)
            wshift = apply_B_inverse(B, shifted)
            diff = wshift - w.reshape(-1)
            val = float(np.real(np.sum(weights * np.abs(diff) ** 2)))
            chi = min(chi, val)
        chi = float(chi)
    if chi <= 1e-12:
        raise ChainError("degenerate dynamic noise")
    return chi


@dataclass(frozen=True)
class NoisePath:
    """Right-continuous piecewise-constant joint trajectory on [0, T].

    Per site: jump times (strictly increasing) and the visited state sequence,
    states[k] holding on [times[k-1], times[k]).
    """

    chain: SiteChainSpec
    horizon: float
    jump_times: tuple  # per site: float array
    states: tuple  # per site: int array, len = len(jump_times) + 1

    @property
    def n_sites(self):
        return len(self.states)

    def state_at(self, site, t):
        idx = np.searchsorted(self.jump_times[site], t, side="right")
        return int(self.states[site][idx])

    def states_at(self, times):
        """(n_times, n_sites) state indices, right-continuous in time."""
        times = np.atleast_1d(times)
        out = np.empty((times.size, self.n_sites), dtype=np.int64)
        for s in range(self.n_sites):
            idx = np.searchsorted(self.jump_times[s], times, side="right")
            out[:, s] = self.states[s][idx]
        return out

    def all_jump_times(self):
        if not any(len(t) for t in self.jump_times):
            return np.empty(0)
        return np.unique(np.concatenate([t for t in self.jump_times if len(t)]))

    def observable_at(self, times):
        """(n_times, n_sites) values of the noise observable along the path."""
        return self.chain.observable[self.states_at(times)]


def _site_path_two_state(gen, exit_rate, pi, T):
    # Two-state chains always jump to the other state, so the embedded chain
    # is deterministic and the holding times can be drawn in one batch.
    s0 = int(gen.uniform() >= pi[0])
    est = int(T * exit_rate.max() + 6.0 * np.sqrt(T * exit_rate.max() + 1.0) + 16)
    raw = gen.standard_exponential(est)
    while True:
        k = raw.size
        rates = np.where(np.arange(k) % 2 == 0, exit_rate[s0], exit_rate[1 - s0])
        times = np.cumsum(raw / rates)
        if times[-1] >= T:
            break
        raw = np.concatenate([raw, gen.standard_exponential(est)])
    nj = int(np.searchsorted(times, T, side="left"))
    jump_times = times[:nj]
    states = np.empty(nj + 1, dtype=np.int64)
    states[0::2] = s0
    states[1::2] = 1 - s0
    return jump_times, states


def _site_path_general(gen, Q, exit_rate, cum, pi, T):
    S = Q.shape[0]
    state = int(np.searchsorted(np.cumsum(pi), gen.uniform()))
    t = 0.0
    times = []
    visited = [state]
    while True:
        rate = exit_rate[state]
        if rate <= 0:
            break
        t += gen.exponential(1.0 / rate)
        if t >= T:
            break
        state = min(int(np.searchsorted(cum[state], gen.uniform() * cum[state][-1], side="right")), S - 1)
        times.append(t)
        visited.append(state)
    return np.array(times), np.array(visited, dtype=np.int64)


def sample_path(spec, n_sites, T, seed, sample_index=0):
    """Exact CTMC path per site; deterministic given (seed, sample_index, site).

    Initial states are drawn from the stationary law; holding times are
    exponential with the exit rate of the current state.
    """
    if T <= 0:
        raise ChainError("path horizon T must be positive")
    pi = stationary_distribution(spec.rates)
    Q = spec.rates
    exit_rate = -np.diag(Q)
    jump_prob = np.where(exit_rate[:, None] > 0, Q / np.maximum(exit_rate[:, None], 1e-300), 0.0)
    np.fill_diagonal(jump_prob, 0.0)
    cum = np.cumsum(jump_prob, axis=1)
    two_state = spec.n_states == 2 and exit_rate.min() > 0
    all_times, all_states = [], []
    for site in range(n_sites):
        gen = _rng.stream(seed, _rng.PATH, sample_index, site)
        if two_state:
            times, visited = _site_path_two_state(gen, exit_rate, pi, T)
        else:
            times, visited = _site_path_general(gen, Q, exit_rate, cum, pi, T)
        all_times.append(times)
        all_states.append(visited)
    return NoisePath(chain=spec, horizon=float(T), jump_times=tuple(all_times), states=tuple(all_states))
