"""Exact augmented-space solvers.

Two super-operator representations are built here:

  fixed-disorder:  L = i[H0,.] + i[U,.] + i g [V,.] + B acting on functions
                   F(a, x, y) of the joint noise state and a density-matrix
                   index pair;

  Fourier fiber:   Lhat_k = i Khat_k + i Uhat + i g Vhat + B acting on
                   functions phi(a, omega, x), with the static disorder
                   enumerated and the momentum k twisting the simultaneous
                   shift of (a, omega, x).

Both act on coefficient vectors in a tensor-product orthonormal basis: per
site, the noise factor uses an orthonormal basis of L2(pi) whose first
element is the constant function, and likewise the disorder factor in
L2(mu_Omega).  In these coordinates the stationary inner products are
Euclidean, multiplication operators touch one tensor digit, shifts permute
digits, and the four-block decomposition

  H0 = span{1 x delta_0},  H1 = mean-zero in omega at x = 0,
  H2 = noise-constant with x != 0,  H3 = mean-zero in the noise state,

is a partition of basis indices.  The diffusion matrix is evaluated three
independent ways elsewhere in the package; here live the Schur-complement
and Laplace-transform (Tauberian) routes plus the operator diagnostics.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import linops
from . import rng as _rng
from .model import minimal_image
from .trajectory import DiffusionEstimate

DENSE_SUPEROP_BUDGET = 4096
SVD_KERNEL_TOL = 1e-10


class AugmentedError(RuntimeError):
    """Budget or structural failure in the exact solvers."""


def fiber_momenta(lattice):
    """All fiber momenta 2*pi*m/N per axis, m in Z_N^d, as an (N^d, d) array."""
    N, d = lattice.extent, lattice.dimension
    grids = np.meshgrid(*[np.arange(N)] * d, indexing="ij")
    return (2.0 * np.pi / N) * np.stack([g.ravel() for g in grids], axis=1)


def _clean(block, tol=1e-14):
    out = np.asarray(block).copy()
    out[np.abs(out) < tol * max(1.0, np.abs(out).max())] = 0.0
    return out


def _ortho_basis_with_constant(weights, symmetric_op=None):
    """Orthonormal basis (columns) of R^S whose first column is sqrt(weights).

    With a symmetric matrix supplied, its eigenvectors are used (the zero
    eigenvector being sqrt(weights)); otherwise a QR completion.
    """
    s = np.sqrt(weights)
    if symmetric_op is not None:
        evals, evecs = np.linalg.eigh(symmetric_op)
        order = np.argsort(evals)
        evecs = evecs[:, order]
        if abs(evals[order][0]) > 1e-10 or abs(abs(evecs[:, 0] @ s) - 1.0) > 1e-10:
            raise AugmentedError("chain eigenbasis does not contain the stationary direction")
        evecs[:, 0] = s
        # fix signs deterministically
        for j in range(1, evecs.shape[1]):
            lead = evecs[np.argmax(np.abs(evecs[:, j])), j]
            if lead < 0:
                evecs[:, j] = -evecs[:, j]
        return evecs
    S = weights.size
    M = np.concatenate([s[:, None], np.eye(S)], axis=1)
    q, _ = np.linalg.qr(M)
    q[:, 0] = s
    for j in range(1, S):
        lead = q[np.argmax(np.abs(q[:, j])), j]
        if lead < 0:
            q[:, j] = -q[:, j]
    return q[:, :S]


class _Register:
    """Tensor register: one factor of size `radix` per lattice site."""

    def __init__(self, radix, n_sites):
        self.radix = radix
        self.n_sites = n_sites
        self.n_codes = radix**n_sites
        codes = np.arange(self.n_codes)
        digs = []
        for i in range(n_sites):
            digs.append((codes // radix ** (n_sites - 1 - i)) % radix)
        self.digits = np.stack(digs, axis=1) if n_sites else np.zeros((1, 0), dtype=int)
        self.weights = radix ** (n_sites - 1 - np.arange(n_sites)) if n_sites else np.zeros(0, dtype=int)

    def code_of_digits(self, digits):
        return digits @ self.weights

    def permute_sites(self, site_map):
        """Code permutation sending digit tuple t to t' with t'[j] = t[site_map[j]]."""
        return self.code_of_digits(self.digits[:, site_map])


class FiberSpace:
    """Shared basis data for the Fourier-fiber representation of one model."""

    def __init__(self, model):
        if not model.disorder.enumerable:
            raise AugmentedError("fiber solvers require enumerable (bernoulli or none) disorder")
        self.model = model
        lat = model.lattice
        self.n = lat.n_sites
        gen = model.generator(1)
        self.gen1 = gen
        S = model.chain.n_states
        self.S = S
        dvals = model.disorder.values()
        W = dvals.size
        self.W = W

        self.UA = _ortho_basis_with_constant(gen.pi_site, gen.Btilde_site if gen.reversible else None)
        self.UW = _ortho_basis_with_constant(np.full(W, 1.0 / W))
        # single-site operator blocks in the orthonormal bases
        self.blockB = _clean(self.UA.T @ gen.Btilde_site @ self.UA)
        self.blockV = _clean(self.UA.T @ np.diag(model.chain.observable) @ self.UA)
        self.blockU = _clean(self.UW.T @ np.diag(dvals) @ self.UW)

        self.regA = _Register(S, self.n)
        self.regW = _Register(W, self.n)
        self.dim = self.regA.n_codes * self.regW.n_codes * self.n

        coords = lat.site_coords()
        self.site_shift = {}
        zs, _ = model.hopping.displacements()
        for zeta in zs:
            zeta = tuple(int(z) for z in zeta)
            self.site_shift[zeta] = lat.site_index(coords + np.array(zeta))
        self.positions = lat.positions().astype(float)

        ta = np.repeat(np.arange(self.regA.n_codes), self.regW.n_codes * self.n)
        sw = np.tile(np.repeat(np.arange(self.regW.n_codes), self.n), self.regA.n_codes)
        xx = np.tile(np.arange(self.n), self.regA.n_codes * self.regW.n_codes)
        self.idx_t, self.idx_s, self.idx_x = ta, sw, xx

        self.mask_h0 = (ta == 0) & (sw == 0) & (xx == 0)
        self.mask_h1 = (ta == 0) & (sw != 0) & (xx == 0)
        self.mask_h2 = (ta == 0) & (xx != 0)
        self.mask_h3 = ta != 0
        self.i_h0 = np.nonzero(self.mask_h0)[0]
        self.i_h1 = np.nonzero(self.mask_h1)[0]
        self.i_h2 = np.nonzero(self.mask_h2)[0]
        self.i_h3 = np.nonzero(self.mask_h3)[0]

    def flat(self, t, s, x):
        return (t * self.regW.n_codes + s) * self.n + x

    # -- operator builders ---------------------------------------------------

    def _site_block_operator(self, reg_name, block, site_for_x=False, fixed_site=0):
        """Operator applying `block` to one digit of a register.

        With site_for_x the digit acted on is the basis point's own x
        coordinate; otherwise it is `fixed_site`.  Other indices are untouched.
        """
        reg = self.regA if reg_name == "a" else self.regW
        rows, cols, vals = [], [], []
        nz = np.nonzero(np.abs(block) > 0)
        for r, c in zip(*nz):
            amp = block[r, c]
            if site_for_x:
                for x in range(self.n):
                    sel = (reg.digits[:, x] == c).nonzero()[0]
                    tgt = sel + (r - c) * reg.weights[x]
                    rows.append(self._expand(reg_name, tgt, x))
                    cols.append(self._expand(reg_name, sel, x))
                    vals.append(np.full(rows[-1].size, amp))
            else:
                sel = (reg.digits[:, fixed_site] == c).nonzero()[0]
                tgt = sel + (r - c) * reg.weights[fixed_site]
                rows.append(self._expand(reg_name, tgt, None))
                cols.append(self._expand(reg_name, sel, None))
                vals.append(np.full(rows[-1].size, amp))
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.dim, self.dim))

    def _expand(self, reg_name, reg_codes, x_fixed):
        """Fiber indices for given codes of one register, all codes of the other.

        x_fixed restricts the x coordinate (used when the acted-on digit is
        tied to the basis point's position); None means all x.
        """
        nW, nA, n = self.regW.n_codes, self.regA.n_codes, self.n
        if reg_name == "a":
            other = np.arange(nW)
            xs = np.arange(n) if x_fixed is None else np.array([x_fixed])
            t = reg_codes[:, None, None]
            s = other[None, :, None]
            x = xs[None, None, :]
            return ((t * nW + s) * n + x).ravel()
        other = np.arange(nA)
        xs = np.arange(n) if x_fixed is None else np.array([x_fixed])
        s = reg_codes[:, None, None]
        t = other[None, :, None]
        x = xs[None, None, :]
        return ((t * nW + s) * n + x).ravel()

    def build_B(self):
        out = None
        for i in range(self.n):
            term = self._site_block_operator("a", self.blockB, site_for_x=False, fixed_site=i)
            out = term if out is None else out + term
        return out.tocsr()

    def build_V(self):
        at_x = self._site_block_operator("a", self.blockV, site_for_x=True)
        at_0 = self._site_block_operator("a", self.blockV, site_for_x=False, fixed_site=0)
        return (at_x - at_0).tocsr()

    def build_U(self):
        if self.W == 1:
            return sp.csr_matrix((self.dim, self.dim))
        at_x = self._site_block_operator("w", self.blockU, site_for_x=True)
        at_0 = self._site_block_operator("w", self.blockU, site_for_x=False, fixed_site=0)
        return (at_x - at_0).tocsr()

    def build_K(self, k):
        """Khat_k = sum_zeta h(zeta) [ shift_x - exp(i k.zeta) * joint shift ]."""
        k = np.asarray(k, dtype=float).reshape(self.model.lattice.dimension)
        rows = np.arange(self.dim)
        t, s, x = self.idx_t, self.idx_s, self.idx_x
        mats = []
        for zeta, amp in self.model.hopping.entries.items():
            zarr = np.array(zeta)
            sm = self.site_shift[zeta]  # sm[j] = site index of coords_j + zeta
            # column x' with x' + zeta = x, i.e. x' = x - zeta: invert the map
            inv = np.empty_like(sm)
            inv[sm] = np.arange(self.n)
            x_minus = inv[x]
            permA = self.regA.permute_sites(sm)
            permW = self.regW.permute_sites(sm)
            # plain x-shift: coefficient c'(t,s,x) <- c(t,s,x-zeta)
            cols1 = self.flat(t, s, x_minus)
            m1 = sp.csr_matrix((np.full(self.dim, amp), (rows, cols1)), shape=(self.dim, self.dim))
            # twisted joint shift: c'(t,s,x) <- c(tau(t), tau(s), x-zeta),
            # tau moving every register digit by the same translation
            cols2 = self.flat(permA[t], permW[s], x_minus)
            phase = amp * np.exp(1j * float(k @ zarr))
            m2 = sp.csr_matrix((np.full(self.dim, phase), (rows, cols2)), shape=(self.dim, self.dim))
            mats.append(m1 - m2)
        out = mats[0]
        for m in mats[1:]:
            out = out + m
        return out.tocsr()

    def f_vectors(self):
        """f0^(i)(x) = x_i h(x) as full-space coefficient vectors, one per axis."""
        lat = self.model.lattice
        d = lat.dimension
        hx = np.zeros(self.n, dtype=complex)
        for zeta, amp in self.model.hopping.entries.items():
            hx[lat.site_index(np.array(zeta))] = amp
        out = np.zeros((d, self.dim), dtype=complex)
        pos = self.positions
        for i in range(d):
            vals = pos[:, i] * hx
            out[i, self.flat(0, 0, np.arange(self.n))] = vals
        return out


@dataclass
class SuperOperator:
    """Dense-or-sparse generator with its basis descriptor and components."""

    matrix: sp.csr_matrix
    kind: str  # "fixed" or "fiber"
    dim: int
    components: dict = field(repr=False)
    meta: dict = field(default_factory=dict)
    space: object = None

    def dense(self):
        if self.dim > DENSE_SUPEROP_BUDGET:
            raise AugmentedError(f"dimension {self.dim} exceeds the dense budget {DENSE_SUPEROP_BUDGET}")
        return self.matrix.toarray()

    def norm2(self, which=None):
        m = self.matrix if which is None else self.components[which]
        if self.dim <= DENSE_SUPEROP_BUDGET:
            return float(np.linalg.norm(m.toarray(), 2))
        sv = spla.svds(m.astype(complex), k=1, return_singular_vectors=False)
        return float(sv[0])

    def accretivity_probe(self, n_probes=500, seed=0):
        """min over random unit F of Re <F, L F>."""
        gen = _rng.stream(seed, _rng.PROBE, self.dim)
        probes = linops.random_probes(self.dim, n_probes, gen)
        vals = np.einsum("pi,pi->p", probes.conj(), (self.matrix @ probes.T).T)
        return float(np.min(vals.real))


def build_L_fixed_omega(model, omega, g):
    """L = i[H0,.] + i[U,.] + i g [V,.] + B on (noise state) x (site pairs)."""
    from .model import build_hamiltonian

    gen = model.generator(1)
    S = model.chain.n_states
    n = model.n_sites
    dim = S**n * n * n
    if dim > DENSE_SUPEROP_BUDGET:
        raise AugmentedError(f"fixed-omega dimension {dim} exceeds the dense budget {DENSE_SUPEROP_BUDGET}")
    regA = _Register(S, n)
    UA = _ortho_basis_with_constant(gen.pi_site, gen.Btilde_site if gen.reversible else None)
    blockB = UA.T @ gen.Btilde_site @ UA
    blockV = UA.T @ np.diag(model.chain.observable) @ UA

    nA = regA.n_codes
    npair = n * n
    idx = np.arange(dim)
    t = idx // npair
    x = (idx % npair) // n
    y = idx % n

    H = build_hamiltonian(model.lattice, model.hopping, omega)
    uvals = np.asarray(omega.values)

    # K F(x,y) = sum_zeta h(zeta) [ F(x - zeta, y) - F(x, y + zeta) ]
    lat = model.lattice
    coords = lat.site_coords()
    Kmats = []
    for zeta, amp in model.hopping.entries.items():
        sm = lat.site_index(coords + np.array(zeta))
        inv = np.empty_like(sm)
        inv[sm] = np.arange(n)
        colsA = (t * npair) + inv[x] * n + y
        colsB = (t * npair) + x * n + sm[y]
        Kmats.append(
            sp.csr_matrix((np.full(dim, amp), (idx, colsA)), shape=(dim, dim))
            - sp.csr_matrix((np.full(dim, amp), (idx, colsB)), shape=(dim, dim))
        )
    K = Kmats[0]
    for m in Kmats[1:]:
        K = K + m
    K = K.tocsr()

    U = sp.diags(uvals[x] - uvals[y]).tocsr()

    # V F(a,x,y) = [v(a_x) - v(a_y)] F(a,x,y): one digit of the noise register each
    rowsV, colsV, valsV = [], [], []
    nzV = np.nonzero(np.abs(blockV) > 0)
    for r, c in zip(*nzV):
        amp = blockV[r, c]
        for x0 in range(n):
            selx = np.nonzero((regA.digits[t, x0] == c) & (x == x0))[0]
            rowsV.append(selx + (r - c) * regA.weights[x0] * npair)
            colsV.append(selx)
            valsV.append(np.full(selx.size, amp))
            sely = np.nonzero((regA.digits[t, x0] == c) & (y == x0))[0]
            rowsV.append(sely + (r - c) * regA.weights[x0] * npair)
            colsV.append(sely)
            valsV.append(np.full(sely.size, -amp))
    V = sp.csr_matrix((np.concatenate(valsV), (np.concatenate(rowsV), np.concatenate(colsV))), shape=(dim, dim))

    rowsB, colsB, valsB = [], [], []
    nzB = np.nonzero(np.abs(blockB) > SVD_KERNEL_TOL * max(1.0, np.abs(blockB).max()))
    for i in range(n):
        for r, c in zip(*nzB):
            sel = np.nonzero(regA.digits[t, i] == c)[0]
            rowsB.append(sel + (r - c) * regA.weights[i] * npair)
            colsB.append(sel)
            valsB.append(np.full(sel.size, blockB[r, c]))
    B = sp.csr_matrix((np.concatenate(valsB), (np.concatenate(rowsB), np.concatenate(colsB))), shape=(dim, dim))

    L = (1j * (K + U + g * V) + B).tocsr()
    return SuperOperator(
        matrix=L,
        kind="fixed",
        dim=dim,
        components={"K": K, "U": U, "V": V, "B": B},
        meta={"g": float(g), "n": n, "S": S, "H": H, "basis": "noise register x site pairs"},
        space=None,
    )


def pillet_expectation(L, rho0, t):
    """mu_A-average of exp(-t L)(1 x rho0): the exact E[rho_t] at fixed disorder."""
    if L.kind != "fixed":
        raise AugmentedError("pillet_expectation needs a fixed-disorder super-operator")
    if t < 0:
        raise AugmentedError("time must be nonnegative")
    n = L.meta["n"]
    rho0 = np.asarray(rho0, dtype=complex)
    herm = np.abs(rho0 - rho0.conj().T).max()
    if herm > 1e-12 * max(1.0, np.abs(rho0).max()):
        raise AugmentedError("rho0 must be Hermitian")
    vec = np.zeros(L.dim, dtype=complex)
    vec[: n * n] = rho0.reshape(-1)  # noise-register code 0 = constant function
    evolved = linops.apply_semigroup(L.matrix, vec, t)
    out = evolved[: n * n].reshape(n, n)
    herm_out = np.abs(out - out.conj().T).max()
    trace_dev = abs(out.trace() - rho0.trace())
    if herm_out > 1e-10 * max(1.0, np.abs(out).max()) or trace_dev > 1e-10 * max(1.0, abs(rho0.trace())):
        raise AugmentedError(f"semigroup broke Hermiticity ({herm_out:.2e}) or trace ({trace_dev:.2e})")
    return out


def build_Lhat_k(model, k, g, space=None):
    """Fourier-fiber generator Lhat_k; disorder must be enumerable."""
    space = space or FiberSpace(model)
    if space.dim > 16 * DENSE_SUPEROP_BUDGET:
        raise AugmentedError(f"fiber dimension {space.dim} is beyond the sparse budget")
    K = space.build_K(k)
    U = space.build_U()
    V = space.build_V()
    B = space.build_B()
    L = (1j * (K + U + g * V) + B).tocsr()
    return SuperOperator(
        matrix=L,
        kind="fiber",
        dim=space.dim,
        components={"K": K, "U": U, "V": V, "B": B},
        meta={"g": float(g), "k": np.asarray(k, dtype=float), "lambda": model.disorder.lam},
        space=space,
    )


@dataclass
class BlockDecomp:
    """Index partition of the fiber space plus the Q_0 data derived from it."""

    space: FiberSpace
    Q0: np.ndarray  # H2 x H1 block of Khat_0
    pi0_range: np.ndarray  # orthonormal basis of ran Q0 in H2 coordinates
    pi0_perp: np.ndarray  # orthonormal basis of its complement
    singular_values: np.ndarray
    threshold_ambiguous: bool
    f_h2: np.ndarray  # (d, dim H2) coefficient vectors of x_i h(x)

    @property
    def dims(self):
        s = self.space
        return {"H0": s.i_h0.size, "H1": s.i_h1.size, "H2": s.i_h2.size, "H3": s.i_h3.size}


def block_decompose(model, space=None):
    """Partition the fiber space and build Q0, its range projector and f vectors."""
    space = space or FiberSpace(model)
    K0 = space.build_K(np.zeros(model.lattice.dimension))
    Q0 = np.asarray(K0[space.i_h2][:, space.i_h1].todense())
    nh2 = space.i_h2.size
    if Q0.shape[1] == 0:
        rng_basis = np.zeros((nh2, 0))
        perp = np.eye(nh2)
        svals = np.zeros(0)
        ambiguous = False
    else:
        Uq, svals, _ = np.linalg.svd(Q0, full_matrices=True)
        scale = max(svals.max(), 1.0)
        rank = int(np.sum(svals > SVD_KERNEL_TOL * scale))
        ambiguous = bool(np.any((svals > SVD_KERNEL_TOL * scale * 0.1) & (svals <= SVD_KERNEL_TOL * scale * 10)))
        if ambiguous:
            warnings.warn("Q0 singular spectrum within 10x of the rank threshold", RuntimeWarning)
        rng_basis = Uq[:, :rank]
        perp = Uq[:, rank:]
    f_full = space.f_vectors()
    f_h2 = f_full[:, space.i_h2]
    return BlockDecomp(
        space=space,
        Q0=Q0,
        pi0_range=rng_basis,
        pi0_perp=perp,
        singular_values=svals,
        threshold_ambiguous=ambiguous,
        f_h2=f_h2,
    )


def _h3_schur_term(lhat, space, w=0.0):
    """g^2 Vhat_{2<-3} (w + L3)^-1 Vhat_{3<-2} as a dense H2 x H2 matrix."""
    g = lhat.meta["g"]
    V = lhat.components["V"]
    V32 = V[space.i_h3][:, space.i_h2]
    V23 = V[space.i_h2][:, space.i_h3]
    if g == 0.0:
        return np.zeros((space.i_h2.size, space.i_h2.size), dtype=complex)
    L3 = (lhat.matrix[space.i_h3][:, space.i_h3] + w * sp.identity(space.i_h3.size, format="csr")).tocsc()
    rhs = np.asarray(V32.todense(), dtype=complex)
    if space.i_h3.size <= 2048:
        X = linops.solve_refined(L3.toarray(), rhs)
    else:
        X = linops.solve_refined(L3, rhs)
    return g**2 * (np.asarray(V23.todense(), dtype=complex) @ X)


def _l2_block(lhat, space):
    """i(Khat + Uhat) compressed to H2 (B and Vhat vanish there)."""
    rows = space.i_h2
    K2 = lhat.components["K"][rows][:, rows]
    U2 = lhat.components["U"][rows][:, rows]
    return 1j * np.asarray((K2 + U2).todense())


def gamma_kw(model, k, w, g, space=None, decomp=None):
    """Schur-complement resolvent Gamma_k(w) on the H2 block (dense matrix)."""
    if np.real(w) <= 0:
        raise AugmentedError("gamma_kw requires Re w > 0")
    space = space or FiberSpace(model)
    lhat = build_Lhat_k(model, k, g, space=space)
    K = lhat.components["K"]
    Qk = np.asarray(K[space.i_h2][:, space.i_h1].todense())
    L2 = _l2_block(lhat, space)
    schur3 = _h3_schur_term(lhat, space, w=w)
    nh2 = space.i_h2.size
    inv_gamma = w * np.eye(nh2) + L2 + (Qk @ Qk.conj().T) / w + schur3
    gamma = np.linalg.inv(inv_gamma)
    return gamma, inv_gamma


def dissipation_term(model, k, w, g, space=None):
    """g-independent part Vhat^dagger (w + L3)^-1 Vhat used in the dissipation bound."""
    space = space or FiberSpace(model)
    lhat = build_Lhat_k(model, k, g, space=space)
    term = _h3_schur_term(lhat, space, w=w)
    if g == 0:
        raise AugmentedError("dissipation bound needs g > 0")
    return term / g**2


def diffusion_schur(model, g, space=None, decomp=None):
    """Diffusion matrix from the Schur-complement formula at k = 0, w -> 0."""
    space = space or FiberSpace(model)
    decomp = decomp or block_decompose(model, space=space)
    lhat = build_Lhat_k(model, np.zeros(model.lattice.dimension), g, space=space)
    M2 = _l2_block(lhat, space) + _h3_schur_term(lhat, space, w=0.0)
    Wp = decomp.pi0_perp
    # f vectors must already lie in ran Pi0^perp (they are omega-independent)
    leak = 0.0
    if decomp.pi0_range.shape[1]:
        leak = float(np.abs(decomp.pi0_range.conj().T @ decomp.f_h2.T).max())
        if leak > 1e-10:
            raise AugmentedError(f"f vectors leak into ran Q0 by {leak:.2e}")
    A = Wp.conj().T @ M2 @ Wp
    fb = Wp.conj().T @ decomp.f_h2.T  # (dim perp, d)
    X = linops.solve_refined(A, fb)
    d = model.lattice.dimension
    Dc = np.zeros((d, d), dtype=complex)
    for i in range(d):
        for j in range(d):
            Dc[i, j] = np.vdot(fb[:, i], X[:, j]) + np.vdot(fb[:, j], X[:, i])
    im = float(np.abs(Dc.imag).max())
    D = Dc.real.copy()
    D = 0.5 * (D + D.T)
    evmin = float(np.linalg.eigvalsh(D).min())
    flags = []
    if im > 1e-8:
        flags.append(f"imaginary part {im:.2e} exceeds 1e-8")
    if evmin <= 0:
        flags.append("D is not positive definite")
    return DiffusionEstimate(
        D=D,
        method="schur",
        diffusive=not flags,
        flags=tuple(flags),
        diagnostics={
            "imag_max": im,
            "min_eigenvalue": evmin,
            "q0_rank": int(decomp.pi0_range.shape[1]),
            "pi0_leak": leak,
            "fiber_dim": space.dim,
            "g": float(g),
        },
    )


def diffusion_tauberian(model, g, eta_grid=None, space=None):
    """Diffusion matrix from eta * Mtilde(eta) as eta -> 0 (Laplace route).

    For psi0 = delta_0 the transform reduces to
    <f_i, (eta + Lhat_0)^-1 f_j> + (i <-> j); the limit is taken by linear
    extrapolation from the last two grid points.
    """
    if eta_grid is None:
        eta_grid = np.geomspace(1e-1, 1e-5, 5)
    eta_grid = np.asarray(eta_grid, dtype=float)
    if np.any(eta_grid <= 0) or np.any(np.diff(eta_grid) >= 0):
        raise AugmentedError("eta grid must be positive and strictly decreasing")
    space = space or FiberSpace(model)
    lhat = build_Lhat_k(model, np.zeros(model.lattice.dimension), g, space=space)
    f_full = space.f_vectors()
    d = f_full.shape[0]
    seq = []
    for eta in eta_grid:
        A = (lhat.matrix + eta * sp.identity(space.dim, format="csr")).tocsc()
        if space.dim <= DENSE_SUPEROP_BUDGET:
            X = linops.solve_refined(A.toarray(), f_full.T)
        else:
            X = linops.solve_refined(A, f_full.T)
        T = np.zeros((d, d), dtype=complex)
        for i in range(d):
            for j in range(d):
                T[i, j] = np.vdot(f_full[i], X[:, j]) + np.vdot(f_full[j], X[:, i])
        seq.append(T)
    seq = np.array(seq)
    e1, e0 = eta_grid[-2], eta_grid[-1]
    extrap = (seq[-1] * e1 - seq[-2] * e0) / (e1 - e0)
    im = float(np.abs(extrap.imag).max())
    D = 0.5 * (extrap.real + extrap.real.T)
    last_diff = float(np.abs(seq[-1] - seq[-2]).max())
    diag_real = np.array([s.real.trace() for s in seq])
    tol = 1e-12 * max(1.0, np.abs(diag_real).max())
    diffs = np.diff(diag_real)
    monotone = bool(np.all(diffs <= tol) or np.all(diffs >= -tol))
    flags = []
    if im > 1e-8:
        flags.append(f"imaginary part {im:.2e} exceeds 1e-8")
    evmin = float(np.linalg.eigvalsh(D).min())
    if evmin <= 0:
        flags.append("D is not positive definite")
    return DiffusionEstimate(
        D=D,
        method="tauberian",
        diffusive=not flags,
        flags=tuple(flags),
        diagnostics={
            "eta_grid": eta_grid.tolist(),
            "trace_sequence": diag_real.tolist(),
            "last_two_difference": last_diff,
            "monotone": monotone,
            "imag_max": im,
            "min_eigenvalue": evmin,
            "g": float(g),
        },
    )


def lambda_tkz(model, t, k, z, g, space=None):
    """Lambda(t, k, z) = t <f_{k/sqrt t}, Gamma_{k/sqrt t}(z/t) f_{k/sqrt t}>.

    k/sqrt(t) must coincide with a fiber momentum of the ring (the fiber is
    exact only there); use admissible_lambda_times to enumerate usable t.
    """
    if np.real(z) <= 0:
        raise AugmentedError("lambda_tkz requires Re z > 0")
    space = space or FiberSpace(model)
    k = np.asarray(k, dtype=float).reshape(model.lattice.dimension)
    km = k / np.sqrt(t)
    moms = fiber_momenta(model.lattice)
    dist = np.abs(np.mod(moms - km + np.pi, 2 * np.pi) - np.pi).max(axis=1)
    hit = np.nonzero(dist < 1e-9)[0]
    if hit.size == 0:
        raise AugmentedError(f"k/sqrt(t) = {km} is not an admissible fiber momentum")
    km = moms[hit[0]]
    gamma, _ = gamma_kw(model, km, z / t, g, space=space)
    lat = model.lattice
    hx = np.zeros(space.n, dtype=complex)
    for zeta, amp in model.hopping.entries.items():
        hx[lat.site_index(np.array(zeta))] = amp
    fk_full = np.zeros(space.dim, dtype=complex)
    xs = np.arange(space.n)
    fk_full[space.flat(0, 0, xs)] = (1.0 - np.exp(1j * (space.positions @ km))) * hx
    fk = fk_full[space.i_h2]
    val = t * np.vdot(fk, gamma @ fk)
    return complex(val)


def admissible_lambda_times(model, k):
    """Times t with k/sqrt(t) on the fiber momentum grid, largest first."""
    k = np.asarray(k, dtype=float).reshape(model.lattice.dimension)
    out = []
    for km in fiber_momenta(model.lattice):
        mask = np.abs(km) > 1e-12
        if not mask.any() or np.abs(k[~mask]).max(initial=0.0) > 1e-12:
            continue
        r = k[mask] / km[mask]
        if r.max() - r.min() > 1e-12 or r[0] <= 0:
            continue
        out.append(float(r[0] ** 2))
    return sorted(set(np.round(out, 12)), reverse=True)


@dataclass
class SmallGReport:
    g_grid: np.ndarray
    D_values: list
    ratios: np.ndarray
    F: np.ndarray
    kernel_dim: int
    stabilization: float

    def to_dict(self):
        return {
            "g_grid": np.asarray(self.g_grid).tolist(),
            "D": [np.asarray(D).tolist() for D in self.D_values],
            "ratios": np.asarray(self.ratios).tolist(),
            "F": np.asarray(self.F).tolist(),
            "kernel_dim": int(self.kernel_dim),
            "stabilization": float(self.stabilization),
        }


def small_g_coefficient(model, g_grid, space=None):
    """D(g)/g^2 across a decreasing g grid plus the extrapolated coefficient.

    Reports the dimension of {f in ran Pi0perp : Pi0perp Lhat_{0;2} f = 0}
    (expected empty); ratios failing to stabilize are flagged by the caller
    via the `stabilization` field.
    """
    g_grid = np.asarray(g_grid, dtype=float)
    if np.any(g_grid <= 0) or np.any(np.diff(g_grid) >= 0):
        raise AugmentedError("g grid must be positive and strictly decreasing")
    space = space or FiberSpace(model)
    decomp = block_decompose(model, space=space)
    Ds = []
    ratios = []
    for g in g_grid:
        est = diffusion_schur(model, g, space=space, decomp=decomp)
        Ds.append(est.D)
        ratios.append(est.D / g**2)
    ratios = np.array(ratios)
    g1, g0 = g_grid[-2], g_grid[-1]
    # Richardson step assuming D/g^2 = F + c g^2
    F = (ratios[-1] * g1**2 - ratios[-2] * g0**2) / (g1**2 - g0**2)
    r_prev = np.trace(ratios[-2]) if ratios[-2].ndim == 2 else ratios[-2]
    r_last = np.trace(ratios[-1]) if ratios[-1].ndim == 2 else ratios[-1]
    stabilization = abs(r_last - r_prev) / abs(r_prev)

    lhat0 = build_Lhat_k(model, np.zeros(model.lattice.dimension), 0.0, space=space)
    A0 = decomp.pi0_perp.conj().T @ _l2_block(lhat0, space) @ decomp.pi0_perp
    if A0.size:
        sv = np.linalg.svd(A0, compute_uv=False)
        kernel_dim = int(np.sum(sv <= SVD_KERNEL_TOL * max(1.0, sv.max())))
    else:
        kernel_dim = 0
    return SmallGReport(
        g_grid=g_grid,
        D_values=Ds,
        ratios=ratios,
        F=F,
        kernel_dim=kernel_dim,
        stabilization=float(stabilization),
    )


def resolvent_limit_check(A, Bm, phi, psi, lam_grid=None):
    """Numeric check of the resolvent limit <phi,(lam A + B)^-1 psi> -> <Pi phi,(Pi B Pi)^-1 Pi psi>.

    A must be normal with Re A >= 0; B must have Re B >= c > 0; Pi projects
    onto the kernel of A (SVD threshold 1e-10).  Returns the deviation table.
    """
    if lam_grid is None:
        lam_grid = np.geomspace(1.0, 1e6, 13)
    A = np.asarray(A, dtype=complex)
    Bm = np.asarray(Bm, dtype=complex)
    scale = max(1.0, float(np.abs(A).max()))
    if np.abs(A @ A.conj().T - A.conj().T @ A).max() > 1e-10 * scale**2:
        raise AugmentedError("A is not normal within 1e-10")
    if np.linalg.eigvalsh(0.5 * (A + A.conj().T)).min() < -1e-10 * scale:
        raise AugmentedError("A must satisfy Re A >= 0")
    c = float(np.linalg.eigvalsh(0.5 * (Bm + Bm.conj().T)).min())
    if c <= 0:
        raise AugmentedError("B must satisfy Re B >= c > 0")
    _, sv, Vh = np.linalg.svd(A)
    null = Vh.conj().T[:, sv <= SVD_KERNEL_TOL * max(1.0, sv.max())]
    if null.shape[1] == 0:
        limit = 0.0 + 0.0j
    else:
        y = np.linalg.solve(null.conj().T @ Bm @ null, null.conj().T @ psi)
        limit = complex(np.vdot(null.conj().T @ phi, y))
    devs = []
    for lam in np.asarray(lam_grid, dtype=float):
        val = complex(np.vdot(phi, np.linalg.solve(lam * A + Bm, psi)))
        devs.append(abs(val - limit))
    return {
        "deviations": devs,
        "lam_grid": np.asarray(lam_grid, dtype=float).tolist(),
        "limit": limit,
        "kernel_dim": int(null.shape[1]),
        "final_deviation": devs[-1],
        "c": c,
    }


def sector_scan(L, n_probes=500, seed=0):
    """Fit (b', q') with |Im <F, L F>| <= q' Re <F, L F> + b' |F|^2 over random probes."""
    if n_probes < 100:
        raise AugmentedError("sector_scan needs at least 100 probes")
    gen = _rng.stream(seed, _rng.PROBE, L.dim, n_probes)
    probes = linops.random_probes(L.dim, n_probes, gen)
    vals = np.einsum("pi,pi->p", probes.conj(), (L.matrix @ probes.T).T)
    quads = [(v.real, v.imag, 1.0) for v in vals]
    b, q = linops.sector_fit(quads)
    slack = min(q * max(v.real, 0.0) + b - abs(v.imag) for v in vals)
    return {"b": b, "q": q, "min_re": float(vals.real.min()), "min_slack": float(slack)}
