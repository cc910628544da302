"""Trajectory Monte Carlo for the noisy lattice Schrödinger equation.

Each trajectory integrates i d/dt psi = (H0 + U + g V(t)) psi along one
sampled noise path with a Strang splitting whose steps are cut at every noise
jump time: the diagonal phase of each substep is then exact, and only the
kinetic/potential non-commutativity contributes error (second order in the
base step).  Within a substep the kinetic factor exp(-i delta H) is applied
as a truncated Taylor series whose remainder is certified below 1e-16 per
application; the spectral factorization of H is kept for the exact g = 0 path
and as the reference in accuracy tests.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from numba import njit

from . import rng as _rng
from .model import build_hamiltonian, minimal_image, sample_disorder
from .noise import sample_path

TAYLOR_TAIL = 1e-17
UNITARITY_TOL = 1e-10


class TrajectoryError(RuntimeError):
    """Numerical guard tripped during propagation (NaN/overflow, bad plan)."""


class FitError(RuntimeError):
    """Diffusion fit aborted (finite-size guard or insufficient data)."""


# ----------------------------------------------------------------------------
# propagation kernels


@njit(cache=True)
def _taylor_degree(theta):
    term = 1.0
    p = 0
    while term > TAYLOR_TAIL and p < 30:
        p += 1
        term *= theta / p
    return p


@njit(cache=True, fastmath=True, inline="always")
def _phase_by_state(pr, pi, cur, tab_c, tab_s):
    for x in range(pr.shape[0]):
        c = tab_c[cur[x]]
        d = tab_s[cur[x]]
        a = pr[x]
        b = pi[x]
        pr[x] = a * c - b * d
        pi[x] = a * d + b * c


@njit(cache=True, fastmath=True)
def _evolve_segment_split(
    pr,
    pi,
    stencil,
    amp,
    diag,
    indptr,
    indices,
    dre,
    dim_,
    hnorm,
    grid,
    j0,
    j1,
    cur,
    vtab,
    g,
    jb_ptr,
    jb_sites,
    jb_new,
):
    """Advance psi = pr + i*pi across substeps j0..j1-1 of the global grid.

    cur[x] is the noise state of site x, updated in place as jump events
    (jb_* arrays, indexed by grid boundary) are crossed; vtab maps states to
    observable values.  Half phases of adjacent substeps are merged into one
    diagonal multiply; a jump between them contributes a per-site correction.
    Real and imaginary parts are separate contiguous arrays so the stencil
    loops vectorize.
    """
    n = pr.shape[0]
    S = vtab.shape[0]
    if j1 <= j0:
        return
    wr = np.empty(n, dtype=np.float64)
    wi = np.empty(n, dtype=np.float64)
    hr = np.empty(n, dtype=np.float64)
    hi = np.empty(n, dtype=np.float64)
    tab_c = np.empty(S, dtype=np.float64)
    tab_s = np.empty(S, dtype=np.float64)

    # jump events at the segment-start boundary belong to the first substep
    for q in range(jb_ptr[j0], jb_ptr[j0 + 1]):
        cur[jb_sites[q]] = jb_new[q]

    # leading half phase of the first substep
    half = 0.5 * g * (grid[j0 + 1] - grid[j0])
    for s in range(S):
        tab_c[s] = math.cos(half * vtab[s])
        tab_s[s] = -math.sin(half * vtab[s])
    _phase_by_state(pr, pi, cur, tab_c, tab_s)

    for j in range(j0, j1):
        delta = grid[j + 1] - grid[j]
        p = _taylor_degree(hnorm * delta)
        for x in range(n):
            wr[x] = pr[x]
            wi[x] = pi[x]
        for k in range(1, p + 1):
            # h = H w
            if stencil:
                hr[0] = amp * (wr[n - 1] + wr[1]) + diag[0] * wr[0]
                hi[0] = amp * (wi[n - 1] + wi[1]) + diag[0] * wi[0]
                for x in range(1, n - 1):
                    hr[x] = amp * (wr[x - 1] + wr[x + 1]) + diag[x] * wr[x]
                    hi[x] = amp * (wi[x - 1] + wi[x + 1]) + diag[x] * wi[x]
                hr[n - 1] = amp * (wr[n - 2] + wr[0]) + diag[n - 1] * wr[n - 1]
                hi[n - 1] = amp * (wi[n - 2] + wi[0]) + diag[n - 1] * wi[n - 1]
            else:
                for x in range(n):
                    ar = 0.0
                    ai = 0.0
                    for q in range(indptr[x], indptr[x + 1]):
                        y = indices[q]
                        ar += dre[q] * wr[y] - dim_[q] * wi[y]
                        ai += dre[q] * wi[y] + dim_[q] * wr[y]
                    hr[x] = ar
                    hi[x] = ai
            # w <- (-i delta / k) h ; psi += w
            scale = delta / k
            for x in range(n):
                tr = scale * hi[x]
                ti = -scale * hr[x]
                wr[x] = tr
                wi[x] = ti
                pr[x] += tr
                pi[x] += ti
        # trailing half phase, merged with the leading half of the next substep
        halfc = 0.5 * g * delta
        if j < j1 - 1:
            half2 = 0.5 * g * (grid[j + 2] - grid[j + 1])
            tot = halfc + half2
            for s in range(S):
                tab_c[s] = math.cos(tot * vtab[s])
                tab_s[s] = -math.sin(tot * vtab[s])
            _phase_by_state(pr, pi, cur, tab_c, tab_s)
            # sites jumping at boundary j+1: correct their leading half phase
            for q in range(jb_ptr[j + 1], jb_ptr[j + 2]):
                x = jb_sites[q]
                old = cur[x]
                new = jb_new[q]
                arg = half2 * (vtab[new] - vtab[old])
                c = math.cos(arg)
                d = -math.sin(arg)
                a = pr[x]
                b = pi[x]
                pr[x] = a * c - b * d
                pi[x] = a * d + b * c
                cur[x] = new
        else:
            for s in range(S):
                tab_c[s] = math.cos(halfc * vtab[s])
                tab_s[s] = -math.sin(halfc * vtab[s])
            _phase_by_state(pr, pi, cur, tab_c, tab_s)


# ----------------------------------------------------------------------------
# plans and single-trajectory propagation


@dataclass
class PropagatorPlan:
    """Static data for propagating in a fixed disorder realization.

    The spectral factorization of H is materialized lazily; its
    reconstruction error is checked against 1e-10 whenever it is built.
    """

    H: np.ndarray
    dt: float
    T: float
    checkpoints: np.ndarray
    _spectral: tuple = field(default=None, repr=False)

    def __post_init__(self):
        self.checkpoints = np.atleast_1d(np.asarray(self.checkpoints, dtype=float))
        if np.any(np.diff(self.checkpoints) <= 0):
            raise TrajectoryError("checkpoints must be strictly increasing")
        if self.checkpoints[-1] > self.T + 1e-12:
            raise TrajectoryError("checkpoints exceed the horizon T")
        if self.dt <= 0:
            raise TrajectoryError("dt must be positive")
        spacing = np.diff(np.concatenate([[0.0], self.checkpoints])).min()
        if self.dt > spacing + 1e-12:
            raise TrajectoryError("dt must not exceed the checkpoint spacing")

    def spectral(self):
        if self._spectral is None:
            if np.abs(self.H.imag).max(initial=0.0) == 0.0:
                evals, evecs = np.linalg.eigh(self.H.real)
                evecs = evecs.astype(complex)
            else:
                evals, evecs = np.linalg.eigh(self.H)
            err = np.abs((evecs * evals) @ evecs.conj().T - self.H).max()
            if err > 1e-10:
                raise TrajectoryError(f"spectral factorization reconstruction error {err:.2e}")
            self._spectral = (evals, evecs)
        return self._spectral

    def free_evolution(self, psi0, t):
        evals, evecs = self.spectral()
        return evecs @ (np.exp(-1j * t * evals) * (evecs.conj().T @ psi0))

    @property
    def hnorm_bound(self):
        return float(np.abs(self.H).sum(axis=1).max())


def integrate_phase(path, site, s, t):
    """Exact integral of the noise observable at one site over [s, t].

    Piecewise-constant paths make this a finite sum of value * overlap terms;
    the result is additive across interval splits to machine precision.
    """
    if not (0.0 <= s <= t <= path.horizon + 1e-12):
        raise TrajectoryError("phase integral interval outside the path horizon")
    times = path.jump_times[site]
    states = path.states[site]
    v = path.chain.observable
    cuts = np.concatenate([[s], times[(times > s) & (times < t)], [t]])
    idx = np.searchsorted(times, cuts[:-1], side="right")
    return float(np.sum(v[states[idx]] * np.diff(cuts)))


def _substep_grid(dt, stop, jumps, marks):
    """Substep boundaries on [0, stop]: base dt grid, noise jump cuts and the
    requested output times.  Returns (grid, mark_indices)."""
    base = np.arange(int(np.floor(stop / dt + 1e-9)) + 1) * dt
    inner = jumps[(jumps > 1e-15) & (jumps < stop - 1e-15)]
    grid = np.unique(np.concatenate([[0.0, stop], base, inner, marks]))
    grid = grid[(grid >= -1e-15) & (grid <= stop + 1e-15)]
    mark_idx = np.searchsorted(grid, marks)
    if not np.allclose(grid[mark_idx], marks, rtol=0, atol=1e-12):
        raise TrajectoryError("output times failed to land on the substep grid")
    return grid, mark_idx


def _hamiltonian_kernel_parts(lattice, hopping, omega):
    zs, amps = hopping.displacements()
    stencil = (
        lattice.dimension == 1
        and len(amps) == 2
        and np.abs(zs).max() == 1
        and abs(amps[0].imag) < 1e-300
        and abs(amps[0] - amps[1]) < 1e-300
    )
    diag = np.asarray(omega.values, dtype=np.complex128)
    if stencil:
        return True, float(amps[0].real), diag, None
    H = build_hamiltonian(lattice, hopping, omega)
    from scipy.sparse import csr_matrix

    return False, 0.0, diag, csr_matrix(H)


def propagate(psi0, plan, path, omega, g, times, lattice=None, hopping=None):
    """Evolve psi0 along one noise path, returning psi at the requested times.

    g = 0 uses the spectral plan directly (a single exact application per
    time); otherwise the jump-cut Strang scheme described in the module
    docstring.  Norm preservation is enforced to 1e-10.
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    psi0 = np.asarray(psi0, dtype=np.complex128)
    if abs(np.linalg.norm(psi0) - 1.0) > 1e-12:
        raise TrajectoryError("initial state must be normalized")
    if g == 0.0:
        return np.stack([plan.free_evolution(psi0, t) for t in times])

    if lattice is None or hopping is None:
        raise TrajectoryError("propagate with g != 0 needs the lattice and hopping kernel")
    stencil, amp, diag, Hcsr = _hamiltonian_kernel_parts(lattice, hopping, omega)
    if stencil:
        indptr = np.zeros(1, dtype=np.int64)
        indices = np.zeros(1, dtype=np.int64)
        dre = np.zeros(1)
        dim_ = np.zeros(1)
    else:
        indptr = Hcsr.indptr.astype(np.int64)
        indices = Hcsr.indices.astype(np.int64)
        dre = np.ascontiguousarray(Hcsr.data.real)
        dim_ = np.ascontiguousarray(Hcsr.data.imag)
    hnorm = plan.hnorm_bound
    vtab = np.asarray(path.chain.observable, dtype=float)
    if np.any(np.diff(times) < -1e-12):
        raise TrajectoryError("requested times must be nondecreasing")

    stop_t = float(times[-1])
    grid, mark_idx = _substep_grid(plan.dt, stop_t, path.all_jump_times(), times)
    jb_ptr, jb_sites, jb_new = _jump_events(path, grid, stop_t)
    cur = np.ascontiguousarray(path.states_at(np.zeros(1))[0])
    diag_re = np.ascontiguousarray(diag.real)

    pr = np.ascontiguousarray(psi0.real)
    pi_ = np.ascontiguousarray(psi0.imag)
    out = np.empty((times.size, psi0.size), dtype=np.complex128)
    prev = 0
    for i, stop in enumerate(mark_idx):
        if stop > prev:
            _evolve_segment_split(
                pr,
                pi_,
                stencil,
                amp,
                diag_re,
                indptr,
                indices,
                dre,
                dim_,
                hnorm,
                grid,
                prev,
                int(stop),
                cur,
                vtab,
                float(g),
                jb_ptr,
                jb_sites,
                jb_new,
            )
        psi = pr + 1j * pi_
        nrm = np.linalg.norm(psi)
        if not np.isfinite(nrm) or abs(nrm - 1.0) > UNITARITY_TOL:
            raise TrajectoryError(f"unitarity violated at t={times[i]}: |psi| = {nrm!r}")
        out[i] = psi
        prev = int(stop)
    return out


def _jump_events(path, grid, stop_t):
    """Jump events grouped by grid-boundary index: CSR-style (ptr, sites, new_states)."""
    sites, times, news = [], [], []
    for s in range(path.n_sites):
        jt = path.jump_times[s]
        keep = (jt > 1e-15) & (jt < stop_t - 1e-15)
        if keep.any():
            times.append(jt[keep])
            sites.append(np.full(int(keep.sum()), s, dtype=np.int64))
            news.append(path.states[s][1:][keep])
    nb = grid.size
    if not times:
        return np.zeros(nb + 1, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    times = np.concatenate(times)
    sites = np.concatenate(sites)
    news = np.concatenate(news).astype(np.int64)
    order = np.argsort(times, kind="stable")
    times, sites, news = times[order], sites[order], news[order]
    b = np.searchsorted(grid, times)
    if not np.allclose(grid[b], times, rtol=0, atol=1e-12):
        raise TrajectoryError("jump times failed to land on the substep grid")
    ptr = np.zeros(nb + 1, dtype=np.int64)
    np.add.at(ptr, b + 1, 1)
    ptr = np.cumsum(ptr)
    return ptr, sites, news


def exact_reference_evolution(H, path, g, t):
    """Exact propagator along one path: product of matrix exponentials over
    the constant-noise intervals.  Dense; test oracle for small systems."""
    cuts = np.concatenate([[0.0], path.all_jump_times(), [t]])
    cuts = np.unique(cuts[cuts <= t + 1e-15])
    U = np.eye(H.shape[0], dtype=complex)
    v = path.chain.observable
    for a, b in zip(cuts[:-1], cuts[1:]):
        states = path.states_at(np.array([a]))[0]
        U = sla.expm(-1j * (b - a) * (H + g * np.diag(v[states]))) @ U
    return U


def check_apriori_bound(psi0, psi_t, m, t, lattice):
    """Margin exp(m t) |(1+|X|) psi0| - |(1+|X|) psi_t| (must be >= 0)."""
    wx = 1.0 + np.linalg.norm(lattice.positions().astype(float), axis=1)
    w0 = np.linalg.norm(wx * np.asarray(psi0))
    wt = np.linalg.norm(wx * np.asarray(psi_t))
    return float(np.exp(m * t) * w0 - wt)


# ----------------------------------------------------------------------------
# ensembles


@dataclass
class EnsembleResult:
    """Sample-averaged observables of a trajectory ensemble."""

    times: np.ndarray
    extent: int
    dimension: int
    m_mean: np.ndarray  # (T, d, d)
    m_stderr: np.ndarray
    k_list: np.ndarray  # (K, d)
    charfn: np.ndarray  # (T, K) complex
    charfn_stderr: np.ndarray  # (T, K) real bound on each component
    density_times: np.ndarray
    density: np.ndarray  # (D, n_sites)
    density_stderr: np.ndarray
    mass_deviation: float  # max |sum_x p - 1| over checkpoints
    min_apriori_margin: float
    max_unitarity_deviation: float
    n_samples: int
    seed_manifest: dict

    def density_at(self, t):
        idx = np.nonzero(np.isclose(self.density_times, t, atol=1e-9))[0]
        if idx.size != 1:
            raise FitError(f"no recorded density at t={t}")
        return self.density[idx[0]]


def _tree_reduce(payloads, combine):
    while len(payloads) > 1:
        nxt = []
        for i in range(0, len(payloads) - 1, 2):
            nxt.append(combine(payloads[i], payloads[i + 1]))
        if len(payloads) % 2:
            nxt.append(payloads[-1])
        payloads = nxt
    return payloads[0]


def _combine(a, b):
    out = {}
    for key, val in a.items():
        if key.startswith("min_"):
            out[key] = min(val, b[key])
        elif key.startswith("max_"):
            out[key] = max(val, b[key])
        else:
            out[key] = val + b[key]
    return out


class _EnsembleTask:
    """Picklable per-sample work description shared by all workers."""

    def __init__(self, model, g, T, dt, checkpoints, k_list, density_times, master_seed, fixed_omega, psi0, m_growth):
        self.model = model
        self.g = float(g)
        self.T = float(T)
        self.dt = float(dt)
        self.checkpoints = np.asarray(checkpoints, dtype=float)
        self.k_list = np.asarray(k_list, dtype=float).reshape(-1, model.lattice.dimension)
        self.density_times = np.asarray(density_times, dtype=float)
        self.master_seed = int(master_seed)
        self.fixed_omega = fixed_omega
        self.psi0 = psi0
        self.m_growth = float(m_growth)
        lat = model.lattice
        self.positions = lat.positions().astype(float)
        self.weight_x = 1.0 + np.linalg.norm(self.positions, axis=1)
        self.exp_table = np.exp(1j * (self.positions @ self.k_list.T))  # (n, K)
        idx = []
        for t in self.density_times:
            hit = np.nonzero(np.isclose(self.checkpoints, t, atol=1e-9))[0]
            if hit.size != 1:
                raise FitError(f"density time {t} is not a checkpoint")
            idx.append(int(hit[0]))
        self.density_idx = np.array(idx, dtype=int)

    def run_sample(self, idx):
        model = self.model
        if self.fixed_omega is not None:
            omega = self.fixed_omega
        else:
            omega = sample_disorder(model.disorder, model.lattice, self.master_seed, sample_index=idx)
        path = sample_path(model.chain, model.n_sites, self.T, self.master_seed, sample_index=idx)
        H = build_hamiltonian(model.lattice, model.hopping, omega)
        plan = PropagatorPlan(H=H, dt=self.dt, T=self.T, checkpoints=self.checkpoints)
        psi0 = self.psi0
        if psi0 is None:
            psi0 = np.zeros(model.n_sites, dtype=complex)
            psi0[0] = 1.0
        psis = propagate(psi0, plan, path, omega, self.g, self.checkpoints, model.lattice, model.hopping)

        p = np.abs(psis) ** 2  # (T, n)
        norms = np.linalg.norm(psis, axis=1)
        M = np.einsum("ts,si,sj->tij", p, self.positions, self.positions)
        phi = p @ self.exp_table  # (T, K)
        w0 = np.linalg.norm(self.weight_x * psi0)
        wt = np.linalg.norm(self.weight_x * psis, axis=1)
        # beyond m*t ~ 50 the bound holds by orders of magnitude; avoid exp overflow
        mt = np.minimum(self.m_growth * self.checkpoints, 50.0)
        margins = np.where(self.m_growth * self.checkpoints > 50.0, np.inf, np.exp(mt) * w0 - wt)
        return {
            "count": 1,
            "sum_M": M,
            "sumsq_M": M**2,
            "sum_phi": phi,
            "sumsq_phi_re": phi.real**2,
            "sumsq_phi_im": phi.imag**2,
            "sum_p": p[self.density_idx],
            "sumsq_p": p[self.density_idx] ** 2,
            "max_mass_dev": float(np.abs(p.sum(axis=1) - 1.0).max()),
            "min_margin": float(margins.min()),
            "max_unit_dev": float(np.abs(norms - 1.0).max()),
        }


_WORKER_TASK = None


def _worker_init(task):
    global _WORKER_TASK
    _WORKER_TASK = task


def _worker_chunk(args):
    lo, hi = args
    payloads = [_WORKER_TASK.run_sample(i) for i in range(lo, hi)]
    return lo, _tree_reduce(payloads, _combine)


CHUNK = 64


def run_ensemble(
    model,
    g,
    T,
    checkpoints,
    n_samples,
    master_seed,
    dt=None,
    k_list=None,
    density_times=None,
    workers=1,
    fixed_omega=None,
    psi0=None,
    min_samples=100,
):
    """Sample-averaged evolution: density, moments, characteristic function.

    Samples are independent in (disorder, path, initial chain state) and
    reproducible from (master_seed, sample index).  The reduction is a fixed
    pairwise tree over chunks of 64 samples, so results are bitwise
    independent of the worker count.
    """
    if n_samples < min_samples:
        raise FitError(f"sample budget {n_samples} below the minimum {min_samples}")
    if dt is None:
        dt = model.default_dt(g)
    checkpoints = np.atleast_1d(np.asarray(checkpoints, dtype=float))
    if k_list is None:
        k_list = np.zeros((0, model.lattice.dimension))
    if density_times is None:
        density_times = checkpoints
    task = _EnsembleTask(
        model, g, T, dt, checkpoints, k_list, density_times, master_seed, fixed_omega, psi0, model.hopping.m
    )

    ranges = [(lo, min(lo + CHUNK, n_samples)) for lo in range(0, n_samples, CHUNK)]
    if workers <= 1:
        _worker_init(task)
        chunk_payloads = [_worker_chunk(r)[1] for r in ranges]
    else:
        import multiprocessing as mp
        from concurrent.futures import ProcessPoolExecutor

        ctx = mp.get_context("fork")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx, initializer=_worker_init, initargs=(task,)) as ex:
            results = dict()
            for lo, payload in ex.map(_worker_chunk, ranges):
                results[lo] = payload
        chunk_payloads = [results[lo] for lo, _ in ranges]
    total = _tree_reduce(chunk_payloads, _combine)

    S = total["count"]
    assert S == n_samples

    def mean_and_stderr(s, s2):
        mean = s / S
        var = np.maximum(s2 / S - mean**2, 0.0)
        stderr = np.sqrt(var / max(S - 1, 1))
        return mean, stderr

    m_mean, m_stderr = mean_and_stderr(total["sum_M"], total["sumsq_M"])
    p_mean, p_stderr = mean_and_stderr(total["sum_p"], total["sumsq_p"])
    phi_mean = total["sum_phi"] / S
    var_re = np.maximum(total["sumsq_phi_re"] / S - phi_mean.real**2, 0.0)
    var_im = np.maximum(total["sumsq_phi_im"] / S - phi_mean.imag**2, 0.0)
    phi_stderr = np.sqrt((var_re + var_im) / max(S - 1, 1))

    return EnsembleResult(
        times=checkpoints,
        extent=model.lattice.extent,
        dimension=model.lattice.dimension,
        m_mean=m_mean,
        m_stderr=m_stderr,
        k_list=task.k_list,
        charfn=phi_mean,
        charfn_stderr=phi_stderr,
        density_times=np.asarray(density_times, dtype=float),
        density=p_mean,
        density_stderr=p_stderr,
        mass_deviation=total["max_mass_dev"],
        min_apriori_margin=total["min_margin"],
        max_unitarity_deviation=total["max_unit_dev"],
        n_samples=S,
        seed_manifest={"master_seed": int(master_seed), "scheme": "philox(master, purpose, sample, site)"},
    )


def ensemble_density_matrix(model, omega, g, t_list, n_samples, master_seed, psi0=None):
    """Monte Carlo estimate of E[rho_t] at fixed static disorder.

    Returns (mean, stderr) arrays of shape (len(t_list), n, n); stderr bounds
    the real and imaginary parts componentwise.
    """
    t_list = np.atleast_1d(np.asarray(t_list, dtype=float))
    n = model.n_sites
    H = build_hamiltonian(model.lattice, model.hopping, omega)
    dt = model.default_dt(g)
    plan = PropagatorPlan(H=H, dt=dt, T=float(t_list[-1]), checkpoints=t_list)
    if psi0 is None:
        psi0 = np.zeros(n, dtype=complex)
        psi0[0] = 1.0
    sum_r = np.zeros((t_list.size, n, n), dtype=complex)
    sumsq_re = np.zeros((t_list.size, n, n))
    sumsq_im = np.zeros((t_list.size, n, n))
    for idx in range(n_samples):
        path = sample_path(model.chain, n, float(t_list[-1]), master_seed, sample_index=idx)
        psis = propagate(psi0, plan, path, omega, g, t_list, model.lattice, model.hopping)
        rho = np.einsum("tx,ty->txy", psis, psis.conj())
        sum_r += rho
        sumsq_re += rho.real**2
        sumsq_im += rho.imag**2
    mean = sum_r / n_samples
    var_re = np.maximum(sumsq_re / n_samples - mean.real**2, 0.0)
    var_im = np.maximum(sumsq_im / n_samples - mean.imag**2, 0.0)
    stderr = np.sqrt((var_re + var_im) / max(n_samples - 1, 1))
    return mean, stderr


# ----------------------------------------------------------------------------
# diffusion estimation and CLT statistic


@dataclass
class DiffusionEstimate:
    """Symmetric diffusion matrix with provenance and diagnostics."""

    D: np.ndarray
    method: str  # slope | tauberian | schur
    stderr: np.ndarray = None
    window: tuple = None
    diffusive: bool = True
    flags: tuple = ()
    diagnostics: dict = field(default_factory=dict)

    @property
    def scalar(self):
        return float(self.D[0, 0]) if self.D.shape == (1, 1) else float(np.trace(self.D))

    def to_dict(self):
        out = {
            "method": self.method,
            "D": np.asarray(self.D).tolist(),
            "diffusive": bool(self.diffusive),
            "flags": list(self.flags),
            "diagnostics": self.diagnostics,
        }
        if self.stderr is not None:
            out["stderr"] = np.asarray(self.stderr).tolist()
        if self.window is not None:
            out["window"] = list(self.window)
        return out


def _wls_polyfit(t, y, sigma, degree):
    sigma = np.asarray(sigma, dtype=float)
    pos = sigma[sigma > 0]
    sigma = np.where(sigma > 0, sigma, pos.min() if pos.size else 1.0)
    X = np.vander(t, degree + 1, increasing=True)
    w = 1.0 / sigma
    Xw = X * w[:, None]
    yw = y * w
    coef, *_ = np.linalg.lstsq(Xw, yw, rcond=None)
    cov = np.linalg.inv(Xw.T @ Xw)
    return coef, cov


def estimate_D_slope(result, window=None):
    """Weighted least-squares slope of M_ij(t) over the fit window.

    Flags the estimate non-diffusive when the quadratic coefficient of an
    a + b t + c t^2 fit is significant at 3 sigma, and aborts when the
    wavepacket feels the boundary (sqrt(max M_ii) > N/4).
    """
    t = result.times
    if window is None:
        window = (0.5 * t[-1], t[-1])
    lo, hi = window
    sel = (t >= lo - 1e-9) & (t <= hi + 1e-9)
    if sel.sum() < 8:
        raise FitError(f"need at least 8 checkpoints in the fit window, have {int(sel.sum())}")
    d = result.dimension
    spread = np.sqrt(max(result.m_mean[sel][:, i, i].max() for i in range(d)))
    if spread > result.extent / 4:
        raise FitError(f"wavepacket spread {spread:.1f} exceeds N/4 = {result.extent / 4:.1f}; fit aborted")
    D = np.zeros((d, d))
    Derr = np.zeros((d, d))
    flags = []
    curvature_sig = 0.0
    for i in range(d):
        for j in range(d):
            y = result.m_mean[sel][:, i, j]
            s = result.m_stderr[sel][:, i, j]
            coef, cov = _wls_polyfit(t[sel], y, s, 1)
            D[i, j] = coef[1]
            Derr[i, j] = np.sqrt(max(cov[1, 1], 0.0))
            coef2, cov2 = _wls_polyfit(t[sel], y, s, 2)
            sig = abs(coef2[2]) / max(np.sqrt(max(cov2[2, 2], 0.0)), 1e-300)
            curvature_sig = max(curvature_sig, sig)
    D = 0.5 * (D + D.T)
    Derr = 0.5 * (Derr + Derr.T)
    diffusive = True
    if curvature_sig >= 3.0:
        flags.append(f"curvature significant at {curvature_sig:.1f} sigma")
        diffusive = False
    if np.linalg.eigvalsh(D).min() <= 0:
        flags.append("fitted D is not positive definite")
        diffusive = False
    return DiffusionEstimate(
        D=D,
        stderr=Derr,
        method="slope",
        window=(float(lo), float(hi)),
        diffusive=diffusive,
        flags=tuple(flags),
        diagnostics={"curvature_sigma": float(curvature_sig), "n_points": int(sel.sum())},
    )


def clt_statistic(result, D, k_list, t):
    """sup over k of |phi_t(k/sqrt(t)) - exp(-<k, D k>/2)| plus the per-k table."""
    p = result.density_at(t)
    d = result.dimension
    lat_positions = _positions_cache(result)
    rows = []
    worst = 0.0
    D = np.asarray(D, dtype=float).reshape(d, d)
    for k in np.asarray(k_list, dtype=float).reshape(-1, d):
        phi = complex(np.sum(p * np.exp(1j * (lat_positions @ (k / np.sqrt(t))))))
        target = float(np.exp(-0.5 * k @ D @ k))
        dev = abs(phi - target)
        rows.append({"k": k.tolist(), "phi": phi, "target": target, "deviation": dev})
        worst = max(worst, dev)
    return worst, rows


def _positions_cache(result):
    from .model import LatticeSpec

    lat = LatticeSpec(result.dimension, result.extent)
    return lat.positions().astype(float)
