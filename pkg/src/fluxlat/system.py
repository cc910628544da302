"""Bundled model: lattice + hopping + static disorder + dynamic noise.

This is the object the exact solvers and the Monte Carlo driver consume.
Construction performs the cross-field checks that individual pieces cannot.
"""

from dataclasses import dataclass

import numpy as np

from .model import DisorderSpec, HoppingKernel, LatticeSpec, ModelError, validate_hopping
from .noise import SiteChainSpec, build_generator_B, nondegeneracy_chi


@dataclass(frozen=True)
class Model:
    lattice: LatticeSpec
    hopping: HoppingKernel
    disorder: DisorderSpec
    chain: SiteChainSpec

    def __post_init__(self):
        report = validate_hopping(self.hopping, self.lattice.dimension)
        if not report["self_adjoint"]:
            raise ModelError("hopping kernel is not self-adjoint: h(-zeta) != conj(h(zeta))")
        zs, _ = self.hopping.displacements()
        if np.abs(zs).max() >= self.lattice.extent / 2:
            raise ModelError(
                f"hopping range reaches the wrap boundary of N={self.lattice.extent}; need max|zeta| < N/2"
            )

    @property
    def n_sites(self):
        return self.lattice.n_sites

    def hopping_report(self):
        return validate_hopping(self.hopping, self.lattice.dimension)

    def generator(self, n_sites=None):
        return build_generator_B(self.chain, self.n_sites if n_sites is None else n_sites)

    def chi(self):
        return nondegeneracy_chi(self.chain, self.lattice)

    def fiber_dim(self):
        """Dimension |A| * |Omega| * N^d of the Fourier-fiber basis."""
        n = self.n_sites
        n_omega = len(self.disorder.values()) ** n if self.disorder.enumerable else None
        if n_omega is None:
            raise ModelError("fiber solvers require enumerable (bernoulli or none) disorder")
        return self.chain.n_states**n * n_omega * n

    def default_dt(self, g):
        """Base Trotter step 0.05 / (m0 + lambda + g)."""
        return 0.05 / (self.hopping.m0 + self.disorder.lam + g)
