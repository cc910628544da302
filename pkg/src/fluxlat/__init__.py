"""Lattice Schrödinger dynamics with static disorder and a Markovian
fluctuating potential.

Subpackages:
  model      -- lattice, hopping kernel, static disorder, position moments
  noise      -- per-site Markov chains, generator B, gap/mixing, path sampling
  trajectory -- split-step trajectory Monte Carlo and diffusion slope fits
  augmented  -- exact super-operator solvers (fixed-disorder and Fourier fiber)
  harness    -- configuration, orchestration and result emission (CLI: fluxlat)
"""

import os

# Pin BLAS to one thread before numpy first loads it.  Ensemble samples are
# farmed out to worker processes; per-process single-threaded BLAS keeps the
# reduction bitwise independent of the worker count and avoids oversubscription.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")
del _var, os

__version__ = "0.1.0"

from .model import (  # noqa: E402
    LatticeSpec,
    HoppingKernel,
    DisorderSpec,
    DisorderSample,
    minimal_image,
    validate_hopping,
    build_hamiltonian,
    sample_disorder,
    position_moments,
)
from .noise import (  # noqa: E402
    SiteChainSpec,
    GeneratorB,
    NoisePath,
    stationary_distribution,
    build_generator_B,
    spectral_gap,
    check_mixing,
    apply_B_inverse,
    nondegeneracy_chi,
    sample_path,
    backward_expectation,
)
from .system import Model  # noqa: E402

__all__ = [
    "LatticeSpec",
    "HoppingKernel",
    "DisorderSpec",
    "DisorderSample",
    "minimal_image",
    "validate_hopping",
    "build_hamiltonian",
    "sample_disorder",
    "position_moments",
    "SiteChainSpec",
    "GeneratorB",
    "NoisePath",
    "stationary_distribution",
    "build_generator_B",
    "spectral_gap",
    "check_mixing",
    "apply_B_inverse",
    "nondegeneracy_chi",
    "sample_path",
    "backward_expectation",
    "Model",
    "__version__",
]
