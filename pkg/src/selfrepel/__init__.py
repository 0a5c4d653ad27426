"""Numerical laboratory for self-repelling vector-valued Gaussian free fields."""

from selfrepel.lattice import FieldConfig, LatticeBox, apply_laplacian, dirichlet_energy, laplacian_matrix
from selfrepel.spectral import SpectralBasis, alpha_coefficients, eigendecompose, paper_basis_1d
from selfrepel.sampling import ChainState, GibbsParams, MCMCConfig
from selfrepel.observables import effective_radius, penalty_integral, variance_pair

__all__ = [
    "ChainState",
    "FieldConfig",
    "GibbsParams",
    "LatticeBox",
    "MCMCConfig",
    "SpectralBasis",
    "alpha_coefficients",
    "apply_laplacian",
    "dirichlet_energy",
    "effective_radius",
    "eigendecompose",
    "laplacian_matrix",
    "paper_basis_1d",
    "penalty_integral",
    "variance_pair",
]

__version__ = "0.1.0"
