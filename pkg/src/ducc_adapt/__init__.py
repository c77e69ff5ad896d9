"""Active-space downfolding of molecular Hamiltonians with exact and ADAPT-VQE solvers."""

__version__ = "0.1.0"
