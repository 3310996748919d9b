"""Equivariant-feature toolkit: projective warps, graded multi-scale
convolution, patch-graph consistency energies, and the harnesses that verify
their claimed properties on synthetic data."""

__version__ = "0.1.0"
