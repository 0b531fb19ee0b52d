"""Decoherence of coarse-grained local densities: exact lattice histories and
large-N variance scaling."""

__version__ = "0.1.0"
