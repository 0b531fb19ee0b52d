"""Smeared local density operators and their peaking statistics.

Every operator is a sum of one-particle terms (plus, for the energy density,
a diagonal pair term) on the N-particle product space.  Matrices are built
lazily per particle count and cached.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .dynamics import HamiltonianSpec, kinetic_matrix, one_body_sum, pair_potential_diagonal
from .lattice import Lattice, ManyBodyState, check_dimension

__all__ = [
    "KINDS",
    "ORDERING",
    "Window",
    "FourierMode",
    "DensityObservable",
    "PeakingStats",
    "density_operator",
    "number_operator",
    "momentum_matrix",
    "expectation_and_variance",
]

KINDS = ("number", "momentum", "energy", "fourier-number")

# operator ordering used for p_j delta_V and K_j delta_V products
ORDERING = "symmetric"


@dataclass(frozen=True)
class Window:
    """Top-hat window: indicator of a contiguous block of sites."""

    lattice: Lattice
    start: int
    stop: int

    def __post_init__(self):
        if not 0 <= self.start < self.stop <= self.lattice.sites:
            raise ValueError(
                f"window [{self.start}, {self.stop}) is empty or outside 0..{self.lattice.sites}"
            )

    @classmethod
    def whole(cls, lattice: Lattice) -> "Window":
        return cls(lattice, 0, lattice.sites)

    @property
    def sites(self) -> np.ndarray:
        return np.arange(self.start, self.stop)

    @property
    def indicator(self) -> np.ndarray:
        ind = np.zeros(self.lattice.sites)
        ind[self.start : self.stop] = 1.0
        return ind

    @property
    def volume(self) -> float:
        return (self.stop - self.start) * self.lattice.spacing


@dataclass(frozen=True)
class FourierMode:
    """Lattice-commensurate wavenumber ``k = 2 pi index / (M a)``."""

    lattice: Lattice
    index: int

    def __post_init__(self):
        if int(self.index) != self.index:
            raise ValueError(f"Fourier index must be an integer, got {self.index!r}")

    @classmethod
    def from_wavenumber(cls, lattice: Lattice, k: float, atol: float = 1e-9) -> "FourierMode":
        index = k * lattice.length / (2 * np.pi)
        if abs(index - round(index)) > atol:
            raise ValueError(f"wavenumber {k!r} is not commensurate with a {lattice.sites}-site ring")
        return cls(lattice, int(round(index)))

    @property
    def wavenumber(self) -> float:
        return 2 * np.pi * self.index / self.lattice.length


def momentum_matrix(lattice: Lattice, hbar: float = 1.0) -> sp.csr_matrix:
    """Symmetric-difference momentum ``-i hbar (S+ - S-) / 2a`` on the ring."""
    m = lattice.sites
    up = sp.csr_matrix((np.ones(m), (np.arange(m), (np.arange(m) + 1) % m)), shape=(m, m))
    p = (-1j * hbar / (2 * lattice.spacing)) * (up - up.T)
    return sp.csr_matrix(p, dtype=complex)


def _anticommutator_half(a, b) -> sp.csr_matrix:
    return (0.5 * (a @ b + b @ a)).tocsr()


class DensityObservable:
    """Hermitian local-density operator on the N-particle space.

    For ``fourier-number`` the returned matrix is the cosine quadrature
    ``sum_j cos(k q_j)``; the sine quadrature is available through
    :meth:`sine_matrix`.
    """

    def __init__(
        self,
        kind: str,
        lattice: Lattice,
        window: Optional[Window] = None,
        mode: Optional[FourierMode] = None,
        hamiltonian: Optional[HamiltonianSpec] = None,
        symmetrized_pairs: bool = False,
    ):
        if kind not in KINDS:
            raise ValueError(f"unknown density kind {kind!r}; expected one of {KINDS}")
        if kind == "fourier-number":
            if mode is None:
                raise ValueError("fourier-number density needs a FourierMode")
        elif window is None:
            raise ValueError(f"{kind} density needs a Window")
        if kind == "energy" and hamiltonian is None:
            raise ValueError("energy density needs a HamiltonianSpec (for the mass and pair potential)")
        self.kind = kind
        self.lattice = lattice
        self.window = window
        self.mode = mode
        self.hamiltonian = hamiltonian
        self.symmetrized_pairs = symmetrized_pairs
        self._cache: dict = {}

    def __repr__(self):
        where = (
            f"k-index={self.mode.index}"
            if self.mode is not None
            else f"V=[{self.window.start},{self.window.stop})"
        )
        return f"DensityObservable({self.kind}, M={self.lattice.sites}, {where})"

    def one_body(self) -> sp.csr_matrix:
        """The one-particle operator summed over particles."""
        if self.kind == "fourier-number":
            x = self.lattice.positions
            return sp.diags(np.cos(self.mode.wavenumber * x).astype(complex), format="csr")
        delta = sp.diags(self.window.indicator.astype(complex), format="csr")
        if self.kind == "number":
            return delta
        if self.kind == "momentum":
            hbar = 1.0 if self.hamiltonian is None else self.hamiltonian.hbar
            return _anticommutator_half(momentum_matrix(self.lattice, hbar), delta)
        return _anticommutator_half(kinetic_matrix(self.lattice, self.hamiltonian), delta)

    def matrix(self, n_particles: int) -> sp.csr_matrix:
        if n_particles not in self._cache:
            check_dimension(self.lattice.sites, n_particles)
            q = one_body_sum(self.one_body(), n_particles)
            if self.kind == "energy":
                pot = pair_potential_diagonal(
                    self.lattice,
                    self.hamiltonian,
                    n_particles,
                    weight=self.window.indicator,
                    symmetrized=self.symmetrized_pairs,
                )
                if np.any(pot):
                    q = (q + sp.diags(pot.astype(complex))).tocsr()
            self._cache[n_particles] = q
        return self._cache[n_particles]

    def sine_matrix(self, n_particles: int) -> sp.csr_matrix:
        if self.kind != "fourier-number":
            raise ValueError("only fourier-number densities have a sine quadrature")
        x = self.lattice.positions
        sin = sp.diags(np.sin(self.mode.wavenumber * x).astype(complex), format="csr")
        return one_body_sum(sin, n_particles)

    def is_diagonal(self) -> bool:
        return self.kind in ("number", "fourier-number")


def density_operator(
    kind: str,
    lattice: Lattice,
    window: Optional[Window] = None,
    mode: Optional[FourierMode] = None,
    hamiltonian: Optional[HamiltonianSpec] = None,
    symmetrized_pairs: bool = False,
) -> DensityObservable:
    return DensityObservable(kind, lattice, window, mode, hamiltonian, symmetrized_pairs)


def number_operator(lattice: Lattice, start: int, stop: int) -> DensityObservable:
    return DensityObservable("number", lattice, window=Window(lattice, start, stop))


@dataclass(frozen=True)
class PeakingStats:
    mean: float
    variance: float
    ratio: Optional[float]

    @property
    def std(self) -> float:
        return float(np.sqrt(self.variance))


def expectation_and_variance(state: ManyBodyState, obs) -> PeakingStats:
    """Mean, variance and peaking ratio ``var / mean**2`` of ``obs`` in ``state``.

    The ratio is ``None`` when ``|mean| <= 1e-12``.
    """
    q = obs.matrix(state.n_particles) if hasattr(obs, "matrix") else obs
    if q.shape != (state.dimension, state.dimension):
        raise ValueError(f"dimension mismatch: operator {q.shape} vs state {state.dimension}")
    psi = state.amplitudes
    q_psi = q @ psi
    mean_c = np.vdot(psi, q_psi)
    if abs(mean_c.imag) > 1e-10:
        raise ValueError(f"expectation value is not real (imaginary part {mean_c.imag:.3g})")
    mean = float(mean_c.real)
    second = float(np.vdot(q_psi, q_psi).real)
    variance = second - mean**2
    if variance < -1e-10 * max(1.0, second):
        raise ValueError(f"negative variance {variance!r}")
    variance = max(variance, 0.0)
    ratio = variance / mean**2 if abs(mean) > 1e-12 else None
    return PeakingStats(mean, variance, ratio)
