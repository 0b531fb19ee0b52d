"""Finite 1-D lattice, one-particle wave packets and many-body product states.

Particles are distinguishable; the many-body basis is the tensor product of
``N`` copies of the site basis, ordered so that particle 0 is the most
significant index (``numpy.kron`` order).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Optional

import numpy as np

__all__ = [
    "DEFAULT_DIMENSION_CAP",
    "CapExceededError",
    "Lattice",
    "OneParticleState",
    "ManyBodyState",
    "build_lattice",
    "gaussian_packet",
    "site_state",
    "product_state",
    "product_of",
    "superpose",
    "check_dimension",
]

DEFAULT_DIMENSION_CAP = 10**6

_ONE_PARTICLE_NORM_TOL = 1e-12
_MANY_BODY_NORM_TOL = 1e-10


class CapExceededError(ValueError):
    """Raised when ``M**N`` exceeds the configured dimension cap."""


def check_dimension(sites: int, n_particles: int, cap: int = DEFAULT_DIMENSION_CAP) -> int:
    if n_particles < 1:
        raise ValueError(f"particle count must be >= 1, got {n_particles}")
    dim = sites**n_particles
    if dim > cap:
        raise CapExceededError(
            f"Hilbert space dimension {sites}**{n_particles} = {dim} exceeds cap {cap}"
        )
    return dim


@dataclass(frozen=True)
class Lattice:
    sites: int
    spacing: float = 1.0

    def __post_init__(self):
        if int(self.sites) != self.sites or self.sites < 2:
            raise ValueError(f"lattice needs at least 2 sites, got {self.sites!r}")
        if not self.spacing > 0:
            raise ValueError(f"lattice spacing must be positive, got {self.spacing!r}")
        object.__setattr__(self, "sites", int(self.sites))
        object.__setattr__(self, "spacing", float(self.spacing))

    @property
    def positions(self) -> np.ndarray:
        return np.arange(self.sites) * self.spacing

    @property
    def length(self) -> float:
        return self.sites * self.spacing


def build_lattice(sites: int, spacing: float = 1.0) -> Lattice:
    return Lattice(sites, spacing)


@dataclass(frozen=True, eq=False)
class OneParticleState:
    lattice: Lattice
    amplitudes: np.ndarray

    def __post_init__(self):
        amp = np.array(self.amplitudes, dtype=complex)
        if amp.shape != (self.lattice.sites,):
            raise ValueError(
                f"amplitudes must have shape ({self.lattice.sites},), got {amp.shape}"
            )
        norm2 = float(np.vdot(amp, amp).real)
        if abs(norm2 - 1.0) > _ONE_PARTICLE_NORM_TOL:
            raise ValueError(f"one-particle state not normalized: |psi|^2 = {norm2!r}")
        amp.setflags(write=False)
        object.__setattr__(self, "amplitudes", amp)

    @property
    def probabilities(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2

    def weight_in(self, sites) -> float:
        """Probability of finding the particle on the given sites."""
        return float(self.probabilities[np.asarray(sites, dtype=int)].sum())


def _normalized(amp: np.ndarray) -> np.ndarray:
    norm2 = float(np.vdot(amp, amp).real)
    if not norm2 > 0 or not np.isfinite(norm2):
        raise ValueError("state has zero norm after discretization")
    return amp / np.sqrt(norm2)


def gaussian_packet(
    lattice: Lattice, center: float, width: float, momentum: float = 0.0
) -> OneParticleState:
    """Discretized Gaussian wave packet.

    Amplitudes are proportional to
    ``exp(-(x - center)**2 / (4 width**2)) * exp(i momentum x)`` at the site
    positions; ``width`` is the position standard deviation of ``|psi|**2``.
    """
    if not width > 0:
        raise ValueError(f"width must be positive, got {width!r}")
    x = lattice.positions
    if not (x[0] <= center <= x[-1]):
        raise ValueError(f"center {center!r} lies outside the lattice [{x[0]}, {x[-1]}]")
    amp = np.exp(-((x - center) ** 2) / (4.0 * width**2) + 1j * momentum * x)
    return OneParticleState(lattice, _normalized(amp))


def site_state(lattice: Lattice, site: int) -> OneParticleState:
    amp = np.zeros(lattice.sites, dtype=complex)
    amp[site] = 1.0
    return OneParticleState(lattice, amp)


@dataclass(frozen=True, eq=False)
class ManyBodyState:
    lattice: Lattice
    n_particles: int
    amplitudes: np.ndarray
    factor: Optional[OneParticleState] = None
    metadata: Mapping[str, object] = field(default_factory=dict)
    cap: int = DEFAULT_DIMENSION_CAP

    def __post_init__(self):
        dim = check_dimension(self.lattice.sites, self.n_particles, self.cap)
        amp = np.array(self.amplitudes, dtype=complex).reshape(-1)
        if amp.shape != (dim,):
            raise ValueError(f"amplitudes must have length {dim}, got {amp.shape[0]}")
        norm2 = float(np.vdot(amp, amp).real)
        if abs(norm2 - 1.0) > _MANY_BODY_NORM_TOL:
            raise ValueError(f"many-body state not normalized: |Psi|^2 = {norm2!r}")
        amp.setflags(write=False)
        object.__setattr__(self, "amplitudes", amp)
        object.__setattr__(self, "metadata", MappingProxyType(dict(self.metadata)))

    @property
    def dimension(self) -> int:
        return self.amplitudes.shape[0]

    def with_amplitudes(self, amplitudes: np.ndarray, **metadata) -> "ManyBodyState":
        """Same lattice and particle count, new amplitude vector (factor tag dropped)."""
        return ManyBodyState(
            self.lattice, self.n_particles, amplitudes, metadata=metadata, cap=self.cap
        )

    def overlap(self, other: "ManyBodyState") -> complex:
        _check_compatible(self, other)
        return complex(np.vdot(self.amplitudes, other.amplitudes))


def _check_compatible(a: ManyBodyState, b: ManyBodyState) -> None:
    if a.lattice != b.lattice or a.n_particles != b.n_particles:
        raise ValueError(
            "states live on different spaces: "
            f"(M={a.lattice.sites}, N={a.n_particles}) vs (M={b.lattice.sites}, N={b.n_particles})"
        )


def product_state(
    psi: OneParticleState, n_particles: int, cap: int = DEFAULT_DIMENSION_CAP
) -> ManyBodyState:
    """``psi ⊗ psi ⊗ ... ⊗ psi`` with ``n_particles`` factors."""
    check_dimension(psi.lattice.sites, n_particles, cap)
    amp = psi.amplitudes
    for _ in range(n_particles - 1):
        amp = np.kron(amp, psi.amplitudes)
    # renormalize to absorb rounding accumulated by the repeated products
    amp = amp / np.linalg.norm(amp)
    return ManyBodyState(psi.lattice, n_particles, amp, factor=psi, cap=cap)


def product_of(factors, cap: int = DEFAULT_DIMENSION_CAP) -> ManyBodyState:
    """Tensor product of possibly different one-particle factors (particle 0 first)."""
    factors = list(factors)
    if not factors:
        raise ValueError("need at least one factor")
    lattice = factors[0].lattice
    if any(f.lattice != lattice for f in factors):
        raise ValueError("all factors must live on the same lattice")
    check_dimension(lattice.sites, len(factors), cap)
    amp = factors[0].amplitudes
    for f in factors[1:]:
        amp = np.kron(amp, f.amplitudes)
    amp = amp / np.linalg.norm(amp)
    same = all(f is factors[0] or np.array_equal(f.amplitudes, factors[0].amplitudes) for f in factors)
    return ManyBodyState(lattice, len(factors), amp, factor=factors[0] if same else None, cap=cap)


def superpose(
    a: ManyBodyState,
    b: ManyBodyState,
    w_a: complex = 1 / np.sqrt(2),
    w_b: complex = 1 / np.sqrt(2),
) -> ManyBodyState:
    """Normalized ``w_a |a> + w_b |b>``; the overlap ``<a|b>`` is kept in metadata."""
    _check_compatible(a, b)
    amp = w_a * a.amplitudes + w_b * b.amplitudes
    norm = float(np.linalg.norm(amp))
    if norm < 1e-10:
        raise ValueError(f"superposition cancels to a zero state (norm {norm:.3g})")
    overlap = a.overlap(b)
    return ManyBodyState(
        a.lattice,
        a.n_particles,
        amp / norm,
        metadata={"overlap": overlap, "weights": (complex(w_a), complex(w_b)), "norm": norm},
        cap=max(a.cap, b.cap),
    )
