"""Lattice Hamiltonian, unitary propagation and conservation defects.

Units: lattice spacing, mass and hbar default to 1.  The kinetic term is the
periodic second difference ``(hbar**2 / 2 m a**2) (2 - S+ - S-)`` per particle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import expm_multiply

from .lattice import DEFAULT_DIMENSION_CAP, Lattice, ManyBodyState, check_dimension

__all__ = [
    "HamiltonianSpec",
    "Propagator",
    "kinetic_matrix",
    "ring_distance",
    "configurations",
    "one_body_sum",
    "pair_potential_diagonal",
    "build_hamiltonian",
    "evolve",
    "conservation_defect",
    "DIAGONALIZATION_LIMIT",
    "PROPAGATION_TOL",
]

# dense eigendecomposition below this dimension, sparse exponential above
DIAGONALIZATION_LIMIT = 4096
PROPAGATION_TOL = 1e-9


@dataclass(frozen=True)
class HamiltonianSpec:
    """Parameters of the lattice Hamiltonian.

    ``potential[r]`` is the pair energy at ring distance ``r`` (in sites);
    entries beyond ``range`` must vanish.  A ``vacuum_site`` is a parking
    level decoupled from the ring: hopping bypasses it, its occupants do not
    interact, and the number of particles off it is conserved exactly.
    """

    mass: float = 1.0
    hbar: float = 1.0
    potential: Sequence[float] = ()
    range: int = 0
    vacuum_site: Optional[int] = None

    def __post_init__(self):
        if not self.mass > 0 or not self.hbar > 0:
            raise ValueError("mass and hbar must be positive")
        pot = tuple(float(v) for v in self.potential)
        if self.range < 0:
            raise ValueError(f"potential range must be >= 0, got {self.range}")
        bad = [r for r, v in enumerate(pot) if r > self.range and v != 0.0]
        if bad:
            raise ValueError(
                f"potential is nonzero at distance {bad[0]} beyond its range R={self.range}"
            )
        if not all(np.isfinite(pot)):
            raise ValueError("potential must be finite and real")
        object.__setattr__(self, "potential", pot)

    @classmethod
    def free(cls, **kwargs) -> "HamiltonianSpec":
        return cls(potential=(), range=0, **kwargs)

    @classmethod
    def square_well(cls, strength: float, range: int, **kwargs) -> "HamiltonianSpec":
        """Constant pair energy ``strength`` for ring distance ``r <= range``."""
        return cls(potential=(strength,) * (range + 1), range=range, **kwargs)

    @property
    def hopping(self) -> float:
        return self.hbar**2 / (2.0 * self.mass)

    def pair_energy(self, distance: np.ndarray) -> np.ndarray:
        pot = np.asarray(self.potential, dtype=float)
        d = np.asarray(distance, dtype=int)
        out = np.zeros(d.shape)
        inside = d < len(pot)
        out[inside] = pot[d[inside]]
        return out

    def is_interacting(self) -> bool:
        return any(v != 0.0 for v in self.potential)


def ring_distance(i: np.ndarray, j: np.ndarray, sites: int) -> np.ndarray:
    d = np.abs(np.asarray(i) - np.asarray(j))
    return np.minimum(d, sites - d)


def _ring_sites(lattice: Lattice, spec: HamiltonianSpec) -> np.ndarray:
    sites = np.arange(lattice.sites)
    if spec.vacuum_site is None:
        return sites
    if not 0 <= spec.vacuum_site < lattice.sites:
        raise ValueError(f"vacuum site {spec.vacuum_site} outside the lattice")
    return sites[sites != spec.vacuum_site]


def kinetic_matrix(lattice: Lattice, spec: HamiltonianSpec) -> sp.csr_matrix:
    """One-particle kinetic operator on the periodic ring (vacuum site bypassed)."""
    ring = _ring_sites(lattice, spec)
    t_h = spec.hopping / lattice.spacing**2
    m = lattice.sites
    rows, cols, vals = [], [], []
    n = len(ring)
    for k, s in enumerate(ring):
        rows.append(s)
        cols.append(s)
        vals.append(2.0 * t_h)
        for nb in (ring[(k + 1) % n], ring[(k - 1) % n]):
            rows.append(s)
            cols.append(nb)
            vals.append(-t_h)
    return sp.csr_matrix((vals, (rows, cols)), shape=(m, m), dtype=complex)


def configurations(sites: int, n_particles: int) -> np.ndarray:
    """Site index of every particle for every basis state, shape ``(M**N, N)``."""
    dim = sites**n_particles
    return np.stack(np.unravel_index(np.arange(dim), (sites,) * n_particles), axis=1)


def one_body_sum(op, n_particles: int) -> sp.csr_matrix:
    """``sum_j 1 ⊗ ... ⊗ op_j ⊗ ... ⊗ 1`` on the N-particle space."""
    op = sp.csr_matrix(op, dtype=complex)
    m = op.shape[0]
    total = None
    for j in range(n_particles):
        term = sp.kron(
            sp.kron(sp.identity(m**j, format="csr"), op, format="csr"),
            sp.identity(m ** (n_particles - j - 1), format="csr"),
            format="csr",
        )
        total = term if total is None else total + term
    return total.tocsr()


def pair_potential_diagonal(
    lattice: Lattice,
    spec: HamiltonianSpec,
    n_particles: int,
    weight: Optional[np.ndarray] = None,
    symmetrized: bool = False,
) -> np.ndarray:
    """Diagonal of ``sum_{l>j} phi(|q_j - q_l|) w(q_j)`` in the site basis.

    ``w`` defaults to 1.  With ``symmetrized`` each pair energy is split
    half-and-half between the two particles instead of attached to the
    lower-labelled one.
    """
    conf = configurations(lattice.sites, n_particles)
    out = np.zeros(conf.shape[0])
    if not spec.is_interacting() or n_particles < 2:
        return out
    w = np.ones(lattice.sites) if weight is None else np.asarray(weight, dtype=float)
    active = np.ones(lattice.sites, dtype=bool)
    if spec.vacuum_site is not None:
        active[spec.vacuum_site] = False
    for j in range(n_particles):
        for l in range(j + 1, n_particles):
            qj, ql = conf[:, j], conf[:, l]
            e = spec.pair_energy(ring_distance(qj, ql, lattice.sites))
            e = e * (active[qj] & active[ql])
            if symmetrized:
                out += 0.5 * e * (w[qj] + w[ql])
            else:
                out += e * w[qj]
    return out


def build_hamiltonian(
    spec: HamiltonianSpec,
    lattice: Lattice,
    n_particles: int,
    cap: int = DEFAULT_DIMENSION_CAP,
) -> sp.csr_matrix:
    """Sparse N-particle Hamiltonian: kinetic hopping plus pair potential."""
    check_dimension(lattice.sites, n_particles, cap)
    h = one_body_sum(kinetic_matrix(lattice, spec), n_particles)
    pot = pair_potential_diagonal(lattice, spec, n_particles)
    if np.any(pot):
        h = h + sp.diags(pot.astype(complex), format="csr")
    return h.tocsr()


class Propagator:
    """Exact propagator ``exp(-i H t / hbar)`` for a fixed Hamiltonian.

    Small spaces are diagonalized once and every ``U(t)`` is assembled from
    the eigenbasis; larger ones use the sparse action of the exponential.
    """

    def __init__(self, hamiltonian, hbar: float = 1.0, method: str = "auto"):
        self.hbar = float(hbar)
        if sp.issparse(hamiltonian):
            self._sparse = sp.csr_matrix(hamiltonian, dtype=complex)
        else:
            self._sparse = sp.csr_matrix(np.asarray(hamiltonian, dtype=complex))
        self.dimension = self._sparse.shape[0]
        if method == "auto":
            method = "eigh" if self.dimension <= DIAGONALIZATION_LIMIT else "expm"
        if method not in ("eigh", "expm"):
            raise ValueError(f"unknown propagation method {method!r}")
        self.method = method
        self.energies = self.eigenvectors = None
        if method == "eigh":
            self.energies, self.eigenvectors = np.linalg.eigh(self._sparse.toarray())

    def _phases(self, t: float) -> np.ndarray:
        return np.exp(-1j * self.energies * (t / self.hbar))

    def unitary(self, t: float) -> np.ndarray:
        if not np.isfinite(t):
            raise ValueError(f"time must be finite, got {t!r}")
        if self.method == "eigh":
            v = self.eigenvectors
            return (v * self._phases(t)) @ v.conj().T
        return sla.expm(-1j * (t / self.hbar) * self._sparse.toarray())

    def apply(self, vector: np.ndarray, t: float) -> np.ndarray:
        """``U(t) @ vector``; ``vector`` may be 1-D or a block of columns."""
        if not np.isfinite(t):
            raise ValueError(f"time must be finite, got {t!r}")
        vector = np.asarray(vector, dtype=complex)
        if vector.shape[0] != self.dimension:
            raise ValueError(
                f"dimension mismatch: state {vector.shape[0]} vs Hamiltonian {self.dimension}"
            )
        if t == 0:
            return vector.copy()
        if self.method == "eigh":
            v = self.eigenvectors
            coeff = v.conj().T @ vector
            phases = self._phases(t)
            coeff = coeff * (phases if coeff.ndim == 1 else phases[:, None])
            return v @ coeff
        return expm_multiply(-1j * (t / self.hbar) * self._sparse, vector)


def evolve(state: ManyBodyState, hamiltonian, t: float, hbar: float = 1.0) -> ManyBodyState:
    """Evolve ``state`` by ``exp(-i H t / hbar)``.

    ``hamiltonian`` is a matrix or an existing :class:`Propagator` (reuse one
    when evolving many states under the same H).
    """
    prop = hamiltonian if isinstance(hamiltonian, Propagator) else Propagator(hamiltonian, hbar)
    out = prop.apply(state.amplitudes, t)
    # unitary evolution; renormalize only the rounding residue
    out = out / np.linalg.norm(out)
    return state.with_amplitudes(out, evolved_time=float(t))


def conservation_defect(observable, hamiltonian) -> float:
    """Max-norm of the commutator ``[Q, H]``.

    ``observable`` is a matrix or anything with ``matrix(n_particles)`` and a
    known dimension (a :class:`~decohist.densities.DensityObservable`).
    """
    h = sp.csr_matrix(hamiltonian, dtype=complex)
    if hasattr(observable, "matrix"):
        m = observable.lattice.sites
        n = int(round(np.log(h.shape[0]) / np.log(m)))
        q = observable.matrix(n)
    else:
        q = observable
    q = sp.csr_matrix(q, dtype=complex)
    if q.shape != h.shape:
        raise ValueError(f"dimension mismatch: {q.shape} vs {h.shape}")
    comm = (q @ h - h @ q).tocsr()
    comm.eliminate_zeros()
    return float(np.abs(comm.data).max()) if comm.nnz else 0.0
