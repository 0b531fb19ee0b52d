"""Spectral-bin projectors, class operators and the decoherence functional.

``D(a, a') = Tr(C_a |Psi><Psi| C_a'^dagger)`` with
``C_a = P_{a_n}(t_n) ... P_{a_1}(t_1)`` and Heisenberg projectors
``P(t) = U(t)^dagger P U(t)``.  The working route propagates one branch
vector per history; :func:`decoherence_functional_dense` rebuilds every class
operator as a full matrix and is kept as an independent cross-check.
"""

from __future__ import annotations

import csv
import io
import itertools
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .dynamics import Propagator
from .lattice import ManyBodyState

__all__ = [
    "EDGE_TOL",
    "ProjectorFamily",
    "HistorySpec",
    "DecoherenceMatrix",
    "ProbabilityTable",
    "bin_projectors",
    "decoherence_functional",
    "decoherence_functional_dense",
    "decoherence_measure",
    "history_probabilities",
    "DecoherentHistories",
]

EDGE_TOL = 1e-9
DEFAULT_THRESHOLD = 0.1

CSV_HEADER = ("alpha", "alpha_prime", "re_D", "im_D", "epsilon")


def _fmt(x: float) -> str:
    return format(float(x), ".12g")


class ProjectorFamily:
    """Orthogonal projectors onto the eigenspaces of an observable, grouped in bins.

    Bin ``b`` collects eigenvalues in ``[edges[b], edges[b+1])``.  For diagonal
    observables the eigenbasis is the site basis and projectors act as masks.
    """

    def __init__(self, eigenvalues, eigenvectors, edges, observable=None):
        self.edges = np.asarray(edges, dtype=float)
        self.eigenvalues = np.asarray(eigenvalues, dtype=float)
        self.eigenvectors = eigenvectors
        self.observable = observable
        self.labels = np.searchsorted(self.edges, self.eigenvalues, side="right") - 1

    @property
    def n_bins(self) -> int:
        return len(self.edges) - 1

    @property
    def dimension(self) -> int:
        return len(self.eigenvalues)

    @property
    def bin_width(self) -> float:
        return float(np.min(np.diff(self.edges)))

    @property
    def ranks(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_bins)

    def apply(self, alpha: int, vectors: np.ndarray) -> np.ndarray:
        """``P_alpha @ vectors`` for a vector or a block of column vectors."""
        sel = self.labels == alpha
        if self.eigenvectors is None:
            mask = sel if vectors.ndim == 1 else sel[:, None]
            return np.where(mask, vectors, 0)
        v = self.eigenvectors[:, sel]
        return v @ (v.conj().T @ vectors)

    def matrix(self, alpha: int) -> np.ndarray:
        sel = self.labels == alpha
        if self.eigenvectors is None:
            return np.diag(sel.astype(complex))
        v = self.eigenvectors[:, sel]
        return v @ v.conj().T

    def merge(self, first: int) -> "ProjectorFamily":
        """Family with bins ``first`` and ``first + 1`` merged into one."""
        if not 0 <= first < self.n_bins - 1:
            raise ValueError(f"cannot merge bin {first} with its right neighbour")
        edges = np.delete(self.edges, first + 1)
        return ProjectorFamily(self.eigenvalues, self.eigenvectors, edges, self.observable)


def bin_projectors(observable, edges: Sequence[float], n_particles: Optional[int] = None) -> ProjectorFamily:
    """Spectral-bin projector family of ``observable``.

    ``observable`` is a hermitian matrix (dense or sparse) or a
    :class:`~decohist.densities.DensityObservable`, in which case
    ``n_particles`` selects the space.  An eigenvalue within ``1e-9`` of an
    edge is refused rather than assigned to either side.
    """
    edges = np.asarray(edges, dtype=float)
    if edges.ndim != 1 or len(edges) < 2:
        raise ValueError("need at least two bin edges")
    if np.any(np.diff(edges) <= 0):
        raise ValueError(f"bin edges must be strictly increasing, got {edges.tolist()}")
    if hasattr(observable, "matrix"):
        if n_particles is None:
            raise ValueError("n_particles is required for a DensityObservable")
        q = observable.matrix(n_particles)
        diagonal = observable.is_diagonal()
    else:
        q = observable
        diagonal = False
    if diagonal:
        evals = np.real(sp.csr_matrix(q).diagonal())
        evecs = None
    else:
        dense = q.toarray() if sp.issparse(q) else np.asarray(q)
        evals, evecs = np.linalg.eigh(dense)
    lo, hi = evals.min(), evals.max()
    if lo < edges[0] or hi >= edges[-1]:
        raise ValueError(
            f"bin edges [{edges[0]}, {edges[-1]}) do not cover the spectrum [{lo}, {hi}]"
        )
    gap = np.min(np.abs(evals[:, None] - edges[None, :]), axis=0)
    close = np.flatnonzero(gap < EDGE_TOL)
    if close.size:
        raise ValueError(
            f"eigenvalue within {EDGE_TOL} of bin edge {edges[close[0]]}; move the edge"
        )
    return ProjectorFamily(evals, evecs, edges, observable)


@dataclass
class HistorySpec:
    times: Sequence[float]
    families: Sequence[ProjectorFamily]

    def __post_init__(self):
        self.times = [float(t) for t in self.times]
        self.families = list(self.families)
        if not self.times:
            raise ValueError("a history needs at least one time")
        if len(self.times) != len(self.families):
            raise ValueError(
                f"{len(self.times)} times but {len(self.families)} projector families"
            )
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValueError(f"history times must be strictly increasing, got {self.times}")
        dims = {f.dimension for f in self.families}
        if len(dims) != 1:
            raise ValueError(f"projector families act on different spaces: {sorted(dims)}")

    @property
    def dimension(self) -> int:
        return self.families[0].dimension

    @property
    def alternatives(self) -> List[Tuple[int, ...]]:
        return list(itertools.product(*(range(f.n_bins) for f in self.families)))

    def shifted(self, t0: float) -> "HistorySpec":
        return HistorySpec([t + t0 for t in self.times], self.families)


@dataclass
class DecoherenceMatrix:
    labels: List[Tuple[int, ...]]
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    @property
    def diagonal(self) -> np.ndarray:
        return np.real(np.diag(self.values))

    @property
    def epsilon(self) -> np.ndarray:
        """Pairwise ``|D(a,a')| / sqrt(D(a,a) D(a',a'))``; NaN where a diagonal is < 1e-12."""
        d = self.diagonal
        ok = d >= 1e-12
        norm = np.sqrt(np.outer(np.where(ok, d, 1.0), np.where(ok, d, 1.0)))
        eps = np.abs(self.values) / norm
        eps[~(ok[:, None] & ok[None, :])] = np.nan
        return eps

    def max_offdiagonal(self) -> float:
        off = np.abs(self.values - np.diag(np.diag(self.values)))
        return float(off.max()) if off.size else 0.0

    def offdiagonal_sum(self) -> float:
        off = np.abs(self.values - np.diag(np.diag(self.values)))
        return float(off.sum())

    def invariants(self) -> dict:
        """Structural checks: name -> (value, passed)."""
        v = self.values
        herm = float(np.abs(v - v.conj().T).max())
        diag_min = float(self.diagonal.min())
        total = complex(v.sum())
        return {
            "hermitian": (herm, herm <= 1e-10),
            "diagonal_nonnegative": (diag_min, diag_min >= -1e-12),
            "sum_rule": (abs(total - 1.0), abs(total - 1.0) <= 1e-9),
        }

    def to_csv(self, fh=None) -> str:
        """Write ``alpha, alpha_prime, re_D, im_D, epsilon`` rows; returns the text."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        eps = self.epsilon
        names = ["-".join(str(a) for a in lab) for lab in self.labels]
        for i, a in enumerate(names):
            for j, b in enumerate(names):
                d = self.values[i, j]
                writer.writerow([a, b, _fmt(d.real), _fmt(d.imag), _fmt(eps[i, j])])
        text = buf.getvalue()
        if fh is not None:
            fh.write(text)
        return text


def _as_propagator(hamiltonian, hbar: float = 1.0) -> Propagator:
    return hamiltonian if isinstance(hamiltonian, Propagator) else Propagator(hamiltonian, hbar)


def _branch_vectors(psi: np.ndarray, spec: HistorySpec, prop: Propagator):
    """Columns ``U(t_n) C_a |Psi>`` for every alternative string, in product order."""
    block = psi[:, None]
    t_prev = 0.0
    for t, family in zip(spec.times, spec.families):
        block = prop.apply(block, t - t_prev)
        t_prev = t
        block = np.concatenate([family.apply(a, block) for a in range(family.n_bins)], axis=1)
        # product order: earlier time is the most significant index
        n_prev = block.shape[1] // family.n_bins
        order = np.arange(block.shape[1]).reshape(family.n_bins, n_prev).T.reshape(-1)
        block = block[:, order]
    return block


def decoherence_functional(initial: ManyBodyState, spec: HistorySpec, hamiltonian, hbar: float = 1.0) -> DecoherenceMatrix:
    if initial.dimension != spec.dimension:
        raise ValueError(
            f"dimension mismatch: state {initial.dimension} vs projectors {spec.dimension}"
        )
    prop = _as_propagator(hamiltonian, hbar)
    branches = _branch_vectors(initial.amplitudes, spec, prop)
    values = branches.T @ branches.conj()
    return DecoherenceMatrix(spec.alternatives, values, {"times": list(spec.times)})


def decoherence_functional_dense(initial: ManyBodyState, spec: HistorySpec, hamiltonian, hbar: float = 1.0) -> DecoherenceMatrix:
    """Brute-force route: full Heisenberg class-operator matrices and a trace."""
    prop = _as_propagator(hamiltonian, hbar)
    heis = []
    for t, family in zip(spec.times, spec.families):
        u = prop.unitary(t)
        heis.append([u.conj().T @ family.matrix(a) @ u for a in range(family.n_bins)])
    rho = np.outer(initial.amplitudes, initial.amplitudes.conj())
    classes = []
    for alt in spec.alternatives:
        c = np.eye(spec.dimension, dtype=complex)
        for k, a in enumerate(alt):
            c = heis[k][a] @ c
        classes.append(c)
    n = len(classes)
    values = np.empty((n, n), dtype=complex)
    for i, ci in enumerate(classes):
        left = ci @ rho
        for j, cj in enumerate(classes):
            values[i, j] = np.trace(left @ cj.conj().T)
    return DecoherenceMatrix(spec.alternatives, values, {"times": list(spec.times)})


def decoherence_measure(d: DecoherenceMatrix) -> float:
    """Largest normalized off-diagonal magnitude; 0 for a single history."""
    if len(d) < 2:
        return 0.0
    eps = d.epsilon.copy()
    np.fill_diagonal(eps, np.nan)
    if np.all(np.isnan(eps)):
        return 0.0
    return float(np.nanmax(eps))


@dataclass(frozen=True)
class ProbabilityTable:
    labels: List[Tuple[int, ...]]
    probabilities: np.ndarray
    measure: float
    threshold: float

    @property
    def decoherent(self) -> bool:
        return self.measure < self.threshold

    @property
    def warning(self) -> Optional[str]:
        if self.decoherent:
            return None
        return f"decoherence measure {self.measure:.3g} exceeds threshold {self.threshold:.3g}"

    def as_dict(self) -> dict:
        return dict(zip(self.labels, self.probabilities.tolist()))


def history_probabilities(d: DecoherenceMatrix, threshold: float = DEFAULT_THRESHOLD) -> ProbabilityTable:
    diag = d.diagonal
    if diag.min() < -1e-12:
        raise ValueError(f"negative history probability {diag.min()!r}")
    probs = np.clip(diag, 0.0, None)
    table = ProbabilityTable(list(d.labels), probs, decoherence_measure(d), float(threshold))
    if table.warning:
        warnings.warn(table.warning, RuntimeWarning, stacklevel=2)
    return table


class DecoherentHistories(BaseEstimator):
    """Estimator wrapper: ``fit(initial_state)`` evaluates the decoherence functional.

    Parameters
    ----------
    hamiltonian : array, sparse matrix or Propagator
    times : sequence of float
    families : sequence of ProjectorFamily
    threshold : float
        Decoherence measure below which probabilities are assigned silently.

    Attributes
    ----------
    matrix_ : DecoherenceMatrix
    measure_ : float
    probabilities_ : ProbabilityTable
    """

    def __init__(self, hamiltonian=None, times=(), families=(), threshold=DEFAULT_THRESHOLD):
        self.hamiltonian = hamiltonian
        self.times = times
        self.families = families
        self.threshold = threshold

    def fit(self, initial_state: ManyBodyState, y=None):
        if self.hamiltonian is None:
            raise ValueError("hamiltonian must be set before fit")
        spec = HistorySpec(self.times, self.families)
        self.matrix_ = decoherence_functional(initial_state, spec, self.hamiltonian)
        self.measure_ = decoherence_measure(self.matrix_)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            self.probabilities_ = history_probabilities(self.matrix_, self.threshold)
        return self

    def score(self, initial_state=None, y=None) -> float:
        """Negative decoherence measure (larger is more decoherent)."""
        check_is_fitted(self, "matrix_")
        return -self.measure_
