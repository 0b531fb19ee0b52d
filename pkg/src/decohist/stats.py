"""Large-N variance calculus for smeared number densities.

Positions live in a periodic box of side ``box`` in ``d`` dimensions.  The
two-particle density is ``p2(q1, q2) = p1(q1) p1(q2) + c(q1 - q2)``.

The built-in ``top-hat`` excess is ``c0`` on the cube ``|dq_i| <= L/2`` and a
uniform ``-b`` elsewhere, with ``b = c0 L^d / (box^d - L^d)`` so that every
slice integrates to zero (``p2`` has marginal ``p1``).  The negative part is
spread over the whole box rather than packed into a shell next to the lobe:
a shell would cancel the lobe inside any large window and leave only a
surface term, which is not the correlated-region picture being modelled.

Smearing volumes are axis-aligned boxes.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy import stats as sps
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_consistent_length, check_is_fitted

__all__ = [
    "KERNELS",
    "CorrelationModel",
    "SmearingVolume",
    "QuadratureResult",
    "MCEstimate",
    "ScalingReport",
    "PowerLawFit",
    "make_correlation_model",
    "gaussian_density",
    "mean_density",
    "pair_excess_integral",
    "variance_ratio_finite_N",
    "variance_ratio_limit",
    "closed_form_ratio",
    "mc_variance_oracle",
    "scaling_fit",
    "write_sweep_csv",
    "SWEEP_CSV_HEADER",
]

KERNELS = ("zero", "top-hat")

CELLS_PER_LENGTH = 16
CELLS_PER_EDGE = 8

SWEEP_CSV_HEADER = ("sweep_var", "x", "ratio", "stderr", "method")

PAIRING_CORRECTION = (
    "independent pairs give var = N f(1-f) + N C with C = int_V int_V (p2 - p1 p1); "
    "limit = N * ratio - (1-f)/f; "
    "finite-N (all N(N-1) pairs correlated) = limit * (1 - 1/N) + (1-f)/(N f)"
)


def _fmt(x: float) -> str:
    return format(float(x), ".12g")


@dataclass(frozen=True)
class SmearingVolume:
    """Axis-aligned box ``[corner_i, corner_i + sides_i)`` (wrapped periodically)."""

    sides: tuple
    corner: tuple = ()

    def __post_init__(self):
        sides = tuple(float(s) for s in np.atleast_1d(self.sides))
        corner = tuple(float(c) for c in np.atleast_1d(self.corner)) if len(self.corner) else (0.0,) * len(sides)
        if len(corner) != len(sides):
            raise ValueError("corner and sides must have the same dimension")
        if any(not s > 0 for s in sides):
            raise ValueError(f"box sides must be positive, got {sides}")
        object.__setattr__(self, "sides", sides)
        object.__setattr__(self, "corner", corner)

    @classmethod
    def cube(cls, volume: float, dimension: int, corner=None) -> "SmearingVolume":
        side = float(volume) ** (1.0 / dimension)
        return cls((side,) * dimension, () if corner is None else tuple(corner))

    @property
    def dimension(self) -> int:
        return len(self.sides)

    @property
    def volume(self) -> float:
        return float(np.prod(self.sides))

    def contains(self, q: np.ndarray, box: float) -> np.ndarray:
        """Membership mask for points ``q`` of shape ``(..., d)``."""
        rel = np.mod(q - np.asarray(self.corner), box)
        return np.all(rel < np.asarray(self.sides), axis=-1)


@dataclass(frozen=True, eq=False)
class CorrelationModel:
    """One- and two-particle position densities with correlation length ``L``.

    ``density`` is ``None`` for the uniform ``box**-d`` or a vectorized
    callable ``p1(q)`` with ``q`` of shape ``(..., d)``; it is tabulated on
    ``grid_cells`` cells per axis for validation.
    """

    dimension: int
    box: float
    kernel: str = "zero"
    amplitude: float = 0.0
    correlation_length: float = 1.0
    density: Optional[Callable[[np.ndarray], np.ndarray]] = None
    grid_cells: int = 64
    _table: np.ndarray = field(default=None, init=False, repr=False, compare=False)

    @property
    def uniform(self) -> bool:
        return self.density is None

    @property
    def domain_volume(self) -> float:
        return self.box**self.dimension

    @property
    def lobe_volume(self) -> float:
        return self.correlation_length**self.dimension if self.kernel == "top-hat" else 0.0

    @property
    def background(self) -> float:
        """Magnitude of the uniform negative part of the excess correlation."""
        if self.kernel == "zero":
            return 0.0
        return self.amplitude * self.lobe_volume / (self.domain_volume - self.lobe_volume)

    def lobe_mass(self) -> float:
        """Integral of the positive lobe over ``q2`` for fixed ``q1`` (``c0 L^d``)."""
        return self.amplitude * self.lobe_volume

    def p1(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if self.uniform:
            return np.full(q.shape[:-1], 1.0 / self.domain_volume)
        return np.asarray(self.density(q), dtype=float)

    def in_lobe(self, dq: np.ndarray) -> np.ndarray:
        dq = np.abs(np.asarray(dq, dtype=float))
        dq = np.minimum(dq, self.box - dq)
        return np.all(dq <= 0.5 * self.correlation_length, axis=-1)

    def excess(self, q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
        """``c(q1, q2) = p2 - p1 p1``."""
        dq = np.asarray(q1, dtype=float) - np.asarray(q2, dtype=float)
        if self.kernel == "zero":
            return np.zeros(dq.shape[:-1])
        return np.where(self.in_lobe(dq), self.amplitude, -self.background)

    def p2(self, q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
        return self.p1(q1) * self.p1(q2) + self.excess(q1, q2)

    def grid_points(self, cells: Optional[int] = None) -> np.ndarray:
        n = cells or self.grid_cells
        axis = (np.arange(n) + 0.5) * (self.box / n)
        mesh = np.meshgrid(*([axis] * self.dimension), indexing="ij")
        return np.stack(mesh, axis=-1)

    def p1_table(self) -> np.ndarray:
        return self._table if self._table is not None else self.p1(self.grid_points())

    def marginal_defect(self) -> float:
        """``|int c(q1, q2) dq2|`` evaluated by 1-D quadrature of the lobe."""
        if self.kernel == "zero":
            return 0.0
        lobe = 1.0
        for _ in range(self.dimension):
            lobe *= _trapezoid_indicator(self.correlation_length / 2.0, None, self.box).value
        total = (self.amplitude + self.background) * lobe - self.background * self.domain_volume
        return abs(total)


def make_correlation_model(
    dimension: int,
    box: float,
    density: Optional[Callable] = None,
    kernel: str = "zero",
    amplitude: float = 0.0,
    correlation_length: float = 1.0,
    grid_cells: int = 64,
) -> CorrelationModel:
    """Validated :class:`CorrelationModel`.

    Raises ``ValueError`` if ``p1`` is negative or not normalized (1e-8) on
    the tabulation grid, if ``p2`` can go negative, or if the marginal defect
    exceeds 1e-6.
    """
    if dimension not in (1, 2, 3):
        raise ValueError(f"dimension must be 1, 2 or 3, got {dimension}")
    if not box > 0:
        raise ValueError(f"box side must be positive, got {box}")
    if kernel not in KERNELS:
        raise ValueError(f"unknown kernel {kernel!r}; expected one of {KERNELS}")
    if not correlation_length > 0:
        raise ValueError(f"correlation length must be positive, got {correlation_length}")
    if kernel == "top-hat" and correlation_length > box / 2:
        raise ValueError(f"correlation length {correlation_length} exceeds half the box {box / 2}")
    model = CorrelationModel(
        dimension, float(box), kernel, float(amplitude), float(correlation_length), density, grid_cells
    )
    table = model.p1(model.grid_points())
    object.__setattr__(model, "_table", table)
    if np.any(table < 0):
        raise ValueError("one-particle density is negative on the grid")
    norm = table.sum() * (box / grid_cells) ** dimension
    if abs(norm - 1.0) > 1e-8:
        raise ValueError(f"one-particle density integrates to {norm!r}, not 1")
    pmin2 = float(table.min()) ** 2
    if kernel == "top-hat":
        if pmin2 - model.background < -1e-15:
            raise ValueError(
                f"p2 < 0 outside the correlation lobe: min p1^2 = {pmin2:.3g} < background {model.background:.3g}"
            )
        if pmin2 + amplitude < -1e-15:
            raise ValueError(f"p2 < 0 inside the correlation lobe (amplitude {amplitude:.3g})")
    defect = model.marginal_defect()
    if defect > 1e-6:
        raise ValueError(f"marginal defect {defect:.3g} exceeds 1e-6")
    return model


def gaussian_density(dimension: int, box: float, center, width: float) -> Callable:
    """Periodized isotropic Gaussian ``p1`` on the box (images out to 3 boxes)."""
    center = np.broadcast_to(np.asarray(center, dtype=float), (dimension,))

    def p1(q):
        q = np.asarray(q, dtype=float)
        out = np.ones(q.shape[:-1])
        for i in range(dimension):
            x = q[..., i, None] - center[i] + box * np.arange(-3, 4)
            g = np.exp(-0.5 * (x / width) ** 2).sum(axis=-1) / (np.sqrt(2 * np.pi) * width)
            out = out * g
        return out

    return p1


def _as_volume(model: CorrelationModel, volume) -> SmearingVolume:
    if not isinstance(volume, SmearingVolume):
        volume = SmearingVolume.cube(volume, model.dimension)
    if volume.dimension != model.dimension:
        raise ValueError(f"volume is {volume.dimension}-D but model is {model.dimension}-D")
    if any(s > model.box for s in volume.sides) or not 0 < volume.volume < model.domain_volume:
        raise ValueError(f"smearing volume {volume.volume} must lie strictly inside the box")
    return volume


def _midpoint_box(model: CorrelationModel, volume: SmearingVolume, n: int) -> float:
    axes = [c + (np.arange(n) + 0.5) * (s / n) for c, s in zip(volume.corner, volume.sides)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return float(model.p1(np.mod(mesh, model.box)).sum() * volume.volume / n**model.dimension)


def mean_density(model: CorrelationModel, volume, n_particles: float = 1.0) -> float:
    """``N * int_V p1``; uniform densities are integrated exactly."""
    volume = _as_volume(model, volume)
    if model.uniform:
        return n_particles * volume.volume / model.domain_volume
    n = CELLS_PER_EDGE
    prev = _midpoint_box(model, volume, n)
    limit = {1: 1 << 16, 2: 1 << 10, 3: 1 << 7}[model.dimension]
    while n < limit:
        n *= 2
        cur = _midpoint_box(model, volume, n)
        if abs(cur - prev) <= 1e-12 * max(abs(cur), 1e-300):
            return n_particles * cur
        prev = cur
    return n_particles * prev


@dataclass(frozen=True)
class QuadratureResult:
    value: float
    error: float
    cells: int


def _overlap_length(delta: np.ndarray, side: Optional[float], box: float) -> np.ndarray:
    """Length of ``[0, side) ∩ ([0, side) + delta)`` on a ring of length ``box``."""
    if side is None:
        return np.ones_like(delta)
    d = np.abs(delta)
    return np.maximum(0.0, side - d) + np.maximum(0.0, side - (box - d))


def _trapezoid_indicator(half_width: float, side: Optional[float], box: float, cells_per_length: int = CELLS_PER_LENGTH) -> QuadratureResult:
    """``int_{|x|<=h} overlap(x) dx`` by composite trapezoid, refined once for an error bar."""

    def rule(per_length):
        breaks = [-half_width, 0.0, half_width]
        if side is not None:
            for b in (side, box - side):
                if b < half_width:
                    breaks += [-b, b]
        breaks = np.unique(breaks)
        nodes = []
        for lo, hi in zip(breaks[:-1], breaks[1:]):
            k = max(1, int(np.ceil((hi - lo) / (2 * half_width) * per_length)))
            nodes.append(np.linspace(lo, hi, k + 1)[:-1])
        nodes.append([breaks[-1]])
        x = np.concatenate(nodes)
        return float(np.trapezoid(_overlap_length(x, side, box), x)), len(x) - 1

    coarse, _ = rule(cells_per_length)
    fine, cells = rule(2 * cells_per_length)
    return QuadratureResult(fine, abs(fine - coarse), cells)


def pair_excess_integral(model: CorrelationModel, volume) -> QuadratureResult:
    """``int_V int_V (p2 - p1 p1)``.

    The excess depends only on ``q1 - q2``, so the double integral over a box
    factorizes into one 1-D integral per axis of the lobe indicator against
    the box self-overlap length.
    """
    volume = _as_volume(model, volume)
    if model.kernel == "zero":
        return QuadratureResult(0.0, 0.0, 0)
    lobe, err, cells = 1.0, 0.0, 0
    for side in volume.sides:
        r = _trapezoid_indicator(model.correlation_length / 2.0, side, model.box)
        err = err * r.value + lobe * r.error + err * r.error
        lobe *= r.value
        cells = max(cells, r.cells)
    b = model.background
    value = (model.amplitude + b) * lobe - b * volume.volume**2
    return QuadratureResult(value, (model.amplitude + b) * err, cells)


def variance_ratio_limit(model: CorrelationModel, volume) -> float:
    """Large-N peaking ratio ``int_V int_V (p2 - p1 p1) / (int_V p1)**2``."""
    f = mean_density(model, volume)
    if f <= 0:
        raise ValueError("smearing volume carries no probability")
    return pair_excess_integral(model, volume).value / f**2


def variance_ratio_finite_N(model: CorrelationModel, volume, n_particles: int) -> float:
    """Exact finite-N peaking ratio of the smeared number density.

    ``var = N^2 (<dd> - f^2) + N (f - <dd>)`` with ``f = int_V p1`` and
    ``<dd> = int_V int_V p2``, divided by ``(N f)^2``.
    """
    if n_particles < 2:
        raise ValueError(f"need at least 2 particles, got {n_particles}")
    f = mean_density(model, volume)
    if f <= 0:
        raise ValueError("zero mean density in the smearing volume")
    dd = f**2 + pair_excess_integral(model, volume).value
    n = float(n_particles)
    var = n**2 * (dd - f**2) + n * (f - dd)
    return var / (n * f) ** 2


def closed_form_ratio(fraction: float, n_particles) -> np.ndarray:
    """Uncorrelated peaking ratio ``(1 - f) / (N f)``."""
    n = np.asarray(n_particles, dtype=float)
    return (1.0 - fraction) / (n * fraction)


@dataclass(frozen=True)
class MCEstimate:
    mean: float
    variance: float
    ratio: float
    ratio_stderr: float
    limit: float
    limit_stderr: float
    finite_n: float
    finite_n_stderr: float
    acceptance: float
    samples: int
    n_particles: int
    seed: int
    pairing_correction: str = PAIRING_CORRECTION


def _pair_sampler(model: CorrelationModel, rng: np.random.Generator):
    """Rejection sampler for pairs ``(q1, q2) ~ p2``.

    Proposal: ``q1`` uniform; ``q2`` uniform or, with probability 1/2 when a
    lobe exists, uniform in the lobe around ``q1``.
    """
    d, box = model.dimension, model.box
    vol = model.domain_volume
    lam = 0.5 if model.kernel == "top-hat" else 0.0
    lobe_vol = model.lobe_volume
    pmax = float(model.p1_table().max())
    if not model.uniform:
        pmax *= 1.05
    g_out = (1 - lam) / vol**2
    g_in = g_out + (lam / (vol * lobe_vol) if lam else 0.0)
    bound = max(
        (pmax**2 - model.background) / g_out,
        (pmax**2 + max(model.amplitude, 0.0)) / g_in if lam else 0.0,
    )

    def draw(count):
        q1 = rng.random((count, d)) * box
        q2 = rng.random((count, d)) * box
        if lam:
            near = rng.random(count) < lam
            offs = (rng.random((int(near.sum()), d)) - 0.5) * model.correlation_length
            q2[near] = np.mod(q1[near] + offs, box)
        g = np.where(model.in_lobe(q1 - q2), g_in, g_out)
        target = model.p2(q1, q2)
        ratio = target / (bound * g)
        if np.any(ratio > 1 + 1e-9):
            raise RuntimeError("rejection envelope below the target density")
        keep = rng.random(count) < ratio
        return q1[keep], q2[keep]

    return draw


def mc_variance_oracle(
    model: CorrelationModel,
    volume,
    n_particles: int,
    samples: int = 100_000,
    seed: int = 0,
    batches: int = 20,
    chunk_pairs: int = 2_000_000,
) -> MCEstimate:
    """Monte Carlo estimate of the peaking ratio from independent correlated pairs.

    Each configuration is ``N/2`` independent pairs drawn from ``p2``; the
    pair-model variance is mapped back to the all-pairs moment structure by
    :data:`PAIRING_CORRECTION`.  Standard errors come from batch means.
    """
    if samples < 1000:
        raise ValueError(f"need at least 1000 samples, got {samples}")
    if n_particles < 2 or n_particles % 2:
        raise ValueError(f"pair construction needs an even particle count, got {n_particles}")
    volume = _as_volume(model, volume)
    rng = np.random.default_rng(seed)
    draw = _pair_sampler(model, rng)
    pairs_per_config = n_particles // 2
    total = samples * pairs_per_config
    counts = np.empty(total, dtype=np.int8)
    filled = proposed = accepted = 0
    while filled < total:
        need = total - filled
        rate = accepted / proposed if accepted else 0.5
        step = int(min(chunk_pairs, 1024 + 1.1 * need / rate))
        q1, q2 = draw(step)
        proposed += step
        accepted += len(q1)
        if proposed >= 100_000 and accepted < 0.01 * proposed:
            raise RuntimeError(f"rejection rate above 99% ({accepted} accepted of {proposed})")
        take = min(len(q1), need)
        inside = volume.contains(q1[:take], model.box).astype(np.int8)
        inside += volume.contains(q2[:take], model.box).astype(np.int8)
        counts[filled : filled + take] = inside
        filled += take
    n_v = counts.reshape(samples, pairs_per_config).sum(axis=1, dtype=np.int64).astype(float)

    n = float(n_particles)

    def summarize(x):
        mean = x.mean()
        var = x.var(ddof=1)
        ratio = var / mean**2
        f = mean / n
        limit = n * ratio - (1 - f) / f
        finite = limit * (1 - 1 / n) + (1 - f) / (n * f)
        return mean, var, ratio, limit, finite

    mean, var, ratio, limit, finite = summarize(n_v)
    per_batch = np.array([summarize(b) for b in np.array_split(n_v, batches)])
    err = per_batch.std(axis=0, ddof=1) / np.sqrt(batches)
    return MCEstimate(
        mean=float(mean),
        variance=float(var),
        ratio=float(ratio),
        ratio_stderr=float(err[2]),
        limit=float(limit),
        limit_stderr=float(err[3]),
        finite_n=float(finite),
        finite_n_stderr=float(err[4]),
        acceptance=accepted / proposed,
        samples=samples,
        n_particles=n_particles,
        seed=seed,
    )


class PowerLawFit(BaseEstimator, RegressorMixin):
    """Least-squares fit of ``log y = intercept + slope * log x``.

    Attributes
    ----------
    slope_, slope_stderr_, intercept_ : float
    n_points_ : int
    """

    def __init__(self, min_points: int = 4):
        self.min_points = min_points

    def fit(self, X, y):
        x = check_array(X, ensure_2d=False, dtype=float).reshape(-1)
        y = check_array(y, ensure_2d=False, dtype=float).reshape(-1)
        check_consistent_length(x, y)
        if len(x) < self.min_points:
            raise ValueError(f"need at least {self.min_points} points, got {len(x)}")
        if np.any(x <= 0) or np.any(y <= 0):
            raise ValueError("power-law fit needs strictly positive x and y")
        res = sps.linregress(np.log(x), np.log(y))
        self.slope_ = float(res.slope)
        self.intercept_ = float(res.intercept)
        self.slope_stderr_ = float(res.stderr) if np.isfinite(res.stderr) else 0.0
        self.n_points_ = len(x)
        return self

    def predict(self, X):
        check_is_fitted(self, "slope_")
        x = check_array(X, ensure_2d=False, dtype=float).reshape(-1)
        return np.exp(self.intercept_) * x**self.slope_

    def score(self, X, y):
        """R^2 in log space."""
        check_is_fitted(self, "slope_")
        ly = np.log(np.asarray(y, dtype=float))
        resid = ly - np.log(self.predict(X))
        return 1.0 - resid.var() / ly.var() if ly.var() > 0 else 1.0


@dataclass
class ScalingReport:
    variable: str
    x: np.ndarray
    ratios: np.ndarray
    slope: float
    slope_stderr: float
    intercept: float
    stderr: Optional[np.ndarray] = None
    method: str = "quadrature"
    meta: dict = field(default_factory=dict)

    def within(self, expected: float, tol: float) -> bool:
        return abs(self.slope - expected) <= tol


def scaling_fit(x: Sequence[float], ratios: Sequence[float], variable: str = "x", **kwargs) -> ScalingReport:
    """Log-log slope of ``ratios`` against a monotone sweep grid ``x``."""
    x = np.asarray(x, dtype=float)
    ratios = np.asarray(ratios, dtype=float)
    if len(x) >= 2 and not (np.all(np.diff(x) > 0) or np.all(np.diff(x) < 0)):
        raise ValueError("sweep grid must be strictly monotone")
    if np.any(ratios <= 0):
        raise ValueError("scaling fit needs positive ratios")
    fit = PowerLawFit().fit(x, ratios)
    return ScalingReport(variable, x, ratios, fit.slope_, fit.slope_stderr_, fit.intercept_, **kwargs)


def write_sweep_csv(reports: List[ScalingReport], fh=None) -> str:
    """CSV rows ``sweep_var, x, ratio, stderr, method`` plus ``#`` fit footer lines."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_CSV_HEADER)
    for rep in reports:
        errs = rep.stderr if rep.stderr is not None else np.zeros_like(rep.x)
        for xv, rv, ev in zip(rep.x, rep.ratios, errs):
            writer.writerow([rep.variable, _fmt(xv), _fmt(rv), _fmt(ev), rep.method])
    for rep in reports:
        if not np.isfinite(rep.slope):
            continue
        buf.write(
            f"# fit {rep.variable} {rep.method}: slope={_fmt(rep.slope)} "
            f"stderr={_fmt(rep.slope_stderr)} intercept={_fmt(rep.intercept)} points={len(rep.x)}\n"
        )
    text = buf.getvalue()
    if fh is not None:
        fh.write(text)
    return text
