"""Pipelines for both tiers and the run report."""

from __future__ import annotations

import csv
import io
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Callable, Dict, List, Sequence

import numpy as np

from .. import densities, dynamics, histories, lattice, stats
from .config import ExperimentConfig

__all__ = ["Invariant", "RunReport", "run_experiment", "emit_report", "INVARIANT_CSV_HEADER"]

logger = logging.getLogger(__name__)

INVARIANT_CSV_HEADER = ("check", "value", "bound", "status")


def _fmt(x) -> str:
    return format(float(x), ".12g")


@dataclass(frozen=True)
class Invariant:
    name: str
    value: float
    bound: str
    passed: bool

    @property
    def status(self) -> str:
        return "PASS" if self.passed else "FAIL"


@dataclass
class RunReport:
    config: ExperimentConfig
    tables: Dict[str, str] = field(default_factory=dict)
    invariants: List[Invariant] = field(default_factory=list)
    metrics: Dict[str, float] = field(default_factory=dict)
    wall_clock: float = 0.0

    @property
    def config_hash(self) -> str:
        return self.config.hash

    @property
    def passed(self) -> bool:
        return all(inv.passed for inv in self.invariants)

    def check(self, name: str, value: float, passed: bool, bound: str) -> None:
        self.invariants.append(Invariant(name, float(value), bound, bool(passed)))

    def invariant_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(INVARIANT_CSV_HEADER)
        for inv in self.invariants:
            writer.writerow([inv.name, _fmt(inv.value), inv.bound, inv.status])
        return buf.getvalue()

    def summary(self) -> str:
        cfg = self.config
        lines = [
            f"# {cfg['name']} tier={cfg['tier']} pipeline={cfg['pipeline']} "
            f"seed={cfg['seed']} config={self.config_hash[:16]}"
        ]
        for name in sorted(self.metrics):
            lines.append(f"# {name} = {_fmt(self.metrics[name])}")
        for inv in self.invariants:
            lines.append(f"{inv.status} {inv.name} value={_fmt(inv.value)} bound={inv.bound}")
        lines.append(f"# {sum(i.passed for i in self.invariants)}/{len(self.invariants)} checks passed")
        return "\n".join(lines) + "\n"


def _parallel_map(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# --- exact tier -------------------------------------------------------------


def _lattice(cfg) -> lattice.Lattice:
    return lattice.build_lattice(cfg["lattice.sites"], cfg["lattice.spacing"])


def _hamiltonian_spec(cfg) -> dynamics.HamiltonianSpec:
    return dynamics.HamiltonianSpec(
        mass=cfg["hamiltonian.mass"],
        hbar=cfg["hamiltonian.hbar"],
        potential=cfg["hamiltonian.potential"],
        range=cfg["hamiltonian.range"],
        vacuum_site=cfg["hamiltonian.vacuum_site"],
    )


def _factor(cfg, lat, branch: str) -> lattice.OneParticleState:
    key = f"state.{branch}."
    if cfg[key + "kind"] == "site":
        return lattice.site_state(lat, cfg[key + "site"])
    return lattice.gaussian_packet(lat, cfg[key + "center"], cfg[key + "width"], cfg[key + "momentum"])


def _branch_state(cfg, lat, branch: str, n_particles: int) -> lattice.ManyBodyState:
    psi = _factor(cfg, lat, branch)
    vac = cfg["hamiltonian.vacuum_site"]
    if vac is not None:
        # physical factors carry no weight on the parking site
        amp = np.array(psi.amplitudes)
        amp[vac] = 0.0
        norm = np.linalg.norm(amp)
        if norm == 0:
            raise ValueError(f"state.{branch} factor lives entirely on the vacuum site")
        psi = lattice.OneParticleState(lat, amp / norm)
    parked = cfg[f"state.{branch}.vacuum_particles"]
    if parked:
        if vac is None:
            raise ValueError(f"state.{branch}.vacuum_particles needs hamiltonian.vacuum_site")
        if parked > n_particles:
            raise ValueError(f"cannot park {parked} of {n_particles} particles")
        factors = [psi] * (n_particles - parked) + [lattice.site_state(lat, vac)] * parked
        return lattice.product_of(factors, cap=cfg["lattice.cap"])
    return lattice.product_state(psi, n_particles, cap=cfg["lattice.cap"])


def _initial_state(cfg, lat, report: RunReport) -> lattice.ManyBodyState:
    n = cfg["state.particles"]
    a = _branch_state(cfg, lat, "a", n)
    if cfg["state.branches"] == 1:
        return a
    b = _branch_state(cfg, lat, "b", n)
    state = lattice.superpose(a, b, cfg["state.weight_a"], cfg["state.weight_b"])
    report.metrics["branch_overlap"] = abs(state.metadata["overlap"])
    return state


def _observable(cfg, lat) -> densities.DensityObservable:
    if cfg["observable.kind"] == "fourier-number":
        return densities.density_operator(
            "fourier-number", lat, mode=densities.FourierMode(lat, cfg["observable.k_index"])
        )
    stop = cfg["observable.stop"] if cfg["observable.stop"] is not None else lat.sites
    return densities.number_operator(lat, cfg["observable.start"], stop)


def _structure_checks(report: RunReport, d: histories.DecoherenceMatrix, threshold: float, prefix: str = "") -> float:
    for name, (value, ok) in d.invariants().items():
        bound = {"hermitian": "<=1e-10", "diagonal_nonnegative": ">=-1e-12", "sum_rule": "<=1e-9"}[name]
        report.check(prefix + "D_" + name, value, ok, bound)
    table = histories.ProbabilityTable(
        list(d.labels), np.clip(d.diagonal, 0, None), histories.decoherence_measure(d), threshold
    )
    psum = float(table.probabilities.sum())
    report.check(prefix + "probability_sum", abs(psum - 1), abs(psum - 1) <= 1e-9, "<=1e-9")
    return table.measure


def _run_decoherence(cfg, report: RunReport, jobs: int) -> None:
    lat = _lattice(cfg)
    state = _initial_state(cfg, lat, report)
    h = dynamics.build_hamiltonian(_hamiltonian_spec(cfg), lat, cfg["state.particles"], cfg["lattice.cap"])
    prop = dynamics.Propagator(h, cfg["hamiltonian.hbar"])
    obs = _observable(cfg, lat)
    report.metrics["commutator_max_norm"] = dynamics.conservation_defect(obs.matrix(state.n_particles), h)
    family = histories.bin_projectors(obs, cfg["histories.edges"], state.n_particles)
    spec = histories.HistorySpec(cfg["histories.times"], [family] * len(cfg["histories.times"]))
    d = histories.decoherence_functional(state, spec, prop)
    eps = _structure_checks(report, d, cfg["histories.threshold"])
    report.check("decoherence_measure", eps, eps < cfg["histories.threshold"], f"<{cfg['histories.threshold']:g} (probabilities assigned)")
    bound = cfg["check.max_offdiagonal"]
    if bound is not None:
        off = d.max_offdiagonal()
        report.check("max_offdiagonal_D", off, off <= bound, f"<={bound:g}")
    report.tables["decoherence.csv"] = d.to_csv()
    report.tables["probabilities.csv"] = _probability_csv(d)


def _probability_csv(d: histories.DecoherenceMatrix) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("alpha", "probability"))
    for lab, p in zip(d.labels, d.diagonal):
        writer.writerow(["-".join(map(str, lab)), _fmt(max(p, 0.0))])
    return buf.getvalue()


def centered_edges(center: float, width: float, lo: float, hi: float) -> np.ndarray:
    """Bin edges ``center + (k + 1/2) width`` covering ``[lo, hi]``; one bin is centered on ``center``."""
    k_lo = int(np.floor((lo - center) / width - 0.5))
    k_hi = int(np.ceil((hi - center) / width - 0.5))
    edges = center + (np.arange(k_lo, k_hi + 1) + 0.5) * width
    if edges[-1] <= hi:
        edges = np.append(edges, edges[-1] + width)
    return edges


def _trend_point(width, *, state, prop, obs, times, center, lo, hi):
    edges = centered_edges(center, width, lo, hi)
    family = histories.bin_projectors(obs, edges, state.n_particles)
    spec = histories.HistorySpec(times, [family] * len(times))
    d = histories.decoherence_functional(state, spec, prop)
    occupied = int(np.count_nonzero(family.ranks))
    return d, occupied


def _run_trend(cfg, report: RunReport, jobs: int) -> None:
    lat = _lattice(cfg)
    state = _initial_state(cfg, lat, report)
    h = dynamics.build_hamiltonian(_hamiltonian_spec(cfg), lat, cfg["state.particles"], cfg["lattice.cap"])
    prop = dynamics.Propagator(h, cfg["hamiltonian.hbar"])
    obs = _observable(cfg, lat)
    diag = np.real(obs.matrix(state.n_particles).diagonal())
    widths = cfg["trend.widths"]
    threshold = cfg["histories.threshold"]
    fn = partial(
        _trend_point, state=state, prop=prop, obs=obs, times=cfg["histories.times"],
        center=cfg["trend.center"], lo=float(diag.min()), hi=float(diag.max()),
    )
    results = [fn(w) for w in widths]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("width", "bins", "epsilon", "max_offdiagonal"))
    eps = []
    for w, (d, occupied) in zip(widths, results):
        e = _structure_checks(report, d, threshold, prefix=f"w={w:g}:")
        eps.append(e)
        writer.writerow([_fmt(w), occupied, _fmt(e), _fmt(d.max_offdiagonal())])
    report.tables["trend.csv"] = buf.getvalue()
    steps = np.diff(eps)
    report.check("epsilon_strictly_decreasing", float(steps.max()) if len(steps) else 0.0,
                 bool(len(steps) >= 3 and np.all(steps < 0)), "max step <0 over >=3 doublings")
    report.check("epsilon_widest", eps[-1], eps[-1] < threshold, f"<{threshold:g}")
    multi = [e for e, (_, occ) in zip(eps, results) if occ >= 2]
    if multi:
        report.check("epsilon_widest_multibin", multi[-1], multi[-1] < threshold, f"<{threshold:g}")


def _run_central_limit(cfg, report: RunReport, jobs: int) -> None:
    lat = _lattice(cfg)
    psi = _factor(cfg, lat, "a")
    obs = _observable(cfg, lat)
    if obs.kind != "number":
        raise ValueError("central_limit pipeline needs a number observable")
    f = psi.weight_in(obs.window.sites)
    ns = np.array(cfg["central.particles"], dtype=float)
    ratios = []
    for n in cfg["central.particles"]:
        st = densities.expectation_and_variance(lattice.product_state(psi, n, cap=cfg["lattice.cap"]), obs)
        ratios.append(st.ratio)
    ratios = np.array(ratios)
    closed = stats.closed_form_ratio(f, ns)
    gap = float(np.max(np.abs(ratios - closed) / closed))
    report.check("exact_vs_closed_form_rel", gap, gap <= 1e-9, "<=1e-9")
    exact = stats.scaling_fit(ns, ratios, "N", method="exact")
    tol = cfg["central.slope_tolerance"]
    target = cfg["central.expected_slope"]
    report.check("exact_slope", exact.slope, exact.within(target, tol), f"{target:g}+-{tol:g}")
    big = np.unique(np.round(np.geomspace(1, cfg["central.closed_form_max"], cfg["central.closed_form_points"])))
    ext = stats.scaling_fit(big, stats.closed_form_ratio(f, big), "N", method="closed_form")
    tol2 = cfg["central.closed_form_tolerance"]
    report.check("closed_form_slope", ext.slope, ext.within(target, tol2), f"{target:g}+-{tol2:g}")
    report.tables["central_limit.csv"] = stats.write_sweep_csv([exact, ext])


# --- statistical tier -------------------------------------------------------


def _model(cfg, correlation_length=None) -> stats.CorrelationModel:
    d = cfg["model.dimension"]
    box = cfg["model.box"]
    return stats.make_correlation_model(
        d,
        box,
        kernel=cfg["model.kernel"],
        amplitude=cfg["model.relative_amplitude"] / box ** (2 * d),
        correlation_length=correlation_length or cfg["model.correlation_length"],
    )


def _limit_point(x, *, cfg_values, variable):
    cfg = ExperimentConfig(cfg_values)
    if variable == "V":
        return stats.variance_ratio_limit(_model(cfg), x)
    if variable == "L":
        return stats.variance_ratio_limit(_model(cfg, x), cfg["volume.size"])
    return stats.variance_ratio_finite_N(_model(cfg), cfg["volume.size"], int(x))


def _mc_point(args, *, cfg_values):
    volume, correlation_length, seed = args
    cfg = ExperimentConfig(cfg_values)
    model = _model(cfg, correlation_length)
    est = stats.mc_variance_oracle(
        model, volume, cfg["mc.particles"], samples=cfg["mc.samples"], seed=seed, batches=cfg["mc.batches"]
    )
    return est, stats.variance_ratio_limit(model, volume)


def _mc_checks(cfg, report: RunReport, points, jobs: int, label: str) -> List[stats.ScalingReport]:
    """MC oracle vs quadrature at each ``(volume, L)``; returns CSV rows as reports."""
    seeds = [cfg["seed"] + i for i in range(len(points))]
    args = [(v, l, s) for (v, l), s in zip(points, seeds)]
    results = _parallel_map(partial(_mc_point, cfg_values=cfg.values), args, jobs)
    rows_q, rows_mc, errs = [], [], []
    sigmas = cfg["mc.sigmas"]
    for (v, l, _), (est, quad) in zip(args, results):
        x = v if label == "V" else l
        dev = abs(est.limit - quad)
        allowance = sigmas * est.limit_stderr + 1.0 / est.n_particles
        report.check(f"mc_vs_quadrature[{label}={x:.6g}]", dev, dev <= allowance,
                     f"<={sigmas:g}*stderr+1/N={allowance:.6g}")
        rows_q.append((x, quad))
        rows_mc.append((x, est.limit))
        errs.append(est.limit_stderr)
    q = stats.ScalingReport(label, np.array([r[0] for r in rows_q]), np.array([r[1] for r in rows_q]),
                            np.nan, np.nan, np.nan, method="quadrature")
    m = stats.ScalingReport(label, np.array([r[0] for r in rows_mc]), np.array([r[1] for r in rows_mc]),
                            np.nan, np.nan, np.nan, stderr=np.array(errs), method="mc")
    return [q, m]


def _run_scaling(cfg, report: RunReport, jobs: int) -> None:
    var = cfg["sweep.variable"]
    grid = np.geomspace(cfg["sweep.start"], cfg["sweep.stop"], cfg["sweep.points"])
    if var == "N":
        grid = np.unique(np.round(grid))
    ratios = _parallel_map(partial(_limit_point, cfg_values=cfg.values, variable=var), list(grid), jobs)
    method = "closed_form" if var == "N" and cfg["model.kernel"] == "zero" else "quadrature"
    rep = stats.scaling_fit(grid, ratios, var, method=method)
    target, tol = cfg["sweep.expected_slope"], cfg["sweep.slope_tolerance"]
    report.check(f"slope_vs_{var}", rep.slope, rep.within(target, tol), f"{target:g}+-{tol:g}")
    if var in ("V", "L"):
        lo = grid[0] if var == "V" else cfg["volume.size"]
        big_l = cfg["model.correlation_length"] if var == "V" else grid[-1]
        ratio = lo / big_l ** cfg["model.dimension"]
        report.check("min_volume_over_L^d", ratio, ratio >= 20, ">=20")
    tables = [rep]
    if cfg["mc.samples"]:
        if var == "V":
            pts = [(grid[0], cfg["model.correlation_length"])]
        elif var == "L":
            pts = [(cfg["volume.size"], grid[0])]
        else:
            pts = [(cfg["volume.size"], cfg["model.correlation_length"])]
        tables.append(_mc_checks(cfg, report, pts, jobs, "V" if var != "L" else "L")[1])
    report.tables["sweep.csv"] = stats.write_sweep_csv(tables)


def _run_oracle(cfg, report: RunReport, jobs: int) -> None:
    volumes = cfg["oracle.volumes"] or (cfg["volume.size"],)
    if cfg["mc.samples"] < 1000:
        raise ValueError("oracle pipeline needs mc.samples >= 1000")
    pts = [(v, cfg["model.correlation_length"]) for v in volumes]
    tables = _mc_checks(cfg, report, pts, jobs, "V")
    report.tables["oracle.csv"] = stats.write_sweep_csv(tables)


PIPELINES = {
    "decoherence": _run_decoherence,
    "bin_width_trend": _run_trend,
    "central_limit": _run_central_limit,
    "scaling": _run_scaling,
    "oracle": _run_oracle,
}


def run_experiment(config: ExperimentConfig, jobs: int = 1) -> RunReport:
    """Execute the configured pipeline; invariant failures are recorded, not raised."""
    report = RunReport(config)
    start = time.perf_counter()
    PIPELINES[config["pipeline"]](config, report, jobs)
    report.wall_clock = time.perf_counter() - start
    logger.info("%s finished in %.2fs", config["name"], report.wall_clock)
    return report


def emit_report(report: RunReport, out_dir, formats=("csv", "text-summary")) -> List[Path]:
    """Write the run outputs; every file is a pure function of config and seed."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror}") from None
    written = []

    def write(name, text):
        path = out / name
        path.write_text(text)
        written.append(path)

    write("config.cfg", report.config.materialize())
    for fmt in formats:
        if fmt == "csv":
            for name in sorted(report.tables):
                write(name, report.tables[name])
            write("invariants.csv", report.invariant_csv())
        elif fmt == "text-summary":
            write("summary.txt", report.summary())
        else:
            raise ValueError(f"unknown report format {fmt!r}")
    return written
