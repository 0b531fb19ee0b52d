import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone

from decohist.densities import expectation_and_variance, number_operator
from decohist.lattice import OneParticleState, build_lattice, product_state
from decohist.stats import (
    SWEEP_CSV_HEADER,
    PowerLawFit,
    SmearingVolume,
    closed_form_ratio,
    gaussian_density,
    make_correlation_model,
    mc_variance_oracle,
    mean_density,
    pair_excess_integral,
    scaling_fit,
    variance_ratio_finite_N,
    variance_ratio_limit,
    write_sweep_csv,
)

BOX = 1e4


def _top_hat(d=1, box=BOX, kappa=5000.0, length=1.0):
    """Top-hat model with amplitude ``kappa / box**(2d)`` (kappa = lobe excess over p1 p1)."""
    return make_correlation_model(d, box, kernel="top-hat", amplitude=kappa / box ** (2 * d), correlation_length=length)


# --- model construction -----------------------------------------------------


def test_zero_kernel_factorizes():
    m = make_correlation_model(2, 10.0)
    rng = np.random.default_rng(0)
    q1, q2 = rng.random((50, 2)) * 10, rng.random((50, 2)) * 10
    np.testing.assert_array_equal(m.p2(q1, q2), m.p1(q1) * m.p1(q2))


def test_top_hat_lobe_and_marginal():
    box = 100.0
    c0 = 2e-6
    m = make_correlation_model(1, box, kernel="top-hat", amplitude=c0, correlation_length=0.05 * box)
    assert m.lobe_mass() == pytest.approx(c0 * 5.0)
    assert m.marginal_defect() <= 1e-12
    # kernel integrated over q2 on a fine grid vanishes; the positive lobe carries c0 L
    q2 = (np.arange(200_000) + 0.5) * (box / 200_000)
    c = m.excess(np.full((q2.size, 1), 30.0), q2[:, None])
    h = box / q2.size
    assert abs(c.sum() * h) <= 1e-9
    assert c[c > 0].sum() * h == pytest.approx(c0 * 5.0, rel=1e-4)
    # symmetric and nonnegative
    a, b = np.array([[3.0]]), np.array([[5.0]])
    assert m.p2(a, b) == m.p2(b, a)
    assert m.p2(np.array([[0.0]]), np.array([[50.0]]))[0] >= 0


def test_top_hat_too_strong_is_rejected():
    box = 100.0
    with pytest.raises(ValueError, match="p2 < 0"):
        # background b = c0 L/(box - L) beats p1^2 = 1e-4
        make_correlation_model(1, box, kernel="top-hat", amplitude=1.0, correlation_length=5.0)
    with pytest.raises(ValueError, match="p2 < 0"):
        make_correlation_model(1, box, kernel="top-hat", amplitude=-1.0, correlation_length=5.0)


@pytest.mark.parametrize(
    "kwargs, match",
    [
        (dict(dimension=4, box=10.0), "dimension"),
        (dict(dimension=1, box=10.0, kernel="gauss"), "kernel"),
        (dict(dimension=1, box=10.0, kernel="top-hat", correlation_length=6.0), "half the box"),
        (dict(dimension=1, box=10.0, density=lambda q: np.full(q.shape[:-1], 0.2)), "integrates"),
        (dict(dimension=1, box=10.0, density=lambda q: np.where(q[..., 0] < 5, 0.3, -0.1)), "negative"),
    ],
)
def test_model_errors(kwargs, match):
    with pytest.raises(ValueError, match=match):
        make_correlation_model(**kwargs)


def test_smearing_volume_wraps():
    v = SmearingVolume((4.0,), (8.0,))
    assert v.contains(np.array([[9.0], [1.0], [3.0]]), box=10.0).tolist() == [True, True, False]
    assert SmearingVolume.cube(27.0, 3).sides == pytest.approx((3.0, 3.0, 3.0))
    with pytest.raises(ValueError):
        SmearingVolume((0.0,))


# --- mean density ---------------------------------------------------------------


def test_mean_density_uniform():
    m = make_correlation_model(3, 10.0)
    assert mean_density(m, 500.0, 100) == pytest.approx(50.0)
    with pytest.raises(ValueError, match="inside the box"):
        mean_density(m, 2000.0, 100)
    assert mean_density(make_correlation_model(1, 10.0), SmearingVolume((10.0 - 1e-12,)), 7) == pytest.approx(7.0)


def test_mean_density_gaussian_matches_refined_midpoint():
    box = 100.0
    p1 = gaussian_density(1, box, 40.0, 6.0)
    m = make_correlation_model(1, box, density=p1, grid_cells=512)
    vol = SmearingVolume((20.0,), (35.0,))

    def midpoint(n):
        x = 35.0 + (np.arange(n) + 0.5) * (20.0 / n)
        return p1(x[:, None]).sum() * 20.0 / n

    coarse, fine = midpoint(4000), midpoint(8000)
    assert abs(fine - coarse) < 1e-6
    assert mean_density(m, vol, 10) == pytest.approx(10 * fine, abs=1e-6)
    # frozen value (erf difference for an unperiodized Gaussian agrees to 1e-9)
    assert mean_density(m, vol, 10) == pytest.approx(7.9146195374, abs=1e-9)


# --- finite-N and limit ratios -------------------------------------------------------


def test_zero_kernel_finite_n_closed_form():
    m = make_correlation_model(1, 1000.0)
    assert variance_ratio_finite_N(m, 500.0, 100) == pytest.approx(0.01, abs=1e-12)
    assert closed_form_ratio(0.5, 100) == pytest.approx(0.01)
    assert variance_ratio_limit(m, 500.0) == 0.0


def test_full_domain_has_zero_ratio():
    m = make_correlation_model(1, 10.0)
    # a full-domain volume is refused, so approach it from inside
    assert variance_ratio_finite_N(m, 10.0 - 1e-9, 50) == pytest.approx(0.0, abs=1e-9)


def test_finite_n_needs_two_particles():
    with pytest.raises(ValueError, match="at least 2"):
        variance_ratio_finite_N(make_correlation_model(1, 10.0), 5.0, 1)


def test_finite_n_converges_to_limit_with_inverse_n_gap():
    m = _top_hat()
    lim = variance_ratio_limit(m, 100.0)
    ns = np.array([1e3, 1e4, 1e5, 1e6])
    gaps = np.array([variance_ratio_finite_N(m, 100.0, int(n)) - lim for n in ns])
    k = np.polyfit(1 / ns, gaps, 1)[0]
    assert np.all(np.abs(gaps) <= abs(k) / ns * (1 + 1e-6))
    fit = scaling_fit(ns, gaps)
    assert fit.slope == pytest.approx(-1.0, abs=1e-6)
    # frozen: K = (1 - f)/f - limit for f = V/box
    f = 100.0 / BOX
    assert k == pytest.approx((1 - f) / f - lim, rel=1e-6)


def test_limit_independent_of_length_when_volume_inside_lobe():
    box = 100.0
    a = make_correlation_model(1, box, kernel="top-hat", amplitude=1e-6, correlation_length=20.0)
    b = make_correlation_model(1, box, kernel="top-hat", amplitude=1e-6, correlation_length=10.0)
    # with V << L every pair in V sits inside the lobe, where the excess is c0 + b - b
    ra, rb = variance_ratio_limit(a, 2.0), variance_ratio_limit(b, 2.0)
    assert abs(ra - rb) < 1e-6
    assert ra == pytest.approx(1e-6 * box**2, rel=1e-9)


@pytest.mark.parametrize("volume", [20.0, 50.0, 200.0])
def test_limit_matches_asymptote(volume):
    m = _top_hat()
    c0 = m.amplitude
    asymptote = c0 * 1.0 * volume * BOX**2 / volume**2
    assert variance_ratio_limit(m, volume) == pytest.approx(asymptote, rel=0.05)


def test_pair_integral_against_brute_force_grid():
    box, length, side = 100.0, 5.0, 30.0
    m = make_correlation_model(1, box, kernel="top-hat", amplitude=2e-6, correlation_length=length)
    quad = pair_excess_integral(m, side)
    n = 3000
    x = (np.arange(n) + 0.5) * (side / n)
    c = m.excess(x[:, None, None], x[None, :, None])
    brute = c.sum() * (side / n) ** 2
    # the grid counts 2K + 1 lags across the band: an O(h / L) overestimate
    assert quad.value == pytest.approx(brute, rel=5e-3)
    assert quad.error <= 1e-12 * abs(quad.value) + 1e-18
    # frozen closed form: (c0 + b)(V L - L^2/4) - b V^2
    b = m.background
    assert quad.value == pytest.approx((2e-6 + b) * (side * length - length**2 / 4) - b * side**2, rel=1e-12)


def test_pair_integral_factorizes_in_two_dimensions():
    box = 20.0
    m = make_correlation_model(2, box, kernel="top-hat", amplitude=1e-5, correlation_length=2.1)
    vol = SmearingVolume((6.0, 4.0))
    quad = pair_excess_integral(m, vol)
    h = 0.1
    xs = (np.arange(60) + 0.5) * h
    ys = (np.arange(40) + 0.5) * h
    pts = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1).reshape(-1, 2)
    c = m.excess(pts[:, None, :], pts[None, :, :])
    brute = c.sum() * h**4
    assert quad.value == pytest.approx(brute, rel=0.03)


def test_cross_tier_consistency():
    lat = build_lattice(8)
    rng = np.random.default_rng(11)
    amp = rng.normal(size=8) + 1j * rng.normal(size=8)
    psi = OneParticleState(lat, amp / np.linalg.norm(amp))
    weights = psi.probabilities

    def p1(q):
        return weights[np.floor(q[..., 0]).astype(int) % 8]

    model = make_correlation_model(1, 8.0, density=p1)
    for start, stop in [(0, 4), (2, 4)]:
        vol = SmearingVolume((float(stop - start),), (float(start),))
        for n in (2, 3, 4):
            exact = expectation_and_variance(product_state(psi, n), number_operator(lat, start, stop)).ratio
            assert variance_ratio_finite_N(model, vol, n) == pytest.approx(exact, rel=1e-10)


# --- Monte Carlo oracle -----------------------------------------------------------------


def test_mc_zero_kernel_matches_closed_form():
    m = make_correlation_model(1, 100.0)
    est = mc_variance_oracle(m, 30.0, 100, samples=20_000, seed=3)
    target = closed_form_ratio(0.3, 100)
    assert abs(est.ratio - target) <= 3 * est.ratio_stderr
    assert abs(est.limit) <= 3 * est.limit_stderr
    assert est.mean == pytest.approx(30.0, rel=0.01)


def test_mc_fixed_seed_is_bit_identical():
    m = _top_hat()
    a = mc_variance_oracle(m, 50.0, 20, samples=5000, seed=42)
    b = mc_variance_oracle(m, 50.0, 20, samples=5000, seed=42)
    assert a == b
    c = mc_variance_oracle(m, 50.0, 20, samples=5000, seed=43)
    assert c.ratio != a.ratio


def test_mc_top_hat_large_n():
    m = _top_hat()
    n = 10_000
    est = mc_variance_oracle(m, 50.0, n, samples=2000, seed=1)
    quad = variance_ratio_limit(m, 50.0)
    assert abs(est.limit - quad) <= 3 * est.limit_stderr + 1 / n
    assert "independent pairs" in est.pairing_correction


def test_mc_finite_n_correction():
    m = _top_hat()
    est = mc_variance_oracle(m, 50.0, 100, samples=100_000, seed=5)
    exact = variance_ratio_finite_N(m, 50.0, 100)
    assert abs(est.finite_n - exact) <= 3 * est.finite_n_stderr


def test_mc_contract_errors():
    m = make_correlation_model(1, 10.0)
    with pytest.raises(ValueError, match="1000"):
        mc_variance_oracle(m, 5.0, 10, samples=999)
    with pytest.raises(ValueError, match="even"):
        mc_variance_oracle(m, 5.0, 7, samples=1000)


def test_mc_rejection_rate_guard():
    # a sharply peaked p1 makes the uniform proposal reject almost everything
    box = 100.0
    p1 = gaussian_density(1, box, 50.0, 0.05)
    m = make_correlation_model(1, box, density=p1, grid_cells=100_000)
    with pytest.raises(RuntimeError, match="99%"):
        mc_variance_oracle(m, 10.0, 2, samples=1000)


# --- scaling fits ---------------------------------------------------------------------


def test_scaling_fit_exact_power_laws():
    x = np.geomspace(10, 1000, 6)
    assert scaling_fit(x, 3.0 / x).slope == pytest.approx(-1.0, abs=1e-12)
    rep = scaling_fit(x, 0.2 * x**3, variable="L")
    assert rep.slope == pytest.approx(3.0, abs=1e-12)
    assert rep.within(3.0, 1e-9)


def test_scaling_fit_errors():
    with pytest.raises(ValueError, match="4 points"):
        scaling_fit([1, 2, 3], [1, 2, 3])
    with pytest.raises(ValueError, match="positive"):
        scaling_fit([1, 2, 3, 4], [1, 2, 0, 4])
    with pytest.raises(ValueError, match="monotone"):
        scaling_fit([1, 3, 2, 4], [1, 2, 3, 4])


def test_volume_sweep_slope_d1():
    m = _top_hat()
    v = np.geomspace(20, 200, 6)
    rep = scaling_fit(v, [variance_ratio_limit(m, x) for x in v], "V")
    assert rep.within(-1.0, 0.1)


def test_power_law_estimator():
    est = PowerLawFit()
    assert est.get_params() == {"min_points": 4}
    x = np.array([1.0, 2.0, 4.0, 8.0, 16.0])
    est.fit(x, 5 * x**-2)
    assert est.slope_ == pytest.approx(-2)
    assert est.intercept_ == pytest.approx(np.log(5))
    np.testing.assert_allclose(est.predict([3.0]), [5 / 9])
    assert est.score(x, 5 * x**-2) == pytest.approx(1.0)
    assert clone(est).get_params() == est.get_params()


def test_sweep_csv_format():
    x = np.array([1.0, 2.0, 4.0, 8.0])
    rep = scaling_fit(x, 1 / x, "V")
    text = write_sweep_csv([rep])
    lines = text.splitlines()
    assert lines[0] == ",".join(SWEEP_CSV_HEADER) == "sweep_var,x,ratio,stderr,method"
    assert lines[1] == "V,1,1,0,quadrature"
    assert lines[-1].startswith("# fit V quadrature: slope=-1 ")


# --- properties -------------------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(f=st.floats(0.01, 0.99), n=st.integers(2, 10**6))
def test_zero_kernel_finite_n_is_closed_form(f, n):
    m = make_correlation_model(1, 1.0)
    assert variance_ratio_finite_N(m, f, n) == pytest.approx(float(closed_form_ratio(f, n)), rel=1e-9)


@settings(max_examples=30, deadline=None)
@given(slope=st.floats(-4, 4), scale=st.floats(1e-3, 1e3), start=st.floats(0.1, 10))
def test_scaling_fit_recovers_exponent(slope, scale, start):
    x = start * np.geomspace(1, 10, 5)
    assert scaling_fit(x, scale * x**slope).slope == pytest.approx(slope, abs=1e-9)


@settings(max_examples=20, deadline=None)
@given(kappa=st.floats(0, 40), length=st.floats(0.2, 20), side=st.floats(1, 400))
def test_pair_integral_matches_closed_form_d1(kappa, length, side):
    box = 1000.0
    m = make_correlation_model(1, box, kernel="top-hat", amplitude=kappa / box**2, correlation_length=length)
    h = length / 2
    inner = side * 2 * h - h**2 if side >= h else side**2
    expected = (m.amplitude + m.background) * inner - m.background * side**2
    assert pair_excess_integral(m, side).value == pytest.approx(expected, rel=1e-9, abs=1e-15)
