import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone

from decohist.densities import number_operator
from decohist.dynamics import HamiltonianSpec, Propagator, build_hamiltonian, evolve
from decohist.histories import (
    DecoherenceMatrix,
    DecoherentHistories,
    HistorySpec,
    bin_projectors,
    decoherence_functional,
    decoherence_functional_dense,
    decoherence_measure,
    history_probabilities,
)
from decohist.lattice import (
    OneParticleState,
    build_lattice,
    gaussian_packet,
    product_of,
    product_state,
    site_state,
    superpose,
)


def _free_prop(lat, n):
    return Propagator(build_hamiltonian(HamiltonianSpec.free(), lat, n))


def _two_time(lat, n, stop, edges, times=(0.6, 1.4)):
    fam = bin_projectors(number_operator(lat, 0, stop), edges, n)
    return HistorySpec(list(times), [fam, fam])


@pytest.fixture(scope="module")
def conserved_setup():
    """Two sectors of different ring occupancy on a 6-site lattice with a parking site."""
    lat = build_lattice(6)
    spec = HamiltonianSpec.free(vacuum_site=5)
    amp = np.array(gaussian_packet(lat, 2.0, 0.7).amplitudes)
    amp[5] = 0
    ring = OneParticleState(lat, amp / np.linalg.norm(amp))
    a = product_of([ring, ring])
    b = product_of([ring, site_state(lat, 5)])
    state = superpose(a, b, 0.6, 0.8)
    prop = Propagator(build_hamiltonian(spec, lat, 2))
    fam = bin_projectors(number_operator(lat, 0, 5), [-0.5, 0.5, 1.5, 2.5], 2)
    return lat, state, prop, HistorySpec([0.7, 1.9], [fam, fam])


def test_projector_family_invariants():
    lat = build_lattice(4)
    fam = bin_projectors(number_operator(lat, 0, 2), [-0.5, 0.5, 1.5, 2.5], 2)
    mats = [fam.matrix(a) for a in range(fam.n_bins)]
    for i, p in enumerate(mats):
        assert np.abs(p @ p - p).max() <= 1e-10
        for j, q in enumerate(mats):
            if i != j:
                assert np.abs(p @ q).max() <= 1e-10
    assert np.abs(sum(mats) - np.eye(16)).max() <= 1e-10
    assert fam.ranks.tolist() == [4, 8, 4]
    assert fam.bin_width == 1.0


def test_projectors_from_dense_eigendecomposition():
    lat = build_lattice(4)
    q = number_operator(lat, 0, 2).matrix(2)
    dense_fam = bin_projectors(q, [-0.5, 0.5, 1.5, 2.5])
    mask_fam = bin_projectors(number_operator(lat, 0, 2), [-0.5, 0.5, 1.5, 2.5], 2)
    for a in range(3):
        np.testing.assert_allclose(dense_fam.matrix(a), mask_fam.matrix(a), atol=1e-12)


def test_single_bin_is_identity():
    lat = build_lattice(4)
    fam = bin_projectors(number_operator(lat, 0, 2), [-0.5, 2.5], 2)
    np.testing.assert_array_equal(fam.matrix(0), np.eye(16))
    state = product_state(gaussian_packet(lat, 1, 1), 2)
    d = decoherence_functional(state, HistorySpec([1.0], [fam]), _free_prop(lat, 2))
    assert d.values.shape == (1, 1)
    assert d.values[0, 0] == pytest.approx(1.0, abs=1e-12)
    assert decoherence_measure(d) == 0.0


@pytest.mark.parametrize(
    "edges, match",
    [
        ([0.5, 1.5, 2.5], "cover"),
        ([-0.5, 1.5, 1.5, 2.5], "increasing"),
        ([-0.5, 1.0, 2.5], "edge"),
        ([-0.5, 1.0 + 1e-10, 2.5], "edge"),
        ([0.0], "two"),
    ],
)
def test_bin_edge_errors(edges, match):
    lat = build_lattice(4)
    with pytest.raises(ValueError, match=match):
        bin_projectors(number_operator(lat, 0, 2), edges, 2)


def test_observable_needs_particle_count():
    with pytest.raises(ValueError, match="n_particles"):
        bin_projectors(number_operator(build_lattice(4), 0, 2), [-0.5, 2.5])


def test_history_spec_validation():
    lat = build_lattice(3)
    fam = bin_projectors(number_operator(lat, 0, 1), [-0.5, 0.5, 1.5], 1)
    with pytest.raises(ValueError, match="increasing"):
        HistorySpec([1.0, 1.0], [fam, fam])
    with pytest.raises(ValueError, match="families"):
        HistorySpec([1.0], [fam, fam])
    other = bin_projectors(number_operator(lat, 0, 1), [-0.5, 0.5, 2.5], 2)
    with pytest.raises(ValueError, match="different spaces"):
        HistorySpec([1.0, 2.0], [fam, other])
    assert HistorySpec([0.1, 0.2], [fam, fam]).alternatives == [(0, 0), (0, 1), (1, 0), (1, 1)]


def test_conserved_number_decoheres(conserved_setup):
    _, state, prop, spec = conserved_setup
    d = decoherence_functional(state, spec, prop)
    assert d.max_offdiagonal() <= 1e-10
    assert decoherence_measure(d) <= 1e-10
    for value, ok in d.invariants().values():
        assert ok
    table = history_probabilities(d)
    probs = table.as_dict()
    assert probs[(2, 2)] == pytest.approx(0.36, abs=1e-12)
    assert probs[(1, 1)] == pytest.approx(0.64, abs=1e-12)
    assert table.probabilities.sum() == pytest.approx(1.0, abs=1e-9)


def test_vector_and_dense_routes_agree():
    lat = build_lattice(4)
    state = product_state(gaussian_packet(lat, 1.2, 0.9, 0.5), 2)
    spec = _two_time(lat, 2, 2, [-0.5, 0.5, 1.5, 2.5])
    prop = _free_prop(lat, 2)
    fast = decoherence_functional(state, spec, prop)
    slow = decoherence_functional_dense(state, spec, prop)
    assert np.abs(fast.values - slow.values).max() <= 1e-9
    # a free packet on half the ring does not decohere
    assert decoherence_measure(fast) > 0.1


def test_vector_and_dense_routes_agree_three_times():
    lat = build_lattice(3)
    fam = bin_projectors(number_operator(lat, 0, 1), [-0.5, 0.5, 1.5, 2.5], 2)
    spec = HistorySpec([0.3, 0.8, 1.5], [fam, fam, fam])
    state = product_state(gaussian_packet(lat, 1.0, 0.8, 0.2), 2)
    prop = _free_prop(lat, 2)
    fast = decoherence_functional(state, spec, prop)
    slow = decoherence_functional_dense(state, spec, prop)
    assert np.abs(fast.values - slow.values).max() <= 1e-9


def test_one_time_histories_always_decohere():
    lat = build_lattice(4)
    state = product_state(gaussian_packet(lat, 1.5, 2.0), 1)
    fam = bin_projectors(number_operator(lat, 0, 2), [-0.5, 0.5, 1.5], 1)
    d = decoherence_functional(state, HistorySpec([0.9], [fam]), _free_prop(lat, 1))
    assert d.diagonal.min() > 0.1
    assert decoherence_measure(d) <= 1e-12


def test_rank_one_final_projector_gives_maximal_interference():
    lat = build_lattice(4)
    state = product_state(gaussian_packet(lat, 1.5, 2.0), 1)
    first = bin_projectors(number_operator(lat, 0, 2), [-0.5, 0.5, 1.5], 1)
    final = bin_projectors(number_operator(lat, 0, 1), [-0.5, 0.5, 1.5], 1)
    d = decoherence_functional(state, HistorySpec([0.5, 1.1], [first, final]), _free_prop(lat, 1))
    # both histories ending on site 0 leave branch vectors proportional to |0>
    eps = d.epsilon
    i, j = d.labels.index((0, 1)), d.labels.index((1, 1))
    assert eps[i, j] == pytest.approx(1.0, abs=1e-9)
    assert decoherence_measure(d) == pytest.approx(1.0, abs=1e-9)


def test_measure_skips_empty_histories():
    d = DecoherenceMatrix([(0,), (1,), (2,)], np.diag([0.5, 0.5, 0.0]).astype(complex))
    assert decoherence_measure(d) == 0.0
    assert np.isnan(d.epsilon[2, 0])


def test_probabilities_from_diagonal():
    d = DecoherenceMatrix([(0,), (1,)], np.diag([0.5, 0.5]).astype(complex))
    table = history_probabilities(d)
    np.testing.assert_array_equal(table.probabilities, [0.5, 0.5])
    assert table.decoherent and table.warning is None


def test_probabilities_warn_above_threshold():
    v = np.array([[0.5, 0.3], [0.3, 0.5]], dtype=complex)
    d = DecoherenceMatrix([(0,), (1,)], v)
    with pytest.warns(RuntimeWarning, match="exceeds threshold"):
        table = history_probabilities(d, threshold=0.5)
    assert not table.decoherent
    assert table.measure == pytest.approx(0.6)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        history_probabilities(d, threshold=0.7)


def test_negative_diagonal_rejected():
    d = DecoherenceMatrix([(0,), (1,)], np.diag([1.0 + 1e-9, -1e-9]).astype(complex))
    with pytest.raises(ValueError, match="negative"):
        history_probabilities(d)


def test_coarsening_does_not_increase_interference():
    lat = build_lattice(5)
    state = product_state(gaussian_packet(lat, 1.0, 1.2, 0.6), 2)
    first = bin_projectors(number_operator(lat, 0, 2), [-0.5, 0.5, 1.5, 2.5], 2)
    final = bin_projectors(number_operator(lat, 0, 3), [-0.5, 0.5, 1.5, 2.5], 2)
    prop = _free_prop(lat, 2)
    base = decoherence_functional(state, HistorySpec([0.5, 1.3], [first, final]), prop)
    for k in range(final.n_bins - 1):
        merged = decoherence_functional(state, HistorySpec([0.5, 1.3], [first, final.merge(k)]), prop)
        assert merged.offdiagonal_sum() <= base.offdiagonal_sum() + 1e-9


def test_time_translation():
    lat = build_lattice(4)
    state = product_state(gaussian_packet(lat, 1.0, 0.9, 0.3), 2)
    spec = _two_time(lat, 2, 2, [-0.5, 0.5, 1.5, 2.5], times=(0.4, 1.0))
    prop = _free_prop(lat, 2)
    shifted = decoherence_functional(state, spec.shifted(0.8), prop)
    moved = decoherence_functional(evolve(state, prop, 0.8), spec, prop)
    assert np.abs(shifted.values - moved.values).max() <= 1e-9


def test_csv_export():
    d = DecoherenceMatrix([(0, 1), (1, 1)], np.array([[0.25, 0.1j], [-0.1j, 0.75]]))
    text = d.to_csv()
    lines = text.splitlines()
    assert lines[0] == "alpha,alpha_prime,re_D,im_D,epsilon"
    assert lines[1] == "0-1,0-1,0.25,0,1"
    assert lines[2].startswith("0-1,1-1,0,0.1,")
    assert len(lines) == 5


def test_estimator_api(conserved_setup):
    _, state, prop, spec = conserved_setup
    est = DecoherentHistories(hamiltonian=prop, times=spec.times, families=spec.families)
    assert set(est.get_params()) == {"hamiltonian", "times", "families", "threshold"}
    est.fit(state)
    assert est.measure_ <= 1e-10
    assert est.score() == -est.measure_
    assert clone(est).get_params()["threshold"] == 0.1
    with pytest.raises(Exception):
        DecoherentHistories().score()


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), t1=st.floats(0.05, 2.0), dt=st.floats(0.05, 2.0))
def test_structure_invariants_hold_for_random_states(seed, t1, dt):
    rng = np.random.default_rng(seed)
    lat = build_lattice(3)
    amp = rng.normal(size=9) + 1j * rng.normal(size=9)
    from decohist.lattice import ManyBodyState

    state = ManyBodyState(lat, 2, amp / np.linalg.norm(amp))
    h = build_hamiltonian(HamiltonianSpec.square_well(rng.uniform(0, 2), 1), lat, 2)
    spec = _two_time(lat, 2, 1, [-0.5, 0.5, 1.5, 2.5], times=(t1, t1 + dt))
    d = decoherence_functional(state, spec, h)
    for name, (value, ok) in d.invariants().items():
        assert ok, (name, value)
    assert history_probabilities(d, threshold=2.0).probabilities.sum() == pytest.approx(1.0, abs=1e-9)
