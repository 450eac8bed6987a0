import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from noon_faraday import metrology as met
from noon_faraday import polarimetry as pol
from noon_faraday import tomography as tm

GRID = np.linspace(0.0, 0.06, 20)
TRUTH = pol.make_noon_state(0.22, pol.noon_fidelity_knob(0.90, 0.02), 0.02)


@pytest.fixture(scope="module")
def poisson_fit(channel70):
    ds = tm.simulate_counts(TRUTH, channel70, GRID, 1000.0, 300.0, seed=5)
    return ds, tm.reconstruct(ds, channel70)


# -- dataset IO ------------------------------------------------------------


def test_csv_round_trip(channel70):
    ds = tm.simulate_counts(TRUTH, channel70, GRID[:10], 50.0, 2.0, seed=1, include_singles=True, temperature=70.0)
    back = tm.CoincidenceDataset.from_csv(ds.to_csv())
    np.testing.assert_array_equal(back.counts, ds.counts)
    np.testing.assert_array_equal(back.singles, ds.singles)
    np.testing.assert_allclose(back.B, ds.B, rtol=1e-15)
    assert back.temperature == 70.0 and back.R0 == 50.0
    assert ds.to_csv().splitlines()[2] == "B_mT,t_int_s,N_HH,N_HV,N_VV,N_H,N_V"
    # a parsed file is written back byte for byte
    assert tm.CoincidenceDataset.from_csv(back.to_csv()).to_csv() == back.to_csv()
    odd = "B_mT,t_int_s,N_HH,N_HV,N_VV\n" + "".join(f"{b},1.5,1,2,3\n" for b in (0.1, 0.7, 2.9, 33.3, 57.1))
    assert tm.CoincidenceDataset.from_csv(odd).to_csv() == odd


@pytest.mark.parametrize("text, line", [
    ("B,t,N_HH,N_HV,N_VV\n1,1,1,1,1\n", 1),
    ("B_mT,t_int_s,N_HH,N_HV,N_VV\n1,1,1,1,1\n2,1,1,1\n", 3),
    ("B_mT,t_int_s,N_HH,N_HV,N_VV\n1,1,1,1,1\n\n2,1,x,1,1\n", 4),
    ("# note\nB_mT,t_int_s,N_HH,N_HV,N_VV\n1,1,-1,1,1\n", 3),
    ("B_mT,t_int_s,N_HH,N_HV,N_VV\n1,0,1,1,1\n", 2),
    ("B_mT,t_int_s,N_HH,N_HV,N_VV\n1,1,1,1,1\n1,1,1,1,1\n", 3),
    ("B_mT,t_int_s,N_HH,N_HV,N_VV\n1,1,nan,1,1\n", 2),
    ("# temperature_C=warm\n", 1),
])
def test_malformed_csv_line_numbers(text, line):
    with pytest.raises(tm.DatasetFormatError) as err:
        tm.CoincidenceDataset.from_csv(text)
    assert err.value.line == line
    assert str(err.value).startswith(f"line {line}:")


def test_empty_csv():
    with pytest.raises(tm.DatasetFormatError):
        tm.CoincidenceDataset.from_csv("")
    with pytest.raises(tm.DatasetFormatError):
        tm.CoincidenceDataset.from_csv("B_mT,t_int_s,N_HH,N_HV,N_VV\n")


def test_dataset_invariants():
    with pytest.raises(ValueError):
        tm.CoincidenceDataset([0.0, 0.0], [1, 1], np.ones((2, 3)))
    with pytest.raises(ValueError):
        tm.CoincidenceDataset([0.0, 0.1], [1, -1], np.ones((2, 3)))
    with pytest.raises(ValueError):
        tm.CoincidenceDataset([0.0, 0.1], [1, 1], -np.ones((2, 3)))


# -- simulation ------------------------------------------------------------


def test_simulation_deterministic(channel70):
    a = tm.simulate_counts(TRUTH, channel70, GRID, 100.0, 10.0, seed=9)
    b = tm.simulate_counts(TRUTH, channel70, GRID, 100.0, 10.0, seed=9)
    assert a.to_csv() == b.to_csv()


def test_large_counts_follow_probabilities(channel70):
    R0, t = 1000.0, 1000.0
    ds = tm.simulate_counts(TRUTH, channel70, GRID, R0, t, seed=2)
    lam = tm.expected_counts(TRUTH, channel70, GRID, R0, np.full(GRID.size, t))
    big = lam >= 1e4
    assert big.sum() > 20
    z = np.abs(ds.counts[big] - lam[big]) / np.sqrt(lam[big])
    # 60 outcomes: a few may sit near 3 sigma by chance, none far beyond it
    assert np.mean(z <= 3.0) >= 0.95 and z.max() < 4.5
    rate = ds.counts[big] / (R0 * t)
    np.testing.assert_allclose(rate, lam[big] / (R0 * t), atol=float(3 * np.sqrt(lam.max()) / (R0 * t)))


def test_monte_carlo_mean(channel70):
    B = GRID[7:8]
    # lambda of a few hundred keeps the standard error of the mean well under 1%
    lam = tm.expected_counts(TRUTH, channel70, B, 10.0, [800.0])[0]
    assert lam.min() > 250
    draws = np.array([tm.simulate_counts(TRUTH, channel70, B, 10.0, 800.0, seed=s).counts[0] for s in range(1000)])
    np.testing.assert_allclose(draws.mean(axis=0), lam, rtol=0.01)


def test_flux_time_product_only(channel70):
    a = tm.expected_counts(TRUTH, channel70, GRID, 100.0, np.full(GRID.size, 3.0))
    b = tm.expected_counts(TRUTH, channel70, GRID, 300.0, np.full(GRID.size, 1.0))
    np.testing.assert_allclose(a, b, rtol=1e-14)


# -- parametrization -------------------------------------------------------


@given(st.lists(st.floats(-2, 2), min_size=10, max_size=10))
def test_parametrization_is_physical(p):
    p = np.array(p)
    p[:4] = np.abs(p[:4]) + 0.1
    A = tm.params_to_matrix(p)
    assert np.min(np.linalg.eigvalsh(A)) >= -1e-12
    rho = tm.exchange_to_circ(A / np.trace(A).real)
    s = pol.singlet_vector()
    # no coherence between the singlet and the symmetric subspace
    sym = np.eye(4) - np.outer(s, s)
    assert np.max(np.abs(sym @ rho @ np.outer(s, s))) < 1e-12
    back = tm.matrix_to_params(A)
    np.testing.assert_allclose(tm.params_to_matrix(back), A, atol=1e-9)


def test_exchange_basis_unitary():
    V = tm.EXCHANGE_BASIS
    np.testing.assert_allclose(V.conj().T @ V, np.eye(4), atol=1e-15)
    np.testing.assert_allclose(tm.circ_to_exchange(tm.exchange_to_circ(np.diag([1.0, 2, 3, 4]))),
                               np.diag([1.0, 2, 3, 4]), atol=1e-14)


# -- reconstruction --------------------------------------------------------


def test_noiseless_recovery(channel70):
    truth = pol.make_noon_state(0.22)
    ds = tm.simulate_counts(truth, channel70, GRID, 1000.0, 300.0, noiseless=True)
    res = tm.reconstruct(ds, channel70)
    assert res.chi2 < 1e-6
    assert tm.fidelity_to(res, truth) > 0.9999
    assert res.R0 == pytest.approx(1000.0, rel=1e-6)
    assert res.identifiable and res.converged


def test_poisson_recovery_and_metrics(poisson_fit):
    ds, res = poisson_fit
    assert tm.fidelity_to(res, TRUTH) >= 0.99
    want = pol.state_metrics(TRUTH, 0.22)
    for k, v in want.items():
        assert res.metrics[k] == pytest.approx(v, abs=0.02)
    assert res.phi == pytest.approx(0.22, abs=0.02)
    assert np.isfinite(res.chi2)
    res.state  # validated TwoPhotonState


def test_threads_do_not_change_result(poisson_fit, channel70):
    ds, res = poisson_fit
    again = tm.reconstruct(ds, channel70, threads=4)
    assert again.to_dict() == res.to_dict()


def test_basis_covariant(channel70):
    hv = pol.TwoPhotonState(TRUTH.hv, pol.HV)
    a = tm.simulate_counts(TRUTH, channel70, GRID, 1000.0, 300.0, noiseless=True)
    b = tm.simulate_counts(hv, channel70, GRID, 1000.0, 300.0, noiseless=True)
    np.testing.assert_allclose(a.counts, b.counts, rtol=1e-12)
    ra, rb = tm.reconstruct(a, channel70), tm.reconstruct(b, channel70)
    assert np.max(np.abs(ra.state.circ - rb.state.circ)) < 1e-8


def test_chi2_invariant_under_flux_time_rescaling(channel70):
    ds = tm.simulate_counts(TRUTH, channel70, GRID, 1000.0, 300.0, seed=4)
    scaled = tm.CoincidenceDataset(ds.B, ds.t_int / 5.0, ds.counts)
    a, b = tm.reconstruct(ds, channel70), tm.reconstruct(scaled, channel70)
    assert b.chi2 == pytest.approx(a.chi2, rel=1e-6)
    assert b.R0 == pytest.approx(5.0 * a.R0, rel=1e-6)


def test_too_few_points_and_flat_directions(channel70):
    ds = tm.simulate_counts(TRUTH, channel70, GRID[:5], 1000.0, 300.0)
    with pytest.raises(tm.TomographyError):
        tm.reconstruct(ds, channel70)
    narrow = tm.simulate_counts(TRUTH, channel70, np.linspace(0, 0.005, 10), 1000.0, 300.0, seed=1)
    assert not tm.reconstruct(narrow, channel70).identifiable
    # same span, pure truth: flagged regardless of the rank of the estimate
    pure = tm.simulate_counts(pol.make_noon_state(0.22), channel70, np.linspace(0, 0.005, 10), 1000.0, 300.0)
    assert not tm.reconstruct(pure, channel70).identifiable


def test_identifiability_depends_on_counts(channel70):
    wide = tm.simulate_counts(TRUTH, channel70, GRID, 1000.0, 300.0, seed=1)
    assert tm.reconstruct(wide, channel70).identifiable
    starved = tm.simulate_counts(TRUTH, channel70, GRID, 1.0, 0.3, seed=1)
    assert not tm.reconstruct(starved, channel70).identifiable


def test_singles_joint_fit(channel70):
    ds = tm.simulate_counts(TRUTH, channel70, GRID, 1000.0, 300.0, seed=3, include_singles=True)
    res = tm.reconstruct(ds, channel70, use_singles=True)
    assert tm.fidelity_to(res, TRUTH) >= 0.99
    with pytest.raises(tm.TomographyError):
        tm.reconstruct(tm.simulate_counts(TRUTH, channel70, GRID, 1000.0, 300.0), channel70, use_singles=True)


@pytest.mark.slow
def test_fidelity_bias_shrinks_with_counts(channel70):
    medians = []
    for lam in (1e3, 1e4, 1e5):
        t = lam / 1000.0 * 3.0  # about lam/3 per outcome per point at R0 = 1000
        bias = []
        for seed in range(6):
            ds = tm.simulate_counts(TRUTH, channel70, GRID, 1000.0, t, seed=seed)
            bias.append(1.0 - tm.fidelity_to(tm.reconstruct(ds, channel70), TRUTH))
        medians.append(np.median(bias))
    assert medians[0] > medians[1] > medians[2]


# -- FI band ---------------------------------------------------------------


def test_toy_band_matches_linear_propagation(channel70):
    p0, sigma = 0.85, 0.01

    def fi(x):
        return met.pair_fisher(pol.make_noon_state(0.22, x[0]), channel70, 0.037).total

    lo, hi = tm.constrained_extremes(fi, lambda x: ((x[0] - p0) / sigma) ** 2, np.array([p0]), 0.0, 1.0)
    slope = (fi([p0 + 1e-6]) - fi([p0 - 1e-6])) / 2e-6
    assert (hi - lo) / 2 == pytest.approx(abs(slope) * sigma, rel=0.10)
    assert lo <= fi([p0]) <= hi


def test_band_contains_estimate_and_collapses(poisson_fit, channel70):
    ds, res = poisson_fit
    band = tm.fi_error_band(res, ds, channel70, 0.037, delta=1.0)
    assert band["fi_min"] <= band["fi"] <= band["fi_max"]
    assert band["fi_max"] > band["fi_min"]
    zero = tm.fi_error_band(res, ds, channel70, 0.037, delta=0.0)
    assert zero["fi_max"] - zero["fi_min"] <= 1e-6 * zero["fi"]
    with pytest.raises(ValueError):
        tm.fi_error_band(res, ds, channel70, 0.037, delta=-1.0)


@pytest.mark.slow
def test_band_narrows_with_counts(channel70):
    narrower = 0
    for seed in range(10):
        widths = []
        for t in (300.0, 1200.0):
            ds = tm.simulate_counts(TRUTH, channel70, GRID, 1000.0, t, seed=seed)
            res = tm.reconstruct(ds, channel70)
            band = tm.fi_error_band(res, ds, channel70, 0.037)
            widths.append(band["fi_max"] - band["fi_min"])
        narrower += widths[1] < widths[0]
    assert narrower == 10
