import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cavity_readout import inference as inf
from cavity_readout import presets
from cavity_readout.fitting import FitError
from cavity_readout.photon_sim import DOWN, UP, PhotonRecord, SimConfig, simulate_record


def enumerate_posterior(counts, params):
    """P(up) per pulse by summing over every hidden path."""
    n = len(counts)
    rec = PhotonRecord(counts)
    e = inf._emission(rec, params)
    q = params.flip_prob_per_pulse
    num = np.zeros(n)
    total = 0.0
    for path in itertools.product((0, 1), repeat=n):
        p = params.prior_up if path[0] else 1 - params.prior_up
        for k in range(n):
            if k:
                p *= q if path[k] != path[k - 1] else 1 - q
            p *= e[k, path[k]]
        total += p
        num += p * np.array(path)
    return num / total


# --- g2 ---------------------------------------------------------------------

def test_g2_constant_record_is_one():
    curve = inf.g2_discrete(PhotonRecord(np.full(1000, 3)), 100)
    assert np.allclose(curve.values, 1.0, atol=1e-12)


def test_g2_alternating_telegraph():
    counts = np.tile([1, 0], 5000)
    curve = inf.g2_discrete(PhotonRecord(counts), 50)
    assert np.allclose(curve.odd[1], 0.0)
    assert np.allclose(curve.even[1], 2.0)


def test_g2_fft_matches_direct_sum():
    rng = np.random.default_rng(0)
    counts = rng.poisson(0.7, 4000)
    fft = inf._lagged_products(counts, 1000)
    direct = np.array([np.dot(counts[: len(counts) - k], counts[k:]) for k in range(1001)])
    assert np.array_equal(fft, direct)


def test_g2_of_poisson_noise_is_flat():
    n = 100_000
    counts = np.random.default_rng(5).poisson(1.0, n)
    curve = inf.g2_discrete(PhotonRecord(counts), 300)
    assert np.all(np.abs(curve.values[1:] - 1.0) < 5 / math.sqrt(n))
    assert np.all(curve.values >= 0)


def test_g2_errors():
    with pytest.raises(ValueError):
        inf.g2_discrete(PhotonRecord(np.zeros(100, int)), 10)
    with pytest.raises(ValueError):
        inf.g2_discrete(PhotonRecord(np.ones(100, int)), 50)


# --- n0 ---------------------------------------------------------------------

def synthetic_curve(n0, amplitude=1.0, max_offset=4000, common=None):
    n = np.arange(max_offset + 1)
    sign = np.where(n % 2 == 0, 1.0, -1.0)
    g = 1.0 + sign * amplitude * np.exp(-n / n0)
    if common is not None:
        g = g * np.exp(-n / common)
    return inf.G2Curve(n, g, np.full(len(n), 10**6))


@pytest.mark.parametrize("mode", ["even", "odd", "difference"])
def test_fit_n0_self_fit(mode):
    fit = inf.fit_n0(synthetic_curve(500.0), mode)
    assert fit.n0 == pytest.approx(500.0, rel=0.01)


def test_difference_mode_cancels_common_decay():
    curve = synthetic_curve(500.0, common=1e4)
    diff = inf.fit_n0(curve, "difference")
    even = inf.fit_n0(curve, "even")
    assert diff.n0 == pytest.approx(500.0, rel=0.05)
    assert even.n0 < diff.n0


def test_fit_n0_rejects_white_noise():
    rng = np.random.default_rng(1)
    n = np.arange(2001)
    curve = inf.G2Curve(n, 1.0 + 0.1 * rng.standard_normal(len(n)), np.full(len(n), 1000))
    with pytest.raises(FitError):
        inf.fit_n0(curve, "difference")


def test_fit_n0_unknown_mode():
    with pytest.raises(ValueError):
        inf.fit_n0(synthetic_curve(50.0), "both")


def test_cyclicity_from_n0_values():
    assert inf.cyclicity_from_n0(1000, 0.5) == pytest.approx(500.25, abs=1e-3)
    assert inf.cyclicity_from_n0(1, 0.5) == pytest.approx(0.791, abs=1e-3)
    assert inf.cyclicity_from_n0(1e9, 0.5) / (0.5 * 1e9) == pytest.approx(1.0, rel=1e-8)
    with pytest.raises(ValueError):
        inf.cyclicity_from_n0(0.0, 0.5)


def test_round_trip_recovers_moderate_cyclicity():
    cfg = SimConfig(10**6, cyclicity=100, dark_counts_per_window=0.001, seed=21)
    c, fit, _ = inf.estimate_cyclicity(simulate_record(cfg), cfg.p_ex)
    assert c == pytest.approx(100, rel=0.2)
    assert fit.mode == "difference" and fit.n_points >= 5


# --- smoothing --------------------------------------------------------------

@st.composite
def small_problems(draw):
    n = draw(st.integers(1, 10))
    dark = draw(st.sampled_from([0.0, 0.01, 0.3]))
    bright = dark + draw(st.floats(0.05, 3.0))
    # a non-zero flip probability keeps every record possible when dark == 0
    params = inf.HmmParams(draw(st.floats(1e-3, 0.5)), bright, dark, draw(st.floats(0.05, 0.95)))
    counts = draw(st.lists(st.integers(0, 3), min_size=n, max_size=n))
    return np.array(counts), params


@settings(max_examples=150, deadline=None)
@given(small_problems())
def test_smoother_matches_enumeration(problem):
    counts, params = problem
    post = inf.bayes_smoother(PhotonRecord(counts), params)
    assert np.allclose(post, enumerate_posterior(counts, params), atol=1e-10, rtol=0)
    assert np.all((post >= 0) & (post <= 1))


def test_single_photon_forces_state():
    counts = np.zeros(20, int)
    counts[6] = 1
    post = inf.bayes_smoother(PhotonRecord(counts), inf.HmmParams(0.01, 0.5, 0.0))
    assert post[6] == 1.0
    counts[6], counts[7] = 0, 1
    assert inf.bayes_smoother(PhotonRecord(counts), inf.HmmParams(0.01, 0.5, 0.0))[7] == 0.0


def test_all_zero_record_is_nearly_uninformative():
    post = inf.bayes_smoother(PhotonRecord(np.zeros(2000, int)), inf.HmmParams(1e-4, 0.015, 0.001))
    assert np.all(np.abs(post - 0.5) < 1e-2)
    # reversing time and swapping the states maps the model onto itself
    assert np.allclose(post, 1 - post[::-1], atol=1e-12)


def test_degenerate_params_warn_and_return_prior():
    with pytest.warns(RuntimeWarning):
        post = inf.bayes_smoother(PhotonRecord(np.ones(10, int)), inf.HmmParams(0.1, 0.2, 0.2, 0.3))
    assert np.all(post == 0.3)


def test_hmm_params_validation():
    with pytest.raises(ValueError):
        inf.HmmParams(0.1, 0.1, 0.2)
    with pytest.raises(ValueError):
        inf.HmmParams(1.2, 1.0, 0.0)


def test_smoother_is_calibrated():
    # pulses inside one posterior bin come in correlated runs, so pool several records
    posts, ups = [], []
    for seed in range(5):
        cfg = presets.sim_config_for("ion1", 10**6, seed=seed)
        rec = simulate_record(cfg)
        posts.append(inf.bayes_smoother(rec, inf.HmmParams.from_sim(cfg)))
        ups.append(rec.truth == UP)
    post, up = np.concatenate(posts), np.concatenate(ups)
    for lo in np.arange(0.0, 1.0, 0.05):
        sel = (post >= lo) & (post < lo + 0.05)
        if sel.sum() < 2000:
            continue
        assert lo - 0.03 <= up[sel].mean() <= lo + 0.08


# --- readout ----------------------------------------------------------------

def test_adaptive_readout_tiles_record():
    cfg = presets.sim_config_for("ion2", 100_000, seed=2)
    rec = simulate_record(cfg)
    res = inf.adaptive_ml_readout(rec, inf.HmmParams.from_sim(cfg), 0.9, 500)
    starts = np.array([r.start_pulse for r in res])
    durations = np.array([r.duration_pulses for r in res])
    assert starts[0] == 0
    assert np.array_equal(starts[1:], starts[:-1] + durations[:-1])
    assert starts[-1] + durations[-1] <= len(rec)
    assert len(rec) - (starts[-1] + durations[-1]) < 500
    assert all(0.5 <= r.confidence <= 1 and r.duration_pulses >= 1 for r in res)
    assert all(r.terminated_by == "timeout" or r.confidence >= 0.9 for r in res)


def test_noiseless_readout_stops_at_first_photon():
    counts = np.zeros(40, int)
    counts[[5, 12, 31]] = 1
    res = inf.adaptive_ml_readout(PhotonRecord(counts), inf.HmmParams(0.0, 0.5, 0.0), 0.99, 100)
    assert [r.duration_pulses for r in res] == [6, 7, 19]
    assert [r.state for r in res] == [DOWN, UP, DOWN]
    assert all(r.confidence == 1.0 for r in res)


def test_readout_rejects_bad_target():
    with pytest.raises(ValueError):
        inf.adaptive_ml_readout(PhotonRecord(np.zeros(4, int)), inf.HmmParams(0.0, 0.5, 0.0), 1.0, 10)


def test_ion1_readout_statistics():
    cfg = presets.sim_config_for("ion1", 10**6, seed=31)
    rec = simulate_record(cfg)
    res = inf.adaptive_ml_readout(rec, inf.HmmParams.from_sim(cfg), 0.946, 2000)
    mean_s = np.mean([r.duration_pulses for r in res]) * cfg.t_rep
    assert 10e-3 <= mean_s <= 40e-3
    assert inf.consecutive_agreement(res) >= 0.85


def test_window_tie_falls_back_to_previous():
    counts = np.array([1, 0, 0, 0, 0, 1, 0, 0])
    wr = inf.fixed_window_readout(PhotonRecord(counts), 2)
    assert wr.states.tolist() == [UP, UP, DOWN, DOWN]
    single = inf.fixed_window_readout(PhotonRecord(np.zeros(4, int)), 1)
    assert single.states.tolist() == [UP] * 4
    rnd = inf.fixed_window_readout(PhotonRecord(np.zeros(400, int)), 2, ties="random", seed=1)
    assert 0 < rnd.states.mean() < 1


def test_window_histogram_and_fidelity():
    cfg = SimConfig(20000, p_ex=1.0, eta=1.0, cyclicity=1e6, seed=4)
    rec = simulate_record(cfg)
    wr = inf.fixed_window_readout(rec, 10)
    assert wr.fidelity == 1.0
    values, counts = wr.histogram
    assert counts.sum() == 2000 and set(values.tolist()) <= {-5, 5}


def test_window_fidelity_grows_with_cyclicity():
    fids = []
    for c in (30, 200, 1500):
        cfg = SimConfig(2 * 10**6, cyclicity=c, dark_counts_per_window=0.001, seed=8)
        fids.append(inf.fixed_window_readout(simulate_record(cfg), 400).fidelity)
    assert fids[0] < fids[1] < fids[2]


def test_readout_metrics():
    m = inf.readout_metrics(0.028, 1500, 0.5, 14, 0.933)
    assert m.photons_needed == 1
    assert m.f_avg == pytest.approx(1 - 1 / 42, abs=1e-12)
    assert m.t_meas_pulses == pytest.approx(1 / (0.5 * 0.028))
    assert inf.readout_metrics(0.028, 1500, 0.5, 14, 0.99).photons_needed == 2
    assert not inf.readout_metrics(0.028, 1500, 0.5, 14, 0.99).target_reachable
    with pytest.raises(ValueError, match="cyclicity-limited"):
        inf.readout_metrics(0.01, 100, 0.5, 14, 0.9)


def test_improved_device_projection():
    d = presets.IMPROVED_DEVICE
    stack = d["stack"]
    m = inf.readout_metrics(stack.eta, d["cyclicity"], d["p_ex"], d["snr"], 0.95)
    assert m.f_avg == pytest.approx(0.996, abs=0.001)
    assert m.t_meas_pulses * stack.t_rep == pytest.approx(50e-6, rel=0.1)
