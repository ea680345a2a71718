import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cavity_readout import photon_sim as ps
from cavity_readout import presets


def test_same_seed_same_record():
    cfg = ps.SimConfig(20000, cyclicity=50, dark_counts_per_window=0.01, t1_dark=0.5, seed=11)
    assert ps.records_equal(ps.simulate_record(cfg), ps.simulate_record(cfg))
    other = ps.simulate_record(ps.SimConfig(20000, cyclicity=50, dark_counts_per_window=0.01, t1_dark=0.5, seed=12))
    assert not ps.records_equal(ps.simulate_record(cfg), other)


@pytest.mark.parametrize("kwargs", [
    {"n_pulses": 3}, {"n_pulses": 0}, {"n_pulses": 4, "p_ex": 1.5}, {"n_pulses": 4, "cyclicity": 0.5},
    {"n_pulses": 4, "eta": -0.1}, {"n_pulses": 4, "t1_dark": 0.0}, {"n_pulses": 4, "dark_counts_per_window": -1},
])
def test_invalid_configs(kwargs):
    with pytest.raises(ValueError):
        ps.SimConfig(**kwargs)


def test_noiseless_counts_follow_truth():
    cfg = ps.SimConfig(10000, p_ex=1.0, eta=1.0, cyclicity=40, seed=3)
    rec = ps.simulate_record(cfg)
    bright = (rec.truth == ps.UP) == (rec.channel == 0)
    assert np.array_equal(rec.counts, bright.astype(int))


def test_pump_flips_only_on_bright_pulses():
    rec = ps.simulate_record(ps.SimConfig(200000, cyclicity=20, seed=5))
    k = np.flatnonzero(rec.truth[1:] != rec.truth[:-1])
    assert len(k) > 100
    # the flip happens on pulse k, where the state before the flip was bright
    assert np.all((rec.truth[k] == ps.UP) == (k % 2 == 0))


def test_mean_dwell_matches_closed_form():
    cfg = ps.SimConfig(400000, cyclicity=50, t1_dark=0.3, seed=9)
    rec = ps.simulate_record(cfg)
    flips = np.count_nonzero(rec.truth[1:] != rec.truth[:-1])
    expected_flips = (cfg.n_pulses - 1) / ps.expected_dwell(cfg)
    assert flips == pytest.approx(expected_flips, rel=5 / math.sqrt(expected_flips))


def test_count_rate_and_dark_counts():
    cfg = ps.SimConfig(400000, cyclicity=30, eta=0.05, dark_counts_per_window=0.02, seed=1)
    rec = ps.simulate_record(cfg)
    bright = (rec.truth == ps.UP) == (rec.channel == 0)
    mean_bright = rec.counts[bright].mean()
    mean_dark = rec.counts[~bright].mean()
    n = bright.sum()
    assert mean_bright == pytest.approx(cfg.p_ex * cfg.eta + 0.02, abs=5 * math.sqrt(0.05 / n))
    assert mean_dark == pytest.approx(0.02, abs=5 * math.sqrt(0.02 / (len(rec) - n)))


def test_snr_round_trip():
    d = ps.dark_counts_for_snr(0.5, 0.028, 14.0)
    assert ps.effective_snr(ps.SimConfig(2, dark_counts_per_window=d)) == pytest.approx(14.0)
    assert math.isinf(ps.effective_snr(ps.SimConfig(2)))
    with pytest.raises(ValueError):
        ps.dark_counts_for_snr(0.5, 0.028, 0.0)


def test_preset_sim_config_uses_preset_snr():
    cfg = presets.sim_config_for("ion1", 1000, seed=4)
    assert ps.effective_snr(cfg) == pytest.approx(14.0)
    assert cfg.cyclicity == 1500 and cfg.eta == 0.028 and cfg.seed == 4


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 200).map(lambda n: 2 * n), st.booleans(), st.integers(0, 2**32))
def test_csv_and_json_round_trip(tmp_path_factory, n, with_truth, seed):
    cfg = ps.SimConfig(n, cyclicity=5, eta=0.5, dark_counts_per_window=0.3, seed=seed)
    rec = ps.simulate_record(cfg)
    if not with_truth:
        rec = ps.PhotonRecord(rec.counts, None, cfg)
    d = tmp_path_factory.mktemp("rec")
    ps.save_record(rec, d / "r.csv")
    ps.save_record(rec, d / "r.json")
    assert ps.records_equal(rec, ps.load_record(d / "r.csv"))
    back = ps.load_record(d / "r.json")
    assert ps.records_equal(rec, back) and back.config == cfg


def test_csv_rejects_bad_channel_order(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("pulse_index,channel,counts,truth\n0,B,1,\n1,A,0,\n")
    with pytest.raises(ValueError):
        ps.read_record_csv(path)


def test_config_dict_round_trip_with_infinite_t1():
    cfg = ps.SimConfig(10, seed=3)
    d = cfg.to_dict()
    assert d["t1_dark"] is None
    assert ps.SimConfig.from_dict(d) == cfg
    with pytest.raises(ValueError):
        ps.SimConfig.from_dict({**d, "bogus": 1})


def test_rabi_probability_shape():
    t = np.array([0.0, 0.25, 0.5, 1.0])
    assert np.allclose(ps.rabi_probability(t, 1.0, math.inf), [0.0, 0.5, 1.0, 0.0])
    damped = ps.rabi_probability(10.5, 1.0, 1.0)
    assert damped == pytest.approx(0.5, abs=1e-12)


def test_rabi_readout_contrast():
    durations = np.linspace(0, 2, 9)
    cfg = ps.RabiConfig(durations, 1.0, readout_fidelity=0.9, shots_per_point=200000, seed=2)
    res = ps.simulate_rabi(cfg)
    e = 2 * 0.1 * 0.9
    expected = res.p_up_true * (1 - 2 * e) + e
    assert np.all(np.abs(res.p_up - expected) < 5 * res.stderr + 1e-3)


def test_efficiency_stack_defaults():
    s = presets.EfficiencyStack()
    assert s.eta_cav == 0.5
    assert s.eta == pytest.approx(0.1675)
    assert s.t_rep == pytest.approx(60e-6 * 6.6e4 / 5e5)


def test_unknown_preset():
    with pytest.raises(KeyError):
        presets.get_preset("ion9")


def test_model_config_round_trip(tmp_path):
    import json

    gg, ge = presets.default_tensors()
    m = presets.fitted_coupling()
    path = tmp_path / "model.json"
    path.write_text(json.dumps({
        "ground": presets.tensor_to_dict(gg), "excited": presets.tensor_to_dict(ge),
        "coupling": presets.coupling_to_dict(m), "preset": "ion2",
    }))
    cfg = presets.load_model_config(path)
    assert np.allclose(cfg["ground"].matrix, gg.matrix) and np.allclose(cfg["excited"].matrix, ge.matrix)
    assert cfg["coupling"].g_perp == pytest.approx(m.g_perp)
    assert cfg["ion"] == presets.get_preset("ion2").params
    path.write_text(json.dumps({"grund": {}}))
    with pytest.raises(ValueError):
        presets.load_model_config(path)


def test_default_tensor_line_splittings():
    from cavity_readout import spin_model as sm

    gg, ge = presets.default_tensors()
    t = sm.transition_frequencies(gg, ge, presets.DEFAULT_REFERENCE.with_magnitude(1.0))
    assert abs(t.c - t.d) / 1e6 == pytest.approx(13.1, abs=0.05)
    assert abs(t.a - t.b) / 1e6 == pytest.approx(2.5, abs=0.05)
    assert np.linalg.det(gg.matrix) * np.linalg.det(ge.matrix) < 0
