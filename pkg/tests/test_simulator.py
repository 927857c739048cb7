import json

import numpy as np
import pytest

from conftest import inside_tetrahedron
from screamloc.audio_io import load_wav
from screamloc.errors import DurationTooShort, NyquistViolation
from screamloc.features import stft
from screamloc.localizer import Bounds, MicArray, expected_tdoa, gradient_descent_localize, srp_phat_init
from screamloc.simulator import (
    Echo,
    Scene,
    SourceSpec,
    fractional_delay,
    ground_truth_tdoas,
    load_scene,
    simulate,
    synth_source,
    write_recording,
)
from screamloc.tdoa import correlate_pairs, gcc, gcc_phat, measurement_from_pair, tdoa_matrix

SR = 16000


def test_white_noise_deterministic():
    a = synth_source(SourceSpec("white_noise"), 0.5, SR, seed=11)
    b = synth_source(SourceSpec("white_noise"), 0.5, SR, seed=11)
    c = synth_source(SourceSpec("white_noise"), 0.5, SR, seed=12)
    assert a.samples.tobytes() == b.samples.tobytes()
    assert a.samples.tobytes() != c.samples.tobytes()


@pytest.mark.parametrize("kind", ["white_noise", "harmonic_burst", "chirp"])
def test_peak_normalized(kind):
    x = synth_source(SourceSpec(kind), 0.5, SR, seed=1).samples
    assert np.max(np.abs(x)) == pytest.approx(0.9, abs=1e-15)


def test_harmonic_burst_spectral_peaks():
    clip = synth_source(SourceSpec("harmonic_burst", f0_hz=700, n_harmonics=3, decay_s=5.0), 1.0, SR)
    mag = np.abs(stft(clip).bins).mean(axis=0)
    freqs = np.arange(mag.shape[0]) * SR / 512
    peaks = [i for i in range(1, len(mag) - 1) if mag[i] > mag[i - 1] and mag[i] >= mag[i + 1]]
    top3 = sorted(sorted(peaks, key=lambda i: mag[i])[-3:])
    bin_hz = SR / 512
    for k, i in zip((700, 1400, 2100), top3):
        assert abs(freqs[i] - k) <= bin_hz / 2


def test_nyquist_violation():
    with pytest.raises(NyquistViolation):
        synth_source(SourceSpec("harmonic_burst", f0_hz=3000, n_harmonics=3), 0.1, SR)
    with pytest.raises(NyquistViolation):
        synth_source(SourceSpec("chirp", chirp_end_hz=8000), 0.1, SR)


def test_fractional_delay_integer_matches_shift(rng):
    x = rng.normal(size=1000)
    y = fractional_delay(x, 7)
    np.testing.assert_allclose(y[7:], x[:-7], atol=1e-12)
    np.testing.assert_allclose(y[:7], 0, atol=1e-12)


def test_fractional_delay_half_sample_on_sinusoid():
    t = np.arange(4096)
    f = 0.01
    y = fractional_delay(np.sin(2 * np.pi * f * t), 0.5)
    mid = slice(1000, 3000)
    np.testing.assert_allclose(y[mid], np.sin(2 * np.pi * f * (t[mid] - 0.5)), atol=5e-3)


def test_equidistant_channels_identical(tetra):
    rec, truth = simulate(Scene(tetra, tetra.centroid, duration_s=0.3, seed=5))
    for ch in rec.channels[1:]:
        np.testing.assert_allclose(ch.samples, rec.channels[0].samples, atol=1e-9)
    assert all(abs(t) < 1e-15 for _, t in truth.tdoas)


def test_ten_and_twenty_metre_pair():
    array = MicArray(("A", "B"), [[10.0, 0, 0], [-20.0, 0, 0]])
    rec, truth = simulate(Scene(array, np.zeros(3), duration_s=0.5, seed=2))
    assert abs(truth.tau("A", "B")) == pytest.approx(10 / 343, abs=1e-15)
    assert round(abs(truth.tau("A", "B")), 6) == 0.029155
    (m,) = tdoa_matrix(rec, array)
    assert abs(m.tau_s - truth.tau("A", "B")) <= 1 / (2 * SR)


def test_snr_zero_db_per_channel(tetra):
    base = Scene(tetra, [1.0, 2.0, -1.0], duration_s=1.0, seed=9)
    clean, _ = simulate(base)
    noisy, _ = simulate(Scene(tetra, [1.0, 2.0, -1.0], snr_db=0.0, duration_s=1.0, seed=9))
    for c, n in zip(clean.channels, noisy.channels):
        noise = n.samples - c.samples
        snr = 10 * np.log10(np.mean(c.samples ** 2) / np.mean(noise ** 2))
        assert abs(snr) <= 0.2


def test_noise_independent_across_channels(tetra):
    clean, _ = simulate(Scene(tetra, tetra.centroid, duration_s=0.5, seed=3))
    noisy, _ = simulate(Scene(tetra, tetra.centroid, snr_db=0.0, duration_s=0.5, seed=3))
    n0 = noisy.channels[0].samples - clean.channels[0].samples
    n1 = noisy.channels[1].samples - clean.channels[1].samples
    assert abs(np.corrcoef(n0, n1)[0, 1]) < 0.05


def test_ground_truth_tdoas(tetra, rng):
    assert all(t == 0 for _, t in ground_truth_tdoas(Scene(tetra, np.zeros(3))))
    src = rng.uniform(-5, 5, size=3)
    entries = ground_truth_tdoas(Scene(tetra, src))
    assert len(entries) == 6
    for (i, j), t in entries:
        assert t == expected_tdoa(src, tetra.position(i), tetra.position(j))


def test_truth_sign_matches_pick_tdoa(tetra):
    # convention pin: a mic nearer the source has the earlier arrival
    scene = Scene(tetra, tetra.position("1") * 0.6, duration_s=0.5, seed=4)
    rec, truth = simulate(scene)
    ms = {(m.mic_i, m.mic_j): m for m in tdoa_matrix(rec, tetra)}
    assert truth.tau("1", "2") < 0
    assert ms[("1", "2")].tau_s < 0
    assert abs(ms[("1", "2")].tau_s - truth.tau("1", "2")) <= 1 / (2 * SR)


def test_determinism(tetra):
    scene = Scene(tetra, [1, 2, 3], SourceSpec("harmonic_burst", breath_level=0.2),
                  snr_db=10, echo=Echo(0.01, 0.3), duration_s=0.5, seed=21)
    a, _ = simulate(scene)
    b, _ = simulate(scene)
    for x, y in zip(a.channels, b.channels):
        assert x.samples.tobytes() == y.samples.tobytes()


def test_duration_too_short(tetra):
    with pytest.raises(DurationTooShort):
        simulate(Scene(tetra, [200.0, 0, 0], duration_s=1.0))


def test_scene_validation(tetra):
    with pytest.raises(ValueError):
        Scene(tetra, [600.0, 0, 0])
    with pytest.raises(ValueError):
        Scene(tetra, [0, 0, 0], snr_db=float("inf"))
    with pytest.raises(ValueError):
        Echo(0.01, 1.0)


def test_echo_phat_within_one_sample():
    array = MicArray(("A", "B"), [[0.0, 0, 0], [3.0, 0, 0]])
    scene = Scene(array, [-1.0, 2.0, 0.5], echo=Echo(0.025, 0.6), duration_s=1.0, seed=6)
    rec, truth = simulate(scene)
    (pc,) = correlate_pairs(rec, array, method="gcc_phat")
    m = measurement_from_pair(pc)
    assert abs(m.tau_s - truth.tau("A", "B")) * SR <= 1.0


def test_noiseless_full_pipeline_recovers_source(tetra):
    for seed in range(3):
        source = inside_tetrahedron(tetra, np.random.default_rng(seed))
        rec, truth = simulate(Scene(tetra, source, duration_s=0.5, seed=seed))
        curves = correlate_pairs(rec, tetra)
        ms = [measurement_from_pair(pc) for pc in curves]
        for m in ms:
            assert abs(m.tau_s - truth.tau(m.mic_i, m.mic_j)) <= 1 / (2 * SR)
        init = srp_phat_init(curves, tetra, Bounds.around(tetra, 2.0), 0.5).position
        est = gradient_descent_localize(init, ms, tetra)
        assert np.linalg.norm(est.position - source) < 1e-2


def test_scene_json_and_recording_round_trip(tmp_path, tetra):
    scene = Scene(tetra, [1.5, -2.0, 0.25], SourceSpec("chirp"), snr_db=20, echo=Echo(0.02, 0.4),
                  duration_s=0.4, seed=8)
    (tmp_path / "scene.json").write_text(json.dumps(scene.to_json()))
    back = load_scene(tmp_path / "scene.json")
    assert back.to_json() == scene.to_json()

    rec, truth = simulate(back)
    paths = write_recording(rec, truth, tmp_path / "rec")
    assert [p.name for p in paths] == ["mic_1.wav", "mic_2.wav", "mic_3.wav", "mic_4.wav"]
    for p, ch in zip(paths, rec.channels):
        loaded = load_wav(p)
        assert loaded.sample_rate_hz == SR
        assert np.max(np.abs(loaded.samples - ch.samples)) <= 1 / 32768 + 1e-12
    doc = json.loads((tmp_path / "rec" / "truth.json").read_text())
    assert len(doc["tdoas"]) == 6
    assert doc["tdoas"][0]["tau_s"] == truth.tau("1", "2")
