import math

import numpy as np
import pytest

from screamloc.audio_io import AudioClip
from screamloc.errors import ClipTooShort
from screamloc.features import (
    LOG_FLOOR,
    MfccMatrix,
    filter_centers,
    log_mel_energies,
    mel_filterbank,
    mfcc,
    stft,
    summarize,
)


def reference_mfcc(x, sr, n_fft, hop, n_filters, n_mfcc):
    """Straight-line MFCC: explicit DFT, loop-built triangles, explicit DCT-II."""
    top_mel = 2595 * math.log10(1 + (sr / 2) / 700)
    edges = [700 * (10 ** (top_mel * k / (n_filters + 1) / 2595) - 1) for k in range(n_filters + 2)]
    n_bins = n_fft // 2 + 1
    fb = np.zeros((n_filters, n_bins))
    for m in range(n_filters):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        for k in range(n_bins):
            f = k * sr / n_fft
            if lo < f <= mid:
                fb[m, k] = (f - lo) / (mid - lo)
            elif mid < f < hi:
                fb[m, k] = (hi - f) / (hi - mid)
    window = [0.5 - 0.5 * math.cos(2 * math.pi * i / n_fft) for i in range(n_fft)]
    kk = np.arange(n_bins)[:, None]
    nn = np.arange(n_fft)[None, :]
    dft = np.exp(-2j * np.pi * kk * nn / n_fft)
    dct = np.zeros((n_mfcc, n_filters))
    for q in range(n_mfcc):
        scale = math.sqrt(1 / n_filters) if q == 0 else math.sqrt(2 / n_filters)
        for m in range(n_filters):
            dct[q, m] = scale * math.cos(math.pi * q * (2 * m + 1) / (2 * n_filters))
    rows = []
    for start in range(0, len(x) - n_fft + 1, hop):
        frame = np.array([x[start + i] * window[i] for i in range(n_fft)])
        power = np.abs(dft @ frame) ** 2
        energies = np.log(fb @ power + 1e-10)
        rows.append(dct @ energies)
    return np.array(rows)


def test_stft_zero():
    spec = stft(AudioClip(np.zeros(4096), 16000), 512, 256)
    assert spec.n_frames == 1 + (4096 - 512) // 256
    assert not np.any(spec.bins)


@pytest.mark.parametrize("k", [8, 37, 100])
def test_stft_bin_centred_sine(k):
    sr, n_fft = 16000, 512
    t = np.arange(8000) / sr
    spec = stft(AudioClip(np.sin(2 * np.pi * k * sr / n_fft * t), sr), n_fft, 128)
    assert np.all(np.argmax(np.abs(spec.bins), axis=1) == k)


def test_stft_parseval(rng):
    n_fft, hop = 512, 256
    x = rng.normal(size=16000)
    spec = stft(AudioClip(x, 16000), n_fft, hop)
    w = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n_fft) / n_fft)
    for f in range(spec.n_frames):
        seg = x[f * hop:f * hop + n_fft] * w
        time_energy = np.sum(seg ** 2)
        b = np.abs(spec.bins[f]) ** 2
        two_sided = b[0] + b[-1] + 2 * b[1:-1].sum()
        assert abs(two_sided / n_fft - time_energy) <= 1e-6 * time_energy


def test_stft_errors():
    with pytest.raises(ClipTooShort):
        stft(AudioClip(np.zeros(100), 16000), 512, 256)
    with pytest.raises(ValueError):
        stft(AudioClip(np.zeros(1000), 16000), 500, 250)


def test_filterbank_shape_and_triangles():
    fb = mel_filterbank(26, 512, 16000)
    assert fb.shape == (26, 257)
    assert np.all(fb >= 0)
    centres = filter_centers(26, 16000)
    assert np.all(np.diff(centres) > 0)
    freqs = np.arange(257) * 16000 / 512
    edges = np.concatenate([[0.0], centres, [8000.0]])
    for m, row in enumerate(fb):
        assert np.sum(row == row.max()) == 1
        outside = (freqs <= edges[m]) | (freqs >= edges[m + 2])
        assert not np.any(row[outside])


def test_filterbank_coverage():
    fb = mel_filterbank(26, 512, 16000)
    centres = filter_centers(26, 16000)
    freqs = np.arange(257) * 16000 / 512
    inner = (freqs >= centres[0]) & (freqs <= centres[-1])
    assert np.all(fb.sum(axis=0)[inner] > 0)


def test_filterbank_needs_two_filters():
    with pytest.raises(ValueError):
        mel_filterbank(1, 512, 16000)


def test_mfcc_of_silence_is_dct_of_constant():
    m = mfcc(AudioClip(np.zeros(4000), 16000))
    assert m.coeffs.shape[1] == 13
    np.testing.assert_allclose(m.coeffs[:, 0], math.sqrt(26) * math.log(LOG_FLOOR), rtol=1e-12)
    np.testing.assert_allclose(m.coeffs[:, 1:], 0.0, atol=1e-9)


def test_mfcc_gain_shifts_only_c0(rng):
    x = rng.normal(size=8000)
    a = mfcc(AudioClip(x, 16000)).coeffs
    b = mfcc(AudioClip(2 * x, 16000)).coeffs
    np.testing.assert_allclose(b[:, 0] - a[:, 0], math.log(4) * math.sqrt(26), atol=1e-6)
    np.testing.assert_allclose(b[:, 1:], a[:, 1:], atol=1e-6)


def test_mfcc_matches_reference_on_white_noise(rng):
    x = rng.normal(scale=0.1, size=4000)
    ours = mfcc(AudioClip(x, 16000), 512, 256, 26, 13).coeffs
    ref = reference_mfcc(x, 16000, 512, 256, 26, 13)
    assert ours.shape == ref.shape
    assert np.max(np.abs(ours - ref)) <= 1e-4


def test_dct_is_orthonormal(rng):
    from scipy.fft import dct, idct

    spec = stft(AudioClip(rng.normal(size=4000), 16000))
    logmel = log_mel_energies(spec)
    full = dct(logmel, type=2, axis=1, norm="ortho")
    basis = dct(np.eye(26), type=2, axis=0, norm="ortho")
    np.testing.assert_allclose(full @ basis, logmel, atol=1e-9)
    np.testing.assert_allclose(idct(full, type=2, axis=1, norm="ortho"), logmel, atol=1e-9)


def test_mfcc_frames_unchanged_by_extension(rng):
    x = rng.normal(size=5000)
    short = mfcc(AudioClip(x, 16000)).coeffs
    longer = mfcc(AudioClip(np.concatenate([x, np.zeros(3000)]), 16000)).coeffs
    np.testing.assert_array_equal(longer[: short.shape[0]], short)


def test_mfcc_deterministic(rng):
    clip = AudioClip(rng.normal(size=5000), 16000)
    np.testing.assert_array_equal(mfcc(clip).coeffs, mfcc(clip).coeffs)


def test_mfcc_rejects_too_many_coefficients():
    with pytest.raises(ValueError):
        mfcc(AudioClip(np.zeros(4000), 16000), n_filters=10, n_mfcc=11)


def _matrix(coeffs):
    return MfccMatrix(np.asarray(coeffs, dtype=float), None)


def test_summarize_single_frame():
    v = np.array([1.0, -2.0, 3.5])
    out = summarize(_matrix([v]))
    np.testing.assert_array_equal(out, np.concatenate([v, np.zeros(3)]))


def test_summarize_symmetric_pair():
    v = np.array([1.0, -2.0, 3.5])
    out = summarize(_matrix([v, -v]))
    np.testing.assert_array_equal(out[:3], np.zeros(3))
    np.testing.assert_array_equal(out[3:], np.abs(v))


def test_summarize_two_pass_oracle(rng):
    c = rng.normal(size=(100, 13))
    out = summarize(_matrix(c))
    mean = [sum(c[:, k]) / 100 for k in range(13)]
    std = [math.sqrt(sum((c[i, k] - mean[k]) ** 2 for i in range(100)) / 100) for k in range(13)]
    np.testing.assert_allclose(out, np.concatenate([mean, std]), rtol=1e-12, atol=1e-14)
