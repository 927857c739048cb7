"""Short-time spectra and MFCC features for the detector."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.fft import dct

from .audio_io import AudioClip
from .errors import ClipTooShort

N_FFT = 512
HOP = 256
N_FILTERS = 26
N_MFCC = 13
LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class Spectrogram:
    bins: np.ndarray  # frames x (n_fft // 2 + 1), complex
    frame_hop: int
    n_fft: int
    sample_rate_hz: int

    @property
    def n_frames(self) -> int:
        return self.bins.shape[0]


@dataclass(frozen=True)
class MfccConfig:
    n_fft: int = N_FFT
    hop: int = HOP
    n_filters: int = N_FILTERS
    n_mfcc: int = N_MFCC
    sample_rate_hz: int = 16000

    def fingerprint(self) -> str:
        return (
            f"mfcc:n_fft={self.n_fft},hop={self.hop},n_filters={self.n_filters},"
            f"n_mfcc={self.n_mfcc},sr={self.sample_rate_hz}"
        )


@dataclass(frozen=True)
class MfccMatrix:
    coeffs: np.ndarray  # frames x n_mfcc
    config: MfccConfig


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=float) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=float) / 2595.0) - 1.0)


def _frames(x: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    n_frames = 1 + (len(x) - n_fft) // hop
    return np.lib.stride_tricks.sliding_window_view(x, n_fft)[::hop][:n_frames]


def stft(clip: AudioClip, n_fft: int = N_FFT, hop: int = HOP) -> Spectrogram:
    """Hann-windowed one-sided STFT with no padding and an unnormalized forward FFT."""
    if n_fft < 1 or n_fft & (n_fft - 1):
        raise ValueError(f"n_fft must be a power of two, got {n_fft}")
    if not 0 < hop <= n_fft:
        raise ValueError("hop must be in (0, n_fft]")
    if len(clip) < n_fft:
        raise ClipTooShort(f"clip has {len(clip)} samples, need at least {n_fft}")
    window = np.hanning(n_fft + 1)[:-1]  # periodic Hann
    frames = _frames(clip.samples, n_fft, hop) * window
    return Spectrogram(np.fft.rfft(frames, axis=1), hop, n_fft, clip.sample_rate_hz)


def mel_filterbank(n_filters: int = N_FILTERS, n_fft: int = N_FFT, sample_rate_hz: int = 16000) -> np.ndarray:
    """Triangular filters on the HTK mel scale spanning 0 Hz to Nyquist.

    Returns an ``(n_filters, n_fft // 2 + 1)`` matrix with unit peak height.
    """
    if n_filters < 2:
        raise ValueError("need at least two filters")
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate_hz / 2.0), n_filters + 2))
    edges[0], edges[-1] = 0.0, sample_rate_hz / 2.0
    freqs = np.arange(n_fft // 2 + 1) * sample_rate_hz / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


def filter_centers(n_filters: int = N_FILTERS, sample_rate_hz: int = 16000) -> np.ndarray:
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate_hz / 2.0), n_filters + 2))[1:-1]


def log_mel_energies(spec: Spectrogram, n_filters: int = N_FILTERS) -> np.ndarray:
    fb = mel_filterbank(n_filters, spec.n_fft, spec.sample_rate_hz)
    power = np.abs(spec.bins) ** 2
    return np.log(power @ fb.T + LOG_FLOOR)


def mfcc(
    clip: AudioClip,
    n_fft: int = N_FFT,
    hop: int = HOP,
    n_filters: int = N_FILTERS,
    n_mfcc: int = N_MFCC,
) -> MfccMatrix:
    """Log mel energies of the power spectrum followed by an orthonormal DCT-II."""
    if n_mfcc > n_filters:
        raise ValueError("n_mfcc cannot exceed n_filters")
    logmel = log_mel_energies(stft(clip, n_fft, hop), n_filters)
    coeffs = dct(logmel, type=2, axis=1, norm="ortho")[:, :n_mfcc]
    return MfccMatrix(coeffs, MfccConfig(n_fft, hop, n_filters, n_mfcc, clip.sample_rate_hz))


def summarize(mfccs: MfccMatrix) -> np.ndarray:
    """Per-coefficient mean followed by population std across frames."""
    c = mfccs.coeffs
    if c.shape[0] < 1:
        raise ValueError("need at least one frame")
    return np.concatenate([c.mean(axis=0), c.std(axis=0)])


def feature_vector(clip: AudioClip, config: MfccConfig = MfccConfig()) -> np.ndarray:
    """MFCC summary features for one clip under ``config``."""
    if clip.sample_rate_hz != config.sample_rate_hz:
        raise ValueError(
            f"clip rate {clip.sample_rate_hz} Hz does not match feature config {config.sample_rate_hz} Hz"
        )
    return summarize(mfcc(clip, config.n_fft, config.hop, config.n_filters, config.n_mfcc))
