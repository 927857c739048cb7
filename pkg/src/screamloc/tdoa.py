"""Pairwise time-delay estimation by cross-correlation.

Lag convention: ``correlation[l] = sum_n x[n] * y[n + l]``, so a positive
peak lag means ``y`` is a delayed copy of ``x``. ``tdoa_matrix`` feeds the
pair (i, j) as ``x = channel j, y = channel i``, which makes the measured
delay ``t_arrival(i) - t_arrival(j) = (d_i - d_j) / c``, the same sign as
``localizer.expected_tdoa``.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np

from .audio_io import AudioClip, MultichannelRecording
from .errors import DegenerateCorrelation, IdMismatch, LengthMismatch, RateMismatch

SPEED_OF_SOUND = 343.0
WHITENING_FLOOR = 1e-12
SHARPNESS_MAX = 100.0
FEASIBILITY_MARGIN_SAMPLES = 2


@dataclass(frozen=True)
class GccResult:
    correlation: np.ndarray
    lags: np.ndarray
    method: str
    peak_lag_samples: float
    peak_value: float
    sample_rate_hz: int
    degenerate: bool = False

    @property
    def max_lag(self) -> int:
        return int(self.lags[-1])

    def value_at(self, lag: int) -> float:
        return float(self.correlation[lag + self.max_lag])


@dataclass(frozen=True)
class TdoaMeasurement:
    """Delay between two microphones, ``tau_s = t_arrival(i) - t_arrival(j)``."""

    mic_i: str
    mic_j: str
    tau_s: float
    weight: float = 1.0
    peak_sharpness: float = 1.0
    degenerate: bool = False

    def __post_init__(self) -> None:
        if self.mic_i == self.mic_j:
            raise ValueError("a measurement needs two distinct microphones")
        if self.weight < 0:
            raise ValueError("weights must be non-negative")


def _check_pair(x: AudioClip, y: AudioClip, max_lag: int) -> None:
    if len(x) != len(y):
        raise LengthMismatch(f"clip lengths differ: {len(x)} vs {len(y)}")
    if x.sample_rate_hz != y.sample_rate_hz:
        raise RateMismatch(f"sample rates differ: {x.sample_rate_hz} vs {y.sample_rate_hz}")
    if not 0 <= max_lag < len(x):
        raise ValueError(f"max_lag must be in [0, {len(x)}), got {max_lag}")


def parabolic_offset(left: float, center: float, right: float) -> float:
    """Vertex offset, in samples, of the parabola through three equally spaced points."""
    denom = left - 2.0 * center + right
    if denom >= 0:
        return 0.0
    return float(np.clip(0.5 * (left - right) / denom, -0.5, 0.5))


def _argmax_small_lag(values: np.ndarray, lags: np.ndarray) -> int:
    # largest value; ties go to the smallest |lag|, then the negative lag
    best = values.max()
    candidates = np.flatnonzero(values == best)
    return int(candidates[np.argmin(np.abs(lags[candidates]) * 2 + (lags[candidates] > 0))])


def _finish(corr: np.ndarray, method: str, sample_rate_hz: int) -> GccResult:
    max_lag = (corr.shape[0] - 1) // 2
    lags = np.arange(-max_lag, max_lag + 1)
    degenerate = not np.any(corr) or bool(np.ptp(corr) == 0)
    if degenerate:
        return GccResult(corr, lags, method, 0.0, float(corr[max_lag]), sample_rate_hz, True)
    k = _argmax_small_lag(corr, lags)
    offset = 0.0
    if 0 < k < corr.shape[0] - 1:
        offset = parabolic_offset(corr[k - 1], corr[k], corr[k + 1])
    return GccResult(corr, lags, method, float(lags[k] + offset), float(corr[k]), sample_rate_hz)


def cross_correlate_direct(x: AudioClip, y: AudioClip, max_lag: int) -> GccResult:
    """Time-domain cross-correlation, ``O(n * max_lag)``."""
    _check_pair(x, y, max_lag)
    a, b = x.samples, y.samples
    n = a.shape[0]
    corr = np.empty(2 * max_lag + 1)
    for idx, lag in enumerate(range(-max_lag, max_lag + 1)):
        if lag >= 0:
            corr[idx] = np.dot(a[: n - lag], b[lag:])
        else:
            corr[idx] = np.dot(a[-lag:], b[: n + lag])
    return _finish(corr, "direct", x.sample_rate_hz)


def fft_length(n: int) -> int:
    """Smallest power of two holding a linear correlation of two length-n signals."""
    return 1 << max(0, (2 * n - 2)).bit_length()


def _lag_window(full: np.ndarray, max_lag: int) -> np.ndarray:
    # circular output -> lags -max_lag..max_lag
    return np.concatenate([full[-max_lag:], full[: max_lag + 1]]) if max_lag else full[:1].copy()


def _cross_spectrum(x: AudioClip, y: AudioClip) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    nfft = fft_length(len(x))
    X = np.fft.rfft(x.samples, nfft)
    Y = np.fft.rfft(y.samples, nfft)
    return np.conj(X) * Y, X, Y, nfft


def gcc(x: AudioClip, y: AudioClip, max_lag: int) -> GccResult:
    """Unweighted cross-correlation through a zero-padded FFT."""
    _check_pair(x, y, max_lag)
    cross, _, _, nfft = _cross_spectrum(x, y)
    return _finish(_lag_window(np.fft.irfft(cross, nfft), max_lag), "gcc", x.sample_rate_hz)


def gcc_phat(x: AudioClip, y: AudioClip, max_lag: int, whitening_floor: float = WHITENING_FLOOR) -> GccResult:
    """Phase-transform weighted cross-correlation.

    Each bin of the cross-spectrum is divided by ``max(|X||Y|, floor)``
    where ``floor = whitening_floor * max_f |X||Y|``. A matched pair gives a
    peak near 1.
    """
    if whitening_floor <= 0:
        raise ValueError("whitening floor must be positive")
    _check_pair(x, y, max_lag)
    cross, X, Y, nfft = _cross_spectrum(x, y)
    mag = np.abs(X) * np.abs(Y)
    top = mag.max()
    if top == 0:
        return _finish(np.zeros(2 * max_lag + 1), "gcc_phat", x.sample_rate_hz)
    weighted = cross / np.maximum(mag, whitening_floor * top)
    return _finish(_lag_window(np.fft.irfft(weighted, nfft), max_lag), "gcc_phat", x.sample_rate_hz)


CORRELATORS = {
    "direct": cross_correlate_direct,
    "gcc": gcc,
    "gcc_phat": gcc_phat,
}


def feasible_lag(mic_distance_m: float, c: float, sample_rate_hz: int) -> int:
    """Search half-width in samples for a pair ``mic_distance_m`` apart."""
    return math.ceil(mic_distance_m / c * sample_rate_hz) + FEASIBILITY_MARGIN_SAMPLES


def _local_maxima(values: np.ndarray) -> np.ndarray:
    if values.shape[0] < 3:
        return np.arange(values.shape[0])
    inner = np.flatnonzero((values[1:-1] >= values[:-2]) & (values[1:-1] >= values[2:])) + 1
    edges = [i for i, ok in ((0, values[0] >= values[1]), (values.shape[0] - 1, values[-1] >= values[-2])) if ok]
    return np.sort(np.concatenate([inner, np.asarray(edges, dtype=int)]))


def peak_sharpness(values: np.ndarray, peak_index: int) -> float:
    """Peak over the strongest rival local maximum, clamped to [1, 100]."""
    peak = values[peak_index]
    if peak <= 0:
        return 1.0
    rivals = [i for i in _local_maxima(values) if abs(i - peak_index) > 1]
    if not rivals:
        return SHARPNESS_MAX
    second = values[rivals].max()
    if second <= 0:
        return SHARPNESS_MAX
    return float(np.clip(peak / second, 1.0, SHARPNESS_MAX))


def pick_tdoa(
    result: GccResult,
    mic_distance_m: float,
    c: float = SPEED_OF_SOUND,
    mic_i: str = "i",
    mic_j: str = "j",
) -> TdoaMeasurement:
    """Physically bounded peak pick with parabolic sub-sample refinement.

    The returned delay never exceeds ``mic_distance_m / c + 2 / sr`` in
    magnitude.

    Raises:
        DegenerateCorrelation: the curve is all-zero or flat in the window.
    """
    if c <= 0:
        raise ValueError("speed of sound must be positive")
    sr = result.sample_rate_hz
    half = min(feasible_lag(mic_distance_m, c, sr), result.max_lag)
    centre = result.max_lag
    window = result.correlation[centre - half:centre + half + 1]
    if result.degenerate or not np.any(window) or np.ptp(window) == 0:
        raise DegenerateCorrelation(f"flat correlation for pair ({mic_i}, {mic_j})")
    lags = np.arange(-half, half + 1)
    k = _argmax_small_lag(window, lags)
    full_k = centre - half + k
    corr = result.correlation
    offset = 0.0
    if 0 < full_k < corr.shape[0] - 1:
        offset = parabolic_offset(corr[full_k - 1], corr[full_k], corr[full_k + 1])
    bound = mic_distance_m / c + FEASIBILITY_MARGIN_SAMPLES / sr
    tau = float(np.clip((lags[k] + offset) / sr, -bound, bound))
    sharp = peak_sharpness(window, k)
    return TdoaMeasurement(str(mic_i), str(mic_j), tau, weight=sharp, peak_sharpness=sharp)


@dataclass(frozen=True)
class PairCorrelation:
    mic_i: str
    mic_j: str
    distance_m: float
    result: GccResult


def correlate_pairs(
    rec: MultichannelRecording,
    array,
    method: str = "gcc_phat",
    c: float = SPEED_OF_SOUND,
    workers: int | None = None,
) -> list[PairCorrelation]:
    """Correlate every unordered microphone pair, ordered by array position (i < j).

    Lag range covers the widest pair plus the feasibility margin, so every
    curve can also feed the SRP grid search.
    """
    if len(rec.channel_ids) < 2:
        raise IdMismatch("need at least two channels")
    if set(rec.channel_ids) != set(array.ids) or len(rec.channel_ids) != len(array.ids):
        raise IdMismatch(f"channels {sorted(rec.channel_ids)} do not match array mics {sorted(array.ids)}")
    correlator = CORRELATORS[method]
    sr = rec.sample_rate_hz
    max_dist = max(array.distance(a, b) for a, b in combinations(array.ids, 2))
    max_lag = min(feasible_lag(max_dist, c, sr), len(rec) - 1)
    pairs = list(combinations(array.ids, 2))

    def work(pair):
        i, j = pair
        res = correlator(rec.channel(j), rec.channel(i), max_lag)
        return PairCorrelation(i, j, array.distance(i, j), res)

    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(work, pairs))
    return [work(p) for p in pairs]


def measurement_from_pair(pc: PairCorrelation, c: float = SPEED_OF_SOUND) -> TdoaMeasurement:
    """``pick_tdoa`` for one pair; flat curves become zero-weight degenerate measurements."""
    try:
        return pick_tdoa(pc.result, pc.distance_m, c, pc.mic_i, pc.mic_j)
    except DegenerateCorrelation:
        return TdoaMeasurement(pc.mic_i, pc.mic_j, 0.0, weight=0.0, peak_sharpness=1.0, degenerate=True)


def tdoa_matrix(
    rec: MultichannelRecording,
    array,
    method: str = "gcc_phat",
    c: float = SPEED_OF_SOUND,
    workers: int | None = None,
) -> list[TdoaMeasurement]:
    """One measurement per unordered pair, M(M-1)/2 in total."""
    return [pick_tdoa(pc.result, pc.distance_m, c, pc.mic_i, pc.mic_j)
            for pc in correlate_pairs(rec, array, method, c, workers)]


def write_correlation_csv(result: GccResult, path: str | Path) -> None:
    """Columns: lag_samples, lag_ms, value."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["lag_samples", "lag_ms", "value"])
        for lag, value in zip(result.lags.tolist(), result.correlation.tolist()):
            writer.writerow([lag, repr(1000.0 * lag / result.sample_rate_hz), repr(value)])
