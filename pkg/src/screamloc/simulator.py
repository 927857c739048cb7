"""Synthetic free-field scenes with exact ground truth.

Each microphone hears the source delayed by ``distance / c`` (applied as a
frequency-domain phase shift, so fractional delays are exact for
band-limited content) and attenuated by ``1 m / distance``. An optional
single echo and white noise at a per-channel SNR can be added.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .audio_io import AudioClip, MultichannelRecording, save_wav
from .errors import DurationTooShort, NyquistViolation
from .localizer import MicArray
from .tdoa import SPEED_OF_SOUND

PEAK_LEVEL = 0.9
REFERENCE_DISTANCE_M = 1.0
SCENE_HALF_EXTENT_M = 500.0


@dataclass(frozen=True)
class SourceSpec:
    """Source waveform recipe.

    ``harmonic_burst`` is a crude scream stand-in: harmonics of ``f0_hz``
    under an exponential attack/decay envelope starting at ``onset_s``.
    ``breath_level`` mixes in broadband noise under the same envelope (RMS
    relative to the harmonic part); a purely harmonic source has delay
    ambiguities at multiples of ``1 / f0_hz``.
    """

    kind: str = "white_noise"
    f0_hz: float = 700.0
    n_harmonics: int = 3
    attack_s: float = 0.05
    decay_s: float = 1.0
    onset_s: float = 0.0
    breath_level: float = 0.0
    chirp_start_hz: float = 500.0
    chirp_end_hz: float = 3000.0

    def max_frequency(self) -> float:
        if self.kind == "harmonic_burst":
            return self.f0_hz * self.n_harmonics
        if self.kind == "chirp":
            return max(self.chirp_start_hz, self.chirp_end_hz)
        return 0.0


@dataclass(frozen=True)
class Echo:
    delay_s: float
    gain: float

    def __post_init__(self) -> None:
        if not 0 <= self.gain < 1:
            raise ValueError("echo gain must be in [0, 1)")
        if self.delay_s < 0:
            raise ValueError("echo delay must be non-negative")


@dataclass(frozen=True)
class Scene:
    array: MicArray
    source_pos: np.ndarray
    source: SourceSpec = field(default_factory=SourceSpec)
    snr_db: float | None = None
    echo: Echo | None = None
    c: float = SPEED_OF_SOUND
    sample_rate_hz: int = 16000
    duration_s: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        pos = np.asarray(self.source_pos, dtype=float).reshape(3)
        object.__setattr__(self, "source_pos", pos)
        if np.any(np.abs(pos - self.array.centroid) > SCENE_HALF_EXTENT_M):
            raise ValueError("source lies outside the 1 km box around the array")
        if self.snr_db is not None and not np.isfinite(self.snr_db):
            raise ValueError("snr must be finite")
        if self.c <= 0 or self.sample_rate_hz <= 0 or self.duration_s <= 0:
            raise ValueError("c, sample rate and duration must be positive")

    def distances(self) -> np.ndarray:
        return np.linalg.norm(self.array.positions - self.source_pos, axis=1)

    def to_json(self) -> dict:
        return {
            "mics": [{"id": i, "x": p[0], "y": p[1], "z": p[2]}
                     for i, p in zip(self.array.ids, self.array.positions.tolist())],
            "source_pos": self.source_pos.tolist(),
            "source": asdict(self.source),
            "snr_db": self.snr_db,
            "echo": None if self.echo is None else asdict(self.echo),
            "c": self.c,
            "sample_rate_hz": self.sample_rate_hz,
            "duration_s": self.duration_s,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Scene":
        mics = doc["mics"]
        array = MicArray(tuple(str(m["id"]) for m in mics),
                         np.array([[m["x"], m["y"], m.get("z", 0.0)] for m in mics], dtype=float))
        echo = doc.get("echo")
        return cls(
            array=array,
            source_pos=np.asarray(doc["source_pos"], dtype=float),
            source=SourceSpec(**doc.get("source", {})),
            snr_db=doc.get("snr_db"),
            echo=None if echo is None else Echo(**echo),
            c=float(doc.get("c", SPEED_OF_SOUND)),
            sample_rate_hz=int(doc.get("sample_rate_hz", 16000)),
            duration_s=float(doc.get("duration_s", 1.0)),
            seed=int(doc.get("seed", 0)),
        )


def load_scene(path: str | Path) -> Scene:
    return Scene.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class GroundTruth:
    source_pos: np.ndarray
    tdoas: tuple[tuple[tuple[str, str], float], ...]

    def tau(self, mic_i: str, mic_j: str) -> float:
        for (a, b), t in self.tdoas:
            if (a, b) == (mic_i, mic_j):
                return t
            if (b, a) == (mic_i, mic_j):
                return -t
        raise KeyError((mic_i, mic_j))

    def to_json(self) -> dict:
        return {
            "source_pos": self.source_pos.tolist(),
            "tdoas": [{"mic_i": a, "mic_j": b, "tau_s": t} for (a, b), t in self.tdoas],
        }


def synth_source(spec: SourceSpec, duration_s: float, sample_rate_hz: int, seed: int = 0) -> AudioClip:
    """Deterministic source waveform, peak-normalized to 0.9."""
    if spec.max_frequency() >= sample_rate_hz / 2:
        raise NyquistViolation(f"{spec.kind} reaches {spec.max_frequency()} Hz at {sample_rate_hz} Hz sampling")
    n = int(round(duration_s * sample_rate_hz))
    t = np.arange(n) / sample_rate_hz
    if spec.kind == "white_noise":
        x = np.random.default_rng(seed).standard_normal(n)
    elif spec.kind == "harmonic_burst":
        k = np.arange(1, spec.n_harmonics + 1)
        x = np.sin(2 * np.pi * spec.f0_hz * np.outer(t, k)).sum(axis=1)
        if spec.breath_level > 0:
            x = x + spec.breath_level * np.sqrt(spec.n_harmonics / 2) * np.random.default_rng(seed).standard_normal(n)
        local = t - spec.onset_s
        env = np.where(local >= 0, (1 - np.exp(-np.maximum(local, 0) / spec.attack_s))
                       * np.exp(-np.maximum(local, 0) / spec.decay_s), 0.0)
        x = x * env
    elif spec.kind == "chirp":
        x = sps.chirp(t, spec.chirp_start_hz, max(duration_s, 1e-12), spec.chirp_end_hz)
    else:
        raise ValueError(f"unknown source kind {spec.kind!r}")
    peak = np.max(np.abs(x)) if n else 0.0
    if peak > 0:
        x = x * (PEAK_LEVEL / peak)
    return AudioClip(x, sample_rate_hz)


def fractional_delay(x: np.ndarray, delay_samples: float) -> np.ndarray:
    """Delay by a possibly fractional number of samples via an FFT phase shift.

    The signal is zero-padded first so the shifted tail does not wrap.
    """
    n = x.shape[0]
    nfft = 1 << (n + int(np.ceil(abs(delay_samples))) + 1).bit_length()
    spec = np.fft.rfft(x, nfft)
    freqs = np.arange(spec.shape[0]) / nfft
    return np.fft.irfft(spec * np.exp(-2j * np.pi * freqs * delay_samples), nfft)[:n]


def ground_truth_tdoas(scene: Scene) -> list[tuple[tuple[str, str], float]]:
    """``(d_i - d_j) / c`` for every unordered pair in array order."""
    d = scene.distances()
    ids = scene.array.ids
    return [((ids[a], ids[b]), float((d[a] - d[b]) / scene.c)) for a, b in combinations(range(len(ids)), 2)]


def channel_rng(seed: int, channel_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, channel_index]))


def simulate(scene: Scene) -> tuple[MultichannelRecording, GroundTruth]:
    """Render every microphone channel and the exact pairwise delays.

    Raises:
        DurationTooShort: some propagation delay exceeds half the duration.
    """
    sr = scene.sample_rate_hz
    source = synth_source(scene.source, scene.duration_s, sr, scene.seed).samples
    dist = scene.distances()
    delays = dist / scene.c
    if np.any(delays > scene.duration_s / 2):
        raise DurationTooShort(f"max delay {delays.max():.4f} s exceeds half of {scene.duration_s} s")

    channels = []
    for m, (d, delay) in enumerate(zip(dist, delays)):
        gain = REFERENCE_DISTANCE_M / max(d, 1e-9)
        clean = gain * fractional_delay(source, delay * sr)
        if scene.echo is not None and scene.echo.gain > 0:
            clean = clean + scene.echo.gain * gain * fractional_delay(source, (delay + scene.echo.delay_s) * sr)
        if scene.snr_db is not None:
            noise = channel_rng(scene.seed, m).standard_normal(clean.shape[0])
            target = np.mean(clean ** 2) / 10.0 ** (scene.snr_db / 10.0)
            noise *= np.sqrt(target / np.mean(noise ** 2))
            clean = clean + noise
        channels.append(AudioClip(clean, sr))
    rec = MultichannelRecording(tuple(channels), scene.array.ids)
    return rec, GroundTruth(scene.source_pos.copy(), tuple(ground_truth_tdoas(scene)))


def write_recording(rec: MultichannelRecording, truth: GroundTruth | None, out_dir: str | Path) -> list[Path]:
    """Persist channels as ``mic_<id>.wav`` (PCM16) plus ``truth.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for cid, clip in zip(rec.channel_ids, rec.channels):
        p = out / f"mic_{cid}.wav"
        save_wav(p, clip)
        paths.append(p)
    if truth is not None:
        (out / "truth.json").write_text(json.dumps(truth.to_json(), indent=2) + "\n")
    return paths
