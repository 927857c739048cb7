"""Audio loading, resampling and windowing.

Every downstream stage expects mono clips at a common rate, cut into
fixed-length windows. WAV files are parsed directly (PCM16 and float32
mono only); the writer always emits PCM16.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .errors import CorruptHeader, UnsupportedFormat

PCM16_SCALE = 32768.0
WAVE_FORMAT_PCM = 0x0001
WAVE_FORMAT_IEEE_FLOAT = 0x0003

RESAMPLE_HALF_TAPS = 32
RESAMPLE_KAISER_BETA = 8.6


@dataclass(frozen=True)
class AudioClip:
    """Mono waveform plus its sample rate. Samples are stored read-only."""

    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self) -> None:
        x = np.array(self.samples, dtype=np.float64).reshape(-1)
        if int(self.sample_rate_hz) != self.sample_rate_hz or self.sample_rate_hz <= 0:
            raise ValueError(f"sample rate must be a positive integer, got {self.sample_rate_hz}")
        if not np.all(np.isfinite(x)):
            raise ValueError("audio samples must be finite")
        x.flags.writeable = False
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz


@dataclass(frozen=True)
class MultichannelRecording:
    channels: tuple[AudioClip, ...]
    channel_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        channels = tuple(self.channels)
        ids = tuple(str(i) for i in self.channel_ids)
        if len(channels) != len(ids):
            raise ValueError("channel_ids must align 1:1 with channels")
        if len(set(ids)) != len(ids):
            raise ValueError("channel ids must be unique")
        if channels:
            rates = {c.sample_rate_hz for c in channels}
            lengths = {len(c) for c in channels}
            if len(rates) != 1:
                raise ValueError(f"channels disagree on sample rate: {sorted(rates)}")
            if len(lengths) != 1:
                raise ValueError(f"channels disagree on length: {sorted(lengths)}")
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "channel_ids", ids)

    @property
    def sample_rate_hz(self) -> int:
        return self.channels[0].sample_rate_hz

    def __len__(self) -> int:
        return len(self.channels[0]) if self.channels else 0

    def channel(self, channel_id: str) -> AudioClip:
        return self.channels[self.channel_ids.index(str(channel_id))]

    def map(self, fn) -> "MultichannelRecording":
        """Apply a clip -> clip function to every channel."""
        return MultichannelRecording(tuple(fn(c) for c in self.channels), self.channel_ids)


def load_wav(path: str | Path) -> AudioClip:
    """Read a mono RIFF/WAVE file (PCM16 or IEEE float32).

    Raises:
        FileNotFoundError: the path does not exist.
        UnsupportedFormat: compressed codes, other bit depths, >1 channel.
        CorruptHeader: malformed RIFF structure or missing chunks.
    """
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise CorruptHeader(f"{path}: not a RIFF/WAVE file")

    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        (size,) = struct.unpack("<I", data[pos + 4:pos + 8])
        body = data[pos + 8:pos + 8 + size]
        if chunk_id == b"fmt ":
            if size < 16 or len(body) < 16:
                raise CorruptHeader(f"{path}: truncated fmt chunk")
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif chunk_id == b"data":
            if len(body) < size:
                raise CorruptHeader(f"{path}: data chunk shorter than declared")
            payload = body
        pos += 8 + size + (size & 1)

    if fmt is None or payload is None:
        raise CorruptHeader(f"{path}: missing fmt or data chunk")
    code, n_channels, rate, _byte_rate, block_align, bits = fmt
    if n_channels != 1:
        raise UnsupportedFormat(f"{path}: {n_channels} channels, only mono is accepted")
    if rate <= 0:
        raise CorruptHeader(f"{path}: sample rate {rate}")

    if code == WAVE_FORMAT_PCM and bits == 16:
        samples = np.frombuffer(payload[: len(payload) // 2 * 2], dtype="<i2") / PCM16_SCALE
    elif code == WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        samples = np.frombuffer(payload[: len(payload) // 4 * 4], dtype="<f4").astype(np.float64)
    else:
        raise UnsupportedFormat(f"{path}: format code {code} with {bits} bits per sample")
    if block_align != bits // 8:
        raise CorruptHeader(f"{path}: block align {block_align} inconsistent with {bits}-bit mono")
    return AudioClip(samples, rate)


def save_wav(path: str | Path, clip: AudioClip) -> None:
    """Write ``clip`` as PCM16 mono, clipping to the representable range."""
    q = np.clip(np.round(clip.samples * PCM16_SCALE), -32768, 32767).astype("<i2")
    payload = q.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    fmt = b"fmt " + struct.pack(
        "<IHHIIHH", 16, WAVE_FORMAT_PCM, 1, clip.sample_rate_hz, clip.sample_rate_hz * 2, 2, 16
    )
    Path(path).write_bytes(header + fmt + b"data" + struct.pack("<I", len(payload)) + payload)


def _resampling_filter(up: int, down: int) -> np.ndarray:
    # Kaiser-windowed sinc at the upsampled rate, cutoff at the narrower Nyquist.
    ratio = max(up, down)
    half = RESAMPLE_HALF_TAPS * ratio
    return up * sps.firwin(2 * half + 1, 1.0 / ratio, window=("kaiser", RESAMPLE_KAISER_BETA))


def resample(clip: AudioClip, target_hz: int) -> AudioClip:
    """Polyphase windowed-sinc rate conversion.

    Output length is ``ceil(len * target / source)``, so duration is kept
    within one output sample.
    """
    if target_hz <= 0:
        raise ValueError("target rate must be positive")
    if target_hz == clip.sample_rate_hz:
        return clip
    if len(clip) == 0:
        return AudioClip(np.zeros(0), target_hz)
    frac = Fraction(int(target_hz), clip.sample_rate_hz)
    up, down = frac.numerator, frac.denominator
    y = sps.resample_poly(clip.samples, up, down, window=_resampling_filter(up, down))
    return AudioClip(y, target_hz)


def fix_duration(clip: AudioClip, seconds: float) -> AudioClip:
    """Zero-pad or truncate at the end to exactly ``round(seconds * rate)`` samples."""
    n = int(round(seconds * clip.sample_rate_hz))
    if n == len(clip):
        return clip
    out = np.zeros(n)
    keep = min(n, len(clip))
    out[:keep] = clip.samples[:keep]
    return AudioClip(out, clip.sample_rate_hz)


def window_count(n_samples: int, window: int, hop: int) -> int:
    return math.ceil(max(n_samples - window, 0) / hop) + 1


def segment_stream(clip: AudioClip, window_s: float, hop_s: float) -> list[AudioClip]:
    """Cut a clip into windows starting at multiples of ``hop_s``.

    The last window is zero-padded to full length.
    """
    if window_s <= 0 or hop_s <= 0:
        raise ValueError("window and hop must be positive")
    if hop_s > window_s:
        raise ValueError("hop must not exceed the window length")
    sr = clip.sample_rate_hz
    window = int(round(window_s * sr))
    hop = int(round(hop_s * sr))
    count = window_count(len(clip), window, hop)
    out = []
    for k in range(count):
        seg = np.zeros(window)
        chunk = clip.samples[k * hop:k * hop + window]
        seg[: len(chunk)] = chunk
        out.append(AudioClip(seg, sr))
    return out


def segment_recording(rec: MultichannelRecording, window_s: float, hop_s: float) -> list[MultichannelRecording]:
    """Window every channel of ``rec`` in lockstep."""
    per_channel = [segment_stream(c, window_s, hop_s) for c in rec.channels]
    return [MultichannelRecording(tuple(w), rec.channel_ids) for w in zip(*per_channel)]
