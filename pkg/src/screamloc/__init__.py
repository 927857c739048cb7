"""Scream detection and acoustic source localization for multichannel audio."""

from .audio_io import AudioClip, MultichannelRecording
from .localizer import MicArray, PositionEstimate, SolverOptions
from .tdoa import GccResult, TdoaMeasurement

__version__ = "0.1.0"

__all__ = [
    "AudioClip",
    "GccResult",
    "MicArray",
    "MultichannelRecording",
    "PositionEstimate",
    "SolverOptions",
    "TdoaMeasurement",
]
