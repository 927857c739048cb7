"""End-to-end run: window the audio, detect, localize positives, write artifacts.

Output layout under the run directory::

    alerts.jsonl                       one alert per localized window
    correlations/<window>_<i>_<j>.csv  lag_samples, lag_ms, value
    descent/<window>.csv               iter, x, y, z, loss
    summary.json                       per-window decisions

Everything written is a deterministic function of inputs and config.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import detector as det
from .audio_io import AudioClip, MultichannelRecording, fix_duration, load_wav, resample, segment_recording
from .errors import GeometryError, ScreamlocError
from .features import MfccConfig, feature_vector
from .localizer import (
    Bounds,
    Geometry,
    SolverOptions,
    apply_weighting,
    check_geometry,
    load_geometry,
    localize,
    write_path_csv,
)
from .simulator import load_scene, simulate
from .tdoa import CORRELATORS, correlate_pairs, measurement_from_pair, write_correlation_csv

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
PIPELINE_RATE_HZ = 16000
EXIT_OK, EXIT_CONFIG, EXIT_GEOMETRY, EXIT_DATA = 0, 2, 3, 4


class ConfigError(ScreamlocError):
    exit_code = EXIT_CONFIG


class ChannelMismatch(ScreamlocError):
    exit_code = EXIT_GEOMETRY


class DataError(ScreamlocError):
    exit_code = EXIT_DATA


@dataclass(frozen=True)
class DetectorConfig:
    kind: str = "energy"
    rms_threshold: float = 0.05
    model_path: Path | None = None


@dataclass(frozen=True)
class PipelineConfig:
    geometry_path: Path | None = None
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    threshold: float = det.DEFAULT_THRESHOLD
    window_s: float = 10.0
    hop_s: float | None = None
    correlator: str = "gcc_phat"
    solver: SolverOptions = field(default_factory=SolverOptions)
    weighting: str = "flat"
    grid_step: float = 0.5
    bounds_margin: float = 2.0
    output_dir: Path = Path("out")
    workers: int | None = None

    @property
    def hop(self) -> float:
        return self.window_s if self.hop_s is None else self.hop_s


def _resolve(base: Path, value) -> Path | None:
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else base / p


def load_config(path: str | Path) -> PipelineConfig:
    """Parse and validate a JSON pipeline config; relative paths resolve against its directory."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(doc, path.parent)


def config_from_dict(doc: dict, base: Path = Path(".")) -> PipelineConfig:
    try:
        d = doc.get("detector", {"kind": "energy"})
        detector = DetectorConfig(
            kind=d.get("kind", "energy"),
            rms_threshold=float(d.get("rms_threshold", 0.05)),
            model_path=_resolve(base, d.get("model")),
        )
        cfg = PipelineConfig(
            geometry_path=_resolve(base, doc.get("geometry")),
            detector=detector,
            threshold=float(doc.get("threshold", det.DEFAULT_THRESHOLD)),
            window_s=float(doc.get("window_s", 10.0)),
            hop_s=None if doc.get("hop_s") is None else float(doc["hop_s"]),
            correlator=doc.get("correlator", "gcc_phat"),
            solver=SolverOptions(**doc.get("solver", {})),
            weighting=doc.get("weighting", "flat"),
            grid_step=float(doc.get("grid_step", 0.5)),
            bounds_margin=float(doc.get("bounds_margin", 2.0)),
            output_dir=_resolve(base, doc.get("output_dir", "out")),
            workers=doc.get("workers"),
        )
    except (TypeError, ValueError, AttributeError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc

    if detector.kind not in ("energy", "logistic"):
        raise ConfigError(f"unknown detector {detector.kind!r}")
    if detector.kind == "logistic" and (detector.model_path is None or not detector.model_path.exists()):
        raise ConfigError(f"logistic detector model not found: {detector.model_path}")
    if detector.kind == "energy" and detector.rms_threshold <= 0:
        raise ConfigError("rms_threshold must be positive")
    if not 0 <= cfg.threshold <= 1:
        raise ConfigError("threshold must lie in [0, 1]")
    if cfg.window_s <= 0 or not 0 < cfg.hop <= cfg.window_s:
        raise ConfigError("need window_s > 0 and 0 < hop_s <= window_s")
    if cfg.correlator not in ("gcc", "gcc_phat"):
        raise ConfigError(f"correlator must be gcc or gcc_phat, got {cfg.correlator!r}")
    if cfg.weighting not in ("flat", "sharpness"):
        raise ConfigError(f"unknown weighting {cfg.weighting!r}")
    if cfg.grid_step <= 0:
        raise ConfigError("grid_step must be positive")
    if cfg.geometry_path is not None and not cfg.geometry_path.exists():
        raise ConfigError(f"geometry file not found: {cfg.geometry_path}")
    return cfg


def _id_key(mic_id: str):
    return (0, int(mic_id), "") if re.fullmatch(r"-?\d+", mic_id) else (1, 0, mic_id)


def reference_channel(ids: Sequence[str]) -> str:
    """Lowest microphone id, numeric ids compared as numbers."""
    return min(ids, key=_id_key)


def _recording_from_wavs(paths: Sequence[str | Path], geometry: Geometry) -> MultichannelRecording:
    ids = geometry.array.ids
    if len(paths) != len(ids):
        raise ChannelMismatch(f"{len(paths)} input files for {len(ids)} microphones")
    names = [re.fullmatch(r"mic_(.+)\.wav", Path(p).name) for p in paths]
    if all(names) and {m.group(1) for m in names} == set(ids):
        by_id = {m.group(1): Path(p) for m, p in zip(names, paths)}
        ordered = [by_id[i] for i in ids]
    else:
        ordered = [Path(p) for p in paths]
    clips = []
    for p in ordered:
        if not p.exists():
            raise ConfigError(f"input not found: {p}")
        clips.append(resample(load_wav(p), PIPELINE_RATE_HZ))
    if len({len(c) for c in clips}) != 1:
        raise ChannelMismatch("input channels differ in length")
    return MultichannelRecording(tuple(clips), ids)


class Detector:
    """Window scorer built from a ``DetectorConfig``."""

    def __init__(self, cfg: DetectorConfig, threshold: float):
        self.cfg = cfg
        self.threshold = threshold
        self.model = det.load_model(cfg.model_path) if cfg.kind == "logistic" else None
        self.features = MfccConfig()

    def __call__(self, clip: AudioClip, window_index: int, start_s: float) -> det.DetectionResult:
        if self.model is None:
            return det.energy_detect(clip, self.cfg.rms_threshold, window_index, start_s)
        score = det.predict(self.model, feature_vector(clip, self.features))
        return det.DetectionResult(window_index, start_s, start_s + clip.duration_s, score,
                                   score >= self.threshold, "logistic", self.threshold)


@dataclass
class RunResult:
    exit_code: int
    out_dir: Path
    alerts: list[dict]
    windows: list[dict]


def _jsonable(x):
    return [float(v) for v in np.asarray(x).tolist()]


def run(
    config: PipelineConfig,
    inputs: Sequence[str | Path] | None = None,
    scene_path: str | Path | None = None,
    force_localize: bool = False,
    out_dir: str | Path | None = None,
) -> RunResult:
    """Process every window of the input and write the run artifacts.

    Raises:
        ConfigError, ChannelMismatch: mapped to exit codes 2 and 3 by the CLI.
    """
    if (inputs is None) == (scene_path is None):
        raise ConfigError("give either per-microphone WAV inputs or a scene file")
    geometry = load_geometry(config.geometry_path) if config.geometry_path else None
    if scene_path is not None:
        try:
            scene = load_scene(scene_path)
        except (OSError, KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"cannot load scene {scene_path}: {exc}") from exc
        if geometry is None:
            geometry = Geometry(scene.array, scene.c)
        elif set(geometry.array.ids) != set(scene.array.ids):
            raise ChannelMismatch("scene microphones do not match the configured geometry")
        rec, _ = simulate(scene)
        rec = MultichannelRecording(tuple(rec.channel(i) for i in geometry.array.ids), geometry.array.ids)
        rec = rec.map(lambda c: resample(c, PIPELINE_RATE_HZ))
    else:
        if geometry is None:
            raise ConfigError("a geometry file is required for WAV inputs")
        rec = _recording_from_wavs(inputs, geometry)

    array = geometry.array
    try:
        check_geometry(array)
    except GeometryError as exc:
        raise ChannelMismatch(str(exc)) from exc
    opts = SolverOptions(config.solver.learning_rate, config.solver.max_iters, config.solver.grad_tol,
                         config.solver.step_tol, geometry.c)
    bounds = geometry.bounds or Bounds.around(array, config.bounds_margin)
    detect = Detector(config.detector, config.threshold)
    ref = reference_channel(array.ids)

    out = Path(out_dir) if out_dir is not None else config.output_dir
    (out / "correlations").mkdir(parents=True, exist_ok=True)
    (out / "descent").mkdir(parents=True, exist_ok=True)

    alerts, windows = [], []
    with open(out / "alerts.jsonl", "w") as alert_file:
        for k, win in enumerate(segment_recording(rec, config.window_s, config.hop)):
            start = k * config.hop
            win = win.map(lambda c: fix_duration(c, config.window_s))
            decision = detect(win.channel(ref), k, start)
            localized = decision.is_scream or force_localize
            windows.append({
                "window_index": k, "start_s": start, "end_s": decision.end_s,
                "score": decision.score, "is_scream": decision.is_scream, "localized": localized,
            })
            if not localized:
                continue
            record = _localize_window(win, array, config, opts, bounds, out, k, decision)
            record["forced"] = not decision.is_scream
            alerts.append(record)
            alert_file.write(json.dumps(record) + "\n")
            log.info("window %d: alert at %s", k, record["position"])

    summary = {
        "schema_version": SCHEMA_VERSION,
        "reference_channel": ref,
        "detector": config.detector.kind,
        "correlator": config.correlator,
        "n_windows": len(windows),
        "n_alerts": len(alerts),
        "windows": windows,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return RunResult(EXIT_OK, out, alerts, windows)


def _localize_window(win, array, config: PipelineConfig, opts: SolverOptions, bounds: Bounds, out: Path,
                     k: int, decision: det.DetectionResult) -> dict:
    tag = f"{k:04d}"
    pairs = correlate_pairs(win, array, config.correlator, opts.c, config.workers)
    measurements = apply_weighting([measurement_from_pair(pc, opts.c) for pc in pairs], config.weighting)
    for pc in pairs:
        write_correlation_csv(pc.result, out / "correlations" / f"{tag}_{pc.mic_i}_{pc.mic_j}.csv")
    loc = localize(measurements, array, opts, curves=pairs, bounds=bounds, grid_step=config.grid_step)
    est = loc.estimate
    write_path_csv(est, out / "descent" / f"{tag}.csv")
    return {
        "schema_version": SCHEMA_VERSION,
        "window_index": k,
        "start_s": decision.start_s,
        "end_s": decision.end_s,
        "score": decision.score,
        "detector": decision.detector_name,
        "position": _jsonable(est.position),
        "init_position": _jsonable(loc.init),
        "srp_low_confidence": bool(loc.srp.low_confidence) if loc.srp else True,
        "final_loss": est.final_loss,
        "iterations": est.iterations,
        "converged": est.converged,
        "taus": [
            {"mic_i": m.mic_i, "mic_j": m.mic_j, "tau_s": m.tau_s, "weight": m.weight,
             "peak_sharpness": m.peak_sharpness, "degenerate": m.degenerate}
            for m in measurements
        ],
    }


# ---- detector training / evaluation on a labelled directory ----

CLASS_DIRS = (("non_scream", 0), ("scream", 1))
TEST_PERCENT = 20


def labelled_files(data_dir: str | Path) -> list[tuple[Path, int]]:
    """WAV files under ``scream/`` (label 1) and ``non_scream/`` (label 0), sorted by name."""
    root = Path(data_dir)
    files = []
    for sub, label in CLASS_DIRS:
        found = sorted((root / sub).glob("*.wav")) if (root / sub).is_dir() else []
        if not found:
            raise DataError(f"no WAV files in {root / sub}")
        files.extend((p, label) for p in found)
    return files


def in_test_split(path: Path) -> bool:
    """Deterministic ~20% holdout keyed on a SHA-256 of the file bytes."""
    digest = hashlib.sha256(path.read_bytes()).digest()
    return int.from_bytes(digest[:8], "big") % 100 < TEST_PERCENT


def clip_features(path: Path, seconds: float, config: MfccConfig = MfccConfig()) -> np.ndarray:
    clip = fix_duration(resample(load_wav(path), config.sample_rate_hz), seconds)
    return feature_vector(clip, config)


@dataclass
class SplitData:
    train_x: list
    train_y: list
    test_x: list
    test_y: list


def load_split(data_dir: str | Path, seconds: float = 10.0) -> SplitData:
    split = SplitData([], [], [], [])
    for path, label in labelled_files(data_dir):
        x = clip_features(path, seconds)
        if in_test_split(path):
            split.test_x.append(x)
            split.test_y.append(label)
        else:
            split.train_x.append(x)
            split.train_y.append(label)
    for name, ys in (("training", split.train_y), ("test", split.test_y)):
        if len(set(ys)) < 2:
            raise DataError(f"{name} split lacks one of the classes")
    return split


def train_detector(data_dir: str | Path, seconds: float = 10.0, epochs: int = 500, lr: float = 0.1,
                   split: SplitData | None = None) -> det.LogisticModel:
    split = split or load_split(data_dir, seconds)
    return det.train_logistic(split.train_x, split.train_y, epochs, lr, "auto", MfccConfig().fingerprint())


def score_split(model: det.LogisticModel, split: SplitData, threshold: float = det.DEFAULT_THRESHOLD) -> det.MetricsReport:
    scores = [det.predict(model, x) for x in split.test_x]
    return det.evaluate(scores, split.test_y, threshold)


def evaluate_detector(data_dir: str | Path, out_path: str | Path | None = None, seconds: float = 10.0,
                      epochs: int = 500, lr: float = 0.1, model: det.LogisticModel | None = None) -> det.MetricsReport:
    """Train on the 80% split (unless ``model`` is given), score the 20% holdout, write metrics JSON."""
    split = load_split(data_dir, seconds)
    if model is None:
        model = train_detector(data_dir, seconds, epochs, lr, split)
    elif model.config_fingerprint and model.config_fingerprint != MfccConfig().fingerprint():
        raise DataError(f"model was trained with {model.config_fingerprint}")
    report = score_split(model, split)
    if out_path is not None:
        doc = report.to_json()
        doc.update({"n_train": len(split.train_y), "n_test": len(split.test_y),
                    "config_fingerprint": model.config_fingerprint})
        Path(out_path).write_text(json.dumps(doc, indent=2) + "\n")
    return report


__all__ = [
    "CORRELATORS",
    "ChannelMismatch",
    "ConfigError",
    "DataError",
    "PipelineConfig",
    "evaluate_detector",
    "load_config",
    "run",
]
