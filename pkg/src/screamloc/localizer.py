"""Source position from pairwise delays.

A coarse steered-response-power grid search picks the starting point and
gradient descent on the weighted squared TDOA residual refines it::

    loss(p) = sum_ij w_ij * (tau_ij - (|p - m_i| - |p - m_j|) / c) ** 2

Positions are in metres, delays in seconds, so the loss is in s^2 and raw
gradients are tiny; the default learning rate compensates.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .errors import GeometryError, GridTooCoarse, NonFiniteLoss, UnknownMicId
from .tdoa import SPEED_OF_SOUND, GccResult, PairCorrelation, TdoaMeasurement

DISTANCE_FLOOR = 1e-9
MAX_HALVINGS = 20
SRP_CHUNK = 1 << 17
SRP_SMOOTHING = 0.5


@dataclass(frozen=True)
class MicArray:
    ids: tuple[str, ...]
    positions: np.ndarray  # (M, 3) metres

    def __post_init__(self) -> None:
        ids = tuple(str(i) for i in self.ids)
        pos = np.array(self.positions, dtype=float).reshape(-1, 3)
        if len(ids) != pos.shape[0]:
            raise GeometryError("one position per microphone id")
        if len(ids) < 2:
            raise GeometryError("an array needs at least two microphones")
        if len(set(ids)) != len(ids):
            raise GeometryError("microphone ids must be unique")
        for a, b in combinations(range(len(ids)), 2):
            if np.linalg.norm(pos[a] - pos[b]) <= 1e-6:
                raise GeometryError(f"microphones {ids[a]} and {ids[b]} coincide")
        pos.flags.writeable = False
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "positions", pos)

    @classmethod
    def from_mapping(cls, mics: Mapping[str, Sequence[float]]) -> "MicArray":
        return cls(tuple(mics), np.array([mics[k] for k in mics], dtype=float))

    def __len__(self) -> int:
        return len(self.ids)

    def index(self, mic_id: str) -> int:
        try:
            return self.ids.index(str(mic_id))
        except ValueError:
            raise UnknownMicId(f"microphone {mic_id!r} is not in the array") from None

    def position(self, mic_id: str) -> np.ndarray:
        return self.positions[self.index(mic_id)]

    def distance(self, a: str, b: str) -> float:
        return float(np.linalg.norm(self.position(a) - self.position(b)))

    @property
    def centroid(self) -> np.ndarray:
        return self.positions.mean(axis=0)

    @property
    def shared_z(self) -> float | None:
        """The common z of a horizontal planar array, else None."""
        z = self.positions[:, 2]
        return float(z[0]) if np.all(z == z[0]) else None

    def is_coplanar(self, tol: float = 1e-9) -> bool:
        if len(self) < 4:
            return True
        centred = self.positions - self.centroid
        s = np.linalg.svd(centred, compute_uv=False)
        return bool(s[2] <= tol * max(s[0], 1.0))

    def transformed(self, rotation: np.ndarray | None = None, translation=None) -> "MicArray":
        pos = self.positions
        if rotation is not None:
            pos = pos @ np.asarray(rotation).T
        if translation is not None:
            pos = pos + np.asarray(translation)
        return MicArray(self.ids, pos)


@dataclass(frozen=True)
class SolverOptions:
    learning_rate: float = 1e4
    max_iters: int = 10000
    grad_tol: float = 1e-9
    step_tol: float = 1e-6
    c: float = SPEED_OF_SOUND

    def __post_init__(self) -> None:
        if min(self.learning_rate, self.grad_tol, self.step_tol, self.c) <= 0 or self.max_iters < 1:
            raise ValueError(f"invalid solver options: {self}")


@dataclass(frozen=True)
class PositionEstimate:
    position: np.ndarray
    final_loss: float
    iterations: int
    converged: bool
    path: np.ndarray  # (k, 3), last row == position
    losses: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class Bounds:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self) -> None:
        lo = np.asarray(self.lo, dtype=float).reshape(3)
        hi = np.asarray(self.hi, dtype=float).reshape(3)
        if np.any(hi < lo):
            raise ValueError("bounds must satisfy lo <= hi")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def around(cls, array: MicArray, margin: float) -> "Bounds":
        return cls(array.positions.min(axis=0) - margin, array.positions.max(axis=0) + margin)


def expected_tdoa(pos, mic_i, mic_j, c: float = SPEED_OF_SOUND) -> float:
    """``(|pos - mic_i| - |pos - mic_j|) / c`` in seconds."""
    pos = np.asarray(pos, dtype=float)
    return float((np.linalg.norm(pos - np.asarray(mic_i)) - np.linalg.norm(pos - np.asarray(mic_j))) / c)


def _pair_table(measurements: Sequence[TdoaMeasurement], array: MicArray):
    idx_i = np.array([array.index(m.mic_i) for m in measurements], dtype=int)
    idx_j = np.array([array.index(m.mic_j) for m in measurements], dtype=int)
    tau = np.array([m.tau_s for m in measurements], dtype=float)
    w = np.array([m.weight for m in measurements], dtype=float)
    if np.any(w < 0):
        raise ValueError("measurement weights must be non-negative")
    return array.positions[idx_i], array.positions[idx_j], tau, w


def _residuals(pos, mi, mj, tau, c):
    di = np.linalg.norm(pos - mi, axis=-1)
    dj = np.linalg.norm(pos - mj, axis=-1)
    return tau - (di - dj) / c, di, dj


def tdoa_loss(pos, measurements: Sequence[TdoaMeasurement], array: MicArray, c: float = SPEED_OF_SOUND) -> float:
    mi, mj, tau, w = _pair_table(measurements, array)
    r, _, _ = _residuals(np.asarray(pos, dtype=float), mi, mj, tau, c)
    return float(np.sum(w * r * r))


def tdoa_loss_gradient(pos, measurements: Sequence[TdoaMeasurement], array: MicArray,
                       c: float = SPEED_OF_SOUND) -> np.ndarray:
    """Analytic gradient of ``tdoa_loss``; distances are floored at 1e-9 m."""
    mi, mj, tau, w = _pair_table(measurements, array)
    return _gradient(np.asarray(pos, dtype=float), mi, mj, tau, w, c)


def _gradient(pos, mi, mj, tau, w, c):
    r, di, dj = _residuals(pos, mi, mj, tau, c)
    ui = (pos - mi) / np.maximum(di, DISTANCE_FLOOR)[:, None]
    uj = (pos - mj) / np.maximum(dj, DISTANCE_FLOOR)[:, None]
    return -2.0 / c * np.sum((w * r)[:, None] * (ui - uj), axis=0)


def gradient_descent_localize(init, measurements: Sequence[TdoaMeasurement], array: MicArray,
                              opts: SolverOptions = SolverOptions()) -> PositionEstimate:
    """Fixed-rate gradient descent with a halving safeguard.

    Each iteration tries ``p - lr * grad``, halving the step (up to 20 times)
    while the loss would increase, and stops once no halving helps. For a
    horizontal planar array the z coordinate stays on the array plane.
    """
    mi, mj, tau, w = _pair_table(measurements, array)
    c = opts.c
    p = np.array(init, dtype=float).reshape(3)
    plane_z = array.shared_z
    mask = np.ones(3)
    if plane_z is not None:
        p[2] = plane_z
        mask[2] = 0.0

    def loss_at(q):
        r, _, _ = _residuals(q, mi, mj, tau, c)
        return float(np.sum(w * r * r))

    loss = loss_at(p)
    if not math.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss} at the initial point")
    path = [p.copy()]
    losses = [loss]
    converged = False
    iterations = 0
    for _ in range(opts.max_iters):
        g = _gradient(p, mi, mj, tau, w, c) * mask
        if np.linalg.norm(g) < opts.grad_tol:
            converged = True
            break
        step = opts.learning_rate
        for _ in range(MAX_HALVINGS + 1):
            cand = p - step * g
            cand_loss = loss_at(cand)
            if cand_loss <= loss:
                break
            step *= 0.5
        else:
            break
        moved = float(np.linalg.norm(cand - p))
        p, loss = cand, cand_loss
        path.append(p.copy())
        losses.append(loss)
        iterations += 1
        if moved < opts.step_tol:
            converged = True
            break
    return PositionEstimate(p, loss, iterations, converged, np.array(path), np.array(losses))


@dataclass(frozen=True)
class SrpEstimate:
    position: np.ndarray
    power: float
    low_confidence: bool
    n_points: int


def grid_points(bounds: Bounds, grid_step: float, plane_z: float | None = None) -> np.ndarray:
    if grid_step <= 0:
        raise ValueError("grid step must be positive")
    axes = []
    for k in range(3):
        if k == 2 and plane_z is not None:
            axes.append(np.array([plane_z]))
            continue
        n = int(math.floor((bounds.hi[k] - bounds.lo[k]) / grid_step + 1e-9)) + 1
        axes.append(bounds.lo[k] + grid_step * np.arange(n))
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def _curve_table(curves, array: MicArray):
    if isinstance(curves, Mapping):
        items = [(i, j, res) for (i, j), res in curves.items()]
    else:
        items = [(pc.mic_i, pc.mic_j, pc.result) for pc in curves]
    covered = {frozenset((i, j)) for i, j, _ in items}
    needed = {frozenset(p) for p in combinations(array.ids, 2)}
    if not needed <= covered:
        raise ValueError("correlation curves must cover every microphone pair")
    return items


def srp_phat_init(curves: Sequence[PairCorrelation] | Mapping[tuple[str, str], GccResult], array: MicArray,
                  bounds: Bounds, grid_step: float, c: float = SPEED_OF_SOUND,
                  smoothing: float | None = None) -> SrpEstimate:
    """Grid argmax of the summed pair correlations at each point's implied lags.

    Each curve for pair (i, j) is read at ``round(tau_ij(q) * sr)`` with
    ``tau_ij(q) = (d_i - d_j) / c``. Ties go to the point nearest the array
    centroid; a tie or a flat map marks the result low-confidence.

    PHAT peaks are about one sample wide while neighbouring grid points are
    many samples apart in lag, so curves are first blurred by a Gaussian of
    ``smoothing`` lags (default ``0.5 * grid_step / c * sr``). Pass
    ``smoothing=0`` to read the raw curves.

    Raises:
        GridTooCoarse: the grid has fewer than 8 points.
    """
    items = _curve_table(curves, array)
    grid = grid_points(bounds, grid_step, array.shared_z)
    if grid.shape[0] < 8:
        raise GridTooCoarse(f"grid has {grid.shape[0]} points, need at least 8")

    blurred = []
    for _, _, res in items:
        sigma = SRP_SMOOTHING * grid_step / c * res.sample_rate_hz if smoothing is None else smoothing
        blurred.append(gaussian_filter1d(res.correlation, sigma, mode="constant") if sigma > 0 else res.correlation)

    power = np.zeros(grid.shape[0])
    for start in range(0, grid.shape[0], SRP_CHUNK):
        q = grid[start:start + SRP_CHUNK]
        dist = np.linalg.norm(q[:, None, :] - array.positions[None, :, :], axis=2)
        acc = np.zeros(q.shape[0])
        for (i, j, res), curve in zip(items, blurred):
            lag = np.rint((dist[:, array.index(i)] - dist[:, array.index(j)]) / c * res.sample_rate_hz)
            idx = lag.astype(int) + res.max_lag
            ok = (idx >= 0) & (idx < curve.shape[0])
            acc[ok] += curve[idx[ok]]
        power[start:start + q.shape[0]] = acc

    best = power.max()
    ties = np.flatnonzero(power == best)
    to_centroid = np.linalg.norm(grid[ties] - array.centroid, axis=1)
    k = int(ties[np.argmin(to_centroid)])
    low = ties.shape[0] > 1 or bool(np.ptp(power) == 0)
    return SrpEstimate(grid[k].copy(), float(best), low, int(grid.shape[0]))


def check_geometry(array: MicArray) -> None:
    """Reject arrays that cannot pin down a position."""
    if array.shared_z is not None:
        if len(array) < 3:
            raise GeometryError("planar localization needs at least three microphones")
        return
    if len(array) < 4 or array.is_coplanar():
        raise GeometryError("3-D localization needs at least four non-coplanar microphones")


def apply_weighting(measurements: Sequence[TdoaMeasurement], mode: str = "flat") -> list[TdoaMeasurement]:
    """Set ``w_ij``: ``flat`` gives 1, ``sharpness`` gives peak sharpness scaled to mean 1.

    Degenerate measurements always get weight 0.
    """
    live = [m for m in measurements if not m.degenerate]
    if mode == "flat":
        weights = [1.0] * len(live)
    elif mode == "sharpness":
        s = np.array([m.peak_sharpness for m in live], dtype=float)
        weights = list(s / s.mean()) if live else []
    else:
        raise ValueError(f"unknown weighting mode {mode!r}")
    it = iter(weights)
    return [
        TdoaMeasurement(m.mic_i, m.mic_j, m.tau_s, 0.0 if m.degenerate else float(next(it)),
                        m.peak_sharpness, m.degenerate)
        for m in measurements
    ]


@dataclass(frozen=True)
class Localization:
    estimate: PositionEstimate
    init: np.ndarray
    srp: SrpEstimate | None


def localize(measurements: Sequence[TdoaMeasurement], array: MicArray, opts: SolverOptions = SolverOptions(),
             curves=None, bounds: Bounds | None = None, grid_step: float = 0.5) -> Localization:
    """SRP grid start (or the array centroid without curves), then descent."""
    check_geometry(array)
    srp = None
    if curves is not None:
        srp = srp_phat_init(curves, array, bounds or Bounds.around(array, 5.0), grid_step, opts.c)
        init = srp.position
    else:
        init = array.centroid
    return Localization(gradient_descent_localize(init, measurements, array, opts), np.asarray(init), srp)


def write_path_csv(estimate: PositionEstimate, path: str | Path) -> None:
    """Columns: iter, x, y, z, loss."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iter", "x", "y", "z", "loss"])
        for k, (p, loss) in enumerate(zip(estimate.path.tolist(), estimate.losses.tolist())):
            writer.writerow([k, repr(p[0]), repr(p[1]), repr(p[2]), repr(loss)])


@dataclass(frozen=True)
class Geometry:
    array: MicArray
    c: float = SPEED_OF_SOUND
    bounds: Bounds | None = None

    def to_json(self) -> dict:
        doc = {
            "mics": [{"id": i, "x": p[0], "y": p[1], "z": p[2]}
                     for i, p in zip(self.array.ids, self.array.positions.tolist())],
            "c": self.c,
        }
        if self.bounds is not None:
            doc["bounds"] = {"min": self.bounds.lo.tolist(), "max": self.bounds.hi.tolist()}
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "Geometry":
        mics = doc["mics"]
        array = MicArray(tuple(str(m["id"]) for m in mics),
                         np.array([[m["x"], m["y"], m.get("z", 0.0)] for m in mics], dtype=float))
        bounds = None
        if doc.get("bounds") is not None:
            bounds = Bounds(doc["bounds"]["min"], doc["bounds"]["max"])
        return cls(array, float(doc.get("c", SPEED_OF_SOUND)), bounds)


def load_geometry(path: str | Path) -> Geometry:
    return Geometry.from_json(json.loads(Path(path).read_text()))
