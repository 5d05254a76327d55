"""Baseline multi-object tracker.

Association is IoU-based Hungarian matching with a class-agreement penalty.
Motion is an 8-dimensional constant-velocity state ``(l, t, w, h, vl, vt, vw, vh)``
propagated through symmetric sigma points and corrected with a linear
measurement update on the four box coordinates.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .ingest import Box, Detection, Scenario, detection_keys, sort_detections

logger = logging.getLogger(__name__)

STATE_DIM = 8
OBS_DIM = 4


# --- geometry ---------------------------------------------------------------


def _overlap(a: Box, b: Box) -> tuple[float, float, float]:
    iw = min(a.left + a.width, b.left + b.width) - max(a.left, b.left)
    ih = min(a.top + a.height, b.top + b.height) - max(a.top, b.top)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    enclosing = (max(a.left + a.width, b.left + b.width) - min(a.left, b.left)) * (
        max(a.top + a.height, b.top + b.height) - min(a.top, b.top)
    )
    return inter, union, enclosing


def iou(a: Box, b: Box) -> float:
    inter, union, _ = _overlap(a, b)
    if union <= 0:
        return 0.0
    return min(1.0, inter / union)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between two ``(N, 4)`` / ``(M, 4)`` arrays of ltwh boxes."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    ax2, ay2 = a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx2, by2 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    iw = np.minimum(ax2[:, None], bx2[None, :]) - np.maximum(a[:, 0, None], b[None, :, 0])
    ih = np.minimum(ay2[:, None], by2[None, :]) - np.maximum(a[:, 1, None], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return np.minimum(out, 1.0)


def giou(a: Box, b: Box) -> float:
    """Generalized IoU in (-1, 1]; degenerate boxes never yield NaN."""
    inter, union, enclosing = _overlap(a, b)
    value = min(1.0, inter / union) if union > 0 else 0.0
    if enclosing > 0:
        value -= (enclosing - union) / enclosing
    return value


# --- assignment -------------------------------------------------------------


def _lsa(cost: np.ndarray, rows: list[int], cols: list[int]) -> tuple[float, dict[int, int]]:
    """Optimal cost and row->col map of the sub-problem ``cost[rows][:, cols]``."""
    if not rows or not cols:
        return 0.0, {}
    sub = cost[np.ix_(rows, cols)]
    r, c = linear_sum_assignment(sub)
    return float(sub[r, c].sum()), {rows[i]: cols[j] for i, j in zip(r, c)}


def _lower_bounds(cost: np.ndarray, rows: list[int], cols: list[int], skips: list[int]) -> np.ndarray:
    """For each column in ``skips``, a cheap bound on the sub-problem without it.

    The bound is the sum of the k smallest row minima, k being the size of the
    sub-problem's matching.
    """
    k = min(len(rows), len(cols) - 1)
    if k <= 0:
        return np.zeros(len(skips))
    sub = cost[np.ix_(rows, cols)]
    order = np.argsort(sub, axis=1)
    first = sub[np.arange(len(rows)), order[:, 0]]
    second = sub[np.arange(len(rows)), order[:, 1]] if len(cols) > 1 else np.full(len(rows), np.inf)
    pos = {c: idx for idx, c in enumerate(cols)}
    skip_idx = np.array([pos[j] for j in skips])
    mins = np.where(order[None, :, 0] == skip_idx[:, None], second[None, :], first[None, :])
    return np.sort(mins, axis=1)[:, :k].sum(axis=1)


def _strict_minima(cost: np.ndarray) -> Optional[list[tuple[int, int]]]:
    """The unique optimum when every row (or, for more rows than columns, every
    column) has a strict minimum at a distinct position; otherwise None."""
    flip = cost.shape[0] > cost.shape[1]
    c = cost.T if flip else cost
    if c.shape[1] == 1:
        if c.shape[0] > 1:
            return None
        return [(0, 0)]
    part = np.partition(c, 1, axis=1)
    # same tie tolerance as the full search, taken at the candidate optimum
    tol = 1e-9 * max(1.0, abs(float(part[:, 0].sum())))
    if np.any(part[:, 1] - part[:, 0] <= tol):
        return None
    arg = np.argmin(c, axis=1)
    if len(set(arg.tolist())) != len(arg):
        return None
    pairs = [(int(j), i) for i, j in enumerate(arg)] if flip else [(i, int(j)) for i, j in enumerate(arg)]
    return sorted(pairs)


def hungarian(cost) -> tuple[list[tuple[int, int]], float]:
    """Minimum-cost matching of size ``min(n, m)``.

    Among optimal matchings the one whose row-by-row column sequence is
    lexicographically smallest is returned (an unmatched row sorts after every
    column). Returns ``(pairs, total_cost)`` with pairs sorted by row.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost entries must be finite")
    n, m = cost.shape
    if n == 0 or m == 0:
        return [], 0.0
    quick = _strict_minima(cost)
    if quick is not None:
        return quick, float(sum(cost[i, j] for i, j in quick))
    best, assign = _lsa(cost, list(range(n)), list(range(m)))
    tol = 1e-9 * max(1.0, abs(best))

    # Walk rows in order; for each, try columns that sort before the current
    # optimal choice. A feasible one is adopted together with the completion
    # found while testing it, so the running assignment always stays optimal.
    pairs: list[tuple[int, int]] = []
    fixed = 0.0
    free_rows = list(range(n))
    free_cols = list(range(m))
    while free_rows and free_cols:
        i = free_rows.pop(0)
        current = assign.get(i)
        earlier = [j for j in free_cols if current is None or j < current]
        if earlier:
            bounds = fixed + cost[i, earlier] + _lower_bounds(cost, free_rows, free_cols, earlier)
            earlier = [j for j, lb in zip(earlier, bounds) if lb <= best + tol]
        for j in earlier:
            rest, completion = _lsa(cost, free_rows, [c for c in free_cols if c != j])
            if fixed + cost[i, j] + rest <= best + tol:
                current, assign = j, completion
                break
        if current is None:
            continue
        pairs.append((i, current))
        fixed += cost[i, current]
        free_cols.remove(current)
    total = float(sum(cost[i, j] for i, j in pairs))
    return pairs, total


# --- sigma-point motion model -----------------------------------------------


class NotPSDError(np.linalg.LinAlgError):
    pass


def psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    """Lower factor ``L`` with ``L @ L.T == matrix`` for symmetric PSD input."""
    matrix = 0.5 * (matrix + matrix.T)
    try:
        return np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError:
        pass
    vals, vecs = np.linalg.eigh(matrix)
    scale = max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -1e-9 * scale:
        raise NotPSDError(f"covariance has negative eigenvalue {vals.min():.3g}")
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


@dataclass(frozen=True)
class SigmaParams:
    """Symmetric sigma-point pattern.

    ``wm``/``wc`` are per-axis weights of length ``2r+1`` ordered
    ``[center, +1..+r, -1..-r]``. Off-center weights are shared across the
    ``n`` state axes (each gets ``w/n``) so that the combined mean weights sum
    to ``sum(wm)``.
    """

    beta: float = 1.0
    r: int = 1
    wm: Optional[tuple[float, ...]] = None
    wc: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.r < 1:
            raise ValueError("r must be at least 1")
        for w in (self.wm, self.wc):
            if w is not None and len(w) != self.window:
                raise ValueError(f"weight vector must have length {self.window}")
        if self.wm is not None and abs(sum(self.wm) - 1.0) > 1e-9:
            raise ValueError("mean weights must sum to 1")

    @property
    def window(self) -> int:
        return 2 * self.r + 1

    def offsets(self) -> np.ndarray:
        pos = np.arange(1, self.r + 1) / self.r
        return np.concatenate([[0.0], pos, -pos])

    @classmethod
    def for_dim(cls, n: int, beta: float = 1.0, r: int = 1) -> "SigmaParams":
        """Weights that reproduce the input covariance exactly under linear maps."""
        T = 2 * r + 1
        pos = np.arange(1, r + 1) / r
        spread = 2.0 * float(np.sum(pos**2))
        w = n / (beta**2 * T * spread)
        off = [w] * (2 * r)
        centre = 1.0 - sum(off)
        weights = tuple([centre] + off)
        return cls(beta=beta, r=r, wm=weights, wc=weights)

    def resolved(self, n: int) -> "SigmaParams":
        if self.wm is not None and self.wc is not None:
            return self
        default = SigmaParams.for_dim(n, self.beta, self.r)
        return SigmaParams(self.beta, self.r, self.wm or default.wm, self.wc or default.wc)


@lru_cache(maxsize=64)
def _pattern(params: SigmaParams, n: int):
    params = params.resolved(n)
    steps = params.offsets()[1:] * params.beta
    wm = np.concatenate([[params.wm[0]], np.repeat(np.asarray(params.wm[1:]) / n, n)])
    wc = np.concatenate([[params.wc[0]], np.repeat(np.asarray(params.wc[1:]) / n, n)])
    for arr in (steps, wm, wc):
        arr.setflags(write=False)
    return params.window, steps, wm, wc


def sigma_points(mean: np.ndarray, cov: np.ndarray, params: SigmaParams):
    """Return ``(points, wm, wc)`` with points as rows, centre first."""
    n = mean.shape[0]
    window, steps, wm, wc = _pattern(params, n)
    root = psd_sqrt(window * cov)
    spread = steps[:, None, None] * root.T[None, :, :]
    points = np.vstack([mean[None, :], mean[None, :] + spread.reshape(-1, n)])
    return points, wm, wc


def transition_matrix(dim: int = STATE_DIM, dt: float = 1.0) -> np.ndarray:
    half = dim // 2
    A = np.eye(dim)
    A[:half, half:] = dt * np.eye(half)
    return A


@dataclass
class TrackState:
    mean: np.ndarray
    covariance: np.ndarray
    age: int = 0
    misses: int = 0

    def box(self) -> Box:
        return Box.from_array(self.mean[:OBS_DIM])

    @classmethod
    def from_box(cls, box: Box, position_var: float = 1.0, velocity_var: float = 100.0) -> "TrackState":
        mean = np.concatenate([box.as_array(), np.zeros(OBS_DIM)])
        cov = np.diag([position_var] * OBS_DIM + [velocity_var] * OBS_DIM)
        return cls(mean, cov)


def _propagate(mean, cov, params, A, Q):
    points, wm, wc = sigma_points(mean, cov, params)
    moved = points @ A.T
    new_mean = wm @ moved
    diff = moved - new_mean
    new_cov = (wc[:, None] * diff).T @ diff + Q
    return new_mean, 0.5 * (new_cov + new_cov.T)


@lru_cache(maxsize=16)
def _frozen(kind: str, n: int) -> np.ndarray:
    """Read-only shared copies of the constant model matrices."""
    arr = {"A": transition_matrix, "H": observation_matrix, "I": np.eye}[kind](n)
    arr.setflags(write=False)
    return arr


def predict(state: TrackState, params: SigmaParams = SigmaParams(), process_noise=0.01, A=None) -> TrackState:
    """Propagate the state one frame through the sigma-point pattern.

    ``process_noise`` is a scalar (times identity) or a full matrix. A
    covariance that is not PSD gets ``1e-6 * I`` added once before retrying.
    """
    n = state.mean.shape[0]
    A = _frozen("A", n) if A is None else A
    Q = _frozen("I", n) * process_noise if np.isscalar(process_noise) else np.asarray(process_noise)
    try:
        mean, cov = _propagate(state.mean, state.covariance, params, A, Q)
    except np.linalg.LinAlgError:
        logger.debug("covariance repair in predict")
        mean, cov = _propagate(state.mean, state.covariance + 1e-6 * np.eye(n), params, A, Q)
    return TrackState(mean, cov, state.age + 1, state.misses)


def kalman_update(mean, cov, z, H, R):
    """Linear-Gaussian measurement update (Joseph form)."""
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    H = np.atleast_2d(H)
    R = np.atleast_2d(R)
    S = H @ cov @ H.T + R
    PHt = cov @ H.T
    try:
        K = np.linalg.solve(S.T, PHt.T).T
    except np.linalg.LinAlgError:
        logger.debug("innovation covariance repair in correct")
        K = np.linalg.solve((S + 1e-6 * np.eye(S.shape[0])).T, PHt.T).T
    innovation = np.atleast_1d(z) - H @ mean
    new_mean = mean + K @ innovation
    I_KH = _frozen("I", cov.shape[0]) - K @ H
    new_cov = I_KH @ cov @ I_KH.T + K @ R @ K.T
    return new_mean, 0.5 * (new_cov + new_cov.T)


def observation_matrix(dim: int = STATE_DIM) -> np.ndarray:
    H = np.zeros((OBS_DIM, dim))
    H[:, :OBS_DIM] = np.eye(OBS_DIM)
    return H


def correct(state: TrackState, measurement: Box, R=1.0) -> TrackState:
    n = state.mean.shape[0]
    R = _frozen("I", OBS_DIM) * R if np.isscalar(R) else np.asarray(R)
    mean, cov = kalman_update(state.mean, state.covariance, measurement.as_array(), _frozen("H", n), R)
    return TrackState(mean, cov, state.age, 0)


# --- tracks -----------------------------------------------------------------


@dataclass(frozen=True)
class TrackPoint:
    frame: int
    box: Box
    class_id: int
    source: Optional[tuple[int, int]] = None  # key of the matched detection, None when coasting


@dataclass
class Track:
    id: int
    state: TrackState
    class_id: int
    history: list[TrackPoint] = field(default_factory=list)
    hits: int = 0

    def frames(self) -> list[int]:
        return [p.frame for p in self.history]

    def box_at(self, frame: int) -> Optional[Box]:
        for p in self.history:
            if p.frame == frame:
                return p.box
        return None


@dataclass
class TrackerConfig:
    gate: float = 0.7
    init_frames: int = 1
    max_misses: int = 5
    process_noise: float = 0.01
    measurement_noise: float = 1.0
    class_penalty: float = 0.3
    position_var: float = 1.0
    velocity_var: float = 100.0
    sigma: SigmaParams = field(default_factory=SigmaParams)


class Tracker:
    """Frame-by-frame tracker. Not thread-safe: use one instance per scenario."""

    def __init__(self, config: Optional[TrackerConfig] = None):
        self.config = config or TrackerConfig()
        self.tracks: list[Track] = []
        self.tentative: list[Track] = []
        self.finished: list[Track] = []
        self._next_id = 1

    def _cost(self, tracks: Sequence[Track], detections: Sequence[Detection]) -> np.ndarray:
        preds = np.array([np.clip(t.state.mean[:OBS_DIM], [-np.inf, -np.inf, 0, 0], None) for t in tracks])
        boxes = np.array([d.box.as_array() for d in detections])
        track_cls = np.array([t.class_id for t in tracks])
        det_cls = np.array([d.class_id for d in detections])
        mismatch = (track_cls[:, None] != det_cls[None, :]) * self.config.class_penalty
        return 1.0 - iou_matrix(preds, boxes) + mismatch

    def step(self, frame: int, detections: Sequence[Detection], keys=None) -> list[Track]:
        cfg = self.config
        # without explicit keys, points are sourced by the detections' own (frame, id) keys
        keys = list(keys) if keys is not None else detection_keys(detections)
        live = self.tracks + self.tentative
        for track in live:
            track.state = predict(track.state, cfg.sigma, cfg.process_noise)

        matched_tracks = set()
        matched_dets = set()
        if live and detections:
            cost = self._cost(live, detections)
            pairs, _ = hungarian(cost)
            for i, j in pairs:
                if cost[i, j] > cfg.gate:
                    continue
                track, det = live[i], detections[j]
                track.state = correct(track.state, det.box, cfg.measurement_noise)
                track.class_id = det.class_id
                track.hits += 1
                track.history.append(TrackPoint(frame, track.state.box(), det.class_id, keys[j]))
                matched_tracks.add(id(track))
                matched_dets.add(j)

        for track in live:
            if id(track) in matched_tracks:
                continue
            track.state.misses += 1
            track.hits = 0
            track.history.append(TrackPoint(frame, track.state.box(), track.class_id, None))

        still_tentative = []
        for track in self.tentative:
            if id(track) not in matched_tracks:
                continue
            if track.hits >= cfg.init_frames:
                self._confirm(track)
            else:
                still_tentative.append(track)
        self.tentative = still_tentative

        alive = []
        for track in self.tracks:
            if track.state.misses > cfg.max_misses:
                self._retire(track)
            else:
                alive.append(track)
        self.tracks = alive

        for j, det in enumerate(detections):
            if j in matched_dets:
                continue
            state = TrackState.from_box(det.box, cfg.position_var, cfg.velocity_var)
            track = Track(0, state, det.class_id, [TrackPoint(frame, det.box, det.class_id, keys[j])], hits=1)
            if cfg.init_frames <= 1:
                self._confirm(track)
            else:
                self.tentative.append(track)
        return list(self.tracks)

    def _confirm(self, track: Track) -> None:
        track.id = self._next_id
        self._next_id += 1
        self.tracks.append(track)

    def _retire(self, track: Track) -> None:
        while track.history and track.history[-1].source is None:
            track.history.pop()
        if track.history:
            self.finished.append(track)

    def finish(self) -> list[Track]:
        """Retire every live track and return all confirmed tracks by id."""
        for track in self.tracks:
            self._retire(track)
        self.tracks = []
        self.tentative = []
        return sorted(self.finished, key=lambda t: t.id)


def run_tracker(scenario: Scenario, config: Optional[TrackerConfig] = None) -> list[Track]:
    tracker = Tracker(config)
    by_frame: dict[int, list[tuple[tuple[int, int], Detection]]] = {}
    for key, det in zip(detection_keys(scenario.detections), scenario.detections):
        by_frame.setdefault(det.frame, []).append((key, det))
    for frame in range(1, scenario.frame_count + 1):
        items = by_frame.get(frame, [])
        tracker.step(frame, [d for _, d in items], [k for k, _ in items])
    return tracker.finish()


def tracks_to_detections(tracks: Iterable[Track]) -> tuple[Detection, ...]:
    """Track points as MOT records; coasting points get confidence 0."""
    out = []
    for track in tracks:
        for p in track.history:
            conf = 0.0 if p.source is None else 1.0
            out.append(Detection(p.frame, track.id, p.box, conf, p.class_id, None, 1.0, False))
    return sort_detections(out)


def tracks_to_scenario(tracks: Iterable[Track], frame_count: int, name: str = "tracks") -> Scenario:
    dets = tracks_to_detections(tracks)
    frame_count = max([frame_count] + [d.frame for d in dets])
    return Scenario(name, frame_count, dets)


def tracks_from_scenario(scenario: Scenario, detections: Optional[Scenario] = None,
                         min_iou: float = 0.5) -> list[Track]:
    """Rebuild track histories from MOT-format track output (no motion state).

    With ``detections``, points written with positive confidence are linked
    back to their source detection: per frame, a Hungarian match on IoU, kept
    when the overlap reaches ``min_iou``.
    """
    grouped: dict[int, list[Detection]] = {}
    for det in scenario.detections:
        if det.track_id is None:
            continue
        grouped.setdefault(det.track_id, []).append(det)

    sources: dict[tuple[int, int], tuple[int, int]] = {}
    if detections is not None:
        det_frames: dict[int, list[tuple[tuple[int, int], Detection]]] = {}
        for key, det in zip(detection_keys(detections.detections), detections.detections):
            det_frames.setdefault(det.frame, []).append((key, det))
        observed: dict[int, list[Detection]] = {}
        for det in scenario.detections:
            if det.track_id is not None and det.confidence > 0:
                observed.setdefault(det.frame, []).append(det)
        for frame, points in observed.items():
            cands = det_frames.get(frame, [])
            if not cands:
                continue
            overlap = iou_matrix([p.box.as_array() for p in points], [d.box.as_array() for _, d in cands])
            rows, cols = linear_sum_assignment(-overlap)
            for r, c in zip(rows, cols):
                if overlap[r, c] >= min_iou:
                    sources[(points[r].track_id, frame)] = cands[c][0]

    tracks = []
    for tid in sorted(grouped):
        dets = sorted(grouped[tid], key=lambda d: d.frame)
        last = dets[-1]
        state = TrackState.from_box(last.box)
        history = [TrackPoint(d.frame, d.box, d.class_id, sources.get((tid, d.frame))) for d in dets]
        tracks.append(Track(tid, state, last.class_id, history, hits=len(dets)))
    return tracks
