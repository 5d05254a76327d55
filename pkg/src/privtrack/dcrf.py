"""Linear-chain CRF over per-track candidate assignments.

Each time slice of a track window offers a set of labels: a "lost" label
(index 0) and the candidate detections near the track (indices 1..k). Slices
with fewer candidates are padded with :data:`PAD` so every slice has the same
label count; padded labels can never win.

Potentials (log scale), with feature weights ``w = (w_class, w_motion, w_switch)``::

    unary(t, k)       = w_class * u_k * ln max(p_k(c), floor)
                        - w_motion * eta * |center_k - predicted_t|^2 / tau^2   (only if a prediction is given)
    unary(t, lost)    = lost_penalty
    pairwise(t, j, k) = - w_motion * eta * |center_k - center_j - v * dt|^2 / tau^2
                        - w_switch * switch_penalty * [identity_j != identity_k]

where ``u_k`` is the NCP unary weight of candidate ``k``, ``p_k(c)`` its score
for the track class ``c`` and ``v`` the track's centre velocity (zero unless
supplied).
"""
from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, replace
from typing import Hashable, Mapping, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .ingest import Box, Detection, Scenario, detection_keys
from .tracker import Track, TrackPoint

logger = logging.getLogger(__name__)

PAD = -1e6
LOST = 0


@dataclass(frozen=True)
class DcrfParams:
    tau: float = 10.0
    eta: float = 0.5
    switch_penalty: float = 1.0
    feature_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    lost_penalty: float = -2.0
    score_floor: float = 1e-12
    search_radius: float = 4.0  # in units of tau
    max_candidates: int = 4
    velocity_window: int = 50
    min_history: int = 5
    fit_confidence: float = 3.0  # std-devs of line-fit uncertainty folded into tau
    # known per-coordinate noise std (px) per unit of NCP noise multiplier
    observation_noise: float = 0.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.fit_confidence < 0 or self.observation_noise < 0:
            raise ValueError("fit_confidence and observation_noise must be non-negative")
        if self.eta < 0 or self.switch_penalty < 0:
            raise ValueError("eta and switch_penalty must be non-negative")
        if len(self.feature_weights) != 3:
            raise ValueError("feature_weights needs (class, motion, switch) entries")


@dataclass(frozen=True)
class Candidate:
    key: Hashable
    box: Box
    scores: tuple[float, ...]
    identity: Hashable
    unary_weight: float = 1.0


@dataclass
class ChainModel:
    unary: np.ndarray  # (T, L)
    pairwise: np.ndarray  # (T-1, L, L)
    labels: Optional[list] = None  # per slice: [None (lost), Candidate, ...]

    def __post_init__(self):
        self.unary = np.asarray(self.unary, dtype=float)
        T, L = self.unary.shape
        if T < 1 or L < 1:
            raise ValueError("chain needs at least one slice and one label")
        self.pairwise = np.asarray(self.pairwise, dtype=float).reshape(max(T - 1, 0), L, L)
        if not (np.all(np.isfinite(self.unary)) and np.all(np.isfinite(self.pairwise))):
            raise ValueError("potentials must be finite")

    @property
    def T(self) -> int:
        return self.unary.shape[0]

    @property
    def L(self) -> int:
        return self.unary.shape[1]


def _center(box: Box) -> tuple[float, float]:
    return box.center


def build_chain(
    window: Sequence[Sequence[Candidate]],
    params: DcrfParams = DcrfParams(),
    track_class: int = 0,
    own_identity: Hashable = None,
    velocity=None,
    predicted: Optional[Sequence] = None,
    frames: Optional[Sequence[int]] = None,
) -> ChainModel:
    """Assemble potentials for one track window.

    ``window[t]`` lists the real candidates of slice ``t``; the lost label is
    added in front. ``predicted[t]`` (a centre ``(x, y)``), when given, adds
    the motion-consistency term to candidate unaries and places the lost
    label at the prediction for pairwise motion terms.
    """
    if len(window) == 0:
        raise ValueError("window must contain at least one slice")
    w_class, w_motion, w_switch = params.feature_weights
    T = len(window)
    L = 1 + max(len(slice_) for slice_ in window)
    frames = list(frames) if frames is not None else list(range(T))
    velocity = np.zeros(2) if velocity is None else np.asarray(velocity, dtype=float)
    scale = params.eta / params.tau**2

    unary = np.full((T, L), PAD)
    centers = np.full((T, L, 2), np.nan)
    identities = np.full((T, L), -1, dtype=int)
    id_codes: dict[Hashable, int] = {own_identity: 0}
    labels: list[list] = []
    for t, slice_ in enumerate(window):
        pred = None if predicted is None or predicted[t] is None else np.asarray(predicted[t], dtype=float)
        unary[t, LOST] = params.lost_penalty
        identities[t, LOST] = 0
        if pred is not None:
            centers[t, LOST] = pred
        labels.append([None, *slice_])
        k = len(slice_)
        if k == 0:
            continue
        p = np.array([c.scores[track_class] if track_class < len(c.scores) else 0.0 for c in slice_])
        weight = np.array([c.unary_weight for c in slice_])
        c = np.array([_center(cand.box) for cand in slice_])
        value = w_class * weight * np.log(np.maximum(p, params.score_floor))
        if pred is not None:
            value = value - w_motion * scale * np.sum((c - pred) ** 2, axis=1)
        unary[t, 1:k + 1] = value
        centers[t, 1:k + 1] = c
        identities[t, 1:k + 1] = [id_codes.setdefault(cand.identity, len(id_codes)) for cand in slice_]

    pairwise = np.full((max(T - 1, 0), L, L), PAD)
    for t in range(1, T):
        dt = frames[t] - frames[t - 1]
        diff = centers[t][None, :, :] - centers[t - 1][:, None, :] - velocity * dt
        motion = np.sum(diff**2, axis=-1)
        motion[np.isnan(motion)] = 0.0
        switch = identities[t - 1][:, None] != identities[t][None, :]
        value = -w_motion * scale * motion - w_switch * params.switch_penalty * switch
        valid = (identities[t - 1] >= 0)[:, None] & (identities[t] >= 0)[None, :]
        pairwise[t - 1] = np.where(valid, value, PAD)
    return ChainModel(unary, pairwise, labels)


# --- inference --------------------------------------------------------------


def sequence_score(model: ChainModel, labels: Sequence[int]) -> float:
    """Unnormalized log-potential of a label sequence."""
    total = float(model.unary[0, labels[0]])
    for t in range(1, model.T):
        total += float(model.pairwise[t - 1, labels[t - 1], labels[t]] + model.unary[t, labels[t]])
    return total


def viterbi(model: ChainModel) -> tuple[list[int], float]:
    """MAP labelling. Ties go to the smallest label at the latest differing slice."""
    T, L = model.T, model.L
    delta = model.unary[0].copy()
    back = np.zeros((T, L), dtype=int)
    for t in range(1, T):
        scores = delta[:, None] + model.pairwise[t - 1]
        back[t] = np.argmax(scores, axis=0)  # argmax returns the first (smallest) maximiser
        delta = scores[back[t], np.arange(L)] + model.unary[t]
    labels = [int(np.argmax(delta))]
    for t in range(T - 1, 0, -1):
        labels.append(int(back[t, labels[-1]]))
    labels.reverse()
    return labels, sequence_score(model, labels)


def forward_backward(model: ChainModel) -> tuple[float, np.ndarray]:
    T, L = model.T, model.L
    alpha = np.empty((T, L))
    beta = np.zeros((T, L))
    alpha[0] = model.unary[0]
    for t in range(1, T):
        alpha[t] = logsumexp(alpha[t - 1][:, None] + model.pairwise[t - 1], axis=0) + model.unary[t]
    for t in range(T - 2, -1, -1):
        beta[t] = logsumexp(model.pairwise[t] + (model.unary[t + 1] + beta[t + 1])[None, :], axis=1)
    log_z = float(logsumexp(alpha[-1]))
    marginals = np.exp(alpha + beta - log_z)
    marginals /= marginals.sum(axis=1, keepdims=True)
    return log_z, marginals


def dcrf_score(model: ChainModel, labels: Sequence[int]) -> float:
    """Normalized log-probability of ``labels``; always <= 0."""
    log_z, _ = forward_backward(model)
    return min(0.0, sequence_score(model, labels) - log_z)


# --- refinement -------------------------------------------------------------


def _fit_line(frames: np.ndarray, values: np.ndarray):
    """Least-squares ``v(f) = a + b f`` per column; returns (a, b)."""
    if len(frames) == 1:
        return values[0].copy(), np.zeros(values.shape[1])
    f0 = frames.mean()
    x = frames - f0
    b = (x @ (values - values.mean(axis=0))) / float(x @ x)
    a = values.mean(axis=0) - b * f0
    return a, b


def _centers(boxes: np.ndarray) -> np.ndarray:
    return boxes[:, :2] + boxes[:, 2:] / 2.0


@dataclass(frozen=True)
class _MotionFit:
    """Straight-line centre track with constant box size."""

    a: np.ndarray
    b: np.ndarray
    size: np.ndarray
    f_mean: float
    sxx: float
    n: int

    @classmethod
    def of(cls, frames: np.ndarray, boxes: np.ndarray) -> "_MotionFit":
        a, b = _fit_line(frames, _centers(boxes))
        x = frames - frames.mean()
        return cls(a, b, boxes[:, 2:].mean(axis=0), float(frames.mean()), float(x @ x), len(frames))

    def boxes(self, frames: np.ndarray) -> np.ndarray:
        c = self.a[None, :] + frames[:, None] * self.b[None, :]
        size = np.broadcast_to(self.size, c.shape)
        return np.hstack([c - size / 2.0, size])

    def leverage(self, frame: float) -> float:
        """Variance of the fitted line at ``frame`` per unit observation variance."""
        lever = (frame - self.f_mean) ** 2 / self.sxx if self.sxx > 0 else 0.0
        return 1.0 / self.n + lever


def window_tau(params: DcrfParams, fit: Optional[_MotionFit] = None, frame: float = 0.0) -> float:
    """Motion scale for one window.

    The base scale (model mismatch) is widened by the centre variance of the
    known observation noise, where each centre coordinate ``l + w/2`` carries
    ``1.25 sigma^2``. When a fitted line supplies the prediction, that noise
    also propagates through the fit, so it is inflated by ``fit_confidence``
    standard deviations of the extrapolation error. A short fit on noisy data
    therefore cannot reject genuine detections.
    """
    noise = 2.5 * params.observation_noise**2
    if fit is not None:
        noise *= 1.0 + params.fit_confidence**2 * fit.leverage(frame)
    return math.sqrt(params.tau**2 + noise)


def _majority_class(points: Sequence[TrackPoint], fallback: int) -> int:
    counts = Counter(p.class_id for p in points if p.source is not None)
    if not counts:
        return fallback
    top = max(counts.values())
    # earliest-seen class wins ties
    for p in points:
        if p.source is not None and counts[p.class_id] == top:
            return p.class_id
    return fallback


def _weight_of(ncp_weights: Mapping, key, det: Detection) -> float:
    w = ncp_weights.get(key) if ncp_weights is not None else None
    if w is None:
        return det.confidence
    return float(getattr(w, "unary_weight", w))


def refine(
    tracks: Sequence[Track],
    detections: Scenario,
    ncp_weights: Optional[Mapping] = None,
    params: DcrfParams = DcrfParams(),
    window_len: int = 10,
    stride: int = 5,
) -> list[Track]:
    """Re-decode every track over sliding windows and repair its boxes.

    Windows of ``window_len`` history points advance by ``stride``; a later
    window overwrites the overlap of an earlier one. Inside a window, a
    straight-line motion model fitted to the last ``velocity_window`` points
    where refinement kept the tracker's own detection gives the predicted box.
    Where the MAP labelling keeps the tracker's own detection the tracker box
    is retained, another candidate replaces it, and "lost" substitutes the
    predicted box. Track ids and count never change.

    ``params.observation_noise`` is scaled per track by the mean NCP noise
    multiplier of the track's own detections, so clean tracks keep a tight
    motion scale next to perturbed ones. Weights given as plain numbers carry
    no multiplier and leave the scale unchanged.
    """
    if window_len < 1 or stride < 1:
        raise ValueError("window_len and stride must be positive")
    by_frame: dict[int, list[tuple[Hashable, Detection]]] = {}
    for key, det in zip(detection_keys(detections.detections), detections.detections):
        by_frame.setdefault(det.frame, []).append((key, det))
    frame_centers = {
        f: np.array([[d.box.left + d.box.width / 2.0, d.box.top + d.box.height / 2.0] for _, d in items])
        for f, items in by_frame.items()
    }
    owner: dict[Hashable, int] = {}
    for track in tracks:
        for p in track.history:
            if p.source is not None:
                owner[p.source] = track.id

    refined = []
    for track in sorted(tracks, key=lambda t: t.id):
        tparams = replace(params, observation_noise=params.observation_noise * _noise_multiplier(track, ncp_weights))
        refined.append(_refine_track(track, by_frame, frame_centers, owner, ncp_weights, tparams, window_len, stride))
    return refined


def _noise_multiplier(track: Track, ncp_weights: Optional[Mapping]) -> float:
    if not ncp_weights:
        return 1.0
    found = [
        ncp_weights[p.source].noise_multiplier
        for p in track.history
        if p.source is not None and hasattr(ncp_weights.get(p.source), "noise_multiplier")
    ]
    return float(np.mean(found)) if found else 1.0


def _refine_track(track, by_frame, frame_centers, owner, ncp_weights, params, window_len, stride) -> Track:
    hist = sorted(track.history, key=lambda p: p.frame)
    n = len(hist)
    if n == 0:
        return replace(track, history=[])
    frames = np.array([p.frame for p in hist], dtype=float)
    boxes = np.array([p.box.as_array() for p in hist])
    sources = [p.source for p in hist]

    start = 0
    while start < n:
        stop = min(start + window_len, n)
        idx = range(start, stop)
        # only points where refinement kept the tracker's own detection anchor the
        # motion model, so substituted predictions and adopted foreign
        # detections never feed back into later fits
        backed = [j for j in range(start) if sources[j] is not None and sources[j] == hist[j].source]
        backed = backed[-params.velocity_window:]
        predicted_boxes = None
        wparams = replace(params, tau=window_tau(params))
        if len(backed) >= params.min_history:
            fit = _MotionFit.of(frames[backed], boxes[backed])
            predicted_boxes = fit.boxes(frames[start:stop])
            velocity = fit.b
            wparams = replace(params, tau=window_tau(params, fit, frames[stop - 1]))
        elif stop - start >= 2:
            _, velocity = _fit_line(frames[start:stop], _centers(boxes[start:stop]))
        else:
            velocity = np.zeros(2)
        # foreign candidates are gated without the fit-uncertainty widening
        radius = params.search_radius * window_tau(params)

        window = []
        predicted_centers = []
        for w, i in enumerate(idx):
            if predicted_boxes is not None:
                pb = predicted_boxes[w]
                ref = np.array([pb[0] + pb[2] / 2.0, pb[1] + pb[3] / 2.0])
                predicted_centers.append(ref)
            else:
                ref = _center(hist[i].box)
                predicted_centers.append(None)
            cands = []
            items = by_frame.get(hist[i].frame, [])
            if items:
                dists = np.hypot(*(frame_centers[hist[i].frame] - ref).T)
                for (key, det), dist in zip(items, dists):
                    if key == hist[i].source or dist <= radius:
                        cands.append((key != hist[i].source, float(dist), key, det))
            cands.sort(key=lambda c: (c[0], c[1]))
            cands = cands[: params.max_candidates]
            window.append([
                Candidate(key, det.box, det.scores, owner.get(key, ("free", key)), _weight_of(ncp_weights, key, det))
                for _, _, key, det in cands
            ])

        track_class = _majority_class(hist[start:stop], track.class_id)
        model = build_chain(
            window,
            wparams,
            track_class=track_class,
            own_identity=track.id,
            velocity=velocity,
            predicted=predicted_centers if predicted_boxes is not None else None,
            frames=frames[start:stop],
        )
        labels, _ = viterbi(model)
        for w, (i, label) in enumerate(zip(idx, labels)):
            original = hist[i]
            if label == LOST:
                if predicted_boxes is not None:
                    boxes[i] = predicted_boxes[w]
                else:
                    boxes[i] = original.box.as_array()
                sources[i] = None
            else:
                cand = model.labels[w][label]
                if cand.key == original.source:
                    boxes[i] = original.box.as_array()
                else:
                    boxes[i] = cand.box.as_array()
                sources[i] = cand.key
        if stop == n:
            break
        start += stride

    history = [
        TrackPoint(p.frame, Box.from_array(boxes[i]), p.class_id, sources[i])
        for i, p in enumerate(hist)
    ]
    return Track(track.id, track.state, track.class_id, history, track.hits)
