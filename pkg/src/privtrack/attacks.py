"""Detection-level trajectory hijacking and label-blinding attacks."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, replace
from typing import Mapping, Optional, Sequence

from .ingest import Scenario, one_hot
from .metrics import classification_accuracy, giou_series, match_tracks, tracking_rmse
from .tracker import Track

KINDS = ("hijack_shift", "hijack_remove", "blind_label")


class UnknownTargetError(KeyError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    target_id: int
    onset_frame: int
    drift: tuple[float, float] = (0.0, 0.0)
    label_map: Optional[Mapping[int, int]] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; expected one of {KINDS}")
        if self.onset_frame < 1:
            raise ValueError("onset_frame must be at least 1")
        if not all(math.isfinite(v) for v in self.drift):
            raise ValueError("drift must be finite")

    @classmethod
    def from_dict(cls, data: dict) -> "AttackSpec":
        label_map = data.get("label_map")
        if label_map is not None:
            label_map = {int(k): int(v) for k, v in label_map.items()}
        return cls(
            kind=data["kind"],
            target_id=int(data["target_id"]),
            onset_frame=int(data["onset_frame"]),
            drift=tuple(float(v) for v in data.get("drift", (0.0, 0.0))),
            label_map=label_map,
        )


@dataclass(frozen=True)
class AttackReport:
    id_switches: int
    giou_series: dict
    post_onset_rmse: float
    classification_accuracy: float

    @property
    def mean_giou(self) -> float:
        if not self.giou_series:
            return math.nan
        return sum(self.giou_series.values()) / len(self.giou_series)


def default_label_map(scenario: Scenario) -> dict[int, int]:
    """Map every sensitive class to the most frequent non-sensitive class."""
    counts = Counter(d.class_id for d in scenario.detections if d.class_id not in scenario.sensitive_classes)
    if not counts:
        return {}
    top = max(counts.values())
    decoy = min(c for c, n in counts.items() if n == top)
    return {cls: decoy for cls in scenario.sensitive_classes}


def apply_attack(scenario: Scenario, spec: AttackSpec, rng=None) -> Scenario:
    """Tamper with the target's detections from ``spec.onset_frame`` on.

    ``rng`` is accepted for interface symmetry with the noise mechanisms; the
    three attack kinds are deterministic.
    """
    if not any(d.track_id == spec.target_id for d in scenario.detections):
        raise UnknownTargetError(f"target id {spec.target_id} not present in scenario")
    label_map = spec.label_map
    if spec.kind == "blind_label" and label_map is None:
        label_map = default_label_map(scenario)

    out = []
    for det in scenario.detections:
        if det.track_id != spec.target_id or det.frame < spec.onset_frame:
            out.append(det)
            continue
        if spec.kind == "hijack_remove":
            continue
        if spec.kind == "hijack_shift":
            k = det.frame - spec.onset_frame + 1
            out.append(replace(det, box=det.box.shifted(spec.drift[0] * k, spec.drift[1] * k)))
        else:
            new = label_map.get(det.class_id, det.class_id)
            if new == det.class_id:
                out.append(det)
                continue
            n = len(det.class_scores) if det.class_scores is not None else 0
            out.append(replace(
                det,
                class_id=new,
                class_scores=one_hot(new, n) if n else None,
                sensitive=new in scenario.sensitive_classes,
            ))
    return replace(scenario, detections=tuple(out))


def attack_report(clean_gt: Scenario, tracks: Sequence[Track], onset_frame: int = 1) -> AttackReport:
    truth = clean_gt.ground_truth if clean_gt.ground_truth is not None else clean_gt.detections
    matching = match_tracks(tracks, truth)
    return AttackReport(
        id_switches=matching.id_switches(),
        giou_series=giou_series(tracks, truth, matching=matching),
        post_onset_rmse=tracking_rmse(tracks, truth, from_frame=onset_frame, matching=matching),
        classification_accuracy=classification_accuracy(tracks, truth, from_frame=onset_frame, matching=matching),
    )


def evaluate_defense(
    clean_gt: Scenario,
    attacked_tracks: Sequence[Track],
    refined_tracks: Sequence[Track],
    onset_frame: int = 1,
) -> tuple[AttackReport, AttackReport]:
    """Reports for the unrefined and the refined tracks under the same attack."""
    return attack_report(clean_gt, attacked_tracks, onset_frame), attack_report(clean_gt, refined_tracks, onset_frame)
