"""Normalized Control Penalty: per-detection noise multiplier and unary weight."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from .ingest import Detection, Scenario, detection_keys


@dataclass(frozen=True)
class NcpParams:
    sensitive_boost: float = 0.5
    stability_floor: float = 0.1

    def __post_init__(self):
        if self.sensitive_boost < 0:
            raise ValueError("sensitive_boost must be non-negative")
        if not 0 <= self.stability_floor <= 1:
            raise ValueError("stability_floor must lie in [0, 1]")


@dataclass(frozen=True)
class NcpWeight:
    noise_multiplier: float
    unary_weight: float


def class_stability(scores: Sequence[float]) -> float:
    """``1 - H(scores) / ln C``: 1 for a one-hot vector, 0 for a uniform one."""
    n = len(scores)
    if n < 2:
        raise ValueError(f"need at least 2 classes, got {n}")
    entropy = -math.fsum(p * math.log(p) for p in scores if p > 0)
    return min(1.0, max(0.0, 1.0 - entropy / math.log(n)))


def ncp_weight(det: Detection, sensitive_classes: Iterable[int], params: NcpParams = NcpParams()) -> NcpWeight:
    stability = max(params.stability_floor, class_stability(det.scores))
    multiplier = 1.0 + params.sensitive_boost if det.class_id in set(sensitive_classes) else 0.0
    return NcpWeight(noise_multiplier=multiplier, unary_weight=stability * det.confidence)


def weight_scenario(scenario: Scenario, sensitive_classes: Iterable[int], params: NcpParams = NcpParams()) -> dict:
    """Map ``(frame, id)`` keys to :class:`NcpWeight`, in scenario order."""
    sensitive = frozenset(sensitive_classes)
    keys = detection_keys(scenario.detections)
    return {key: ncp_weight(det, sensitive, params) for key, det in zip(keys, scenario.detections)}
