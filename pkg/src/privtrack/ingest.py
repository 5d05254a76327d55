"""MOT-format ingestion, synthetic scenario generation and dataset cleaning.

MOT lines look like ``frame,id,bb_left,bb_top,bb_width,bb_height,conf[,class,visibility]``.
Detector files put ``-1`` in the id column; those detections are kept with
``track_id=None`` ("unassigned").
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

DEFAULT_NUM_CLASSES = 16

PEDESTRIAN = 1
CAR = 3


class MOTParseError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class Box:
    left: float
    top: float
    width: float
    height: float

    def __post_init__(self):
        if self.width < 0 or self.height < 0:
            raise ValueError(f"negative box size: {self}")

    @property
    def center(self) -> tuple[float, float]:
        return (self.left + self.width / 2.0, self.top + self.height / 2.0)

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.left, self.top, self.width, self.height], dtype=float)

    @classmethod
    def from_array(cls, values) -> "Box":
        left, top, width, height = (float(v) for v in values)
        return cls(left, top, max(width, 0.0), max(height, 0.0))

    def shifted(self, dx: float, dy: float) -> "Box":
        return Box(self.left + dx, self.top + dy, self.width, self.height)


def one_hot(class_id: int, num_classes: int = DEFAULT_NUM_CLASSES) -> tuple[float, ...]:
    n = max(num_classes, class_id + 1)
    scores = [0.0] * n
    scores[class_id] = 1.0
    return tuple(scores)


@dataclass(frozen=True)
class Detection:
    frame: int
    track_id: Optional[int]
    box: Box
    confidence: float = 1.0
    class_id: int = 0
    class_scores: Optional[tuple[float, ...]] = None
    visibility: float = 1.0
    sensitive: bool = False

    def __post_init__(self):
        if self.frame < 1:
            raise ValueError(f"frame must be positive, got {self.frame}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence outside [0, 1]: {self.confidence}")
        if self.class_scores is not None:
            total = math.fsum(self.class_scores)
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"class_scores sum to {total}, expected 1")
            best = max(range(len(self.class_scores)), key=self.class_scores.__getitem__)
            if self.class_scores[self.class_id] != self.class_scores[best]:
                raise ValueError("class_id is not the argmax of class_scores")

    @property
    def scores(self) -> tuple[float, ...]:
        """Class scores, falling back to one-hot at ``class_id``."""
        if self.class_scores is None:
            return one_hot(self.class_id)
        return self.class_scores

    def sort_key(self) -> tuple[int, int]:
        return (self.frame, -1 if self.track_id is None else self.track_id)


@dataclass(frozen=True)
class Scenario:
    name: str
    frame_count: int
    detections: tuple[Detection, ...]
    ground_truth: Optional[tuple[Detection, ...]] = None
    sensitive_classes: frozenset = frozenset()

    def __post_init__(self):
        for det in self.detections:
            if det.frame > self.frame_count:
                raise ValueError(
                    f"detection at frame {det.frame} beyond frame_count {self.frame_count}"
                )

    def frames(self) -> dict[int, list[Detection]]:
        out: dict[int, list[Detection]] = {}
        for det in self.detections:
            out.setdefault(det.frame, []).append(det)
        return out

    def with_detections(self, detections: Iterable[Detection]) -> "Scenario":
        return replace(self, detections=sort_detections(detections))


def sort_detections(detections: Iterable[Detection]) -> tuple[Detection, ...]:
    # sorted() is stable, so duplicate (frame, id) keys keep input order
    return tuple(sorted(detections, key=Detection.sort_key))


def detection_keys(detections: Sequence[Detection]) -> list[tuple[int, int]]:
    """Stable per-detection keys ``(frame, id)``.

    Unassigned detections get ``(frame, -k)`` with ``k`` their 1-based ordinal
    among the unassigned detections of that frame.
    """
    keys = []
    counters: dict[int, int] = {}
    for det in detections:
        if det.track_id is None:
            counters[det.frame] = counters.get(det.frame, 0) + 1
            keys.append((det.frame, -counters[det.frame]))
        else:
            keys.append((det.frame, det.track_id))
    return keys


# --- MOT text ---------------------------------------------------------------


def _number(text: str, lineno: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise MOTParseError(lineno, f"not a number: {text!r}") from None
    if not math.isfinite(value):
        raise MOTParseError(lineno, f"non-finite value: {text!r}")
    return value


def _integer(text: str, lineno: int) -> int:
    value = _number(text, lineno)
    if not value.is_integer():
        raise MOTParseError(lineno, f"expected an integer: {text!r}")
    return int(value)


def parse_mot(
    text: str,
    name: str = "mot",
    sensitive_classes: Iterable[int] = (),
    num_classes: int = DEFAULT_NUM_CLASSES,
    frame_count: Optional[int] = None,
) -> Scenario:
    """Parse MOT Challenge gt/det text into a :class:`Scenario`.

    Missing class/visibility columns default to 0 and 1.0. A negative value in
    either column (the ``-1`` placeholders of det files) also maps to those
    defaults. Detections whose class is in ``sensitive_classes`` are flagged
    sensitive.
    """
    sensitive = frozenset(sensitive_classes)
    detections = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        fields = [f.strip() for f in line.split(",")]
        if len(fields) < 7:
            raise MOTParseError(lineno, f"expected at least 7 fields, got {len(fields)}")
        frame = _integer(fields[0], lineno)
        if frame < 1:
            raise MOTParseError(lineno, f"frame must be positive, got {frame}")
        track_id = _integer(fields[1], lineno)
        left, top, width, height = (_number(f, lineno) for f in fields[2:6])
        if width < 0 or height < 0:
            raise MOTParseError(lineno, "negative box size")
        conf = _number(fields[6], lineno)
        if not 0.0 <= conf <= 1.0:
            raise MOTParseError(lineno, f"confidence outside [0, 1]: {conf}")
        class_id = _integer(fields[7], lineno) if len(fields) > 7 else 0
        visibility = _number(fields[8], lineno) if len(fields) > 8 else 1.0
        if class_id < 0:
            class_id = 0
        if visibility < 0:
            visibility = 1.0
        if visibility > 1:
            raise MOTParseError(lineno, f"visibility above 1: {visibility}")
        detections.append(
            Detection(
                frame=frame,
                track_id=None if track_id < 0 else track_id,
                box=Box(left, top, width, height),
                confidence=conf,
                class_id=class_id,
                class_scores=one_hot(class_id, num_classes),
                visibility=visibility,
                sensitive=class_id in sensitive,
            )
        )
    dets = sort_detections(detections)
    last = max((d.frame for d in dets), default=0)
    return Scenario(
        name=name,
        frame_count=max(last, frame_count or 0),
        detections=dets,
        sensitive_classes=sensitive,
    )


def format_number(value: float) -> str:
    """Shortest round-tripping text; integral values print without a decimal point."""
    value = float(value)
    if value.is_integer():
        return str(int(value))
    return repr(value)


def format_mot_line(det: Detection) -> str:
    b = det.box
    track_id = -1 if det.track_id is None else det.track_id
    fields = [
        str(det.frame),
        str(track_id),
        format_number(b.left),
        format_number(b.top),
        format_number(b.width),
        format_number(b.height),
        format_number(det.confidence),
        str(det.class_id),
        format_number(det.visibility),
    ]
    return ",".join(fields)


def serialize_mot(scenario: Scenario) -> str:
    """Emit canonical MOT text: 9 columns, sorted by (frame, id), LF-terminated."""
    dets = sort_detections(scenario.detections)
    return "".join(format_mot_line(d) + "\n" for d in dets)


def read_mot(path, **kwargs) -> Scenario:
    path = Path(path)
    kwargs.setdefault("name", path.stem)
    return parse_mot(path.read_text(), **kwargs)


def write_mot(scenario: Scenario, path) -> None:
    Path(path).write_text(serialize_mot(scenario), newline="\n")


# --- synthetic scenarios ----------------------------------------------------


@dataclass
class TargetSpec:
    box: tuple[float, float, float, float]
    velocity: tuple[float, float] = (0.0, 0.0)
    class_id: int = PEDESTRIAN
    start_frame: int = 1
    end_frame: Optional[int] = None


@dataclass
class SynthConfig:
    """Constant-velocity targets with optional occlusion gaps and detector jitter.

    ``occlusion_gaps`` holds ``(target_index, first_frame, last_frame)``; the
    target keeps a ground-truth row (visibility 0) but produces no detection.
    ``crossing_events`` is informational: crossings follow from the motion
    parameters and are checked by :func:`find_crossings`.
    """

    targets: list[TargetSpec] = field(default_factory=list)
    frame_count: int = 50
    crossing_events: list[tuple[int, int, int]] = field(default_factory=list)
    occlusion_gaps: list[tuple[int, int, int]] = field(default_factory=list)
    sensitive_classes: frozenset = frozenset({PEDESTRIAN})
    confidence: float = 1.0
    confidence_noise: float = 0.0
    position_noise: float = 0.0
    num_classes: int = DEFAULT_NUM_CLASSES
    frame_size: tuple[float, float] = (1920.0, 1080.0)
    seed: int = 0
    name: str = "synth"

    @property
    def num_targets(self) -> int:
        return len(self.targets)

    def validate(self) -> None:
        if self.frame_count < 1:
            raise ValueError("frame_count must be positive")
        for target, first, last in self.occlusion_gaps:
            if not 0 <= target < len(self.targets):
                raise ValueError(f"occlusion gap names unknown target {target}")
            if not 1 <= first <= last <= self.frame_count:
                raise ValueError(f"occlusion interval {(first, last)} outside [1, {self.frame_count}]")

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        data = dict(data)
        targets = [
            TargetSpec(
                box=tuple(t["box"]),
                velocity=tuple(t.get("velocity", (0.0, 0.0))),
                class_id=int(t.get("class_id", PEDESTRIAN)),
                start_frame=int(t.get("start_frame", 1)),
                end_frame=t.get("end_frame"),
            )
            for t in data.pop("targets", [])
        ]
        if "sensitive_classes" in data:
            data["sensitive_classes"] = frozenset(data["sensitive_classes"])
        for key in ("crossing_events", "occlusion_gaps"):
            if key in data:
                data[key] = [tuple(item) for item in data[key]]
        if "frame_size" in data:
            data["frame_size"] = tuple(data["frame_size"])
        return cls(targets=targets, **data)

    @classmethod
    def from_json(cls, path) -> "SynthConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def synth_scenario(config: SynthConfig) -> Scenario:
    config.validate()
    rng = np.random.default_rng(config.seed)
    occluded = set()
    for target, first, last in config.occlusion_gaps:
        occluded.update((target, f) for f in range(first, last + 1))

    detections = []
    truth = []
    for index, target in enumerate(config.targets):
        track_id = index + 1
        left0, top0, width, height = target.box
        vx, vy = target.velocity
        scores = one_hot(target.class_id, config.num_classes)
        last = target.end_frame or config.frame_count
        for frame in range(target.start_frame, min(last, config.frame_count) + 1):
            steps = frame - target.start_frame
            box = Box(left0 + vx * steps, top0 + vy * steps, width, height)
            hidden = (index, frame) in occluded
            truth.append(
                Detection(frame, track_id, box, 1.0, target.class_id, scores,
                          0.0 if hidden else 1.0, target.class_id in config.sensitive_classes)
            )
            # draw noise even when hidden so one target's gap leaves the others' streams intact
            jitter = rng.normal(0.0, 1.0, 4) * config.position_noise
            conf_noise = rng.normal(0.0, 1.0) * config.confidence_noise
            if hidden:
                continue
            observed = Box.from_array(box.as_array() + jitter) if config.position_noise > 0 else box
            conf = float(np.clip(config.confidence + conf_noise, 0.0, 1.0))
            detections.append(
                Detection(frame, track_id, observed, conf, target.class_id, scores,
                          1.0, target.class_id in config.sensitive_classes)
            )
    return Scenario(
        name=config.name,
        frame_count=config.frame_count,
        detections=sort_detections(detections),
        ground_truth=sort_detections(truth),
        sensitive_classes=frozenset(config.sensitive_classes),
    )


def find_crossings(scenario: Scenario) -> list[tuple[int, int, int]]:
    """Frames where two ground-truth boxes overlap, as ``(frame, id_a, id_b)``."""
    from .tracker import iou

    rows = scenario.ground_truth if scenario.ground_truth is not None else scenario.detections
    by_frame: dict[int, list[Detection]] = {}
    for det in rows:
        by_frame.setdefault(det.frame, []).append(det)
    out = []
    for frame in sorted(by_frame):
        dets = by_frame[frame]
        for i in range(len(dets)):
            for j in range(i + 1, len(dets)):
                if iou(dets[i].box, dets[j].box) > 0:
                    out.append((frame, dets[i].track_id, dets[j].track_id))
    return out


def lane_suite_config(
    seed: int,
    frame_count: int = 200,
    pedestrians: int = 3,
    cars: int = 5,
    position_noise: float = 2.0,
) -> SynthConfig:
    """One clip of the default benchmark suite.

    Targets move in separate horizontal lanes across a 1920x1080 frame, so on
    clean data they never overlap. Pedestrian lanes are interleaved with car
    lanes. Start positions and speeds are drawn from ``seed``.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    classes = [PEDESTRIAN] * pedestrians + [CAR] * cars
    order = rng.permutation(len(classes))
    lane_height = 1080.0 / len(classes)
    targets = []
    for lane, idx in enumerate(order):
        cls = classes[idx]
        width, height = (48.0, 110.0) if cls == PEDESTRIAN else (130.0, 72.0)
        height = min(height, lane_height - 16.0)
        speed = float(rng.uniform(1.0, 3.0)) * (1 if rng.random() < 0.5 else -1)
        span = abs(speed) * (frame_count - 1)
        if speed > 0:
            left = float(rng.uniform(40.0, max(41.0, 1880.0 - width - span)))
        else:
            left = float(rng.uniform(min(1879.0 - width, 40.0 + span), 1880.0 - width))
        top = lane * lane_height + (lane_height - height) / 2.0
        vy = float(rng.uniform(-0.05, 0.05))
        targets.append(TargetSpec((round(left, 2), round(top, 2), width, height), (round(speed, 3), vy), cls))
    return SynthConfig(
        targets=targets,
        frame_count=frame_count,
        position_noise=position_noise,
        seed=int(rng.integers(2**31)),
        name=f"lanes-{seed}",
    )


# --- cleaning ---------------------------------------------------------------


def clean_dataset(scenario: Scenario, sensitive_classes: Iterable[int], min_visibility: float = 0.0) -> Scenario:
    """Keep only sensitive-class detections at or above ``min_visibility``."""
    keep_classes = frozenset(sensitive_classes)
    kept = [
        replace(det, sensitive=True)
        for det in scenario.detections
        if det.class_id in keep_classes and det.visibility >= min_visibility
    ]
    truth = None
    if scenario.ground_truth is not None:
        truth = tuple(
            replace(det, sensitive=True)
            for det in scenario.ground_truth
            if det.class_id in keep_classes
        )
    return replace(
        scenario,
        detections=tuple(kept),
        ground_truth=truth,
        sensitive_classes=keep_classes,
    )
