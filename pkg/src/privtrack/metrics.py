"""Utility and privacy measurements.

Undefined metrics (zero denominators) are reported as ``nan`` rather than
raising, so a sweep can carry on and flag the cell.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .ingest import Box, Detection, Scenario
from .tracker import Track, giou, iou, iou_matrix

UNDEFINED = math.nan

METRIC_NAMES = (
    "ML", "LC", "Me", "MC", "CF", "AP", "LossRate", "IL", "LM", "CM", "DM",
    "StatLoss", "KL", "MSE", "PSNR", "RMSE", "retrieval_frequency", "id_switches",
)


# --- integrity and consistency ----------------------------------------------


@dataclass
class Constraint:
    violations: int
    weight: float

    def __post_init__(self):
        if self.violations < 0 or self.weight < 0:
            raise ValueError("violation counts and weights must be non-negative")


@dataclass
class AttributeNode:
    name: str
    integrity: float
    consistency: float
    children: list["AttributeNode"] = field(default_factory=list)

    def __post_init__(self):
        for value in (self.integrity, self.consistency):
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"node values must lie in [0, 1], got {value}")

    def walk(self):
        stack = [self]
        seen = set()
        while stack:
            node = stack.pop()
            if id(node) in seen:
                raise ValueError("attribute tree contains a cycle")
            seen.add(id(node))
            yield node
            stack.extend(reversed(node.children))


@dataclass
class AttributeTree:
    roots: list[AttributeNode] = field(default_factory=list)
    simple: list[Constraint] = field(default_factory=list)
    complex: list[Constraint] = field(default_factory=list)

    def nodes(self):
        for root in self.roots:
            yield from root.walk()


def ml_lc(tree: AttributeTree) -> tuple[float, float]:
    """Missing-measure and lack-of-consistency totals.

    ML sums integrity plus consistency over every node of the tree; LC sums
    violations times weight over simple and complex constraints.
    """
    ml = math.fsum(node.integrity + node.consistency for node in tree.nodes())
    lc = math.fsum(c.violations * c.weight for c in tree.simple) + math.fsum(
        c.violations * c.weight for c in tree.complex
    )
    return ml, lc


# --- pattern costs ----------------------------------------------------------


class PatternMetrics(NamedTuple):
    Me: float
    MC: float
    CF: float
    AP: float


def _ratio(num: float, den: float) -> float:
    return num / den if den else UNDEFINED


def pattern_metrics(
    original_counts: Sequence[float],
    sanitized_counts: Sequence[float],
    n_sim: Optional[float] = None,
    precisions: Sequence[float] = (),
    detection_frequency: Optional[float] = None,
    tree_weights: Optional[Sequence[float]] = None,
) -> PatternMetrics:
    """Frequent-pattern loss (Me), mean leakage cost (MC), failure cost (CF), AP.

    ``original_counts[i]`` / ``sanitized_counts[i]`` count the retrievable
    patterns of sensitive class ``i`` before and after sanitization. ``n_sim``
    defaults to the number of classes. ``detection_frequency`` defaults to
    ``len(precisions)``.
    """
    orig = np.asarray(original_counts, dtype=float)
    san = np.asarray(sanitized_counts, dtype=float)
    if orig.shape != san.shape:
        raise ValueError("count vectors differ in length")
    n_sim = len(orig) if n_sim is None else n_sim
    me = _ratio(float(np.sum(orig - san)), n_sim)
    mc = _ratio(float(orig.sum() - san.sum()), float(orig.sum()))
    w = np.ones_like(orig) if tree_weights is None else np.asarray(tree_weights, dtype=float)
    cf = _ratio(float(w @ orig - w @ san), float(w @ orig))
    freq = len(precisions) if detection_frequency is None else detection_frequency
    ap = _ratio(math.fsum(precisions), freq) if freq else 0.0
    return PatternMetrics(me, mc, cf, ap)


# --- histograms -------------------------------------------------------------


@dataclass(frozen=True)
class Histogram:
    edges: tuple[float, ...]
    counts: tuple[float, ...]

    def __post_init__(self):
        if len(self.edges) != len(self.counts) + 1:
            raise ValueError("need len(counts) + 1 edges")
        if any(c < 0 for c in self.counts):
            raise ValueError("counts must be non-negative")

    @property
    def total(self) -> float:
        return math.fsum(self.counts)

    def density(self) -> np.ndarray:
        counts = np.asarray(self.counts, dtype=float)
        total = counts.sum()
        if total <= 0:
            raise ValueError("empty histogram has no density")
        return counts / total

    @classmethod
    def from_counts(cls, counts: Sequence[float]) -> "Histogram":
        return cls(tuple(float(i) for i in range(len(counts) + 1)), tuple(float(c) for c in counts))

    @classmethod
    def of(cls, values, edges=None, bins: int = 64) -> "Histogram":
        """Histogram of ``values``; values outside ``edges`` land in the end bins."""
        values = np.asarray(values, dtype=float)
        if edges is None:
            lo, hi = (float(values.min()), float(values.max())) if values.size else (0.0, 1.0)
            if hi <= lo:
                hi = lo + 1.0
            edges = np.linspace(lo, hi, bins + 1)
        edges = np.asarray(edges, dtype=float)
        clipped = np.clip(values, edges[0], edges[-1])
        counts, _ = np.histogram(clipped, bins=edges)
        return cls(tuple(edges.tolist()), tuple(float(c) for c in counts))


def shared_histograms(original, sanitized, bins: int = 64) -> tuple[Histogram, Histogram]:
    """Both histograms on the original data's uniform bin layout."""
    first = Histogram.of(original, bins=bins)
    return first, Histogram.of(sanitized, edges=first.edges)


def _check_layout(a: Histogram, b: Histogram) -> None:
    if len(a.edges) != len(b.edges) or not np.allclose(a.edges, b.edges):
        raise ValueError("histograms use different bin layouts")


def loss_rate(original: Histogram, sanitized: Histogram) -> float:
    _check_layout(original, sanitized)
    diff = np.abs(np.asarray(original.counts) - np.asarray(sanitized.counts)).sum()
    return _ratio(float(diff), original.total)


def stat_loss(f: Histogram, fhat: Histogram) -> float:
    """Total-variation distance between the two normalized densities."""
    _check_layout(f, fhat)
    return 0.5 * float(np.abs(f.density() - fhat.density()).sum())


def kl_divergence(p: Histogram, q: Histogram, smoothing: float = 1e-6) -> float:
    """KL(p || q) in nats after add-``smoothing`` and renormalization."""
    _check_layout(p, q)
    if not smoothing > 0:
        raise ValueError("smoothing must be positive")
    pt = p.density() + smoothing
    qt = q.density() + smoothing
    pt /= pt.sum()
    qt /= qt.sum()
    return max(0.0, float(np.sum(pt * np.log(pt / qt))))


# --- generalization losses --------------------------------------------------


@dataclass(frozen=True)
class GeneralizationScheme:
    depth: int
    branch_sizes: tuple[int, ...]
    n_transactions: int

    def __post_init__(self):
        if self.depth < 0:
            raise ValueError("depth must be non-negative")
        if any(s < 1 for s in self.branch_sizes):
            raise ValueError("branch sizes must be at least 1")

    @property
    def n_attributes(self) -> int:
        return len(self.branch_sizes)


def info_loss_generalization(scheme: GeneralizationScheme) -> float:
    n, n_attr = scheme.n_transactions, scheme.n_attributes
    if n == 0 or n_attr == 0:
        return UNDEFINED
    total = math.fsum(n * scheme.depth / size for size in scheme.branch_sizes)
    return total / (n * n_attr)


def lm(group_sizes, domain_sizes) -> float:
    """Mean of ``(f - 1) / (G - 1)`` over cells of a generalized table.

    ``group_sizes`` is rows x attributes; columns whose domain size is 1 are
    undefined and skipped (``nan`` if no column is defined).
    """
    f = np.atleast_2d(np.asarray(group_sizes, dtype=float))
    G = np.asarray(domain_sizes, dtype=float)
    if f.size == 0:
        return UNDEFINED
    if f.shape[1] != G.shape[0]:
        raise ValueError("one domain size per attribute column is required")
    ok = G > 1
    if not ok.any():
        return UNDEFINED
    return float(np.mean((f[:, ok] - 1.0) / (G[ok] - 1.0)))


def cm(row_penalties: Sequence[float]) -> float:
    if len(row_penalties) == 0:
        return UNDEFINED
    return math.fsum(row_penalties) / len(row_penalties)


def dm(groups: Iterable) -> int:
    """Discernibility: sum of squared group sizes. Groups are sizes or collections."""
    total = 0
    for g in groups:
        size = g if isinstance(g, (int, np.integer)) else len(g)
        total += int(size) ** 2
    return total


# --- signal metrics ---------------------------------------------------------


def mse_psnr_rmse(original, perturbed, max_value: float) -> tuple[float, float, float]:
    """MSE, PSNR in dB (``inf`` for identical inputs) and RMSE."""
    x = np.asarray(original, dtype=float).ravel()
    y = np.asarray(perturbed, dtype=float).ravel()
    if x.shape != y.shape:
        raise ValueError("coordinate sequences differ in length")
    if x.size == 0:
        raise ValueError("need at least one coordinate")
    if not max_value > 0:
        raise ValueError("max_value must be positive")
    mse = float(np.mean((x - y) ** 2))
    psnr = math.inf if mse == 0 else 10.0 * math.log10(max_value**2 / mse)
    return mse, psnr, math.sqrt(mse)


def analytic_psnr(sigma: float, max_value: float) -> float:
    return 10.0 * math.log10(max_value**2 / sigma**2)


# --- detection-level matching ----------------------------------------------


def _group_by_frame(dets: Iterable[Detection]) -> dict[int, list[Detection]]:
    out: dict[int, list[Detection]] = {}
    for det in dets:
        out.setdefault(det.frame, []).append(det)
    return out


def _match(boxes_a: Sequence[Box], boxes_b: Sequence[Box], threshold: float) -> list[tuple[int, int, float]]:
    if not boxes_a or not boxes_b:
        return []
    overlap = iou_matrix([a.as_array() for a in boxes_a], [b.as_array() for b in boxes_b])
    rows, cols = linear_sum_assignment(-overlap)
    return [(int(r), int(c), float(overlap[r, c])) for r, c in zip(rows, cols) if overlap[r, c] >= threshold]


def retrieval_frequency(
    original: Scenario,
    sanitized: Scenario,
    sensitive_classes: Optional[Iterable[int]] = None,
    iou_threshold: float = 0.5,
) -> float:
    """Share of sensitive objects a box-matching attacker still recovers.

    An object counts as retrieved when some sanitized detection of the same
    class in the same frame overlaps its original box with IoU at or above the
    threshold. The originals are ``original.ground_truth`` when present.
    """
    classes = frozenset(original.sensitive_classes if sensitive_classes is None else sensitive_classes)
    truth = original.ground_truth if original.ground_truth is not None else original.detections
    targets = [d for d in truth if d.class_id in classes and d.visibility > 0]
    if not targets:
        return UNDEFINED
    pool = _group_by_frame(d for d in sanitized.detections if d.class_id in classes)
    hits = 0
    for det in targets:
        if any(iou(det.box, s.box) >= iou_threshold for s in pool.get(det.frame, ())):
            hits += 1
    return hits / len(targets)


# --- track-level evaluation -------------------------------------------------


@dataclass
class TrackMatching:
    """Per-frame track/ground-truth correspondence and a majority identity per track."""

    frame_pairs: dict[int, list[tuple[int, int]]]
    identity: dict[int, int]
    truth: dict[tuple[int, int], Detection]

    def id_switches(self) -> int:
        seq: dict[int, list[int]] = {}
        for frame in sorted(self.frame_pairs):
            for tid, gid in self.frame_pairs[frame]:
                seq.setdefault(tid, []).append(gid)
        return sum(sum(1 for a, b in zip(s, s[1:]) if a != b) for s in seq.values())


def match_tracks(tracks: Sequence[Track], ground_truth: Sequence[Detection], iou_threshold: float = 0.3) -> TrackMatching:
    truth_by_frame = _group_by_frame(ground_truth)
    track_by_frame: dict[int, list[tuple[int, Box]]] = {}
    for track in tracks:
        for p in track.history:
            track_by_frame.setdefault(p.frame, []).append((track.id, p.box))
    pairs: dict[int, list[tuple[int, int]]] = {}
    votes: dict[int, Counter] = {}
    for frame, items in track_by_frame.items():
        gts = truth_by_frame.get(frame, [])
        matched = _match([b for _, b in items], [g.box for g in gts], iou_threshold)
        pairs[frame] = [(items[r][0], gts[c].track_id) for r, c, _ in matched]
        for tid, gid in pairs[frame]:
            votes.setdefault(tid, Counter())[gid] += 1
    identity = {}
    for tid, counter in votes.items():
        top = max(counter.values())
        identity[tid] = min(g for g, c in counter.items() if c == top)
    truth = {(d.frame, d.track_id): d for d in ground_truth}
    return TrackMatching(pairs, identity, truth)


def _assigned_points(tracks, matching: TrackMatching, from_frame: int = 1):
    for track in tracks:
        gid = matching.identity.get(track.id)
        if gid is None:
            continue
        for p in track.history:
            if p.frame < from_frame:
                continue
            gt = matching.truth.get((p.frame, gid))
            if gt is not None:
                yield track, p, gt


def tracking_rmse(tracks, ground_truth, from_frame: int = 1, matching: Optional[TrackMatching] = None,
                  normalize: Optional[float] = None) -> float:
    """RMSE of track centres against their assigned ground-truth identity."""
    matching = matching or match_tracks(tracks, ground_truth)
    errs = []
    for _, p, gt in _assigned_points(tracks, matching, from_frame):
        (x0, y0), (x1, y1) = p.box.center, gt.box.center
        errs.append((x0 - x1) ** 2 + (y0 - y1) ** 2)
    if not errs:
        return UNDEFINED
    value = math.sqrt(math.fsum(errs) / len(errs))
    return value / normalize if normalize else value


def giou_series(tracks, ground_truth, matching: Optional[TrackMatching] = None) -> dict[int, float]:
    matching = matching or match_tracks(tracks, ground_truth)
    per_frame: dict[int, list[float]] = {}
    for _, p, gt in _assigned_points(tracks, matching):
        per_frame.setdefault(p.frame, []).append(giou(p.box, gt.box))
    return {f: float(np.mean(v)) for f, v in sorted(per_frame.items())}


def classification_accuracy(tracks, ground_truth, from_frame: int = 1,
                            matching: Optional[TrackMatching] = None) -> float:
    matching = matching or match_tracks(tracks, ground_truth)
    verdicts = [p.class_id == gt.class_id for _, p, gt in _assigned_points(tracks, matching, from_frame)
                if p.source is not None]
    if not verdicts:
        return UNDEFINED
    return sum(verdicts) / len(verdicts)


# --- scenario-level report --------------------------------------------------


def _coords(dets: Sequence[Detection]) -> np.ndarray:
    return np.array([d.box.as_array() for d in dets]).reshape(-1, 4)


def _paired_sensitive(original: Scenario, sanitized: Scenario):
    """Sensitive detections of ``original`` paired with their sanitized version by key."""
    from .ingest import detection_keys

    san = dict(zip(detection_keys(sanitized.detections), sanitized.detections))
    pairs = []
    for key, det in zip(detection_keys(original.detections), original.detections):
        if det.class_id in original.sensitive_classes and key in san:
            pairs.append((det, san[key]))
    return pairs


def attribute_tree(original: Scenario, sanitized: Scenario, frame_size=(1920.0, 1080.0)) -> AttributeTree:
    """Per-class integrity/consistency nodes plus box-validity and continuity constraints."""
    orig_frames = _group_by_frame(original.detections)
    san_frames = _group_by_frame(sanitized.detections)
    per_class_total: Counter = Counter()
    per_class_kept: Counter = Counter()
    per_class_consistent: Counter = Counter()
    for frame, dets in orig_frames.items():
        cands = san_frames.get(frame, [])
        matched = _match([d.box for d in dets], [c.box for c in cands], 0.5)
        hit = {r: c for r, c, _ in matched}
        for i, det in enumerate(dets):
            per_class_total[det.class_id] += 1
            if i in hit:
                per_class_kept[det.class_id] += 1
                if cands[hit[i]].class_id == det.class_id:
                    per_class_consistent[det.class_id] += 1
    nodes = []
    for cls in sorted(per_class_total):
        total = per_class_total[cls]
        kept = per_class_kept[cls]
        nodes.append(AttributeNode(
            f"class-{cls}",
            integrity=kept / total,
            consistency=per_class_consistent[cls] / kept if kept else 0.0,
        ))
    width, height = frame_size
    outside = sum(
        1 for d in sanitized.detections
        if d.box.width <= 0 or d.box.height <= 0 or d.box.left + d.box.width < 0 or d.box.top + d.box.height < 0
        or d.box.left > width or d.box.top > height
    )
    jumps = 0
    by_id: dict[int, list[Detection]] = {}
    for d in sanitized.detections:
        if d.track_id is not None:
            by_id.setdefault(d.track_id, []).append(d)
    for dets in by_id.values():
        dets.sort(key=lambda d: d.frame)
        for a, b in zip(dets, dets[1:]):
            if b.frame == a.frame + 1 and iou(a.box, b.box) == 0:
                jumps += 1
    root = AttributeNode("scene", 1.0, 1.0, nodes)
    return AttributeTree([root], simple=[Constraint(outside, 1.0)], complex=[Constraint(jumps, 0.5)])


def scenario_report(
    original: Scenario,
    sanitized: Scenario,
    tracks: Optional[Sequence[Track]] = None,
    max_value: float = 1920.0,
    bins: int = 64,
    smoothing: float = 1e-6,
    probe_iou: float = 0.5,
) -> dict[str, float]:
    """Compute every metric for one original/sanitized scenario pair."""
    report: dict[str, float] = {}
    ml, lc = ml_lc(attribute_tree(original, sanitized))
    report["ML"], report["LC"] = ml, lc

    pairs = _paired_sensitive(original, sanitized)
    classes = sorted(original.sensitive_classes)
    orig_counts, san_counts = [], []
    for cls in classes:
        cls_pairs = [(a, b) for a, b in pairs if a.class_id == cls]
        orig_counts.append(len(cls_pairs))
        san_counts.append(sum(1 for a, b in cls_pairs if b.class_id == cls and iou(a.box, b.box) >= probe_iou))
    precisions = [1.0 if (b.class_id == a.class_id and iou(a.box, b.box) >= probe_iou) else 0.0 for a, b in pairs]
    pm = pattern_metrics(orig_counts, san_counts, n_sim=len(classes) or None, precisions=precisions) \
        if classes else PatternMetrics(UNDEFINED, UNDEFINED, UNDEFINED, UNDEFINED)
    report.update(pm._asdict())

    if pairs:
        x = _coords([a for a, _ in pairs])
        y = _coords([b for _, b in pairs])
        orig_cx = np.array([a.box.center[0] for a, _ in pairs])
        san_cx = np.array([b.box.center[0] for _, b in pairs])
        h_orig, h_san = shared_histograms(orig_cx, san_cx, bins=bins)
        report["LossRate"] = loss_rate(h_orig, h_san)
        report["StatLoss"] = stat_loss(h_orig, h_san)
        report["KL"] = kl_divergence(h_orig, h_san, smoothing)
        mse, psnr, rmse = mse_psnr_rmse(x, y, max_value)
        report["MSE"], report["PSNR"], report["RMSE"] = mse, psnr, rmse

        # generalization view: hierarchy of power-of-two buckets per coordinate
        ranges = np.ptp(x, axis=0)
        levels = tuple(int(math.ceil(math.log2(r + 1.0))) + 1 for r in ranges)
        depth = min(int(math.ceil(math.log2(1.0 + rmse))), min(levels))
        report["IL"] = info_loss_generalization(GeneralizationScheme(depth, levels, len(pairs)))
        width = 2.0**depth
        group_sizes = np.empty_like(x)
        domain = []
        for j in range(4):
            buckets = np.floor(x[:, j] / width)
            counts = Counter(buckets.tolist())
            san_buckets = np.floor(y[:, j] / width)
            group_sizes[:, j] = [counts.get(b, 1) for b in san_buckets.tolist()]
            domain.append(max(len(set(x[:, j].tolist())), 1))
        report["LM"] = lm(np.maximum(group_sizes, 1.0), domain)
        report["CM"] = cm([0.0 if p == 1.0 else 1.0 for p in precisions])
        groups = []
        for frame_pairs in _group_by_frame(b for _, b in pairs).values():
            groups.extend(_overlap_groups(frame_pairs))
        report["DM"] = float(dm(groups))
    else:
        for name in ("LossRate", "StatLoss", "KL", "MSE", "PSNR", "RMSE", "IL", "LM", "CM", "DM"):
            report[name] = UNDEFINED

    report["retrieval_frequency"] = retrieval_frequency(original, sanitized, iou_threshold=probe_iou)
    if tracks is not None and original.ground_truth is not None:
        matching = match_tracks(tracks, original.ground_truth)
        report["id_switches"] = float(matching.id_switches())
        report["tracking_rmse"] = tracking_rmse(tracks, original.ground_truth, matching=matching)
    else:
        report["id_switches"] = UNDEFINED
    return report


def _overlap_groups(dets: Sequence[Detection], threshold: float = 0.5) -> list[int]:
    """Sizes of connected components of detections overlapping at IoU >= threshold."""
    n = len(dets)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if iou(dets[i].box, dets[j].box) >= threshold:
                parent[find(i)] = find(j)
    return list(Counter(find(i) for i in range(n)).values())
