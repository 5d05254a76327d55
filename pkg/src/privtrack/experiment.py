"""End-to-end budget sweeps, method comparisons and attack suites.

Every grid cell ``(method, epsilon, repeat)`` runs the same pipeline::

    scenario -> NCP weights -> perturb (per method) -> track -> refine
             -> [attack -> track -> refine] -> metrics

and is seeded from a hash of ``(master_seed, method, epsilon, repeat)``, so a
cell's output does not depend on which other cells run or in what order.
Results are written as plot-ready CSV (header row, ``,`` separator, ``.``
decimals, LF line endings).
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .attacks import AttackSpec, apply_attack, evaluate_defense
from .dcrf import DcrfParams, refine
from .ingest import Scenario, SynthConfig, lane_suite_config, read_mot, synth_scenario
from .metrics import UNDEFINED, match_tracks, retrieval_frequency, scenario_report, tracking_rmse
from .ncp import NcpParams, NcpWeight, weight_scenario
from .privacy import (
    PrivacyBudget,
    calibrate_sigma,
    matched_white_power,
    privatize_scenario,
    white_noise_scenario,
)
from .tracker import TrackerConfig, run_tracker

logger = logging.getLogger(__name__)

METHODS = ("ncp_gaussian", "white_noise", "none")

# columns of the per-figure CSVs: file name -> metric keys
FIGURE_TABLES = {
    "rmse_vs_eps.csv": ("tracking_rmse", "tracking_rmse_unrefined", "id_switches", "id_switches_unrefined"),
    "psnr_vs_eps.csv": ("MSE", "PSNR", "RMSE"),
    "kl_vs_eps.csv": ("KL", "StatLoss", "LossRate"),
    "retrieval_vs_eps.csv": ("retrieval_frequency",),
}
CELL_COLUMNS = ("method", "epsilon", "repeat", "scenario")


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from any sequence of reprs (independent of PYTHONHASHSEED)."""
    text = "|".join(repr(p) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "big") >> 1


# --- configuration ----------------------------------------------------------


@dataclass(frozen=True)
class AttackPlan:
    """An attack whose target is resolved per scenario.

    ``target`` is a track id, ``"first"`` (smallest ground-truth id) or
    ``"first_sensitive"`` (smallest id of a sensitive-class target).
    """

    kind: str
    target: object = "first"
    onset_frame: int = 1
    drift: tuple[float, float] = (0.0, 0.0)
    label_map: Optional[dict] = None

    @classmethod
    def from_dict(cls, data: dict) -> "AttackPlan":
        label_map = data.get("label_map")
        return cls(
            kind=data["kind"],
            target=data.get("target", data.get("target_id", "first")),
            onset_frame=int(data.get("onset_frame", data.get("onset", 1))),
            drift=tuple(float(v) for v in data.get("drift", (0.0, 0.0))),
            label_map={int(k): int(v) for k, v in label_map.items()} if label_map else None,
        )

    @property
    def label(self) -> str:
        return f"{self.kind}@{self.onset_frame}"

    def resolve(self, scenario: Scenario) -> AttackSpec:
        truth = scenario.ground_truth if scenario.ground_truth is not None else scenario.detections
        ids = sorted({d.track_id for d in truth if d.track_id is not None})
        if self.target == "first":
            pool = ids
        elif self.target == "first_sensitive":
            pool = sorted({d.track_id for d in truth if d.track_id is not None and d.class_id in scenario.sensitive_classes})
        else:
            pool = [int(self.target)]
        if not pool:
            raise ValueError(f"no target matches {self.target!r} in {scenario.name}")
        return AttackSpec(self.kind, pool[0], self.onset_frame, self.drift, self.label_map)


@dataclass(frozen=True)
class ExperimentConfig:
    """Grid definition.

    Scenario source, in order of precedence: ``mot_path`` (one fixed clip;
    repeats vary only the noise), ``synth`` (its seed is replaced per repeat),
    otherwise the default lane suite with one clip per repeat.
    """

    methods: tuple[str, ...] = METHODS
    epsilons: tuple[float, ...] = (0.5, 1.0, 1.5)
    delta: float = 1e-5
    sensitivity: float = 1.0
    cost_fraction: float = 1.0
    repeats: int = 20
    master_seed: int = 0
    out_dir: Optional[str] = None
    attacks: tuple[AttackPlan, ...] = ()
    ncp: NcpParams = NcpParams()
    tracker: TrackerConfig = TrackerConfig()
    dcrf: DcrfParams = DcrfParams()
    refine_window: int = 10
    mot_path: Optional[str] = None
    sensitive_classes: tuple[int, ...] = (1,)
    synth: Optional[SynthConfig] = None
    frame_count: int = 200
    frame_size: tuple[float, float] = (1920.0, 1080.0)
    normalize: bool = False
    overlay_csv: Optional[str] = None
    retrieval_multipliers: tuple[float, ...] = ()

    def __post_init__(self):
        if self.repeats < 1:
            raise ValueError("repeats must be at least 1")
        if not self.epsilons:
            raise ValueError("budget grid must not be empty")
        if any(not e > 0 for e in self.epsilons):
            raise ValueError("every epsilon must be positive")
        unknown = set(self.methods) - set(METHODS)
        if unknown or not self.methods:
            raise ValueError(f"methods must be a non-empty subset of {METHODS}, got {self.methods}")
        # validates delta, sensitivity and cost fraction once up front
        PrivacyBudget(self.epsilons[0], self.delta, self.sensitivity, self.cost_fraction)

    @classmethod
    def from_dict(cls, data: dict, base_dir: Optional[Path] = None) -> "ExperimentConfig":
        data = dict(data)
        kwargs = {}
        for key in ("delta", "sensitivity", "cost_fraction"):
            if key in data:
                kwargs[key] = float(data.pop(key))
        for key in ("repeats", "master_seed", "frame_count", "refine_window"):
            if key in data:
                kwargs[key] = int(data.pop(key))
        if "seed" in data:
            kwargs["master_seed"] = int(data.pop("seed"))
        if "methods" in data:
            kwargs["methods"] = tuple(data.pop("methods"))
        if "epsilons" in data or "eps" in data:
            kwargs["epsilons"] = tuple(float(e) for e in data.pop("epsilons", None) or data.pop("eps"))
        if "attacks" in data:
            kwargs["attacks"] = tuple(AttackPlan.from_dict(a) for a in data.pop("attacks"))
        if "ncp" in data:
            kwargs["ncp"] = NcpParams(**data.pop("ncp"))
        if "tracker" in data:
            kwargs["tracker"] = TrackerConfig(**data.pop("tracker"))
        if "dcrf" in data:
            d = dict(data.pop("dcrf"))
            if "feature_weights" in d:
                d["feature_weights"] = tuple(d["feature_weights"])
            kwargs["dcrf"] = DcrfParams(**d)
        for key in ("mot_path", "overlay_csv"):
            if data.get(key):
                path = Path(data.pop(key))
                if base_dir is not None and not path.is_absolute():
                    path = base_dir / path
                kwargs[key] = str(path)
        if "synth" in data:
            kwargs["synth"] = SynthConfig.from_dict(data.pop("synth"))
        for key in ("sensitive_classes", "retrieval_multipliers", "frame_size"):
            if key in data:
                kwargs[key] = tuple(data.pop(key))
        for key in ("normalize", "out_dir"):
            if key in data:
                kwargs[key] = data.pop(key)
        data.pop("mot_path", None)
        data.pop("overlay_csv", None)
        if data:
            raise ValueError(f"unknown config keys: {sorted(data)}")
        return cls(**kwargs)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), base_dir=path.parent)

    @property
    def frame_diagonal(self) -> float:
        size = self.synth.frame_size if self.synth is not None else self.frame_size
        return math.hypot(*size)


@dataclass
class AttackOutcome:
    attack: str
    target_id: int
    onset_frame: int
    unrefined: object  # AttackReport
    refined: object  # AttackReport


@dataclass
class RunRecord:
    method: str
    epsilon: float
    repeat: int
    scenario: str
    seed: int
    metrics: dict = field(default_factory=dict)
    attacks: list = field(default_factory=list)
    error: Optional[str] = None

    @property
    def cell(self) -> tuple:
        return (self.method, self.epsilon, self.repeat)


# --- pipeline ---------------------------------------------------------------


def load_scenario(config: ExperimentConfig, repeat: int) -> Scenario:
    if config.mot_path:
        scenario = read_mot(config.mot_path, name=Path(config.mot_path).stem,
                            sensitive_classes=config.sensitive_classes)
        if scenario.ground_truth is None and all(d.track_id is not None for d in scenario.detections):
            scenario = replace(scenario, ground_truth=scenario.detections)
        return scenario
    clip_seed = derive_seed(config.master_seed, "clip", repeat)
    if config.synth is not None:
        synth = replace(config.synth, seed=clip_seed % 2**32, name=f"{config.synth.name}-{repeat}")
    else:
        return _lane_clip(clip_seed % 2**32, config.frame_count, f"lanes-{repeat}")
    return synth_scenario(synth)


@lru_cache(maxsize=64)
def _lane_clip(seed: int, frame_count: int, name: str) -> Scenario:
    # every method and budget of a repeat shares the clip; scenarios are immutable
    return synth_scenario(replace(lane_suite_config(seed, frame_count=frame_count), name=name))


def _budget(config: ExperimentConfig, epsilon: float) -> PrivacyBudget:
    return PrivacyBudget(epsilon, config.delta, config.sensitivity, config.cost_fraction)


def noise_std(config: ExperimentConfig, epsilon: float) -> float:
    """Per-coordinate noise std on sensitive detections: sigma times the NCP boost."""
    return calibrate_sigma(_budget(config, epsilon)).sigma * (1.0 + config.ncp.sensitive_boost)


def sanitize(scenario: Scenario, method: str, config: ExperimentConfig, epsilon: float, weights: dict,
             rng: np.random.Generator) -> tuple[Scenario, dict, float]:
    """Apply one method.

    Returns the sanitized scenario, the weights refinement should use and the
    noise std per unit of their noise multiplier.
    """
    if method == "none":
        return scenario, weights, 0.0
    budget = _budget(config, epsilon)
    if method == "ncp_gaussian":
        return privatize_scenario(scenario, budget, weights, rng), weights, calibrate_sigma(budget).sigma
    if method == "white_noise":
        # same per-coordinate variance as the boosted Gaussian, applied to every detection
        std = noise_std(config, epsilon)
        uniform = {k: NcpWeight(1.0, w.unary_weight) for k, w in weights.items()}
        return white_noise_scenario(scenario, matched_white_power(std), rng), uniform, std
    raise ValueError(f"unknown method {method!r}")


def track_and_refine(scenario: Scenario, config: ExperimentConfig, weights: dict, noise: float):
    tracks = run_tracker(scenario, config.tracker)
    params = replace(config.dcrf, observation_noise=max(config.dcrf.observation_noise, noise))
    return tracks, refine(tracks, scenario, weights, params, window_len=config.refine_window)


def run_cell(config: ExperimentConfig, method: str, epsilon: float, repeat: int) -> RunRecord:
    """Run one grid cell; a failing stage is recorded and the remaining metrics are left undefined."""
    seed = derive_seed(config.master_seed, method, float(epsilon), repeat)
    record = RunRecord(method, float(epsilon), repeat, "", seed)
    stage = "load"
    try:
        original = load_scenario(config, repeat)
        record.scenario = original.name
        stage = "ncp"
        weights = weight_scenario(original, original.sensitive_classes, config.ncp)
        stage = "privatize"
        rng = np.random.default_rng(seed)
        sanitized, refine_weights, noise = sanitize(original, method, config, epsilon, weights, rng)
        stage = "track"
        tracks, refined = track_and_refine(sanitized, config, refine_weights, noise)
        stage = "metrics"
        scale = config.frame_diagonal if config.normalize else None
        report = scenario_report(original, sanitized, refined, max_value=config.frame_size[0])
        if original.ground_truth is not None:
            matching = match_tracks(tracks, original.ground_truth)
            report["tracking_rmse_unrefined"] = tracking_rmse(tracks, original.ground_truth, matching=matching)
            report["id_switches_unrefined"] = float(matching.id_switches())
        else:
            report["tracking_rmse"] = report["tracking_rmse_unrefined"] = UNDEFINED
            report["id_switches_unrefined"] = UNDEFINED
        if scale:
            for key in ("tracking_rmse", "tracking_rmse_unrefined"):
                report[key] = report[key] / scale
        record.metrics = report
        for plan in config.attacks:
            stage = f"attack {plan.label}"
            spec = plan.resolve(original)
            attacked = apply_attack(sanitized, spec)
            att_weights = weight_scenario(attacked, attacked.sensitive_classes, config.ncp)
            if method == "white_noise":
                att_weights = {k: NcpWeight(1.0, w.unary_weight) for k, w in att_weights.items()}
            att_tracks, att_refined = track_and_refine(attacked, config, att_weights, noise)
            unrefined, refined_report = evaluate_defense(original, att_tracks, att_refined, spec.onset_frame)
            if scale:
                unrefined = replace(unrefined, post_onset_rmse=unrefined.post_onset_rmse / scale)
                refined_report = replace(refined_report, post_onset_rmse=refined_report.post_onset_rmse / scale)
            record.attacks.append(AttackOutcome(plan.label, spec.target_id, spec.onset_frame, unrefined, refined_report))
    except Exception as exc:  # recorded per cell; the run continues
        logger.warning("cell %s failed at %s: %s", record.cell, stage, exc)
        record.error = f"{stage}: {type(exc).__name__}: {exc}"
    return record


def _cell_task(args):
    return run_cell(*args)


def grid(config: ExperimentConfig) -> list[tuple[str, float, int]]:
    """Cells in canonical (method, epsilon, repeat) order."""
    return [(m, float(e), r) for m in config.methods for e in sorted(config.epsilons) for r in range(config.repeats)]


def run_experiment(config: ExperimentConfig, jobs: int = 1) -> list[RunRecord]:
    """Run every cell and, when ``config.out_dir`` is set, write the CSV set there."""
    cells = grid(config)
    tasks = [(config, m, e, r) for m, e, r in cells]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_cell_task, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        records = [_cell_task(t) for t in tasks]
    if config.out_dir:
        write_outputs(config, records, Path(config.out_dir))
    return records


# --- retrieval sweep --------------------------------------------------------


def retrieval_sweep(multipliers: Sequence[float], seeds: Iterable[int], epsilon: float = 1.0,
                    config: ExperimentConfig = ExperimentConfig()) -> np.ndarray:
    """Retrieval frequency per (clip, sigma multiplier), shape ``(n_seeds, n_multipliers)``.

    Each clip reuses one generator stream for every multiplier (common random
    numbers), so the sweep isolates the effect of the noise scale.
    """
    budget = _budget(config, epsilon)
    rows = []
    for seed in seeds:
        scenario = synth_scenario(lane_suite_config(int(seed), frame_count=config.frame_count))
        weights = weight_scenario(scenario, scenario.sensitive_classes, config.ncp)
        row = []
        for mult in multipliers:
            scaled = {k: w.noise_multiplier * mult for k, w in weights.items()}
            rng = np.random.default_rng(derive_seed(config.master_seed, "retrieval", int(seed)))
            sanitized = privatize_scenario(scenario, budget, scaled, rng)
            row.append(retrieval_frequency(scenario, sanitized))
        rows.append(row)
    return np.array(rows, dtype=float).reshape(-1, len(multipliers))


# --- output -----------------------------------------------------------------


def format_value(value) -> str:
    """CSV cell text: shortest round-trip repr, empty for undefined."""
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    value = float(value)
    if math.isnan(value):
        return ""
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return repr(value)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([v if isinstance(v, str) else format_value(v) for v in row])


def _cell_prefix(rec: RunRecord) -> list:
    return [rec.method, format_value(rec.epsilon), str(rec.repeat), rec.scenario]


def attack_rows(records: Sequence[RunRecord]) -> list[list]:
    rows = []
    for rec in records:
        for out in rec.attacks:
            for variant, rep in (("unrefined", out.unrefined), ("refined", out.refined)):
                rows.append(_cell_prefix(rec) + [out.attack, str(out.target_id), str(out.onset_frame), variant,
                                                 rep.id_switches, rep.mean_giou, rep.post_onset_rmse,
                                                 rep.classification_accuracy])
    return rows


ATTACK_COLUMNS = CELL_COLUMNS + ("attack", "target", "onset", "variant", "id_switches", "mean_giou",
                                 "post_onset_rmse", "classification_accuracy")
SUMMARY_COLUMNS = ("method", "epsilon", "metric", "n", "mean", "std")


def _record_values(rec: RunRecord) -> dict[str, float]:
    values = dict(rec.metrics)
    for out in rec.attacks:
        for variant, rep in (("unrefined", out.unrefined), ("refined", out.refined)):
            prefix = f"{out.attack}/{variant}/"
            values[prefix + "id_switches"] = float(rep.id_switches)
            values[prefix + "mean_giou"] = rep.mean_giou
            values[prefix + "post_onset_rmse"] = rep.post_onset_rmse
            values[prefix + "classification_accuracy"] = rep.classification_accuracy
    return values


def summarize(records: Sequence[RunRecord], overlay: Sequence[dict] = ()) -> list[tuple]:
    """Mean and population std (``ddof=0``) per (method, epsilon, metric).

    ``n`` counts finite values; a group with none has empty mean/std fields.
    Methods keep their first-seen order, epsilons ascend, metrics keep the
    order in which they were first produced. ``overlay`` rows
    (``method, epsilon, metric, value``) from external baselines are
    aggregated the same way.
    """
    if not records and not overlay:
        raise ValueError("nothing to summarize")
    groups: dict[tuple[str, float], dict[str, list[float]]] = {}
    method_order: list[str] = []
    metric_order: list[str] = []

    def add(method, eps, metric, value):
        if method not in method_order:
            method_order.append(method)
        if metric not in metric_order:
            metric_order.append(metric)
        groups.setdefault((method, float(eps)), {}).setdefault(metric, []).append(value)

    for rec in records:
        for metric, value in _record_values(rec).items():
            add(rec.method, rec.epsilon, metric, float(value))
        if rec.error and not rec.metrics:
            groups.setdefault((rec.method, rec.epsilon), {})
            if rec.method not in method_order:
                method_order.append(rec.method)
    for row in overlay:
        value = row.get("value", "")
        add(row["method"], float(row["epsilon"]), row["metric"], float(value) if value not in ("", None) else math.nan)

    out = []
    for method in method_order:
        for eps in sorted(e for m, e in groups if m == method):
            metrics = groups[(method, eps)]
            for metric in metric_order:
                vals = np.array([v for v in metrics.get(metric, []) if math.isfinite(v)], dtype=float)
                if vals.size:
                    out.append((method, eps, metric, int(vals.size), float(vals.mean()), float(vals.std())))
                else:
                    out.append((method, eps, metric, 0, math.nan, math.nan))
    return out


def read_overlay(path) -> list[dict]:
    """External baseline results with columns ``method, epsilon, metric, value``."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    missing = {"method", "epsilon", "metric", "value"} - set(rows[0] if rows else {})
    if rows and missing:
        raise ValueError(f"overlay CSV lacks columns {sorted(missing)}")
    return rows


def write_outputs(config: ExperimentConfig, records: Sequence[RunRecord], out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, keys in FIGURE_TABLES.items():
        write_csv(out_dir / name, CELL_COLUMNS + keys,
                  (_cell_prefix(r) + [r.metrics.get(k, math.nan) for k in keys] for r in records))
    write_csv(out_dir / "attack_report.csv", ATTACK_COLUMNS, attack_rows(records))

    metric_names: list[str] = []
    for r in records:
        metric_names.extend(k for k in r.metrics if k not in metric_names)
    write_csv(out_dir / "metrics.csv", CELL_COLUMNS + tuple(metric_names),
              (_cell_prefix(r) + [r.metrics.get(k, math.nan) for k in metric_names] for r in records))
    write_csv(out_dir / "errors.csv", CELL_COLUMNS + ("error",),
              (_cell_prefix(r) + [r.error] for r in records if r.error))

    overlay = read_overlay(config.overlay_csv) if config.overlay_csv else ()
    write_csv(out_dir / "summary.csv", SUMMARY_COLUMNS, summarize(records, overlay))

    if config.retrieval_multipliers:
        seeds = [derive_seed(config.master_seed, "clip", r) % 2**32 for r in range(config.repeats)]
        table = retrieval_sweep(config.retrieval_multipliers, seeds, config=config)
        write_csv(out_dir / "retrieval_vs_multiplier.csv", ("multiplier", "n", "mean", "std"),
                  ([m, table.shape[0], table[:, k].mean(), table[:, k].std()]
                   for k, m in enumerate(config.retrieval_multipliers)))
