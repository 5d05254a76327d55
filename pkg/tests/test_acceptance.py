"""End-to-end acceptance checks; each prints one PASS/FAIL line, repeated in the terminal summary."""

import filecmp
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from oracles import brute_assignment, brute_partition, brute_viterbi
from privtrack.attacks import AttackSpec, apply_attack, attack_report, evaluate_defense
from privtrack.dcrf import ChainModel, DcrfParams, forward_backward, refine, viterbi
from privtrack.experiment import AttackPlan, ExperimentConfig, retrieval_sweep, run_experiment
from privtrack.ingest import PEDESTRIAN, Box, Detection, lane_suite_config, parse_mot, serialize_mot, synth_scenario
from privtrack.metrics import (
    GeneralizationScheme,
    Histogram,
    analytic_psnr,
    cm,
    dm,
    info_loss_generalization,
    kl_divergence,
    lm,
    loss_rate,
    mse_psnr_rmse,
    pattern_metrics,
    stat_loss,
)
from privtrack.ncp import weight_scenario
from privtrack.privacy import PrivacyBudget, calibrate_sigma, perturb_detection
from privtrack.tracker import hungarian, run_tracker

FIXTURE = Path(__file__).parent / "fixtures" / "mot_1000.txt"


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start


@pytest.fixture()
def verdict(report_line):
    def judge(number, name, ok, detail, elapsed, limit):
        ok = bool(ok) and elapsed < limit
        report_line(f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2} {name}: {detail} "
                    f"({elapsed:.2f}s / limit {limit:g}s)")
        return ok

    return judge


def test_01_gaussian_calibration(verdict):
    with Timer() as t:
        s1 = calibrate_sigma(PrivacyBudget(1.0, 1e-5, 1.0)).sigma
        s2 = calibrate_sigma(PrivacyBudget(2.0, 1e-5, 1.0)).sigma
    ok = abs(s1 - 4.8442) <= 1e-3 and s2 == s1 / 2
    assert verdict(1, "gaussian calibration", ok, f"sigma(1)={s1:.6f}, sigma(2)*2={2 * s2:.6f}", t.elapsed, 1)


def test_02_psnr_tracks_budget(verdict):
    max_value = 1920.0
    n_boxes = 5000  # 2e4 coordinates per budget
    rng = np.random.default_rng(2)
    lefts = rng.uniform(0, 1800, n_boxes)
    dets = [Detection(1, i + 1, Box(float(x), 100.0, 40.0, 80.0)) for i, x in enumerate(lefts)]
    clean = np.concatenate([d.box.as_array() for d in dets])
    rows, empirical = [], []
    with Timer() as t:
        for eps in (0.25, 0.5, 0.75, 1.0):
            sigma = calibrate_sigma(PrivacyBudget(eps)).sigma
            noisy = np.concatenate([perturb_detection(d, sigma, 1.0, rng).box.as_array() for d in dets])
            _, psnr, _ = mse_psnr_rmse(clean, noisy, max_value)
            expected = analytic_psnr(sigma, max_value)
            assert expected == pytest.approx(10 * math.log10(max_value**2 / sigma**2))
            empirical.append(psnr)
            rows.append(abs(psnr - expected))
    increasing = all(b > a for a, b in zip(empirical, empirical[1:]))
    ok = max(rows) <= 0.5 and increasing
    detail = "empirical " + ", ".join(f"{p:.2f}" for p in empirical) + f" dB; max |diff| {max(rows):.3f} dB"
    assert verdict(2, "psnr vs budget", ok, detail, t.elapsed, 10)


def test_03_rmse_ordering(verdict):
    cfg = ExperimentConfig(methods=("ncp_gaussian", "white_noise"), epsilons=(0.5, 1.0, 1.5), repeats=20)
    with Timer() as t:
        records = run_experiment(cfg, jobs=os.cpu_count() or 1)
    assert all(r.error is None for r in records)
    parts, ok = [], True
    for eps in cfg.epsilons:
        ours = np.mean([r.metrics["tracking_rmse"] for r in records if r.method == "ncp_gaussian" and r.epsilon == eps])
        white = np.mean([r.metrics["tracking_rmse_unrefined"] for r in records
                         if r.method == "white_noise" and r.epsilon == eps])
        margin = 1 - ours / white
        ok &= margin >= 0.30
        parts.append(f"eps={eps}: {ours:.3f} vs {white:.3f} ({margin:.0%})")
    assert verdict(3, "rmse ordering", ok, "; ".join(parts), t.elapsed, 120)


def test_04_inference_oracles(verdict):
    rng = np.random.default_rng(4)
    viterbi_ok = logz_ok = 0
    with Timer() as t:
        for _ in range(200):
            T, L = int(rng.integers(1, 6)), int(rng.integers(1, 4))
            m = ChainModel(rng.normal(0, 2, (T, L)), rng.normal(0, 2, (T - 1, L, L)))
            labels, score = viterbi(m)
            ref_labels, ref_score = brute_viterbi(m.unary, m.pairwise)
            viterbi_ok += labels == ref_labels and math.isclose(score, ref_score, rel_tol=0, abs_tol=1e-12)
        for _ in range(200):
            T, L = int(rng.integers(1, 5)), int(rng.integers(1, 4))
            m = ChainModel(rng.normal(0, 2, (T, L)), rng.normal(0, 2, (T - 1, L, L)))
            logz_ok += math.isclose(math.exp(forward_backward(m)[0]), brute_partition(m.unary, m.pairwise),
                                    rel_tol=1e-9)
    ok = viterbi_ok == 200 and logz_ok == 200
    assert verdict(4, "inference oracles", ok, f"viterbi {viterbi_ok}/200, logZ {logz_ok}/200", t.elapsed, 30)


def test_05_assignment_oracle(verdict):
    rng = np.random.default_rng(5)
    agree = 0
    with Timer() as t:
        for i in range(500):
            n = int(rng.integers(1, 7))
            cost = rng.random((n, n)) if i % 2 else rng.integers(0, 4, (n, n)).astype(float)
            pairs, total = hungarian(cost)
            best, best_pairs = brute_assignment(cost)
            agree += math.isclose(total, best, rel_tol=0, abs_tol=1e-12) and list(pairs) == list(best_pairs)
    assert verdict(5, "assignment oracle", agree == 500, f"{agree}/500 optimal with identical pairs", t.elapsed, 10)


def test_06_metric_goldens(verdict):
    H = Histogram.from_counts
    with Timer() as t:
        checks = {
            "LossRate 1.0": loss_rate(H([10, 0]), H([5, 5])) == 1.0,
            "LossRate 0.5": loss_rate(H([10, 10]), H([10, 0])) == 0.5,
            "IL 0.5": info_loss_generalization(GeneralizationScheme(2, (4, 4), 3)) == 0.5,
            "LM 0.5": lm([[3]], [5]) == 0.5,
            "CM 0.25": cm([1, 0, 0, 0]) == 0.25,
            "DM 9": dm([1, 2, 2]) == 9,
            "StatLoss 0.25": stat_loss(H([0.5, 0.5]), H([0.25, 0.75])) == 0.25,
            "KL 0.1438": abs(kl_divergence(H([0.5, 0.5]), H([0.25, 0.75])) - 0.1438) <= 1e-3,
            "MC 0.2": math.isclose(pattern_metrics([100], [80]).MC, 0.2, rel_tol=1e-12),
            "AP 0.5": pattern_metrics([1], [1], precisions=[1, 1, 1, 1, 0.5], detection_frequency=9).AP == 0.5,
        }
        mse, _, rmse = mse_psnr_rmse([0, 0], [3, 4], 10)
        checks["MSE 12.5"] = mse == 12.5
        checks["RMSE 3.5355"] = abs(rmse - 3.5355) <= 1e-4
    failed = [k for k, v in checks.items() if not v]
    assert verdict(6, "metric goldens", not failed, f"{len(checks) - len(failed)}/{len(checks)} ok {failed or ''}",
                   t.elapsed, 1)


def _attack_run(seed, spec_for):
    clean = synth_scenario(lane_suite_config(seed, frame_count=200))
    spec = spec_for(clean)
    attacked = apply_attack(clean, spec)
    tracks = run_tracker(attacked)
    refined = refine(tracks, attacked, weight_scenario(attacked, attacked.sensitive_classes), DcrfParams())
    return clean, spec, tracks, refined


def test_07_hijack_defense(verdict):
    unref, ref, sw_u, sw_r = [], [], [], []
    with Timer() as t:
        for seed in range(20):
            clean, spec, tracks, refined = _attack_run(seed, lambda s: AttackSpec("hijack_shift", 1, 100, (2.0, 0.0)))
            a, b = evaluate_defense(clean, tracks, refined, spec.onset_frame)
            unref.append(a.post_onset_rmse)
            ref.append(b.post_onset_rmse)
            sw_u.append(a.id_switches)
            sw_r.append(b.id_switches)
    mu, mr = np.mean(unref), np.mean(ref)
    ok = mr <= 0.7 * mu and np.mean(sw_r) <= np.mean(sw_u)
    detail = f"post-onset rmse {mu:.2f} -> {mr:.2f} ({1 - mr / mu:.0%} lower); id switches {np.mean(sw_u):.2f} -> " \
             f"{np.mean(sw_r):.2f}"
    assert verdict(7, "hijack defense", ok, detail, t.elapsed, 120)


def test_08_blind_label(verdict):
    def first_pedestrian(s):
        target = min(d.track_id for d in s.detections if d.class_id == PEDESTRIAN)
        return AttackSpec("blind_label", target, 100)

    acc_clean, acc_hit, rmse_clean, rmse_hit, ids_ok = [], [], [], [], True
    with Timer() as t:
        for seed in range(3):
            clean, spec, tracks, refined = _attack_run(seed, first_pedestrian)
            base_tracks = run_tracker(clean)
            base_refined = refine(base_tracks, clean, weight_scenario(clean, clean.sensitive_classes))
            before = attack_report(clean, base_refined, spec.onset_frame)
            after = attack_report(clean, refined, spec.onset_frame)
            acc_clean.append(before.classification_accuracy)
            acc_hit.append(after.classification_accuracy)
            rmse_clean.append(before.post_onset_rmse)
            rmse_hit.append(after.post_onset_rmse)
            ids_ok &= [tr.id for tr in refined] == [tr.id for tr in tracks] == [tr.id for tr in base_refined]
    change = abs(np.mean(rmse_hit) - np.mean(rmse_clean)) / np.mean(rmse_clean)
    ok = np.mean(acc_hit) < np.mean(acc_clean) and change < 0.10 and ids_ok
    detail = f"accuracy {np.mean(acc_clean):.3f} -> {np.mean(acc_hit):.3f}; rmse change {change:.1%}; " \
             f"ids preserved {ids_ok}"
    assert verdict(8, "blind label", ok, detail, t.elapsed, 120)


def test_09_retrieval_trend(verdict):
    multipliers = [0.0, 0.5, 1.0, 2.0, 4.0]
    with Timer() as t:
        table = retrieval_sweep(multipliers, range(20))
    means = table.mean(axis=0)
    ok = all(b <= a for a, b in zip(means, means[1:]))
    detail = "mean retrieval " + ", ".join(f"x{m:g}={v:.3f}" for m, v in zip(multipliers, means))
    assert verdict(9, "retrieval trend", ok, detail, t.elapsed, 60)


def _same_tree(a: Path, b: Path) -> bool:
    names = sorted(p.name for p in a.iterdir())
    if names != sorted(p.name for p in b.iterdir()):
        return False
    match, mismatch, errors = filecmp.cmpfiles(a, b, names, shallow=False)
    return not mismatch and not errors


def test_10_determinism(tmp_path, verdict):
    base = dict(methods=("ncp_gaussian", "white_noise", "none"), epsilons=(0.5, 1.0), repeats=2, frame_count=60,
                attacks=(AttackPlan("hijack_shift", "first", 30, (2.0, 0.0)), AttackPlan("blind_label", "first_sensitive", 30)),
                retrieval_multipliers=(0.0, 1.0, 2.0), master_seed=7)
    with Timer() as t:
        first = ExperimentConfig(**base, out_dir=str(tmp_path / "a"))
        run_experiment(first)
        t_run = time.perf_counter() - t.start
        run_experiment(ExperimentConfig(**base, out_dir=str(tmp_path / "b")))
        run_experiment(ExperimentConfig(**base, out_dir=str(tmp_path / "c")), jobs=2)
    rerun_same = _same_tree(tmp_path / "a", tmp_path / "b")
    parallel_same = _same_tree(tmp_path / "a", tmp_path / "c")
    n_files = len(list((tmp_path / "a").iterdir()))
    ok = rerun_same and parallel_same
    detail = f"{n_files} csv files; rerun identical {rerun_same}, jobs=2 identical {parallel_same}"
    # runtime budget is that of the run itself; allow the three runs three times that plus slack
    assert verdict(10, "determinism", ok, detail, t.elapsed, 3 * t_run + 30)


def test_11_mot_round_trip(verdict):
    raw = FIXTURE.read_text()
    assert len(raw.splitlines()) == 1000
    with Timer() as t:
        out = serialize_mot(parse_mot(raw))
    assert verdict(11, "mot round trip", out == raw, f"{len(raw)} bytes identical {out == raw}", t.elapsed, 1)
