import math

import numpy as np
import pytest

from privtrack.ingest import Box, Detection, Scenario
from privtrack.privacy import (
    CalibrationError,
    NoiseScale,
    PrivacyBudget,
    calibrate_sigma,
    matched_white_power,
    perturb_detection,
    privatize_scenario,
    white_noise,
    white_noise_scenario,
)


def test_sigma_reference_value():
    # sqrt(2 ln 125000) = 4.84481..., within 1e-3 of the quoted 4.8442
    expected = math.sqrt(2 * math.log(125000))
    sigma = calibrate_sigma(PrivacyBudget(1.0, 1e-5, 1.0)).sigma
    assert sigma == pytest.approx(expected, rel=1e-12)
    assert sigma == pytest.approx(4.8442, abs=1e-3)


@pytest.mark.parametrize("k", [2.0, 0.5, 3.0, 10.0])
def test_sigma_scales_inversely_with_epsilon(k):
    a = calibrate_sigma(PrivacyBudget(0.7)).sigma
    b = calibrate_sigma(PrivacyBudget(0.7 * k)).sigma
    assert b == pytest.approx(a / k, rel=1e-12)


def test_doubling_epsilon_halves_sigma_exactly():
    assert calibrate_sigma(PrivacyBudget(2.0)).sigma == calibrate_sigma(PrivacyBudget(1.0)).sigma / 2


def test_cost_fraction_folds_into_epsilon():
    a = calibrate_sigma(PrivacyBudget(1.0, cost_fraction=0.5)).sigma
    b = calibrate_sigma(PrivacyBudget(0.5)).sigma
    assert a == b


def test_sensitivity_scales_sigma():
    assert calibrate_sigma(PrivacyBudget(1.0, sensitivity=3.0)).sigma == pytest.approx(
        3 * calibrate_sigma(PrivacyBudget(1.0)).sigma)


@pytest.mark.parametrize("kwargs", [
    dict(epsilon=0.0), dict(epsilon=-1.0), dict(epsilon=1.0, delta=0.0), dict(epsilon=1.0, delta=1.0),
    dict(epsilon=1.0, cost_fraction=0.0), dict(epsilon=1.0, cost_fraction=1.5), dict(epsilon=1.0, sensitivity=0),
])
def test_budget_validation(kwargs):
    with pytest.raises(CalibrationError):
        PrivacyBudget(**kwargs)


def test_large_epsilon_allowed():
    assert calibrate_sigma(PrivacyBudget(8.0)).sigma > 0


DET = Detection(3, 4, Box(100.0, 50.0, 20.0, 40.0), sensitive=True, class_id=1)


def test_sigma_zero_identity():
    assert perturb_detection(DET, 0.0, 1.0, np.random.default_rng(0)) == DET


def test_multiplier_zero_identity():
    assert perturb_detection(DET, NoiseScale(4.0), 0.0, np.random.default_rng(0)) == DET


def test_negative_multiplier_rejected():
    with pytest.raises(ValueError):
        perturb_detection(DET, 1.0, -0.1, np.random.default_rng(0))


def test_perturb_sample_std():
    rng = np.random.default_rng(1)
    sigma = 4.8442
    diffs = np.array([perturb_detection(DET, sigma, 1.0, rng).box.left - DET.box.left for _ in range(100_000)])
    assert diffs.std() == pytest.approx(sigma, rel=0.02)
    assert abs(diffs.mean()) < 0.05


def test_perturb_keeps_identity_and_clamps():
    rng = np.random.default_rng(2)
    tiny = Detection(1, 9, Box(0, 0, 0.1, 0.1), sensitive=True)
    outs = [perturb_detection(tiny, 5.0, 1.0, rng) for _ in range(200)]
    assert all((o.frame, o.track_id) == (1, 9) for o in outs)
    assert all(o.box.width >= 0 and o.box.height >= 0 for o in outs)
    assert any(o.box.width == 0 for o in outs)


def test_white_noise_zero_power():
    assert white_noise(DET, 0.0, np.random.default_rng(0)) == DET


def test_white_noise_hits_non_sensitive():
    plain = Detection(1, 1, Box(10, 10, 10, 10))
    out = white_noise(plain, 3.0, np.random.default_rng(0))
    assert out.box != plain.box
    assert np.all(np.abs(out.box.as_array() - plain.box.as_array()) <= 3.0)


def test_matched_white_variance():
    sigma = 2.5
    power = matched_white_power(sigma)
    assert power**2 / 3 == pytest.approx(sigma**2)
    rng = np.random.default_rng(3)
    big = Detection(1, 1, Box(500, 500, 100, 100))
    d = np.array([white_noise(big, power, rng).box.top - 500 for _ in range(50_000)])
    assert d.var() == pytest.approx(sigma**2, rel=0.03)


def _scene():
    dets = [
        Detection(1, 1, Box(0, 0, 10, 10), class_id=1, sensitive=True),
        Detection(1, 2, Box(50, 0, 10, 10), class_id=3),
        Detection(2, 1, Box(1, 0, 10, 10), class_id=1, sensitive=True),
    ]
    return Scenario("s", 2, tuple(dets)).with_detections(dets)


def test_privatize_zero_multipliers_unchanged():
    s = _scene()
    weights = {(1, 1): 0.0, (2, 1): 0.0}
    assert privatize_scenario(s, PrivacyBudget(1.0), weights, np.random.default_rng(0)) == s


def test_privatize_no_sensitive_unchanged():
    s = Scenario("n", 1, (Detection(1, 2, Box(0, 0, 5, 5)),))
    assert privatize_scenario(s, PrivacyBudget(1.0), {}, np.random.default_rng(0)) == s


def test_privatize_only_sensitive_changes():
    s = _scene()
    weights = {(1, 1): 1.0, (2, 1): 0.0}
    out = privatize_scenario(s, PrivacyBudget(1.0), weights, np.random.default_rng(0))
    changed = [a.track_id for a, b in zip(s.detections, out.detections) if a != b]
    assert changed == [1]
    assert out.detections[0].frame == 1 and out.detections[0].track_id == 1


def test_privatize_missing_weight_names_key():
    with pytest.raises(KeyError, match=r"frame=2, id=1"):
        privatize_scenario(_scene(), PrivacyBudget(1.0), {(1, 1): 1.0}, np.random.default_rng(0))


def test_privatize_deterministic():
    s = _scene()
    w = {(1, 1): 1.5, (2, 1): 1.5}
    a = privatize_scenario(s, PrivacyBudget(1.0), w, np.random.default_rng(9))
    b = privatize_scenario(s, PrivacyBudget(1.0), w, np.random.default_rng(9))
    assert a == b


def test_white_noise_scenario_touches_everything():
    s = _scene()
    out = white_noise_scenario(s, 2.0, np.random.default_rng(0))
    assert all(a.box != b.box for a, b in zip(s.detections, out.detections))


def test_psnr_strictly_increasing_in_epsilon():
    from privtrack.metrics import analytic_psnr
    values = [analytic_psnr(calibrate_sigma(PrivacyBudget(e)).sigma, 1920.0) for e in (0.25, 0.5, 1.0, 2.0)]
    assert all(b > a for a, b in zip(values, values[1:]))
