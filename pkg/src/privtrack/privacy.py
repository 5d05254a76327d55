"""(epsilon, delta) Gaussian mechanism on box coordinates, plus a white-noise baseline."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from .ingest import Box, Detection, Scenario, detection_keys


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float = 1e-5
    sensitivity: float = 1.0
    cost_fraction: float = 1.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise CalibrationError(f"epsilon must be positive, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise CalibrationError(f"delta must lie in (0, 1), got {self.delta}")
        if not self.sensitivity > 0:
            raise CalibrationError(f"sensitivity must be positive, got {self.sensitivity}")
        if not 0 < self.cost_fraction <= 1:
            raise CalibrationError(f"cost_fraction must lie in (0, 1], got {self.cost_fraction}")

    @property
    def effective_epsilon(self) -> float:
        return self.epsilon * self.cost_fraction


@dataclass(frozen=True)
class NoiseScale:
    sigma: float

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be non-negative, got {self.sigma}")


def calibrate_sigma(budget: PrivacyBudget) -> NoiseScale:
    """Gaussian-mechanism noise scale ``sensitivity * sqrt(2 ln(1.25/delta)) / eps_eff``.

    >>> round(calibrate_sigma(PrivacyBudget(1.0, 1e-5, 1.0)).sigma, 4)
    4.8448
    """
    eps = budget.effective_epsilon
    if not eps > 0:
        raise CalibrationError(f"effective epsilon must be positive, got {eps}")
    return NoiseScale(budget.sensitivity * math.sqrt(2.0 * math.log(1.25 / budget.delta)) / eps)


def _sigma_value(sigma) -> float:
    return sigma.sigma if isinstance(sigma, NoiseScale) else float(sigma)


def perturb_detection(det: Detection, sigma, multiplier: float, rng: np.random.Generator) -> Detection:
    """Add i.i.d. N(0, (sigma*multiplier)^2) noise to left, top, width and height.

    Four normals are always drawn so the generator advances identically for
    every noise level; sweeps over ``multiplier`` then share random numbers.
    """
    if multiplier < 0:
        raise ValueError(f"multiplier must be non-negative, got {multiplier}")
    scale = _sigma_value(sigma) * multiplier
    z = rng.standard_normal(4)
    if scale == 0:
        return det
    noisy = det.box.as_array() + scale * z
    return replace(det, box=Box.from_array(noisy))


def white_noise(det: Detection, power: float, rng: np.random.Generator) -> Detection:
    """Uniform noise on [-power, power] for every box coordinate, sensitive or not."""
    if power < 0:
        raise ValueError(f"power must be non-negative, got {power}")
    u = rng.uniform(-1.0, 1.0, 4)
    if power == 0:
        return det
    return replace(det, box=Box.from_array(det.box.as_array() + power * u))


def matched_white_power(sigma: float) -> float:
    """Uniform half-width with the same per-coordinate variance as N(0, sigma^2)."""
    return sigma * math.sqrt(3.0)


def privatize_scenario(
    scenario: Scenario,
    budget: PrivacyBudget,
    ncp_weights: Mapping,
    rng: np.random.Generator,
) -> Scenario:
    """Perturb every sensitive detection with its NCP noise multiplier.

    ``ncp_weights`` maps detection keys (see :func:`detection_keys`) to either an
    object with a ``noise_multiplier`` attribute or a bare number.
    """
    sigma = calibrate_sigma(budget)
    out = []
    for key, det in zip(detection_keys(scenario.detections), scenario.detections):
        if not det.sensitive:
            out.append(det)
            continue
        if key not in ncp_weights:
            raise KeyError(f"no NCP weight for sensitive detection (frame={key[0]}, id={key[1]})")
        weight = ncp_weights[key]
        multiplier = getattr(weight, "noise_multiplier", weight)
        out.append(perturb_detection(det, sigma, float(multiplier), rng))
    return scenario.with_detections(out)


def white_noise_scenario(scenario: Scenario, power: float, rng: np.random.Generator) -> Scenario:
    return scenario.with_detections(white_noise(det, power, rng) for det in scenario.detections)
