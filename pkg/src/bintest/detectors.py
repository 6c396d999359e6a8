"""Detector defenses: decision wrappers, FPR calibration, and the paired
normal/inverted binarization tests.

The normal test plants boundary and reference points that the detector
clears and requires attack candidates to stay undetected; the inverted
test negates the detector everywhere, so the attack must produce an
adversarial example that IS detected. Passing both is a necessary
condition for a detector-aware attack. Detector parameters are never
modified during construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .harness import TestConfig, TestReport, run_binarization_test


class CalibrationError(RuntimeError):
    """The detector family cannot reach the requested false-positive rate."""


class Detector:
    """Thresholded scalar-score detector: detected iff score(x) >= threshold."""

    def __init__(self, name: str, score_fn, threshold: float,
                 target_fpr: float | None = None,
                 measured_fpr: float | None = None):
        self.name = name
        self.score_fn = score_fn
        self.threshold = float(threshold)
        self.target_fpr = target_fpr
        self.measured_fpr = measured_fpr

    def score(self, x) -> float:
        return float(self.score_fn(np.asarray(x, dtype=np.float64)))

    def scores(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return np.asarray(self.score_fn(X), dtype=np.float64)

    def detected(self, x) -> bool:
        return self.score(x) >= self.threshold

    def detected_many(self, X) -> np.ndarray:
        return self.scores(X) >= self.threshold

    def negated(self) -> "NegatedDetector":
        return NegatedDetector(self)


class NegatedDetector:
    """Flips another detector's decision (the inverted test's ¬d)."""

    def __init__(self, base: Detector):
        self.base = base
        self.name = f"not-{base.name}"

    def detected(self, x) -> bool:
        return not self.base.detected(x)

    def detected_many(self, X) -> np.ndarray:
        return ~self.base.detected_many(X)

    def negated(self) -> Detector:
        return self.base


class ConstantDetector:
    """Always-detect / always-clear stand-ins for reduction tests."""

    def __init__(self, decision: bool):
        self.decision = bool(decision)
        self.name = "always-detect" if decision else "always-clear"

    def detected(self, x) -> bool:
        return self.decision

    def detected_many(self, X) -> np.ndarray:
        return np.full(len(X), self.decision)

    def negated(self) -> "ConstantDetector":
        return ConstantDetector(not self.decision)


def calibrate_detector_fpr(score_fn, calibration_data, target_fpr: float,
                           holdout_data=None, name: str = "detector",
                           tolerance: float = 0.02) -> Detector:
    """Pick the score threshold so the empirical FPR matches target_fpr.

    The threshold is set from calibration_data; when holdout_data is given
    the achieved FPR is measured on it and must land within +-tolerance of
    the target, otherwise CalibrationError is raised (degenerate score
    distributions cannot reach intermediate rates).
    """
    if not 0.0 <= target_fpr <= 1.0:
        raise ValueError("target_fpr must lie in [0, 1]")
    cal = np.asarray(calibration_data, dtype=np.float64)
    scores = np.asarray(score_fn(cal), dtype=np.float64)
    if scores.size == 0:
        raise CalibrationError("no calibration data")

    if target_fpr <= 0.0:
        threshold = float(np.nextafter(scores.max(), np.inf))
    elif target_fpr >= 1.0:
        threshold = float(scores.min())
    else:
        threshold = float(np.quantile(scores, 1.0 - target_fpr, method="higher"))

    detector = Detector(name, score_fn, threshold, target_fpr=target_fpr)
    measure_on = holdout_data if holdout_data is not None else cal
    measured = float(np.mean(detector.detected_many(np.asarray(measure_on))))
    if abs(measured - target_fpr) > tolerance:
        raise CalibrationError(
            f"calibrated FPR {measured:.4f} misses target {target_fpr:.4f} "
            f"by more than {tolerance:.2%} (degenerate score distribution?)")
    detector.measured_fpr = measured
    return detector


# ---------------------------------------------------------------------------
# Normal / inverted tests
# ---------------------------------------------------------------------------


def run_detector_test(model, detector, attack, samples, cfg: TestConfig,
                      progress=None) -> TestReport:
    """Normal test: plant undetected points, require undetected successes."""
    return run_binarization_test(model, attack, samples, cfg,
                                 detector=detector, progress=progress)


def run_inverted_detector_test(model, detector, attack, samples,
                               cfg: TestConfig, progress=None) -> TestReport:
    """Inverted test: the same pipeline against the negated detector, so
    planting and success both require *detected* points."""
    return run_binarization_test(model, attack, samples, cfg,
                                 detector=detector.negated(), progress=progress)


@dataclass
class DetectorTestReport:
    normal: TestReport
    inverted: TestReport
    detector_name: str
    combined_verdict: str  # "pass" iff both sub-tests pass

    @property
    def passed(self) -> bool:
        return self.combined_verdict == "pass"


def run_detector_tests(model, detector, attack, samples,
                       cfg: TestConfig, progress=None) -> DetectorTestReport:
    """Run the normal and inverted tests; passing both is required."""
    normal = run_detector_test(model, detector, attack, samples, cfg,
                               progress=progress)
    inverted = run_inverted_detector_test(model, detector, attack, samples,
                                          cfg, progress=progress)
    combined = "pass" if (normal.verdict == "pass"
                          and inverted.verdict == "pass") else "fail"
    return DetectorTestReport(normal=normal, inverted=inverted,
                              detector_name=getattr(detector, "name", "detector"),
                              combined_verdict=combined)
