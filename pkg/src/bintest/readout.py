"""Binary readout training, hardness calibration, and construction checks.

The readout is a linear discriminator over extracted features that must
perfectly separate the inner set (class 0) from the boundary/reference
sets (class 1). Its bias is then recalibrated so that the hyperplane sits
at signed distance (1 - kappa) * D from the designated boundary-sample
feature, where D is the along-w gap between that feature and the closest
inner feature: kappa -> 1 places the hyperplane at the boundary sample
(hardest), kappa -> 0 at the closest inner sample (easiest).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Network, as_vector
from .sampling import SampleBundle, ThreatModel

MARGIN_FLOOR = 1e-9


class SkipSample(Exception):
    """The construction is infeasible for this sample; skip it."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class CertificateFailure(RuntimeError):
    """A construction invariant does not hold: an implementation bug, never
    a legitimate test outcome."""

    def __init__(self, clause: str, detail: str = ""):
        super().__init__(f"{clause}: {detail}" if detail else clause)
        self.clause = clause


@dataclass(frozen=True)
class ReadoutCalibration:
    kappa: float
    gap: float  # D: along-w gap, designated boundary feature vs closest inner


@dataclass
class BinaryReadout:
    """Linear discriminator: class 1 iff w . f + b > 0."""

    w: np.ndarray
    b: float
    logit_scale: float
    calibration: ReadoutCalibration

    def logit(self, f) -> np.ndarray | float:
        f = np.asarray(f, dtype=np.float64)
        out = f @ self.w + self.b
        return float(out) if f.ndim == 1 else out

    def classify(self, f):
        """Return (class, logit) under the threshold rule."""
        f = as_vector(f)
        if f.shape[0] != self.w.shape[0]:
            raise ValueError(
                f"feature dimension {f.shape[0]} != readout dimension {self.w.shape[0]}")
        logit = float(f @ self.w + self.b)
        return (1 if logit > 0.0 else 0), logit


@dataclass
class BinarizedModel:
    """The modified classifier: original feature extractor + binary readout."""

    feature_extractor: Network
    readout: BinaryReadout

    def features(self, x) -> np.ndarray:
        return self.feature_extractor.forward(np.asarray(x, dtype=np.float64))

    def logit(self, x):
        return self.readout.logit(self.features(x))

    def classify(self, x):
        f = self.features(np.asarray(x, dtype=np.float64))
        logit = float(f @ self.readout.w + self.readout.b)
        return (1 if logit > 0.0 else 0), logit

    def classify_many(self, X) -> np.ndarray:
        logits = self.features(X) @ self.readout.w + self.readout.b
        return (logits > 0.0).astype(int), logits

    def input_gradient(self, x, dlogit: float = 1.0, extra_feature_grad=None,
                       straight_through: bool = False) -> np.ndarray:
        _, caches = self.feature_extractor.forward_cached(as_vector(x))
        dfeat = dlogit * self.readout.w
        if extra_feature_grad is not None:
            dfeat = dfeat + extra_feature_grad
        return self.feature_extractor.backward_input(
            dfeat, caches, straight_through=straight_through)

    def with_feature_extractor(self, fx: Network) -> "BinarizedModel":
        return BinarizedModel(fx, self.readout)


# ---------------------------------------------------------------------------
# Max-margin separator via subgradient iterations on the hinge objective
# ---------------------------------------------------------------------------


def _max_margin_direction(Z, y, max_updates: int, polish_epochs: int):
    """Return (w, b) separating y=+1 from y=-1 on standardized features Z,
    with the direction pushed toward the max-margin solution, or None when
    no separator was found.

    Phase 1 is a cyclic perceptron (single-sample subgradient steps on the
    perceptron criterion), which terminates on any linearly separable set;
    phase 2 alternates hinge feasibility steps with norm shrinking and
    keeps the best geometric margin seen, stopping once it stabilizes.
    """
    n, d = Z.shape
    w = np.zeros(d)
    b = 0.0

    updates = 0
    separated = False
    while updates <= max_updates:
        margins = y * (Z @ w + b)
        viol_idx = np.where(margins <= 0.0)[0]
        if viol_idx.size == 0:
            separated = True
            break
        for i in viol_idx:
            if y[i] * (Z[i] @ w + b) <= 0.0:
                w += y[i] * Z[i]
                b += y[i]
                updates += 1
    if not separated:
        return None

    # Normalize functional margins to ~1 before polishing.
    m_min = np.min(y * (Z @ w + b))
    if m_min > 0:
        w, b = w / m_min, b / m_min

    best = None
    best_gamma = -np.inf
    stale = 0
    for _ in range(polish_epochs):
        margins = y * (Z @ w + b)
        norm = np.linalg.norm(w)
        if norm > 0 and margins.min() > 0:
            gamma = margins.min() / norm
            if gamma > best_gamma + 1e-12:
                best_gamma = gamma
                best = (w.copy(), b)
                stale = 0
            else:
                stale += 1
                if stale >= 60:
                    break
        viol = margins < 1.0
        if viol.any():
            w = w + 0.5 * np.mean(y[viol, None] * Z[viol], axis=0)
            b = b + 0.5 * np.mean(y[viol])
        else:
            w = w * 0.95
            b = b * 0.95
    if best is None:
        # Polishing never certified a positive margin; fall back to the
        # phase-1 separator if it separates, otherwise report failure.
        margins = y * (Z @ w + b)
        if margins.min() > 0:
            return w, b
        return None
    return best


def train_readout(features_inner, features_boundary, features_reference=None,
                  kappa: float = 0.999, logit_range_target: float = 1.0,
                  margin_floor: float = MARGIN_FLOOR,
                  max_updates: int = 30_000, polish_epochs: int = 400) -> BinaryReadout:
    """Train the binary discriminator on extracted features.

    Inner features are class 0, boundary and reference features class 1.
    The returned readout has perfect training accuracy, a bias placed by
    the kappa rule, and (w, b) jointly rescaled so the maximum absolute
    training logit equals logit_range_target.

    Raises:
        SkipSample when the sets are not separable with geometric margin
        of at least margin_floor, or when the kappa placement cannot keep
        every training feature on its side.
    """
    F_i = np.asarray(features_inner, dtype=np.float64)
    F_b = np.asarray(features_boundary, dtype=np.float64)
    F_r = (np.asarray(features_reference, dtype=np.float64)
           if features_reference is not None and len(features_reference)
           else np.empty((0, F_i.shape[1] if F_i.ndim == 2 else 0)))
    if F_i.ndim != 2 or F_b.ndim != 2:
        raise ValueError("features must be 2-D arrays (n, d)")
    if len(F_i) == 0 or len(F_b) == 0:
        raise ValueError("inner and boundary feature sets must be non-empty")
    if not (np.all(np.isfinite(F_i)) and np.all(np.isfinite(F_b))
            and np.all(np.isfinite(F_r))):
        raise ValueError("features contain non-finite values")
    if not 0.0 < kappa < 1.0:
        raise ValueError("kappa must lie in (0, 1)")
    if logit_range_target <= 0:
        raise ValueError("logit_range_target must be positive")

    X = np.vstack([F_i, F_b, F_r])
    y = np.concatenate([-np.ones(len(F_i)), np.ones(len(F_b) + len(F_r))])

    # Standardize for conditioning; the direction is mapped back afterwards.
    mu = X.mean(axis=0)
    scale = np.maximum(np.max(np.abs(X - mu), axis=0), 1e-12)
    Z = (X - mu) / scale

    sep = _max_margin_direction(Z, y, max_updates, polish_epochs)
    if sep is None:
        raise SkipSample("inseparable")
    w_std, _ = sep

    # Back to the original feature space; only the direction matters from
    # here on, the bias is overwritten by the kappa calibration.
    w = w_std / scale
    norm = np.linalg.norm(w)
    if norm == 0.0:
        raise SkipSample("inseparable")
    w_hat = w / norm

    proj = X @ w_hat
    inner_max = float(proj[:len(F_i)].max())
    positive_min = float(proj[len(F_i):].min())
    if (positive_min - inner_max) / 2.0 < margin_floor:
        raise SkipSample("margin-below-floor")

    # Designated class-1 sample: smallest along-w projection (closest to
    # the inner set), the hardest placement that keeps every training
    # feature on its side. With no reference samples this is the
    # closest-to-inner boundary sample.
    gap = positive_min - inner_max
    b_hat = (1.0 - kappa) * gap - positive_min

    logits = proj + b_hat
    if np.any(logits[:len(F_i)] >= 0.0) or np.any(logits[len(F_i):] <= 0.0):
        raise SkipSample("kappa-infeasible")

    scale_logit = logit_range_target / float(np.max(np.abs(logits)))
    return BinaryReadout(
        w=w_hat * scale_logit,
        b=b_hat * scale_logit,
        logit_scale=scale_logit,
        calibration=ReadoutCalibration(kappa=kappa, gap=gap),
    )


# ---------------------------------------------------------------------------
# Construction certificate
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConstructionCertificate:
    clean_class: int
    n_boundary: int
    n_reference: int
    min_boundary_logit: float
    detector_checked: bool


def verify_construction(model: BinarizedModel, bundle: SampleBundle,
                        tm: ThreatModel, detector=None,
                        expect_detected: bool = False) -> ConstructionCertificate:
    """Assert the by-construction guarantees for one sample.

    Checks: the clean sample maps to class 0; every boundary point maps to
    class 1, lies within the threat-model ball and the domain; every
    reference point maps to class 1. With a detector, planted points must
    match the expected detector decision.

    Raises CertificateFailure naming the violated clause.
    """
    cls, logit = model.classify(bundle.x_clean)
    if cls != 0:
        raise CertificateFailure("clean-misclassified", f"logit={logit:.6g}")

    min_boundary_logit = np.inf
    for i, p in enumerate(bundle.boundary):
        cls, logit = model.classify(p)
        if cls != 1:
            raise CertificateFailure("boundary-misclassified",
                                     f"point {i}, logit={logit:.6g}")
        min_boundary_logit = min(min_boundary_logit, logit)
        if not tm.contains(bundle.x_clean, p):
            raise CertificateFailure(
                "ball-violation",
                f"point {i}, distance={tm.distance(bundle.x_clean, p):.6g}")
        if not tm.in_domain(p):
            raise CertificateFailure("domain-violation", f"point {i}")

    for i, p in enumerate(bundle.reference):
        cls, logit = model.classify(p)
        if cls != 1:
            raise CertificateFailure("reference-misclassified",
                                     f"point {i}, logit={logit:.6g}")
        if not tm.in_domain(p):
            raise CertificateFailure("domain-violation", f"reference point {i}")

    if detector is not None:
        for i, p in enumerate(bundle.boundary):
            if bool(detector.detected(p)) != expect_detected:
                raise CertificateFailure("detector-violation", f"boundary point {i}")
        for i, p in enumerate(bundle.reference):
            if bool(detector.detected(p)) != expect_detected:
                raise CertificateFailure("detector-violation", f"reference point {i}")

    return ConstructionCertificate(
        clean_class=0,
        n_boundary=int(len(bundle.boundary)),
        n_reference=int(len(bundle.reference)),
        min_boundary_logit=float(min_boundary_logit),
        detector_checked=detector is not None,
    )
