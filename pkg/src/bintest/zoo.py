"""Reference models and detectors with known failure modes.

Each entry bundles a trained model, a weak attack that should fail the
binarization test, and a strong attack that should pass it, so the
harness's ability to tell them apart can be regression-tested end to end
at desk scale. Data is synthetic Gaussian blobs in [0, 1]^d; nothing here
downloads or reproduces a published defense.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attacks import AttackSpec
from .detectors import Detector, calibrate_detector_fpr
from .nn import Network, Normalize, Quantize, SplitModel, train_classifier
from .sampling import ThreatModel


@dataclass
class ZooEntry:
    name: str
    model: SplitModel
    weak_attack: AttackSpec
    strong_attack: AttackSpec
    samples: np.ndarray                  # clean evaluation samples
    detector: Detector | None = None
    expected_weak: str = "fail"
    expected_strong: str = "pass"
    train_data: tuple | None = None


def make_blobs(n_per_class: int = 128, dim: int = 32, n_classes: int = 4,
               seed: int = 0, spread: float = 0.04,
               sample_seed: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian class blobs with centers well inside [0, 1]^d.

    Centers live in [0.3, 0.7] and the spread keeps draws clear of the
    domain walls, so threat-model clipping around these points never bites.
    `seed` fixes the class centers; `sample_seed` (default: seed) draws the
    points, so fresh splits of the same task reuse the centers.
    """
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.3, 0.7, size=(n_classes, dim))
    draw = rng if sample_seed is None else np.random.default_rng(sample_seed)
    X = np.concatenate([
        draw.normal(centers[c], spread, size=(n_per_class, dim))
        for c in range(n_classes)
    ])
    y = np.repeat(np.arange(n_classes), n_per_class)
    order = draw.permutation(X.shape[0])
    return np.clip(X[order], 0.0, 1.0), y[order]


def default_threat_model() -> ThreatModel:
    return ThreatModel(epsilon=8.0 / 255.0)


def _eval_samples(seed: int, dim: int = 32, n: int = 96) -> np.ndarray:
    """Held-out clean samples: same class centers, fresh draw."""
    X, _ = make_blobs(n_per_class=(n + 3) // 4, dim=dim, seed=seed,
                      sample_seed=seed + 1000)
    return X[:n]


def build_clean_mlp(seed: int = 0) -> ZooEntry:
    """Undefended baseline: 2-hidden-layer MLP on blobs.

    Weak attack is a single tiny PGD step; strong is 75-step PGD.
    """
    X, y = make_blobs(seed=seed)
    model = train_classifier(X, y, hidden_dims=(64, 32), seed=seed)
    eps = default_threat_model().epsilon
    return ZooEntry(
        name="clean_mlp",
        model=model,
        weak_attack=AttackSpec(kind="pgd", steps=1, step_size=eps / 100.0),
        strong_attack=AttackSpec(kind="pgd", steps=75),
        samples=_eval_samples(seed),
        train_data=(X, y),
    )


def build_quantized_model(seed: int = 0, levels: int = 64) -> ZooEntry:
    """Gradient-masked model: input quantizer in front of the clean MLP.

    The quantizer is piecewise constant, so vanilla PGD sees an exactly
    zero input gradient at every iterate; BPDA restores gradient flow.
    """
    if levels < 2:
        raise ValueError("levels must be >= 2")
    base = build_clean_mlp(seed)
    model = SplitModel(
        Network([Quantize(levels)] + base.model.feature_extractor.layers),
        base.model.readout,
        base.model.train_accuracy,
    )
    return ZooEntry(
        name="quantized",
        model=model,
        weak_attack=AttackSpec(kind="pgd", steps=75),
        strong_attack=AttackSpec(kind="bpda_pgd", steps=75),
        samples=base.samples,
        train_data=base.train_data,
    )


def build_unfrozen_norm_model(seed: int = 0) -> ZooEntry:
    """Model whose input-normalization statistics can drift during attacks.

    The normalization is center-only (unit variance init): scaling by the
    tight blob variances would blow up the epsilon-ball in normalized
    space and change the attack geometry, while the drift bug needs only
    statistics that update. The entry's model is frozen; the weak attack
    asks the harness for an unfrozen copy, reproducing the evaluation bug
    where attack-time model behaviour differs from inference time.
    """
    X, y = make_blobs(seed=seed)
    mu = X.mean(axis=0)
    # Training on centered data then prepending the centering layer yields
    # the same function the layer computes at inference.
    base = train_classifier(X - mu, y, hidden_dims=(64, 32), seed=seed)
    norm = Normalize(mean=mu, var=np.ones_like(mu), momentum=0.5, frozen=True)
    model = SplitModel(Network([norm] + base.feature_extractor.layers),
                       base.readout)
    model.train_accuracy = float(np.mean(model.predict(X) == y))
    return ZooEntry(
        name="unfrozen_norm",
        model=model,
        weak_attack=AttackSpec(kind="pgd", steps=20, unfreeze_stats=True),
        strong_attack=AttackSpec(kind="pgd", steps=75, restarts=5),
        samples=_eval_samples(seed),
        train_data=(X, y),
    )


def build_norm_detector(model: SplitModel, X, y, target_fpr: float = 0.05,
                        calibration_data=None, holdout_data=None) -> Detector:
    """Feature-space outlier detector: distance to the nearest per-class
    mean feature of clean data, thresholded at the target FPR.

    Class means come from (X, y); the threshold is set on calibration_data
    (clean samples from the same distribution; defaults to X) and checked
    on holdout_data when given.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    feats = model.features(X)
    means = np.stack([feats[y == c].mean(axis=0) for c in np.unique(y)])

    def score_fn(inputs):
        f = model.features(np.asarray(inputs, dtype=np.float64))
        single = f.ndim == 1
        if single:
            f = f[None, :]
        dists = np.linalg.norm(f[:, None, :] - means[None, :, :], axis=2)
        out = dists.min(axis=1)
        return out[0] if single else out

    cal = calibration_data if calibration_data is not None else X
    return calibrate_detector_fpr(score_fn, cal, target_fpr,
                                  holdout_data=holdout_data,
                                  name="feature-distance")


def build_detector_entry(seed: int = 0, target_fpr: float = 0.05) -> ZooEntry:
    """Clean MLP guarded by the feature-distance detector.

    The weak attack ignores the detector; the strong attack matches the
    features of an undetected reference sample while flipping the class.
    """
    base = build_clean_mlp(seed)
    X, y = base.train_data
    cal_X, _ = make_blobs(n_per_class=256, seed=seed, sample_seed=seed + 31)
    hold_X, _ = make_blobs(n_per_class=256, seed=seed, sample_seed=seed + 32)
    detector = build_norm_detector(base.model, X, y, target_fpr,
                                   calibration_data=cal_X, holdout_data=hold_X)
    return ZooEntry(
        name="norm_detector",
        model=base.model,
        detector=detector,
        weak_attack=AttackSpec(kind="pgd", steps=75, detector_goal="ignore"),
        strong_attack=AttackSpec(kind="feature_match", steps=75, lam=1.0,
                                 restarts=3, detector_goal="undetected"),
        samples=base.samples,
        train_data=base.train_data,
    )


ZOO_BUILDERS = {
    "clean_mlp": build_clean_mlp,
    "quantized": build_quantized_model,
    "unfrozen_norm": build_unfrozen_norm_model,
    "norm_detector": build_detector_entry,
}


def build_entry(name: str, seed: int = 0) -> ZooEntry:
    if name not in ZOO_BUILDERS:
        raise KeyError(f"unknown zoo entry {name!r}; "
                       f"available: {', '.join(sorted(ZOO_BUILDERS))}")
    return ZOO_BUILDERS[name](seed)
