"""The attacks the harness evaluates.

All attacks are pure given (model, inputs, seed). Gradient attacks iterate

    x <- clip_ball(clip_domain(x + step_size * sign(dloss/dx)))

on a margin loss toward the non-clean class; the feature-matching variant
adds a pull toward a reference sample's features. Detector participation
is a hard condition at success-check time (except for the lambda term of
the feature matcher), never a retrained component.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .nn import ZeroGradientSignal
from .readout import BinarizedModel
from .sampling import ThreatModel, _corner_point


@dataclass(frozen=True)
class AttackBudget:
    steps: int = 75
    step_size: float | None = None  # None -> epsilon / 4
    random_init: bool = True
    restarts: int = 1
    query_count: int = 0  # random attack only

    def __post_init__(self):
        if self.steps < 0 or self.query_count < 0:
            raise ValueError("steps and query_count must be non-negative")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")


@dataclass
class AttackOutcome:
    success: bool
    x_adv: np.ndarray | None
    queries_used: int
    final_logit: float
    cause: str | None = None  # e.g. "zero-gradient" on masked models


DETECTOR_GOALS = ("undetected", "detected", "ignore")


def _reference_class(model, x_c) -> int:
    """The class an adversarial example must move away from.

    Binarized constructions assign the clean sample class 0 by design;
    for a generic split model we use its own prediction on x_c.
    """
    if isinstance(model, BinarizedModel):
        return 0
    return int(model.predict(np.asarray(x_c, dtype=np.float64)))


def _margin_value(model, x, ref_cls: int) -> float:
    """Margin toward the non-clean class; positive means the class flipped."""
    if isinstance(model, BinarizedModel):
        _, logit = model.classify(x)
        return logit if ref_cls == 0 else -logit
    z = model.logits(x)
    others = np.delete(z, ref_cls)
    return float(others.max() - z[ref_cls])


def _margin_grad(model, x, ref_cls: int, straight_through: bool,
                 lam: float, f_ref) -> tuple[float, np.ndarray]:
    """Value and input gradient of margin - lam * ||f(x) - f(x_ref)||^2."""
    if isinstance(model, BinarizedModel):
        f = model.features(x)
        logit = float(f @ model.readout.w + model.readout.b)
        sgn = 1.0 if ref_cls == 0 else -1.0
        value = sgn * logit
        dfeat = sgn * model.readout.w
        if lam > 0.0:
            diff = f - f_ref
            value -= lam * float(diff @ diff)
            dfeat = dfeat - 2.0 * lam * diff
        _, caches = model.feature_extractor.forward_cached(np.asarray(x, dtype=np.float64))
        grad = model.feature_extractor.backward_input(
            dfeat, caches, straight_through=straight_through)
        return value, grad
    # Split model: margin against the current best non-reference class.
    f = model.features(x)
    z = f @ model.readout.weights.T + model.readout.bias
    masked = z.copy()
    masked[ref_cls] = -np.inf
    j = int(np.argmax(masked))
    value = float(z[j] - z[ref_cls])
    dlogits = np.zeros_like(z)
    dlogits[j] = 1.0
    dlogits[ref_cls] = -1.0
    extra = None
    if lam > 0.0:
        diff = f - f_ref
        value -= lam * float(diff @ diff)
        extra = -2.0 * lam * diff
    grad = model.input_gradient(x, dlogits, extra_feature_grad=extra,
                                straight_through=straight_through)
    return value, grad


def _detector_ok(detector, detector_goal: str, x) -> bool:
    if detector is None or detector_goal == "ignore":
        return True
    detected = bool(detector.detected(x))
    return detected if detector_goal == "detected" else not detected


def _is_success(model, x, x_c, tm: ThreatModel, ref_cls: int,
                detector, detector_goal: str) -> bool:
    if not (tm.contains(x_c, x) and tm.in_domain(x)):
        return False
    if isinstance(model, BinarizedModel):
        cls, _ = model.classify(x)
    else:
        cls = int(model.predict(x))
    if cls == ref_cls:
        return False
    return _detector_ok(detector, detector_goal, x)


def _run_gradient_attack(model, x_c, tm: ThreatModel, budget: AttackBudget,
                         detector, detector_goal: str, rng_seed,
                         straight_through: bool = False,
                         x_ref=None, lam: float = 0.0) -> AttackOutcome:
    if detector_goal not in DETECTOR_GOALS:
        raise ValueError(f"unknown detector_goal {detector_goal!r}")
    x_c = np.asarray(x_c, dtype=np.float64)
    rng = np.random.default_rng(rng_seed)
    eps = tm.epsilon
    step = budget.step_size if budget.step_size is not None else eps / 4.0
    ref_cls = _reference_class(model, x_c)
    f_ref = model.features(np.asarray(x_ref, dtype=np.float64)) if lam > 0.0 else None

    queries = 0
    cause = None
    last_value = _margin_value(model, x_c, ref_cls)
    for _ in range(budget.restarts):
        if budget.random_init and eps > 0.0:
            x = tm.clip_domain(x_c + rng.uniform(-eps, eps, size=x_c.shape[0]))
        else:
            x = x_c.copy()
        value = _margin_value(model, x, ref_cls)
        if _is_success(model, x, x_c, tm, ref_cls, detector, detector_goal):
            return AttackOutcome(True, x, queries, value, cause)
        for _ in range(budget.steps):
            try:
                value, grad = _margin_grad(model, x, ref_cls, straight_through,
                                           lam, f_ref)
            except ZeroGradientSignal:
                cause = "zero-gradient"
                value = _margin_value(model, x, ref_cls)
                grad = np.zeros_like(x)
            queries += 1
            x = tm.clip_ball(tm.clip_domain(x + step * np.sign(grad)), x_c)
            value = _margin_value(model, x, ref_cls)
            if _is_success(model, x, x_c, tm, ref_cls, detector, detector_goal):
                return AttackOutcome(True, x, queries, value, cause)
        last_value = value
    return AttackOutcome(False, None, queries, last_value, cause)


def pgd_attack(model, x_c, tm: ThreatModel, budget: AttackBudget,
               detector=None, detector_goal: str = "ignore",
               rng_seed=0) -> AttackOutcome:
    """Projected gradient descent under the l-inf threat model.

    Success requires the returned point to lie in the ball and the domain,
    to be classified differently from the clean sample's class, and to
    satisfy the detector goal when one participates. queries_used counts
    gradient computations (at most steps * restarts).
    """
    return _run_gradient_attack(model, x_c, tm, budget, detector,
                                detector_goal, rng_seed)


def bpda_pgd_attack(model, x_c, tm: ThreatModel, budget: AttackBudget,
                    detector=None, detector_goal: str = "ignore",
                    rng_seed=0) -> AttackOutcome:
    """PGD with the quantizer's backward pass replaced by identity.

    On models without a quantization front-end the trajectory is bitwise
    identical to pgd_attack.
    """
    return _run_gradient_attack(model, x_c, tm, budget, detector,
                                detector_goal, rng_seed, straight_through=True)


def feature_match_attack(model, x_c, x_ref, tm: ThreatModel, budget: AttackBudget,
                         lam: float, detector=None,
                         detector_goal: str = "ignore", rng_seed=0) -> AttackOutcome:
    """PGD on margin - lam * ||f(x) - f(x_ref)||^2.

    x_ref is a non-adversarial sample of the other class (a reference
    point); matching its features keeps the iterate in regions the
    detector accepts. lam = 0 reduces bitwise to pgd_attack.
    """
    if lam < 0:
        raise ValueError("lam must be non-negative")
    if lam > 0 and x_ref is None:
        raise ValueError("feature matching requires a reference sample")
    return _run_gradient_attack(model, x_c, tm, budget, detector,
                                detector_goal, rng_seed,
                                x_ref=x_ref, lam=lam)


def random_attack(model, x_c, tm: ThreatModel, n_inner: int, n_corner: int,
                  detector=None, detector_goal: str = "ignore",
                  rng_seed=0) -> AttackOutcome:
    """Model-agnostic attack: uniform ball points plus box corners.

    Evaluates candidates in draw order and stops at the first success;
    queries_used is the number of points actually evaluated.
    """
    if n_inner < 0 or n_corner < 0:
        raise ValueError("counts must be non-negative")
    if detector_goal not in DETECTOR_GOALS:
        raise ValueError(f"unknown detector_goal {detector_goal!r}")
    x_c = np.asarray(x_c, dtype=np.float64)
    rng = np.random.default_rng(rng_seed)
    eps = tm.epsilon
    d = x_c.shape[0]
    ref_cls = _reference_class(model, x_c)

    candidates = np.empty((n_inner + n_corner, d))
    if eps > 0.0:
        candidates[:n_inner] = tm.clip_domain(
            x_c + rng.uniform(-eps, eps, size=(n_inner, d)))
        for i in range(n_corner):
            candidates[n_inner + i] = _corner_point(x_c, tm, eps, rng)
    else:
        candidates[:] = x_c

    last_value = _margin_value(model, x_c, ref_cls)
    for i, x in enumerate(candidates):
        last_value = _margin_value(model, x, ref_cls)
        if _is_success(model, x, x_c, tm, ref_cls, detector, detector_goal):
            return AttackOutcome(True, x.copy(), i + 1, last_value)
    return AttackOutcome(False, None, len(candidates), last_value)


# ---------------------------------------------------------------------------
# Serializable attack specs for the harness, sweeps, and the CLI
# ---------------------------------------------------------------------------

ATTACK_KINDS = ("pgd", "bpda_pgd", "random", "feature_match")


@dataclass(frozen=True)
class AttackSpec:
    """Declarative attack description; the harness materializes it per sample."""

    kind: str = "pgd"
    steps: int = 75
    step_size: float | None = None
    random_init: bool = True
    restarts: int = 1
    lam: float = 1.0                 # feature_match only
    n_inner: int = 200               # random only
    n_corner: int = 200              # random only
    detector_goal: str = "ignore"
    unfreeze_stats: bool = False     # attack a stat-updating copy of the model

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.detector_goal not in DETECTOR_GOALS:
            raise ValueError(f"unknown detector_goal {self.detector_goal!r}")

    @property
    def name(self) -> str:
        if self.kind == "random":
            return f"random-{self.n_inner}+{self.n_corner}"
        label = f"{self.kind}-{self.steps}"
        if self.unfreeze_stats:
            label += "-unfrozen"
        if self.detector_goal != "ignore":
            label += f"-{self.detector_goal}"
        return label

    @property
    def nominal_queries(self) -> int:
        if self.kind == "random":
            return self.n_inner + self.n_corner
        return self.steps * self.restarts

    def budget(self) -> AttackBudget:
        return AttackBudget(steps=self.steps, step_size=self.step_size,
                            random_init=self.random_init, restarts=self.restarts)

    def with_goal(self, goal: str) -> "AttackSpec":
        return replace(self, detector_goal=goal)


def run_attack(spec: AttackSpec, model, x_c, tm: ThreatModel, detector=None,
               x_ref=None, rng_seed=0) -> AttackOutcome:
    """Dispatch an AttackSpec against one sample."""
    if spec.kind == "pgd":
        return pgd_attack(model, x_c, tm, spec.budget(), detector,
                          spec.detector_goal, rng_seed)
    if spec.kind == "bpda_pgd":
        return bpda_pgd_attack(model, x_c, tm, spec.budget(), detector,
                               spec.detector_goal, rng_seed)
    if spec.kind == "feature_match":
        if x_ref is None:
            raise ValueError("feature_match attack needs a reference sample "
                             "(configure n_reference >= 1)")
        return feature_match_attack(model, x_c, x_ref, tm, spec.budget(),
                                    spec.lam, detector, spec.detector_goal,
                                    rng_seed)
    return random_attack(model, x_c, tm, spec.n_inner, spec.n_corner,
                         detector, spec.detector_goal, rng_seed)
