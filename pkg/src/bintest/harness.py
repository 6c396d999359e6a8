"""Binarization-test orchestration: per-sample pipeline and aggregation.

For each clean sample the harness draws a bundle, extracts features with
the frozen model, trains the binary readout, certifies the construction,
then runs the attack under evaluation plus the random baseline. The test
score (ASR) is the fraction of non-skipped constructions on which the
attack produced a verified adversarial example; R-ASR is the same
fraction for the random attack.

Scoring always re-validates attack candidates against the frozen
construction, so an attack that queried a drifting (unfrozen) model copy
is judged by the model as deployed.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import AttackSpec, random_attack, run_attack
from .nn import SplitModel
from .readout import BinarizedModel, SkipSample, train_readout, verify_construction
from .sampling import (AttemptsExhausted, BundleParams, ThreatModel,
                       build_bundle, validate_bundle)


class ConfigError(ValueError):
    """A run configuration failed validation."""


@dataclass(frozen=True)
class TestConfig:
    """Parameters of one binarization-test campaign.

    Defaults follow the reference experimental profile (eps = 8/255,
    999 inner points, one boundary corner, kappa = 0.999, 200 + 200
    random-attack queries, pass threshold 0.95, 512 samples); use
    desk_profile() for the scaled-down 64-sample variant.
    """

    __test__ = False  # not a pytest class, despite the name

    tm: ThreatModel = field(default_factory=lambda: ThreatModel(epsilon=8.0 / 255.0))
    n_inner: int = 999
    n_boundary: int = 1
    n_reference: int = 0
    xi: float = 0.95
    kappa: float = 0.999
    eta: float = 1.75
    n_samples: int = 512
    rasr_inner: int = 200
    rasr_corner: int = 200
    rasr_mode: str = "fixed"  # "fixed" (200+200) or "matched" (attack budget)
    threshold: float = 0.95
    seed: int = 0
    workers: int = 1
    max_rejection_attempts: int = 200
    boundary_mode: str = "corner"
    weak_flag_margin: float = 0.2
    margin_floor: float = 1e-9
    logit_range: float | None = None  # None: match the original classifier
    kappa_ladder: tuple = (0.999, 0.99, 0.9, 0.5)
    ni_ladder: tuple = (999, 299, 99)

    def __post_init__(self):
        if not 0.0 < self.xi < 1.0:
            raise ConfigError("xi must lie in (0, 1)")
        if not 0.0 < self.kappa < 1.0:
            raise ConfigError("kappa must lie in (0, 1)")
        if not self.eta > 1.0:
            raise ConfigError("eta must exceed 1")
        if not 0.0 < self.threshold <= 1.0:
            raise ConfigError("threshold must lie in (0, 1]")
        if min(self.n_inner, self.n_boundary, self.n_reference,
               self.rasr_inner, self.rasr_corner, self.n_samples) < 0:
            raise ConfigError("counts must be non-negative")
        if self.n_boundary < 1:
            raise ConfigError("n_boundary must be >= 1")
        if self.rasr_mode not in ("fixed", "matched"):
            raise ConfigError("rasr_mode must be 'fixed' or 'matched'")
        if self.boundary_mode not in ("corner", "sphere"):
            raise ConfigError("boundary_mode must be 'corner' or 'sphere'")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.max_rejection_attempts < 1:
            raise ConfigError("max_rejection_attempts must be >= 1")
        if self.margin_floor <= 0:
            raise ConfigError("margin_floor must be positive")
        if self.logit_range is not None and self.logit_range <= 0:
            raise ConfigError("logit_range must be positive when set")

    @classmethod
    def desk_profile(cls, **overrides) -> "TestConfig":
        overrides.setdefault("n_samples", 64)
        return cls(**overrides)

    def replace(self, **changes) -> "TestConfig":
        return replace(self, **changes)

    def bundle_params(self) -> BundleParams:
        return BundleParams(xi=self.xi, eta=self.eta, n_inner=self.n_inner,
                            n_boundary=self.n_boundary, n_reference=self.n_reference)

    def echo(self) -> dict:
        return {
            "epsilon": self.tm.epsilon,
            "domain_lo": self.tm.lo,
            "domain_hi": self.tm.hi,
            "n_inner": self.n_inner,
            "n_boundary": self.n_boundary,
            "n_reference": self.n_reference,
            "xi": self.xi,
            "kappa": self.kappa,
            "eta": self.eta,
            "n_samples": self.n_samples,
            "rasr_inner": self.rasr_inner,
            "rasr_corner": self.rasr_corner,
            "rasr_mode": self.rasr_mode,
            "threshold": self.threshold,
            "seed": self.seed,
            "boundary_mode": self.boundary_mode,
            "max_rejection_attempts": self.max_rejection_attempts,
            "weak_flag_margin": self.weak_flag_margin,
            "margin_floor": self.margin_floor,
            "logit_range": self.logit_range,
        }


@dataclass
class SampleRecord:
    index: int
    skipped: bool
    skip_reason: str | None = None
    certificate_ok: bool | None = None
    readout_gap: float | None = None
    attack_success: bool | None = None      # verified against the frozen model
    attack_claimed: bool | None = None      # the attack's own judgment
    attack_queries: int | None = None
    attack_final_logit: float | None = None
    attack_cause: str | None = None
    random_success: bool | None = None
    random_queries: int | None = None


@dataclass
class TestReport:
    __test__ = False  # not a pytest class, despite the name

    per_sample: list
    asr: float | None
    rasr: float | None
    skip_fraction: float
    n_samples: int
    n_skipped: int
    verdict: str | None           # "pass" / "fail"; None when no attack ran
    weak_attack_flag: bool | None
    attack_name: str | None
    config: dict

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"


def _verify_candidate(bmodel: BinarizedModel, x, x_c, tm: ThreatModel,
                      detector) -> bool:
    """Judge an attack candidate against the frozen construction."""
    if x is None:
        return False
    if not (tm.contains(x_c, x) and tm.in_domain(x)):
        return False
    cls, _ = bmodel.classify(x)
    if cls != 1:
        return False
    if detector is not None and detector.detected(x):
        return False
    return True


def _skip(index: int, reason: str) -> SampleRecord:
    return SampleRecord(index=index, skipped=True, skip_reason=reason)


def evaluate_sample(model: SplitModel, attack: AttackSpec | None, x_c,
                    cfg: TestConfig, index: int, detector=None) -> SampleRecord:
    """Run the full per-sample pipeline for one clean sample.

    Raises CertificateFailure when the construction invariants do not hold
    (an implementation bug); returns a skipped record for legitimate
    skips (inseparable features, exhausted rejection sampling, clipping).
    """
    x_c = np.asarray(x_c, dtype=np.float64)
    ss = np.random.SeedSequence(entropy=cfg.seed, spawn_key=(index,))
    bundle_seed, attack_seed, rasr_seed = ss.spawn(3)

    plant_predicate = None
    if detector is not None:
        plant_predicate = lambda p: not detector.detected(p)
    try:
        bundle = build_bundle(x_c, cfg.tm, cfg.bundle_params(), bundle_seed,
                              plant_predicate=plant_predicate,
                              max_attempts=cfg.max_rejection_attempts,
                              boundary_mode=cfg.boundary_mode)
    except AttemptsExhausted:
        return _skip(index, "detector-rejection")

    reason = validate_bundle(bundle, cfg.tm)
    if reason is not None:
        return _skip(index, reason)

    feats_inner = model.features(bundle.inner)
    feats_boundary = model.features(bundle.boundary)
    feats_reference = (model.features(bundle.reference)
                       if len(bundle.reference) else None)
    if cfg.logit_range is not None:
        logit_target = cfg.logit_range
    else:
        # Match the range of the original classifier's logits on the inner set.
        logit_target = max(float(np.max(np.abs(model.logits(bundle.inner)))), 1e-6)

    try:
        ro = train_readout(feats_inner, feats_boundary, feats_reference,
                           kappa=cfg.kappa, logit_range_target=logit_target,
                           margin_floor=cfg.margin_floor)
    except SkipSample as exc:
        return _skip(index, exc.reason)

    bmodel = BinarizedModel(model.feature_extractor, ro)
    verify_construction(bmodel, bundle, cfg.tm, detector=detector,
                        expect_detected=False)

    record = SampleRecord(index=index, skipped=False, certificate_ok=True,
                          readout_gap=float(ro.calibration.gap))

    if attack is not None:
        x_ref = bundle.reference[0] if len(bundle.reference) else None
        attack_model = bmodel
        if attack.unfreeze_stats:
            # Reproduce the evaluation flaw: the attack queries a copy whose
            # normalization statistics update on every forward pass. Scoring
            # below still uses the frozen construction.
            attack_model = bmodel.with_feature_extractor(
                bmodel.feature_extractor.copy().set_frozen(False))
        outcome = run_attack(attack, attack_model, x_c, cfg.tm,
                             detector=detector, x_ref=x_ref,
                             rng_seed=attack_seed)
        record.attack_claimed = bool(outcome.success)
        record.attack_success = _verify_candidate(bmodel, outcome.x_adv, x_c,
                                                  cfg.tm, detector)
        record.attack_queries = int(outcome.queries_used)
        record.attack_final_logit = float(outcome.final_logit)
        record.attack_cause = outcome.cause

    n_inner, n_corner = cfg.rasr_inner, cfg.rasr_corner
    if cfg.rasr_mode == "matched" and attack is not None:
        n_inner, n_corner = attack.nominal_queries, 0
    rnd = random_attack(bmodel, x_c, cfg.tm, n_inner, n_corner,
                        detector=detector,
                        detector_goal="undetected" if detector is not None else "ignore",
                        rng_seed=rasr_seed)
    record.random_success = bool(rnd.success)
    record.random_queries = int(rnd.queries_used)
    return record


def run_binarization_test(model: SplitModel, attack: AttackSpec | None, samples,
                          cfg: TestConfig, detector=None,
                          progress=None) -> TestReport:
    """Run the binarization test over a set of clean samples.

    Args:
        model: the (frozen) classifier under test, split into feature
            extractor and readout.
        attack: the attack under evaluation, or None to only build and
            certify constructions (R-ASR is still computed).
        samples: (n, d) array of clean samples inside the domain.
        cfg: test configuration; cfg.n_samples caps how many samples run.
        detector: optional; when present, boundary/reference points are
            planted undetected and success additionally requires the
            candidate to be undetected. (Inverted tests pass a negated
            detector.)
        progress: optional callable(record) invoked per completed sample.

    Returns:
        TestReport with per-sample records and aggregate scores. ASR and
        R-ASR are computed over non-skipped samples only.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise ValueError("samples must be a (n, d) array")
    n = min(cfg.n_samples, samples.shape[0])
    indices = range(n)

    def job(i):
        return evaluate_sample(model, attack, samples[i], cfg, i, detector)

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            records = list(pool.map(job, indices))
    else:
        records = [job(i) for i in indices]
    if progress is not None:
        for r in records:
            progress(r)

    live = [r for r in records if not r.skipped]
    n_skipped = n - len(live)
    asr = rasr = None
    if live:
        rasr = float(np.mean([r.random_success for r in live]))
        if attack is not None:
            asr = float(np.mean([r.attack_success for r in live]))
    verdict = None
    weak_flag = None
    if attack is not None:
        verdict = "pass" if (asr is not None and asr >= cfg.threshold) else "fail"
        if asr is not None and rasr is not None:
            # "Substantially higher than R-ASR" operationalized as a margin.
            weak_flag = bool(asr < rasr + cfg.weak_flag_margin)
    return TestReport(
        per_sample=records,
        asr=asr,
        rasr=rasr,
        skip_fraction=float(n_skipped / n) if n else 0.0,
        n_samples=n,
        n_skipped=n_skipped,
        verdict=verdict,
        weak_attack_flag=weak_flag,
        attack_name=attack.name if attack is not None else None,
        config=cfg.echo(),
    )


# ---------------------------------------------------------------------------
# Hardness sweeps and tuning
# ---------------------------------------------------------------------------


def hardness_sweep(model: SplitModel, attacks, samples, cfg: TestConfig,
                   kappa_values, detector=None) -> list[dict]:
    """Run the test per (attack, kappa); rows carry R-ASR as the hardness
    baseline. An empty attack list yields R-ASR-only rows."""
    rows = []
    for kappa in kappa_values:
        run_cfg = cfg.replace(kappa=float(kappa))
        specs = list(attacks) if attacks else [None]
        for spec in specs:
            report = run_binarization_test(model, spec, samples, run_cfg,
                                           detector=detector)
            rows.append({
                "kappa": float(kappa),
                "attack": spec.name if spec is not None else "",
                "asr": report.asr,
                "rasr": report.rasr,
                "skip_fraction": report.skip_fraction,
                "verdict": report.verdict or "",
            })
    return rows


@dataclass
class TuneResult:
    verdict: str                 # "pass" or "fail-everywhere"
    kappa: float | None
    n_inner: int | None
    asr_rasr_gap: float | None
    report: TestReport | None
    rungs: list                  # (kappa, n_inner, asr, rasr) per rung tried


def tune_hardness(model: SplitModel, attack: AttackSpec, samples,
                  cfg: TestConfig, detector=None) -> TuneResult:
    """Walk the hardness ladder from hardest to easiest.

    Starts at the hardest configuration (highest kappa, default n_inner),
    then descends kappa, then descends n_inner at the easiest kappa, and
    returns the first rung where the attack's score reaches the pass
    threshold. If no rung qualifies the attack failed the test everywhere.
    """
    kappas = sorted(cfg.kappa_ladder, reverse=True)
    nis = sorted(cfg.ni_ladder, reverse=True)
    rungs = [(k, nis[0]) for k in kappas]
    rungs += [(kappas[-1], ni) for ni in nis[1:]]

    tried = []
    last_report = None
    for kappa, n_inner in rungs:
        run_cfg = cfg.replace(kappa=float(kappa), n_inner=int(n_inner))
        report = run_binarization_test(model, attack, samples, run_cfg,
                                       detector=detector)
        last_report = report
        tried.append((float(kappa), int(n_inner), report.asr, report.rasr))
        if report.asr is not None and report.asr >= cfg.threshold:
            gap = (report.asr - report.rasr) if report.rasr is not None else None
            return TuneResult("pass", float(kappa), int(n_inner), gap,
                              report, tried)
    return TuneResult("fail-everywhere", None, None, None, last_report, tried)
