"""bintest: unit tests for adversarial attacks.

Plants guaranteed adversarial examples into a classifier by retraining a
binary readout over its frozen features, then checks whether an attack
finds them. An attack that cannot find a planted adversarial example
cannot be trusted to estimate robustness.
"""

from .attacks import (AttackBudget, AttackOutcome, AttackSpec,
                      bpda_pgd_attack, feature_match_attack, pgd_attack,
                      random_attack, run_attack)
from .detectors import (CalibrationError, ConstantDetector, Detector,
                        DetectorTestReport, calibrate_detector_fpr,
                        run_detector_test, run_detector_tests,
                        run_inverted_detector_test)
from .harness import (ConfigError, TestConfig, TestReport, hardness_sweep,
                      run_binarization_test, tune_hardness)
from .nn import (Dense, DimensionMismatch, LinearLoss, Network, Normalize,
                 Quantize, ReLU, SplitModel, TrainingDivergence,
                 ZeroGradientSignal, forward, input_gradient, load_model,
                 save_model, train_classifier)
from .readout import (BinarizedModel, BinaryReadout, CertificateFailure,
                      ConstructionCertificate, SkipSample, train_readout,
                      verify_construction)
from .sampling import (AttemptsExhausted, BundleParams, SampleBundle,
                       ThreatModel, build_bundle, sample_boundary_corner,
                       sample_boundary_rejection, sample_inner,
                       validate_bundle)
from .zoo import (ZOO_BUILDERS, ZooEntry, build_clean_mlp,
                  build_detector_entry, build_entry, build_norm_detector,
                  build_quantized_model, build_unfrozen_norm_model,
                  make_blobs)

__version__ = "0.1.0"
