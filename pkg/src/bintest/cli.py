"""Command-line front end: config loading, campaign execution, reports.

Configs are flat key = value documents (lists comma-separated, `#`
comments); every key can also be given as a --flag, with flags taking
precedence. The BINTEST_SEED environment variable overrides the seed from
either source. All outputs land inside --out-dir.

Exit codes: 0 verdict pass, 1 verdict fail, 2 configuration/IO error,
3 internal certificate failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .attacks import ATTACK_KINDS, DETECTOR_GOALS, AttackSpec
from .datasets import DatasetError, ingest_dataset
from .detectors import CalibrationError, run_detector_tests
from .harness import ConfigError, TestConfig, hardness_sweep, run_binarization_test, tune_hardness
from .nn import ModelFormatError, load_model, save_model
from .readout import CertificateFailure
from .reporting import (detector_report_to_dict, report_to_dict, write_report,
                        write_sample_csv, write_sweep_csv)
from .sampling import ThreatModel
from .zoo import ZOO_BUILDERS, build_entry, build_norm_detector

EXIT_PASS = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_CERTIFICATE = 3

MODES = ("bintest", "detector-test", "sweep", "tune", "zoo-demo")


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str):
    t = text.strip().lower()
    return None if t in ("none", "") else float(text)


def _float_list(text: str):
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _int_list(text: str):
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _choice(options):
    def cast(text: str) -> str:
        t = text.strip()
        if t not in options:
            raise ValueError(f"must be one of {', '.join(options)}; got {t!r}")
        return t
    return cast


# key -> (caster, default, help). Unknown config keys are rejected.
SCHEMA = {
    "mode": (_choice(MODES), None, "what to run"),
    "zoo_entry": (str, None, f"zoo model name ({', '.join(sorted(ZOO_BUILDERS))})"),
    "weights_file": (str, None, "model weight container to load instead of a zoo entry"),
    "data_file": (str, None, "labeled dataset supplying clean samples"),
    "data_format": (_choice(("csv", "idx")), "csv", "dataset file format"),
    "labels_file": (str, None, "IDX labels file (idx format only)"),
    "out_dir": (str, "bintest-out", "directory for all outputs"),
    "save_weights": (_bool, False, "cache the model weights into out_dir"),
    "seed": (int, 0, "campaign seed (BINTEST_SEED overrides)"),
    "workers": (int, 1, "per-sample worker threads"),
    "verbose": (_bool, False, "line-per-sample progress log on stderr"),
    "epsilon": (float, 8.0 / 255.0, "threat-model radius"),
    "domain_lo": (float, 0.0, "domain box lower bound"),
    "domain_hi": (float, 1.0, "domain box upper bound"),
    "xi": (float, 0.95, "inner-margin fraction"),
    "kappa": (float, 0.999, "hardness parameter"),
    "eta": (float, 1.75, "reference-distance multiplier"),
    "n_inner": (int, 999, "inner samples per construction"),
    "n_boundary": (int, 1, "boundary samples per construction"),
    "n_reference": (int, 0, "reference samples per construction"),
    "n_samples": (int, 64, "clean samples per run (desk-scale default)"),
    "threshold": (float, 0.95, "pass threshold on the test score"),
    "rasr_inner": (int, 200, "random-attack inner queries"),
    "rasr_corner": (int, 200, "random-attack corner queries"),
    "rasr_mode": (_choice(("fixed", "matched")), "fixed",
                  "fixed 200+200 or matched to the attack budget"),
    "max_rejection_attempts": (int, 200, "rejection-sampling retries per point"),
    "boundary_mode": (_choice(("corner", "sphere")), "corner",
                      "boundary point placement"),
    "weak_flag_margin": (float, 0.2, "ASR must beat R-ASR by this much"),
    "margin_floor": (float, 1e-9, "minimum separation margin before skipping"),
    "logit_range": (_opt_float, None,
                    "readout logit range (default: match the original model)"),
    "attack": (_choice(ATTACK_KINDS), "pgd", "attack under evaluation"),
    "attack_steps": (int, 75, "gradient steps"),
    "attack_step_size": (_opt_float, None, "step size (default epsilon/4)"),
    "attack_random_init": (_bool, True, "start from a random ball point"),
    "attack_restarts": (int, 1, "random restarts"),
    "attack_lambda": (float, 1.0, "feature-matching weight"),
    "attack_n_inner": (int, 200, "random attack inner queries"),
    "attack_n_corner": (int, 200, "random attack corner queries"),
    "attack_detector_goal": (_choice(DETECTOR_GOALS), "ignore",
                             "undetected / detected / ignore"),
    "attack_unfreeze_stats": (_bool, False,
                              "attack a copy with unfrozen normalization stats"),
    "kappa_grid": (_float_list, (0.5, 0.9, 0.99, 0.999), "sweep kappa values"),
    "kappa_ladder": (_float_list, (0.999, 0.99, 0.9, 0.5), "tune kappa ladder"),
    "ni_ladder": (_int_list, (999, 299, 99), "tune n_inner ladder"),
    "detector_target_fpr": (float, 0.05, "detector false-positive rate target"),
}


def parse_config_file(path) -> dict:
    """Parse a flat key = value document against the schema."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    values = {}
    for lineno, raw in enumerate(p.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{p}:{lineno}: expected 'key = value'")
        key, _, text = line.partition("=")
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{p}:{lineno}: unknown key {key!r}")
        caster = SCHEMA[key][0]
        try:
            values[key] = caster(text.strip())
        except ValueError as exc:
            raise ConfigError(f"{p}:{lineno}: bad value for {key}: {exc}") from None
    return values


def build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bintest",
        description="Binarization tests: plant guaranteed adversarial examples "
                    "and check whether an attack finds them.")
    parser.add_argument("--config", help="flat key = value config file")
    for key, (caster, default, help_text) in SCHEMA.items():
        flag = "--" + key.replace("_", "-")
        parser.add_argument(flag, dest=key, type=str, default=None,
                            help=f"{help_text} (default: {default})")
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    """Merge defaults < config file < flags < BINTEST_SEED."""
    cfg = {key: default for key, (_, default, _) in SCHEMA.items()}
    if args.config:
        cfg.update(parse_config_file(args.config))
    for key, (caster, _, _) in SCHEMA.items():
        raw = getattr(args, key)
        if raw is not None:
            try:
                cfg[key] = caster(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for --{key.replace('_', '-')}: {exc}")
    env_seed = os.environ.get("BINTEST_SEED")
    if env_seed is not None:
        try:
            cfg["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"BINTEST_SEED must be an integer, got {env_seed!r}")
    if cfg["mode"] is None:
        raise ConfigError("mode is required (--mode or config key)")
    return cfg


def _test_config(cfg: dict) -> TestConfig:
    return TestConfig(
        tm=ThreatModel(epsilon=cfg["epsilon"], lo=cfg["domain_lo"],
                       hi=cfg["domain_hi"]),
        n_inner=cfg["n_inner"], n_boundary=cfg["n_boundary"],
        n_reference=cfg["n_reference"], xi=cfg["xi"], kappa=cfg["kappa"],
        eta=cfg["eta"], n_samples=cfg["n_samples"],
        rasr_inner=cfg["rasr_inner"], rasr_corner=cfg["rasr_corner"],
        rasr_mode=cfg["rasr_mode"], threshold=cfg["threshold"],
        seed=cfg["seed"], workers=cfg["workers"],
        max_rejection_attempts=cfg["max_rejection_attempts"],
        boundary_mode=cfg["boundary_mode"],
        weak_flag_margin=cfg["weak_flag_margin"],
        margin_floor=cfg["margin_floor"], logit_range=cfg["logit_range"],
        kappa_ladder=cfg["kappa_ladder"], ni_ladder=cfg["ni_ladder"],
    )


def _attack_spec(cfg: dict) -> AttackSpec:
    if cfg["attack"] == "feature_match" and cfg["n_reference"] < 1:
        raise ConfigError("feature_match needs n_reference >= 1")
    return AttackSpec(
        kind=cfg["attack"], steps=cfg["attack_steps"],
        step_size=cfg["attack_step_size"],
        random_init=cfg["attack_random_init"], restarts=cfg["attack_restarts"],
        lam=cfg["attack_lambda"], n_inner=cfg["attack_n_inner"],
        n_corner=cfg["attack_n_corner"],
        detector_goal=cfg["attack_detector_goal"],
        unfreeze_stats=cfg["attack_unfreeze_stats"],
    )


def _load_model_and_samples(cfg: dict):
    """Resolve the model under test, its clean samples, and any detector
    inputs. Everything is loaded before any output is written."""
    entry = None
    if cfg["zoo_entry"]:
        try:
            entry = build_entry(cfg["zoo_entry"], seed=cfg["seed"])
        except KeyError as exc:
            raise ConfigError(str(exc)) from None
        model, samples, data = entry.model, entry.samples, entry.train_data
    elif cfg["weights_file"]:
        model = load_model(cfg["weights_file"])
        if not cfg["data_file"]:
            raise ConfigError("weights_file needs data_file for clean samples")
        samples = data = None
    else:
        raise ConfigError("either zoo_entry or weights_file is required")

    if cfg["data_file"]:
        X, y = ingest_dataset(cfg["data_file"], cfg["data_format"],
                              labels_path=cfg["labels_file"])
        samples, data = X, (X, y)
    return model, samples, data, entry


def _progress(cfg: dict):
    if not cfg["verbose"]:
        return None

    def log(record):
        if record.skipped:
            line = f"sample {record.index:4d}: skipped ({record.skip_reason})"
        else:
            line = (f"sample {record.index:4d}: attack="
                    f"{int(bool(record.attack_success))} "
                    f"random={int(bool(record.random_success))}")
        print(line, file=sys.stderr)
    return log


def _verdict_exit(verdict) -> int:
    return EXIT_PASS if verdict == "pass" else EXIT_FAIL


def _run_bintest(cfg: dict, out_dir: Path) -> int:
    model, samples, _, _ = _load_model_and_samples(cfg)
    tc = _test_config(cfg)
    report = run_binarization_test(model, _attack_spec(cfg), samples, tc,
                                   progress=_progress(cfg))
    write_report(report_to_dict(report), out_dir / "report.json")
    write_sample_csv(report, out_dir / "per_sample.csv")
    print(f"attack={report.attack_name} asr={report.asr:.4f} "
          f"rasr={report.rasr:.4f} skip={report.skip_fraction:.4f} "
          f"verdict={report.verdict}")
    return _verdict_exit(report.verdict)


def _run_detector_test(cfg: dict, out_dir: Path) -> int:
    model, samples, data, entry = _load_model_and_samples(cfg)
    detector = entry.detector if entry is not None else None
    if detector is None:
        if data is None:
            raise ConfigError("detector-test needs a zoo detector entry or "
                              "labeled data to calibrate one")
        detector = build_norm_detector(model, data[0], data[1],
                                       cfg["detector_target_fpr"],
                                       seed=cfg["seed"])
    tc = _test_config(cfg)
    report = run_detector_tests(model, detector, _attack_spec(cfg), samples,
                                tc, progress=_progress(cfg))
    write_report(detector_report_to_dict(report), out_dir / "detector_report.json")
    write_sample_csv(report.normal, out_dir / "per_sample_normal.csv")
    write_sample_csv(report.inverted, out_dir / "per_sample_inverted.csv")
    print(f"normal asr={report.normal.asr:.4f} verdict={report.normal.verdict}")
    print(f"inverted asr={report.inverted.asr:.4f} verdict={report.inverted.verdict}")
    print(f"combined verdict={report.combined_verdict}")
    return _verdict_exit(report.combined_verdict)


def _run_sweep(cfg: dict, out_dir: Path) -> int:
    model, samples, _, _ = _load_model_and_samples(cfg)
    tc = _test_config(cfg)
    rows = hardness_sweep(model, [_attack_spec(cfg)], samples, tc,
                          cfg["kappa_grid"])
    write_sweep_csv(rows, out_dir / "sweep.csv")
    write_report({"schema_version": 1, "kind": "hardness-sweep", "rows": rows},
                 out_dir / "sweep.json")
    for row in rows:
        asr = "-" if row["asr"] is None else f"{row['asr']:.4f}"
        print(f"kappa={row['kappa']:<7g} attack={row['attack'] or '-':<16} "
              f"asr={asr} rasr={row['rasr']:.4f}")
    attack_rows = [r for r in rows if r["attack"]]
    ok = all(r["verdict"] == "pass" for r in attack_rows) if attack_rows else True
    return EXIT_PASS if ok else EXIT_FAIL


def _run_tune(cfg: dict, out_dir: Path) -> int:
    model, samples, _, _ = _load_model_and_samples(cfg)
    tc = _test_config(cfg)
    result = tune_hardness(model, _attack_spec(cfg), samples, tc)
    doc = {
        "schema_version": 1,
        "kind": "hardness-tune",
        "verdict": result.verdict,
        "kappa": result.kappa,
        "n_inner": result.n_inner,
        "asr_rasr_gap": result.asr_rasr_gap,
        "rungs": [{"kappa": k, "n_inner": ni, "asr": a, "rasr": r}
                  for k, ni, a, r in result.rungs],
    }
    write_report(doc, out_dir / "tune.json")
    if result.verdict == "pass":
        print(f"hardest passing rung: kappa={result.kappa} "
              f"n_inner={result.n_inner} gap={result.asr_rasr_gap:.4f}")
        return EXIT_PASS
    print("attack failed the test at every rung")
    return EXIT_FAIL


def _run_zoo_demo(cfg: dict, out_dir: Path) -> int:
    if not cfg["zoo_entry"]:
        raise ConfigError("zoo-demo needs --zoo-entry")
    model, samples, _, entry = _load_model_and_samples(cfg)
    tc = _test_config(cfg)
    if cfg["save_weights"]:
        save_model(model, out_dir / f"{entry.name}.weights.json")

    results = {}
    ok = True
    for label, spec, expected in (("weak", entry.weak_attack, entry.expected_weak),
                                  ("strong", entry.strong_attack, entry.expected_strong)):
        if entry.detector is not None:
            run_tc = tc if tc.n_reference >= 1 else tc.replace(n_reference=4)
            rep = run_detector_tests(model, entry.detector, spec, samples, run_tc)
            verdict = rep.combined_verdict
            scores = {"normal_asr": rep.normal.asr, "inverted_asr": rep.inverted.asr,
                      "normal_rasr": rep.normal.rasr, "inverted_rasr": rep.inverted.rasr}
            doc = detector_report_to_dict(rep)
        else:
            rep = run_binarization_test(model, spec, samples, tc,
                                        progress=_progress(cfg))
            verdict = rep.verdict
            scores = {"asr": rep.asr, "rasr": rep.rasr}
            doc = report_to_dict(rep)
        write_report(doc, out_dir / f"{label}_report.json")
        match = verdict == expected
        ok = ok and match
        results[label] = {"attack": spec.name, "verdict": verdict,
                          "expected": expected, **scores}
        shown = " ".join(f"{k}={v:.4f}" for k, v in scores.items() if v is not None)
        print(f"{label:<6} {spec.name:<24} {shown} verdict={verdict} "
              f"(expected {expected})")
    write_report({"schema_version": 1, "kind": "zoo-demo", "entry": entry.name,
                  "results": results, "expectations_hold": ok},
                 out_dir / "demo.json")
    return EXIT_PASS if ok else EXIT_FAIL


_MODE_RUNNERS = {
    "bintest": _run_bintest,
    "detector-test": _run_detector_test,
    "sweep": _run_sweep,
    "tune": _run_tune,
    "zoo-demo": _run_zoo_demo,
}


def run_cli(argv=None) -> int:
    args = build_arg_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        runner = _MODE_RUNNERS[cfg["mode"]]
        # Validate model/data/config before creating any output.
        out_dir = Path(cfg["out_dir"])
        out_dir.mkdir(parents=True, exist_ok=True)
        return runner(cfg, out_dir)
    except (ConfigError, DatasetError, ModelFormatError, CalibrationError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CertificateFailure as exc:
        print(f"certificate failure: {exc}", file=sys.stderr)
        return EXIT_CERTIFICATE


def main(argv=None) -> int:
    return run_cli(argv)


if __name__ == "__main__":
    sys.exit(main())
