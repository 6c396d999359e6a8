"""Report serialization: versioned structured text with stable key order.

Reports contain only JSON-native types (no timestamps), so identical runs
serialize byte-identically and serialize -> parse -> serialize is the
identity on bytes.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

from .detectors import DetectorTestReport
from .harness import SampleRecord, TestReport

REPORT_SCHEMA_VERSION = 1

SAMPLE_COLUMNS = [
    "index", "skipped", "skip_reason", "certificate_ok", "readout_gap",
    "attack_success", "attack_claimed", "attack_queries",
    "attack_final_logit", "attack_cause", "random_success", "random_queries",
]


def _record_dict(r: SampleRecord) -> dict:
    return {c: getattr(r, c) for c in SAMPLE_COLUMNS}


def report_to_dict(report: TestReport) -> dict:
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "kind": "binarization-test",
        "attack": report.attack_name,
        "asr": report.asr,
        "rasr": report.rasr,
        "skip_fraction": report.skip_fraction,
        "n_samples": report.n_samples,
        "n_skipped": report.n_skipped,
        "verdict": report.verdict,
        "weak_attack_flag": report.weak_attack_flag,
        "config": report.config,
        "per_sample": [_record_dict(r) for r in report.per_sample],
    }


def detector_report_to_dict(report: DetectorTestReport) -> dict:
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "kind": "detector-test",
        "detector": report.detector_name,
        "combined_verdict": report.combined_verdict,
        "normal": report_to_dict(report.normal),
        "inverted": report_to_dict(report.inverted),
    }


def dumps_report(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def loads_report(text: str) -> dict:
    return json.loads(text)


def write_report(doc: dict, path) -> None:
    Path(path).write_text(dumps_report(doc))


def write_sample_csv(report: TestReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SAMPLE_COLUMNS)
        writer.writeheader()
        for r in report.per_sample:
            writer.writerow(_record_dict(r))


def write_sweep_csv(rows: list, path) -> None:
    columns = ["attack", "kappa", "asr", "rasr", "skip_fraction", "verdict"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row.get(c) for c in columns})
