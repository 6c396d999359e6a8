"""Dataset ingestion: labeled vectors from CSV or IDX files, normalized
into the [0, 1] domain box."""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np


class DatasetError(ValueError):
    """Parse or validation failure, with file/record context in the message."""


_IDX_DTYPES = {
    0x08: np.uint8,
    0x09: np.int8,
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


def _normalize(values: np.ndarray, where: str) -> np.ndarray:
    """Map raw values into [0, 1]; image-scale data is divided by 255."""
    if not np.all(np.isfinite(values)):
        raise DatasetError(f"{where}: non-finite feature values")
    lo, hi = float(values.min()), float(values.max())
    if lo >= 0.0 and hi <= 1.0:
        return values.astype(np.float64)
    if lo < 0.0 or hi > 255.0:
        raise DatasetError(
            f"{where}: values outside [0, 255] (min={lo:.6g}, max={hi:.6g})")
    return values.astype(np.float64) / 255.0


def _ingest_csv(path: Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        if not header or header[0].strip() != "label":
            raise DatasetError(f"{path}: first header column must be 'label'")
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetError(
                    f"{path}: line {lineno}: expected {len(header)} fields, "
                    f"got {len(row)}")
            try:
                label = float(row[0])
                values = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise DatasetError(f"{path}: line {lineno}: {exc}") from None
            if label != int(label) or label < 0:
                raise DatasetError(
                    f"{path}: line {lineno}: label must be a non-negative integer")
            labels.append(int(label))
            rows.append(values)
    if not rows:
        raise DatasetError(f"{path}: no data rows")
    X = np.asarray(rows, dtype=np.float64)
    return _normalize(X, str(path)), np.asarray(labels, dtype=np.int64)


def _read_idx(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < 4:
        raise DatasetError(f"{path}: truncated IDX header at offset 0")
    zero1, zero2, dtype_code, ndim = struct.unpack(">BBBB", raw[:4])
    if zero1 != 0 or zero2 != 0:
        raise DatasetError(f"{path}: IDX magic-number mismatch at offset 0")
    if dtype_code not in _IDX_DTYPES:
        raise DatasetError(f"{path}: unknown IDX dtype 0x{dtype_code:02X} at offset 2")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise DatasetError(f"{path}: truncated IDX dimensions at offset 4")
    shape = struct.unpack(f">{ndim}I", raw[4:header_end])
    data = np.frombuffer(raw, dtype=_IDX_DTYPES[dtype_code], offset=header_end)
    expected = int(np.prod(shape)) if shape else 0
    if data.size != expected:
        raise DatasetError(
            f"{path}: IDX payload size {data.size} != header product {expected} "
            f"(offset {header_end})")
    return data.reshape(shape)


def _ingest_idx(path: Path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    if labels_path is None:
        raise DatasetError("idx format needs a labels file (labels_path)")
    images = _read_idx(Path(path))
    labels = _read_idx(Path(labels_path))
    if labels.ndim != 1:
        raise DatasetError(f"{labels_path}: labels must be a 1-D IDX array")
    if images.ndim < 2:
        raise DatasetError(f"{path}: image array must have at least 2 dimensions")
    if images.shape[0] != labels.shape[0]:
        raise DatasetError(
            f"record count mismatch: {images.shape[0]} images vs "
            f"{labels.shape[0]} labels")
    X = images.reshape(images.shape[0], -1).astype(np.float64)
    y = labels.astype(np.int64)
    if np.any(y < 0):
        raise DatasetError(f"{labels_path}: negative label")
    return _normalize(X, str(path)), y


def ingest_dataset(path, fmt: str, labels_path=None) -> tuple[np.ndarray, np.ndarray]:
    """Load labeled vectors from disk.

    Args:
        path: CSV file (header `label,f0,f1,...`) or IDX image file.
        fmt: "csv" or "idx".
        labels_path: companion IDX label file (idx format only).

    Returns:
        (X, y) with X in [0, 1] and integer labels.
    """
    p = Path(path)
    if not p.exists():
        raise DatasetError(f"{p}: no such file")
    if fmt == "csv":
        return _ingest_csv(p)
    if fmt == "idx":
        return _ingest_idx(p, labels_path)
    raise DatasetError(f"unknown dataset format {fmt!r} (expected csv or idx)")
