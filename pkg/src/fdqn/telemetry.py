"""Per-run CSV telemetry: fixed header, 17-significant-digit floats, LF endings."""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path

from .solver import CSV_FIELDS, IterationRecord

_INT_FIELDS = ("k", "batch_size", "cum_evals")
_FLOAT_FIELDS = ("alpha", "f_sampled", "f_true", "err", "grad_norm_est")


def format_float(v: float) -> str:
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return "%.17g" % v


def record_row(rec: IterationRecord) -> list:
    return [
        str(rec.k),
        str(rec.batch_size),
        format_float(rec.alpha),
        format_float(rec.f_sampled),
        format_float(rec.f_true),
        format_float(rec.err),
        format_float(rec.grad_norm_est),
        "true" if rec.test_passed else "false",
        rec.ls_status,
        str(rec.cum_evals),
    ]


def records_to_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for rec in records:
        w.writerow(record_row(rec))
    return buf.getvalue()


def write_csv(path, records):
    Path(path).write_bytes(records_to_csv(records).encode("utf-8"))


def read_rows(path) -> list:
    """Raw string rows as dicts, after checking the header."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_FIELDS:
            raise ValueError(f"{path}: unexpected header {header!r}")
        return [dict(zip(CSV_FIELDS, row)) for row in reader]


def parse_row(row: dict) -> IterationRecord:
    kw = {}
    for name in _INT_FIELDS:
        kw[name] = int(row[name])
    for name in _FLOAT_FIELDS:
        kw[name] = float(row[name])
    if row["test_passed"] not in ("true", "false"):
        raise ValueError(f"bad test_passed value {row['test_passed']!r}")
    kw["test_passed"] = row["test_passed"] == "true"
    kw["ls_status"] = row["ls_status"]
    return IterationRecord(**kw)


def read_csv(path) -> list:
    """Parse a telemetry CSV back into :class:`IterationRecord` (CSV fields only)."""
    return [parse_row(r) for r in read_rows(path)]
