"""LibSVM reader/writer and deterministic CSV/JSON table output."""
from __future__ import annotations

import csv
import io
import json
import math
import os
from typing import Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from ..core import UsageError


class DataParseError(ValueError):
    """Malformed input file; ``lineno`` is 1-based."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class LibsvmParseError(DataParseError):
    pass


def parse_libsvm(lines: Iterable[str], width: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Dense design and ``{0, 1}`` labels from LibSVM text lines.

    Blank lines and ``#`` comments are skipped. Labels ``<= 0`` map to 0 and
    positive labels to 1. ``width`` defaults to the largest index seen.
    """
    labels: List[float] = []
    rows: List[List[Tuple[int, float]]] = []
    top = 0
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        try:
            label = float(tokens[0])
        except ValueError:
            raise LibsvmParseError(lineno, f"bad label {tokens[0]!r}") from None
        if not math.isfinite(label):
            raise LibsvmParseError(lineno, "label must be finite")
        entries = []
        last = 0
        for tok in tokens[1:]:
            idx_s, sep, val_s = tok.partition(":")
            if not sep:
                raise LibsvmParseError(lineno, f"expected index:value, got {tok!r}")
            try:
                idx, val = int(idx_s), float(val_s)
            except ValueError:
                raise LibsvmParseError(lineno, f"bad entry {tok!r}") from None
            if idx < 1:
                raise LibsvmParseError(lineno, f"indices are 1-based, got {idx}")
            if idx <= last:
                raise LibsvmParseError(lineno, "indices must be strictly increasing")
            if not math.isfinite(val):
                raise LibsvmParseError(lineno, f"non-finite value in {tok!r}")
            last = idx
            entries.append((idx, val))
        top = max(top, last)
        labels.append(1.0 if label > 0 else 0.0)
        rows.append(entries)
    if width is None:
        width = top
    elif top > width:
        raise UsageError(f"feature index {top} exceeds width {width}")
    X = np.zeros((len(rows), width))
    for i, entries in enumerate(rows):
        for idx, val in entries:
            X[i, idx - 1] = val
    return X, np.asarray(labels)


def read_libsvm(path, width: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Read a local LibSVM file. See :func:`parse_libsvm`."""
    with open(path, "r", encoding="utf-8") as fh:
        return parse_libsvm(fh, width)


def format_libsvm(X, y) -> str:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.size:
        raise UsageError("X and y have different numbers of rows")
    out = []
    for row, label in zip(X, y):
        parts = ["1" if label > 0 else "-1"]
        parts += [f"{j + 1}:{format_float(v)}" for j, v in enumerate(row) if v != 0]
        out.append(" ".join(parts))
    return "\n".join(out) + ("\n" if out else "")


def write_libsvm(path, X, y) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_libsvm(X, y))


def format_float(v) -> str:
    """17 significant digits, enough to round-trip a double."""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None:
        return ""
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.17g}"


def _cell(v):
    if isinstance(v, str):
        return v
    return format_float(v)


def format_table(rows: Sequence[Mapping], columns: Sequence[str], fmt: str = "csv") -> str:
    """Render ``rows`` with a fixed column order as CSV (LF endings) or JSON."""
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r.get(c)) for c in columns])
        return buf.getvalue()
    if fmt == "json":
        def jv(v):
            if v is None or isinstance(v, str):
                return v
            if isinstance(v, (bool, np.bool_, int, np.integer)):
                return int(v)
            v = float(v)
            # JSON has no nan/inf literals; keep the text form used in the CSV
            return float(format_float(v)) if math.isfinite(v) else format_float(v)
        body = [{c: jv(r.get(c)) for c in columns} for r in rows]
        return json.dumps({"columns": list(columns), "rows": body}, indent=1) + "\n"
    raise UsageError(f"unknown format {fmt!r}; expected csv or json")


def write_table(rows: Sequence[Mapping], columns: Sequence[str], path=None, fmt: str = "csv") -> str:
    """Write the table to ``path`` (or return it only when ``path`` is None or ``-``)."""
    text = format_table(rows, columns, fmt)
    if path is not None and str(path) != "-":
        parent = os.path.dirname(os.path.abspath(str(path)))
        if not os.path.isdir(parent):
            raise FileNotFoundError(f"output directory {parent} does not exist")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    return text


def read_table(path) -> List[dict]:
    """Read a CSV written by :func:`write_table` back as string-valued dicts."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))
