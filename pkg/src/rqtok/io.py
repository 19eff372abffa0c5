"""Feature ingestion, token grid files and JSON reports.

Text features: one frame per line, values separated by commas, tabs or
spaces; an optional non-numeric header line; samples separated by blank
lines.  Raw features: little-endian float32, ``N * T * F`` values.
Token grids use the same text layout with one ``T x M`` block per sample.
"""
from __future__ import annotations

import json
import math
import re
from pathlib import Path
from typing import Optional

import numpy as np

from .archive import atomic_write

FORMATS = ("text", "raw")
_SPLIT = re.compile(r"[,\t ]+")


class IngestError(ValueError):
    def __init__(self, message: str, row: Optional[int] = None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


def _parse_blocks(text: str, parse, allow_header: bool) -> list:
    """Split into blank-line separated blocks of parsed rows; rows are numbered from 1."""
    blocks, current = [], []
    width = None
    seen_data = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            if current:
                blocks.append(current)
                current = []
            continue
        fields = _SPLIT.split(line)
        try:
            row = [parse(f) for f in fields]
        except ValueError:
            if allow_header and not seen_data:
                seen_data = True
                continue
            raise IngestError(f"cannot parse {line!r}", lineno) from None
        seen_data = True
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise IngestError(f"ragged row: {len(row)} columns, expected {width}", lineno)
        current.append((lineno, row))
    if current:
        blocks.append(current)
    return blocks


def read_features_text(path) -> np.ndarray:
    blocks = _parse_blocks(Path(path).read_text(), float, allow_header=True)
    if not blocks:
        raise IngestError("no feature rows found")
    for block in blocks:
        for lineno, row in block:
            if not all(math.isfinite(v) for v in row):
                raise IngestError("non-finite value", lineno)
    lengths = {len(b) for b in blocks}
    if len(lengths) != 1:
        raise IngestError(f"samples have different lengths {sorted(lengths)}")
    return np.array([[row for _, row in b] for b in blocks], dtype=np.float64)


def read_features_raw(path, T: int, F: int) -> np.ndarray:
    if T is None or F is None or T < 1 or F < 1:
        raise IngestError("raw float32 input needs positive T and F")
    data = np.fromfile(path, dtype="<f4")
    if data.size == 0 or data.size % (T * F):
        raise IngestError(f"raw file holds {data.size} floats, not a multiple of T*F = {T * F}")
    x = data.astype(np.float64).reshape(-1, T, F)
    bad = ~np.isfinite(x).all(axis=2)
    if bad.any():
        n, t = np.argwhere(bad)[0]
        raise IngestError("non-finite value", int(n * T + t + 1))
    return x


def ingest_features(path, fmt: str = "text", T: Optional[int] = None, F: Optional[int] = None) -> np.ndarray:
    """Load features as an ``(N, T, F)`` float64 array."""
    if fmt == "text":
        x = read_features_text(path)
    elif fmt == "raw":
        x = read_features_raw(path, T, F)
    else:
        raise IngestError(f"unknown format {fmt!r}; choose from {FORMATS}")
    if T is not None and x.shape[1] != T:
        raise IngestError(f"expected T = {T}, got {x.shape[1]}")
    if F is not None and x.shape[2] != F:
        raise IngestError(f"expected F = {F}, got {x.shape[2]}")
    return x


def _render_blocks(arr: np.ndarray, fmt) -> str:
    lines = []
    for i, block in enumerate(arr):
        if i:
            lines.append("")
        lines += [",".join(fmt(v) for v in row) for row in block.tolist()]
    return "\n".join(lines) + "\n"


def features_to_text(x) -> str:
    # repr round-trips float64 exactly
    return _render_blocks(np.asarray(x, dtype=np.float64), repr)


def write_features(path, x, fmt: str = "text") -> int:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise IngestError(f"features must be (N, T, F), got shape {x.shape}")
    if fmt == "text":
        return atomic_write(path, features_to_text(x))
    if fmt == "raw":
        return atomic_write(path, x.astype("<f4").tobytes())
    raise IngestError(f"unknown format {fmt!r}; choose from {FORMATS}")


def tokens_to_text(tokens) -> str:
    t = np.asarray(tokens)
    if t.ndim == 2:
        t = t[None]
    return _render_blocks(t.astype(np.int64), str)


def write_tokens(path, tokens) -> int:
    return atomic_write(path, tokens_to_text(tokens))


def read_tokens(path) -> np.ndarray:
    """Token grid as ``(N, T, M)`` integers."""
    blocks = _parse_blocks(Path(path).read_text(), int, allow_header=False)
    if not blocks:
        return np.zeros((0, 0, 0), dtype=np.int64)
    lengths = {len(b) for b in blocks}
    if len(lengths) != 1:
        raise IngestError(f"token blocks have different lengths {sorted(lengths)}")
    return np.array([[row for _, row in b] for b in blocks], dtype=np.int64)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"{type(obj).__name__} is not JSON serializable")


def report_to_json(report: dict) -> str:
    clean = {k: v for k, v in report.items() if not k.startswith("_")}
    return json.dumps(clean, sort_keys=True, indent=2, default=_json_default)


def write_report(path, report: dict) -> int:
    return atomic_write(path, report_to_json(report) + "\n")
