"""Deterministic text output helpers: CSV rows and canonical JSON.

Floats are written with 17 significant digits so independent runs and
implementations can be diffed byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path


def format_float(x: float) -> str:
    if isinstance(x, float) and not math.isfinite(x):
        return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")
    return f"{float(x):.17g}"


def format_cell(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int,)):
        return str(value)
    if isinstance(value, float):
        return format_float(value)
    return str(value)


def write_csv(path: str | Path, header: list[str], rows) -> int:
    """Write rows (iterables of cells) with a fixed column order; returns
    the number of data rows written."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(format_cell(c) for c in row) + "\n")
            count += 1
    return count


def canonical_json(obj) -> str:
    """Sorted-key, whitespace-free JSON with a trailing newline."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def write_json(path: str | Path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def sha256_of(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
