"""Deterministic serialization and atomic file writes.

All artifacts this package emits (JSON, NDJSON, CSV) go through the helpers
here so that re-running a stage with identical inputs produces byte-identical
files: keys are sorted and every float is rendered with 17 significant
digits, enough to round-trip any IEEE double.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from typing import Any


def format_float(x: float) -> str:
    """Render a float with 17 significant digits (exact f64 round-trip)."""
    if math.isnan(x) or math.isinf(x):
        raise ValueError(f"non-finite float not serializable: {x!r}")
    if x == int(x) and abs(x) < 1e16:
        # keep integral values readable ("2.0" rather than "2.0000000000000000")
        return repr(float(x))
    return f"{x:.17g}"


def canonical_json(obj: Any) -> str:
    """Serialize to JSON with sorted keys and fixed float formatting."""
    return _encode(obj)


def _encode(obj: Any) -> str:
    if obj is None:
        return "null"
    if obj is True:
        return "true"
    if obj is False:
        return "false"
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        return format_float(obj)
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=True)
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(_encode(v) for v in obj) + "]"
    if isinstance(obj, dict):
        items = []
        for key in sorted(obj):
            if not isinstance(key, str):
                raise TypeError(f"JSON object keys must be strings, got {key!r}")
            items.append(json.dumps(key, ensure_ascii=True) + ":" + _encode(obj[key]))
        return "{" + ",".join(items) + "}"
    # numpy scalars and arrays arrive here; duck-type instead of importing numpy
    if hasattr(obj, "item") and not hasattr(obj, "__len__"):
        return _encode(obj.item())
    if hasattr(obj, "tolist"):
        return _encode(obj.tolist())
    raise TypeError(f"cannot serialize {type(obj).__name__} canonically")


def atomic_write_bytes(path: str, payload: bytes) -> None:
    """Write via a temp file in the same directory, then rename into place."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path: str, obj: Any) -> None:
    atomic_write_text(path, canonical_json(obj) + "\n")


def write_ndjson(path: str, rows: list) -> None:
    atomic_write_text(path, "".join(canonical_json(r) + "\n" for r in rows))


def read_ndjson(path: str) -> list:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
