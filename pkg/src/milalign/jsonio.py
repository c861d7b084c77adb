"""Canonical JSON serialization shared by every file the pipeline writes.

Keys are emitted in sorted order and floats with 17 significant digits,
which is enough for a float64 to round-trip exactly, so re-reading a file
reproduces the original values bit for bit and hashing the serialization
gives a stable fingerprint.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .autodiff import ContractError


def format_float(x: float) -> str:
    x = float(x)
    if not np.isfinite(x):
        raise ContractError("cannot serialize non-finite float")
    return format(x, ".17g")


def _encode(obj, out: list) -> None:
    if obj is None:
        out.append("null")
    elif obj is True:
        out.append("true")
    elif obj is False:
        out.append("false")
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif isinstance(obj, (int, np.integer)) and not isinstance(obj, bool):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.append(format_float(obj))
    elif isinstance(obj, np.ndarray):
        _encode(obj.tolist(), out)
    elif isinstance(obj, dict):
        out.append("{")
        for i, key in enumerate(sorted(obj)):
            if not isinstance(key, str):
                raise ContractError("JSON object keys must be strings")
            if i:
                out.append(",")
            out.append(json.dumps(key))
            out.append(":")
            _encode(obj[key], out)
        out.append("}")
    elif isinstance(obj, (list, tuple)):
        out.append("[")
        for i, item in enumerate(obj):
            if i:
                out.append(",")
            _encode(item, out)
        out.append("]")
    else:
        raise ContractError(f"cannot serialize object of type {type(obj).__name__}")


def dumps_canonical(obj) -> str:
    """Serialize to compact JSON with sorted keys and .17g floats."""
    parts: list = []
    _encode(obj, parts)
    return "".join(parts)


def loads(text: str):
    return json.loads(text)


def fingerprint(obj) -> str:
    """Stable 16-hex-digit digest of the canonical serialization."""
    digest = hashlib.sha256(dumps_canonical(obj).encode("utf-8")).hexdigest()
    return digest[:16]
