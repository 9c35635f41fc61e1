"""Canonical JSON with fixed float formatting.

Checkpoints and metrics lines must be byte-stable across runs and exact
under round trips, so floats are rendered with 17 significant digits
(enough to reconstruct any float64 exactly) instead of whatever the host
json library chooses.
"""

from __future__ import annotations

import json

import numpy as np


def _render(obj, out: list[str]) -> None:
    if obj is None:
        out.append("null")
    elif obj is True:
        out.append("true")
    elif obj is False:
        out.append("false")
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not np.isfinite(x):
            raise ValueError(f"cannot serialize non-finite float {x}")
        out.append(format(x, ".17g"))
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif isinstance(obj, np.ndarray):
        _render(obj.tolist(), out)
    elif isinstance(obj, (list, tuple)):
        out.append("[")
        for i, item in enumerate(obj):
            if i:
                out.append(",")
            _render(item, out)
        out.append("]")
    elif isinstance(obj, dict):
        out.append("{")
        for i, (key, value) in enumerate(obj.items()):
            if i:
                out.append(",")
            if not isinstance(key, str):
                raise TypeError(f"JSON object keys must be strings, got {key!r}")
            out.append(json.dumps(key))
            out.append(":")
            _render(value, out)
        out.append("}")
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__} to canonical JSON")


def dumps(obj) -> str:
    """Serialize to a compact, deterministic JSON string (insertion-ordered
    keys, 17-significant-digit floats)."""
    out: list[str] = []
    _render(obj, out)
    return "".join(out)


def loads(text: str):
    return json.loads(text)
