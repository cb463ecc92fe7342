"""Deterministic CSV/JSON emission: fixed column orders, 17-significant-
digit floats, sorted JSON keys, so identical configs and seeds produce
byte-identical artifacts."""

from __future__ import annotations

import json
from typing import Iterable, Sequence


def fmt(value) -> str:
    if hasattr(value, "item") and callable(value.item):  # numpy scalars
        value = value.item()
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def _normalize(obj):
    if isinstance(obj, dict):
        return {k: _normalize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_normalize(v) for v in obj]
    if isinstance(obj, float):
        return float(format(obj, ".17g"))
    if hasattr(obj, "item") and callable(obj.item):  # numpy scalars
        return _normalize(obj.item())
    return obj


def json_text(obj) -> str:
    return json.dumps(_normalize(obj), sort_keys=True, indent=2) + "\n"
