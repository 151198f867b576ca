"""Small file helpers shared by the writers."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path


def atomic_write_bytes(path, data: bytes) -> None:
    """Write ``data`` to ``path`` via a temp file in the same directory and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dump_json(obj, path=None, indent=2) -> str:
    text = json.dumps(obj, indent=indent, sort_keys=False) + "\n"
    if path is not None:
        atomic_write_text(path, text)
    return text


def fmt_real(x) -> float:
    """Round-trip-safe float for JSON (repr keeps 17 significant digits)."""
    return float(x)
