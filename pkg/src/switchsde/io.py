"""Deterministic text output helpers shared by all exporters.

Floats are printed with 17 significant digits so every IEEE-754 double
round-trips exactly; files are written atomically (temp file in the target
directory, then rename) with plain \n newlines.
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

from .errors import IoError


def g17(x: float) -> str:
    """Shortest-exact decimal: 17 significant digits, round-trip safe."""
    return format(float(x), ".17g")


def format_cell(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (int,)):
        return str(v)
    if v is None:
        return ""
    if isinstance(v, float):
        return g17(v)
    if isinstance(v, str):
        return v
    # numpy scalars land here
    try:
        if hasattr(v, "dtype") and v.dtype.kind in "iu":
            return str(int(v))
        return g17(float(v))
    except (TypeError, ValueError) as exc:
        raise IoError(f"cannot format value {v!r} for CSV output") from exc


def atomic_write_text(path, text: str) -> None:
    """Write text to path via a sibling temp file and an atomic rename."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
            os.replace(tmp, path)
        except BaseException:
            try:
                os.unlink(tmp)
            except OSError:
                pass
            raise
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def write_csv(path, header: str, rows, comments=()) -> None:
    """CSV with a fixed header line, optional # comment lines, atomic write."""
    lines = [header]
    lines.extend(comments)
    for row in rows:
        lines.append(",".join(format_cell(v) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")
