"""Canonical text formatting so repeated exports are byte-identical."""

from __future__ import annotations

import csv
import io

__all__ = ["fmt", "write_csv"]


def fmt(value) -> str:
    """Floats at 9 significant digits; everything else via str()."""
    if isinstance(value, float):
        return format(value, ".9g")
    return str(value)


def write_csv(path: str, header: list[str], rows: list) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())
