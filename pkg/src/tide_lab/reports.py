"""CSV report writing."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence


def _cell(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    if hasattr(v, "item"):
        return _cell(v.item())
    return str(v)


def write_csv(path, rows: Iterable[dict], columns: Sequence[str] | None = None) -> Path:
    """Write rows under a single header line; floats use repr so reruns are
    byte-identical."""
    rows = list(rows)
    if columns is None:
        columns = list(rows[0]) if rows else []
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r[c]) for c in columns])
    return path


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
