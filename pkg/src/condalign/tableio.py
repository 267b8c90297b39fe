"""Delimited text tables with full-precision numeric columns.

Floats are written with Python's shortest round-trip ``repr``, so reading a
file back reproduces every value bit for bit.  Integer columns stay integers.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping

import numpy as np


def _format(col: np.ndarray) -> list[str]:
    if np.issubdtype(col.dtype, np.integer) or col.dtype == bool:
        return [str(int(v)) for v in col.tolist()]
    return [repr(float(v)) for v in col.tolist()]


def write_table(path, columns: Mapping[str, np.ndarray], delimiter: str = ",") -> int:
    """Write equal-length columns under a header row; returns the data row count."""
    names = list(columns)
    arrays = [np.asarray(columns[n]) for n in names]
    lengths = {a.shape[0] for a in arrays}
    if len(lengths) > 1:
        raise ValueError(f"columns have different lengths: {sorted(lengths)}")
    n_rows = lengths.pop() if lengths else 0
    cells = [_format(a) for a in arrays]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        writer.writerow(names)
        writer.writerows(zip(*cells))
    return n_rows


def read_table(path, delimiter: str = ",") -> dict[str, np.ndarray]:
    """Read a table written by :func:`write_table`.

    Columns whose cells are all integer literals come back as ``int64``,
    everything else as ``float64``.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: missing header row") from None
        rows = list(reader)
    if len(set(header)) != len(header):
        raise ValueError(f"{path}: duplicate column names")
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise ValueError(f"{path}: row {i + 1} has {len(row)} cells, expected {len(header)}")
    out = {}
    for j, name in enumerate(header):
        cells = [row[j] for row in rows]
        if cells and all(_is_int(c) for c in cells):
            out[name] = np.array([int(c) for c in cells], dtype=np.int64)
        else:
            try:
                out[name] = np.array([float(c) for c in cells], dtype=np.float64)
            except ValueError:
                raise ValueError(f"{path}: column {name!r} is not numeric") from None
    return out


def _is_int(cell: str) -> bool:
    s = cell[1:] if cell[:1] in "+-" else cell
    return s.isdigit()


def columns_with_prefix(table: Mapping[str, np.ndarray], prefix: str) -> list[str]:
    return [c for c in table if c.startswith(prefix)]


def ensure_parent(path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p
