"""CSV readers and writers for panels, schedules, covariates and results.

Wide format
    The first row holds a corner label followed by the time ids; every other
    row holds a unit id followed by one value per period.  An empty cell or
    the literal ``NA`` marks a missing entry::

        unit,2001,2002,2003
        a,1.5,,0.25
        b,NA,2.0,-1

Long format
    Header ``unit,time,value`` and one row per observed entry.  Missing
    entries are simply absent (an empty or ``NA`` value is also accepted as
    missing).  Units and periods are ordered by first appearance::

        unit,time,value
        a,2001,1.5
        a,2003,0.25
        b,2002,2.0

Lines starting with ``#`` are comments and are skipped by every reader; the
writers put a ``# panelfactor <version> config=<hash>`` line first.  Floats
are written with :func:`repr`, which round-trips bit for bit.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .errors import InputFormatError, ScheduleMismatch
from .panel_core import MaskedPanel

__all__ = [
    "NA_TOKENS",
    "read_panel",
    "read_wide",
    "read_long",
    "write_wide",
    "read_matrix",
    "read_schedule",
    "read_covariates",
    "write_table",
    "read_table",
    "format_float",
]

NA_TOKENS = ("", "NA")
PathLike = Union[str, Path]


def _rows(path: PathLike) -> list:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"input file not found: {path}")
    with path.open(newline="") as fh:
        lines = (line for line in fh if not line.startswith("#"))
        rows = [row for row in csv.reader(lines) if row]
    if not rows:
        raise InputFormatError(f"{path} holds no data")
    return rows


def _parse(cell: str, where: str) -> float:
    cell = cell.strip()
    if cell in NA_TOKENS:
        return math.nan
    try:
        value = float(cell)
    except ValueError:
        raise InputFormatError(f"{where}: {cell!r} is not a number") from None
    if not math.isfinite(value):
        raise InputFormatError(f"{where}: non-finite value {cell!r}")
    return value


def format_float(value: float) -> str:
    """Shortest round-tripping text for a float; ``NaN`` becomes empty."""
    value = float(value)
    return "" if math.isnan(value) else repr(value)


def read_wide(path: PathLike) -> MaskedPanel:
    """Read a wide CSV panel (see the module docstring)."""
    rows = _rows(path)
    header = [c.strip() for c in rows[0]]
    time_ids = header[1:]
    if not time_ids:
        raise InputFormatError(f"{path}: the header row lists no periods")
    if len(set(time_ids)) != len(time_ids):
        raise InputFormatError(f"{path}: duplicate time ids in the header")
    unit_ids, values = [], []
    for k, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise InputFormatError(f"{path}, data row {k}: expected {len(header)} cells, got {len(row)}")
        unit_ids.append(row[0].strip())
        values.append([_parse(c, f"{path}, data row {k}") for c in row[1:]])
    if len(set(unit_ids)) != len(unit_ids):
        raise InputFormatError(f"{path}: duplicate unit ids")
    y = np.array(values, dtype=float).reshape(len(unit_ids), len(time_ids))
    return MaskedPanel.from_array(y, None, unit_ids, time_ids)


def read_long(path: PathLike) -> MaskedPanel:
    """Read a long CSV panel with columns ``unit,time,value``."""
    rows = _rows(path)
    header = [c.strip().lower() for c in rows[0]]
    if header != ["unit", "time", "value"]:
        raise InputFormatError(f"{path}: long format needs the header unit,time,value")
    units: dict = {}
    times: dict = {}
    cells: dict = {}
    for k, row in enumerate(rows[1:], start=2):
        if len(row) != 3:
            raise InputFormatError(f"{path}, data row {k}: expected 3 cells, got {len(row)}")
        u, t = row[0].strip(), row[1].strip()
        units.setdefault(u, len(units))
        times.setdefault(t, len(times))
        key = (units[u], times[t])
        if key in cells:
            raise InputFormatError(f"{path}: duplicate entry for unit {u!r}, time {t!r}")
        cells[key] = _parse(row[2], f"{path}, data row {k}")
    y = np.full((len(units), len(times)), np.nan)
    for (i, t), value in cells.items():
        y[i, t] = value
    return MaskedPanel.from_array(y, None, list(units), list(times))


def read_panel(path: PathLike, fmt: str = "wide") -> MaskedPanel:
    if fmt == "wide":
        return read_wide(path)
    if fmt == "long":
        return read_long(path)
    raise InputFormatError(f"unknown panel format {fmt!r}")


def _write(path: PathLike, header_line: Optional[str], rows: Iterable[Sequence[str]]) -> None:
    with Path(path).open("w", newline="") as fh:
        if header_line:
            fh.write(header_line.rstrip("\n") + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerows(rows)


def write_wide(
    path: PathLike,
    values: np.ndarray,
    unit_ids: Sequence,
    time_ids: Sequence,
    header_line: Optional[str] = None,
    corner: str = "unit",
) -> None:
    """Write an ``N x T`` matrix in wide format; ``NaN`` becomes an empty cell."""
    values = np.asarray(values, dtype=float)
    rows = [[corner, *map(str, time_ids)]]
    rows += [[str(u), *map(format_float, row)] for u, row in zip(unit_ids, values)]
    _write(path, header_line, rows)


def read_matrix(path: PathLike, unit_ids: Sequence, time_ids: Sequence) -> np.ndarray:
    """Read a wide matrix and align it to the given ids (used for propensity
    files)."""
    panel = read_wide(path)
    pos_u = {u: k for k, u in enumerate(panel.unit_ids)}
    pos_t = {t: k for k, t in enumerate(panel.time_ids)}
    try:
        rows = [pos_u[str(u)] for u in unit_ids]
        cols = [pos_t[str(t)] for t in time_ids]
    except KeyError as exc:
        raise InputFormatError(f"{path}: no entry for id {exc.args[0]!r}") from None
    return panel.with_nan()[np.ix_(rows, cols)]


def read_schedule(path: PathLike, unit_ids: Sequence, time_ids: Sequence) -> np.ndarray:
    """Adoption schedule CSV with columns ``unit_id,adopt_time``.

    ``adopt_time`` is the first treated period, given as one of the panel's
    time ids or, failing that, as a zero-based period position; ``NEVER``
    marks a never-treated unit.  Units absent from the file are never
    treated.  Returns the number of control periods per unit (``T`` for
    never treated).
    """
    rows = _rows(path)
    header = [c.strip().lower() for c in rows[0]]
    if header != ["unit_id", "adopt_time"]:
        raise InputFormatError(f"{path}: schedule needs the header unit_id,adopt_time")
    t_len = len(time_ids)
    pos_t = {str(t): k for k, t in enumerate(time_ids)}
    pos_u = {str(u): k for k, u in enumerate(unit_ids)}
    adopt = np.full(len(unit_ids), t_len, dtype=int)
    seen = set()
    for k, row in enumerate(rows[1:], start=2):
        if len(row) != 2:
            raise InputFormatError(f"{path}, data row {k}: expected 2 cells")
        unit, when = row[0].strip(), row[1].strip()
        if unit not in pos_u:
            raise ScheduleMismatch(f"{path}: unit {unit!r} is not in the panel")
        if unit in seen:
            raise ScheduleMismatch(f"{path}: unit {unit!r} listed twice")
        seen.add(unit)
        if when.upper() == "NEVER":
            continue
        if when in pos_t:
            adopt[pos_u[unit]] = pos_t[when]
            continue
        try:
            value = int(when)
        except ValueError:
            raise ScheduleMismatch(f"{path}: adoption time {when!r} of unit {unit!r} is unknown") from None
        if not 0 <= value <= t_len:
            raise ScheduleMismatch(f"{path}: adoption time {value} of unit {unit!r} is outside [0, {t_len}]")
        adopt[pos_u[unit]] = value
    return adopt


def read_covariates(path: PathLike, unit_ids: Sequence) -> tuple:
    """Covariate CSV: ``unit_id`` then ``K`` numeric columns.  Returns the
    ``N x K`` matrix aligned to ``unit_ids`` and the column names."""
    rows = _rows(path)
    header = [c.strip() for c in rows[0]]
    if len(header) < 2 or header[0].lower() != "unit_id":
        raise InputFormatError(f"{path}: covariates need a unit_id column and at least one covariate")
    data = {}
    for k, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise InputFormatError(f"{path}, data row {k}: expected {len(header)} cells")
        values = [_parse(c, f"{path}, data row {k}") for c in row[1:]]
        if any(math.isnan(v) for v in values):
            raise InputFormatError(f"{path}, data row {k}: covariates may not be missing")
        data[row[0].strip()] = values
    try:
        matrix = np.array([data[str(u)] for u in unit_ids], dtype=float)
    except KeyError as exc:
        raise InputFormatError(f"{path}: no covariates for unit {exc.args[0]!r}") from None
    return matrix, header[1:]


def write_table(path: PathLike, columns: Sequence[str], rows: Iterable[Sequence], header_line: Optional[str] = None) -> None:
    """Write a plain table; floats use :func:`format_float`."""

    def cell(v):
        if isinstance(v, (bool, np.bool_)):
            return "true" if v else "false"
        if isinstance(v, (float, np.floating)):
            return format_float(v)
        return str(v)

    _write(path, header_line, [list(columns), *([cell(v) for v in row] for row in rows)])


def read_table(path: PathLike) -> tuple:
    """Read a table written by :func:`write_table`: ``(columns, rows)`` with
    every cell as text."""
    rows = _rows(path)
    return rows[0], rows[1:]
