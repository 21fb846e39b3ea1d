"""CSV and JSON formats.

aggregated.csv   unit,seat,x_1..x_R,y_1..y_C
individual.csv   unit,row,col,count   (long form, 1-based row/col)
covariates.csv   unit,z_1..z_q        (or named columns)
meta.json        optional labels: {"row_labels": [...], "col_labels": [...]}
report JSON      {"method", "pi", "se", "diagnostics"}
"""

from __future__ import annotations

import csv
import json
import math
import re
from pathlib import Path
from typing import Optional

import numpy as np

from .core import Dataset, DatasetMeta, IndividualTable, UnitAggregate, ValidationError

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["method", "pi", "se", "diagnostics"],
    "properties": {
        "method": {"type": "string"},
        "pi": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
        "se": {
            "oneOf": [
                {"type": "null"},
                {"type": "array", "items": {"type": "array", "items": {"type": ["number", "null"]}}},
            ]
        },
        "diagnostics": {"type": "object"},
    },
}


class FormatError(ValidationError):
    pass


def _int(s: str, path, line: int, col: str) -> int:
    try:
        v = int(s)
    except (TypeError, ValueError):
        raise FormatError(f"{path}, line {line}: column {col!r} is not an integer: {s!r}") from None
    if v < 0:
        raise FormatError(f"{path}, line {line}: column {col!r} is negative")
    return v


def write_aggregated(path, units, meta: DatasetMeta) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["unit", "seat"] + [f"x_{i + 1}" for i in range(meta.R)]
                   + [f"y_{j + 1}" for j in range(meta.C)])
        for u in units:
            w.writerow([u.unit_id, meta.seat_of_unit.get(u.unit_id, "")]
                       + u.x.tolist() + u.y.tolist())


def read_aggregated(path, row_labels=(), col_labels=()):
    """Returns (units, meta)."""
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        try:
            header = next(rd)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        if header[:2] != ["unit", "seat"]:
            raise FormatError(f"{path}, line 1: header must start with unit,seat")
        xs = [h for h in header[2:] if re.fullmatch(r"x_\d+", h)]
        ys = [h for h in header[2:] if re.fullmatch(r"y_\d+", h)]
        R, C = len(xs), len(ys)
        if header[2:] != [f"x_{i + 1}" for i in range(R)] + [f"y_{j + 1}" for j in range(C)]:
            raise FormatError(f"{path}, line 1: expected x_1..x_R then y_1..y_C")
        units, seats = [], {}
        for line, row in enumerate(rd, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}, line {line}: expected {len(header)} fields, got {len(row)}")
            vals = [_int(v, path, line, header[k + 2]) for k, v in enumerate(row[2:])]
            try:
                u = UnitAggregate(row[0], vals[:R], vals[R:])
            except ValidationError as e:
                raise FormatError(f"{path}, line {line}: {e}") from None
            units.append(u)
            seats[row[0]] = row[1]
    meta = DatasetMeta(R, C, tuple(row_labels), tuple(col_labels), max(len(units), 1), seats)
    return units, meta


def write_individual(path, tables) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["unit", "row", "col", "count"])
        for t in tables:
            R, C = t.counts.shape
            for i in range(R):
                for j in range(C):
                    w.writerow([t.unit_id, i + 1, j + 1, int(t.counts[i, j])])


def read_individual(path, R: int, C: int) -> list:
    cells: dict = {}
    order = []
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header != ["unit", "row", "col", "count"]:
            raise FormatError(f"{path}, line 1: header must be unit,row,col,count")
        for line, row in enumerate(rd, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise FormatError(f"{path}, line {line}: expected 4 fields, got {len(row)}")
            uid = row[0]
            i = _int(row[1], path, line, "row")
            j = _int(row[2], path, line, "col")
            c = _int(row[3], path, line, "count")
            if not (1 <= i <= R and 1 <= j <= C):
                raise FormatError(f"{path}, line {line}: cell ({i},{j}) outside {R}x{C}")
            if uid not in cells:
                cells[uid] = np.zeros((R, C), dtype=np.int64)
                order.append(uid)
            cells[uid][i - 1, j - 1] += c
    return [IndividualTable(uid, cells[uid]) for uid in order]


def write_covariates(path, unit_ids, Z, names=()) -> None:
    Z = np.asarray(Z, dtype=float)
    names = list(names) or [f"z_{k + 1}" for k in range(Z.shape[1])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["unit"] + names)
        for uid, z in zip(unit_ids, Z):
            w.writerow([uid] + [repr(float(v)) for v in z])


def read_covariates(path, unit_ids=None):
    """Returns (Z aligned to ``unit_ids`` or file order, names)."""
    rows = {}
    order = []
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if not header or header[0] != "unit" or len(header) < 2:
            raise FormatError(f"{path}, line 1: header must be unit,<covariates...>")
        for line, row in enumerate(rd, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}, line {line}: expected {len(header)} fields, got {len(row)}")
            try:
                vals = [float(v) for v in row[1:]]
            except ValueError:
                raise FormatError(f"{path}, line {line}: non-numeric covariate") from None
            if not all(math.isfinite(v) for v in vals):
                raise FormatError(f"{path}, line {line}: non-finite covariate")
            rows[row[0]] = vals
            order.append(row[0])
    ids = order if unit_ids is None else list(unit_ids)
    missing = [u for u in ids if u not in rows]
    if missing:
        raise FormatError(f"{path}: no covariates for units {missing[:5]}")
    return np.array([rows[u] for u in ids], dtype=float), tuple(header[1:])


def write_dataset(directory, ds: Dataset) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_aggregated(d / "aggregated.csv", ds.units, ds.meta)
    if ds.tables is not None:
        write_individual(d / "individual.csv", ds.tables)
    if ds.covariates is not None:
        write_covariates(d / "covariates.csv", [u.unit_id for u in ds.units], ds.covariates,
                         ds.covariate_names)
    (d / "meta.json").write_text(json.dumps(
        {"row_labels": list(ds.meta.row_labels), "col_labels": list(ds.meta.col_labels)}, indent=2))


def read_dataset(directory=None, aggregated=None, individual=None, covariates=None) -> Dataset:
    d = Path(directory) if directory else None
    if d is None and aggregated is None:
        raise FormatError("give a data directory or an aggregated CSV")
    agg = Path(aggregated) if aggregated else d / "aggregated.csv"
    labels = {}
    if d is not None and (d / "meta.json").exists():
        labels = json.loads((d / "meta.json").read_text())
    units, meta = read_aggregated(agg, labels.get("row_labels", ()), labels.get("col_labels", ()))
    ind = Path(individual) if individual else (d / "individual.csv" if d else None)
    tables = read_individual(ind, meta.R, meta.C) if ind is not None and ind.exists() else None
    cov = Path(covariates) if covariates else (d / "covariates.csv" if d else None)
    Z, names = (None, ())
    if cov is not None and cov.exists():
        Z, names = read_covariates(cov, [u.unit_id for u in units])
    return Dataset(meta, units, tables, Z, names)


def _clean(o):
    if isinstance(o, dict):
        return {str(k): _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    if isinstance(o, np.ndarray):
        return _clean(o.tolist())
    if isinstance(o, (np.floating, float)):
        v = float(o)
        return v if math.isfinite(v) else None
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, np.bool_):
        return bool(o)
    return o


def make_report(method: str, pi, se=None, diagnostics: Optional[dict] = None) -> dict:
    return _clean({
        "method": method,
        "pi": np.asarray(pi, dtype=float).tolist(),
        "se": None if se is None else np.asarray(se, dtype=float).tolist(),
        "diagnostics": diagnostics or {},
    })


def dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True, ensure_ascii=False)


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())
