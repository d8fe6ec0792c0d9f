"""CSV datasets with a column-prefix schema.

``x_*`` columns are features (an empty cell is a missing value), ``y`` is
the label, ``g_*`` are {0,1} group columns and ``z`` is the domain tag
(``so`` or ``ta``). Any other column is rejected.
"""

from __future__ import annotations

import csv
import math

import numpy as np

from happymap.core import Dataset, RejectedInput


class DatasetParseError(RejectedInput):
    """A cell that could not be read; ``row`` is 1-based and counts the header."""

    def __init__(self, message: str, row: int, column: str):
        super().__init__(f"row {row}, column {column!r}: {message}")
        self.row = row
        self.column = column


def _classify(header: list[str]) -> dict:
    kinds = {"x": [], "g": [], "y": None, "z": None}
    seen = set()
    for j, name in enumerate(header):
        if name in seen:
            raise DatasetParseError("duplicate column", 1, name)
        seen.add(name)
        if name.startswith("x_"):
            kinds["x"].append(j)
        elif name.startswith("g_"):
            kinds["g"].append(j)
        elif name == "y":
            kinds["y"] = j
        elif name == "z":
            kinds["z"] = j
        else:
            raise DatasetParseError("unknown column (expected x_*, y, g_* or z)", 1, name)
    if not kinds["x"]:
        raise RejectedInput("dataset has no x_* feature columns")
    return kinds


def _number(cell: str, row: int, column: str, allow_empty: bool) -> float:
    if cell.strip() == "":
        if allow_empty:
            return math.nan
        raise DatasetParseError("empty cell", row, column)
    try:
        val = float(cell)
    except ValueError:
        raise DatasetParseError(f"not a number: {cell!r}", row, column) from None
    if math.isnan(val) or math.isinf(val):
        raise DatasetParseError(f"non-finite value {cell!r}", row, column)
    return val


def load_dataset(path, require_labels: bool = False) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise RejectedInput(f"{path}: empty file, header row required") from None
        kinds = _classify(header)
        if require_labels and kinds["y"] is None:
            raise RejectedInput(f"{path}: a 'y' column is required for fitting")
        X, y, G, z = [], [], [], []
        for i, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise DatasetParseError(f"expected {len(header)} cells, got {len(rec)}", i, "*")
            X.append([_number(rec[j], i, header[j], True) for j in kinds["x"]])
            if kinds["y"] is not None:
                y.append(_number(rec[kinds["y"]], i, "y", False))
            if kinds["g"]:
                G.append([_number(rec[j], i, header[j], False) for j in kinds["g"]])
            if kinds["z"] is not None:
                tag = rec[kinds["z"]].strip()
                if tag not in ("so", "ta"):
                    raise DatasetParseError(f"domain tag must be 'so' or 'ta', got {tag!r}", i, "z")
                z.append(tag)
    if not X:
        raise RejectedInput(f"{path}: no data rows")
    return Dataset(
        np.array(X, dtype=float),
        labels=np.array(y) if kinds["y"] is not None else None,
        groups=np.array(G) if kinds["g"] else None,
        group_names=tuple(header[j] for j in kinds["g"]),
        domain_tag=np.array(z) if kinds["z"] is not None else None,
        feature_names=tuple(header[j] for j in kinds["x"]),
    )


def _fmt(v: float) -> str:
    # repr of a float is the shortest string that parses back to the same value
    return "" if math.isnan(v) else repr(float(v))


def _header_names(ds: Dataset) -> list[str]:
    names = [n if n.startswith("x_") else f"x_{n}" for n in ds.feature_names]
    if len(set(names)) != len(names):
        names = [f"x_{j}" for j in range(ds.d)]
    return names


def save_dataset(ds: Dataset, path) -> None:
    header = _header_names(ds)
    if ds.labels is not None:
        header.append("y")
    gnames = []
    if ds.groups is not None:
        gnames = [n if n.startswith("g_") else f"g_{n}" for n in ds.group_names]
        header += gnames
    if ds.domain_tag is not None:
        header.append("z")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(ds.n):
            row = [_fmt(v) for v in ds.features[i]]
            if ds.labels is not None:
                row.append(_fmt(ds.labels[i]))
            if gnames:
                row += [str(int(v)) for v in ds.groups[i]]
            if ds.domain_tag is not None:
                row.append(str(ds.domain_tag[i]))
            w.writerow(row)
