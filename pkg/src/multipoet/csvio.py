"""CSV input and output for panels, memberships and matrices.

Numbers are written with 17 significant digits so that a matrix written and
read back is bit-identical.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .errors import InvalidInput
from .estimators import GroupStructure, ReturnsPanel


def fmt(x) -> str:
    x = float(x)
    return "nan" if math.isnan(x) else format(x, ".17g")


def read_returns_csv(path) -> ReturnsPanel:
    """Header of asset ids (optionally led by ``date``), then one numeric row per time point."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if len(rows) < 2:
        raise InvalidInput(f"{path}: needs a header and at least one data row")
    header = [h.strip() for h in rows[0]]
    dated = header[0].lower() == "date"
    ids = header[1:] if dated else header
    if len(set(ids)) != len(ids):
        raise InvalidInput(f"{path}: duplicate asset ids in header")
    values, dates = [], []
    for r_i, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise InvalidInput(f"{path}: row {r_i} has {len(row)} cells, header has {len(header)}")
        cells = row[1:] if dated else row
        if dated:
            dates.append(row[0].strip())
        out = []
        for c_i, cell in enumerate(cells):
            try:
                v = float(cell)
            except ValueError:
                col = ids[c_i]
                raise InvalidInput(f"{path}: non-numeric cell {cell!r} at row {r_i}, column {col!r}") from None
            if not math.isfinite(v):
                raise InvalidInput(f"{path}: non-finite cell at row {r_i}, column {ids[c_i]!r}")
            out.append(v)
        values.append(out)
    return ReturnsPanel(np.array(values), tuple(ids), tuple(dates) if dated else None)


def read_label_csv(path, asset_ids, column: str = "group") -> list:
    """Read ``asset_id,<column>`` rows and return labels in ``asset_ids`` order."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if rows and rows[0][0].strip().lower() == "asset_id":
        rows = rows[1:]
    table = {}
    for i, row in enumerate(rows, start=1):
        if len(row) < 2:
            raise InvalidInput(f"{path}: line {i} needs asset_id,{column}")
        table[row[0].strip()] = row[1].strip()
    missing = [a for a in asset_ids if a not in table]
    if missing:
        shown = ", ".join(missing[:5]) + (" ..." if len(missing) > 5 else "")
        raise InvalidInput(f"{path}: no {column} for assets {shown}")
    return [table[a] for a in asset_ids]


def read_membership_csv(path, asset_ids) -> GroupStructure:
    labels = read_label_csv(path, asset_ids, "group")
    if all(lab.lstrip("-").isdigit() for lab in labels):
        ints = [int(lab) for lab in labels]
        uniq = sorted(set(ints))
        if uniq == list(range(1, len(uniq) + 1)):
            return GroupStructure(np.array(ints))
        return GroupStructure.from_labels(ints)
    return GroupStructure.from_labels(labels)


def write_matrix_csv(path, M, ids) -> None:
    M = np.asarray(M)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["asset_id", *ids])
        for name, row in zip(ids, M):
            w.writerow([name, *(fmt(x) for x in row)])


def read_matrix_csv(path) -> tuple[np.ndarray, list]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    ids = rows[0][1:]
    return np.array([[float(x) for x in r[1:]] for r in rows[1:]]), ids


def write_returns_csv(path, panel: ReturnsPanel) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        lead = ["date"] if panel.time_labels is not None else []
        w.writerow([*lead, *panel.asset_ids])
        for t, row in enumerate(panel.values):
            cells = [fmt(x) for x in row]
            w.writerow([panel.time_labels[t], *cells] if lead else cells)


def write_labels_csv(path, ids, labels, column: str = "group") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["asset_id", column])
        for a, g in zip(ids, labels):
            w.writerow([a, g])


def write_manifest(path, items: dict) -> None:
    """Plain ``key = value`` lines in insertion order."""
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in items.items()))
