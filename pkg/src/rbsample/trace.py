"""Per-iteration records of greedy runs and their CSV serialization."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = ["GreedyTrace", "format_value", "read_csv"]


def format_value(v):
    """Locale-independent, round-trippable text for one CSV cell."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


@dataclass
class GreedyTrace:
    """Rows of per-iteration values plus free-form run metadata.

    ``columns`` fixes the CSV layout; rows may carry additional keys which
    are kept in memory but not exported.
    """

    columns: list
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def append(self, **values):
        self.rows.append(dict(values))

    def column(self, name):
        return [row.get(name) for row in self.rows]

    def __len__(self):
        return len(self.rows)

    def to_csv_text(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow([format_value(row.get(c)) for c in self.columns])
        return buf.getvalue()

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv_text())


def read_csv(path):
    """Read a trace CSV back into ``(columns, rows)`` with floats where possible."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            columns = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty trace file") from None
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(columns):
                raise ValueError(f"{path}:{lineno}: expected {len(columns)} fields, got {len(rec)}")
            row = {}
            for c, v in zip(columns, rec):
                if v == "":
                    row[c] = None
                    continue
                try:
                    row[c] = float(v)
                except ValueError:
                    row[c] = v
            rows.append(row)
    return columns, rows
