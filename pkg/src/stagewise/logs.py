"""Column-oriented metric tables with a lossless CSV form."""

from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np


def format_float(x) -> str:
    """Decimal text with 17 significant digits (round-trips doubles exactly)."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.17g}"


class MetricLog:
    """Rows of named numeric values with a fixed column order."""

    def __init__(self, columns):
        self.columns = list(columns)
        self.rows: list[list[float]] = []

    def append(self, row: dict) -> None:
        missing = [c for c in self.columns if c not in row]
        if missing:
            raise KeyError(f"row lacks columns {missing}")
        self.rows.append([row[c] for c in self.columns])

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        i = self.columns.index(name)
        return np.array([r[i] for r in self.rows], dtype=float)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for row in self.rows:
            writer.writerow([format_float(x) for x in row])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv(), newline="")

    @classmethod
    def from_csv(cls, text: str) -> "MetricLog":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        log = cls(header)
        for row in reader:
            log.rows.append([float(x) for x in row])
        return log

    @classmethod
    def read_csv(cls, path) -> "MetricLog":
        return cls.from_csv(Path(path).read_text())
