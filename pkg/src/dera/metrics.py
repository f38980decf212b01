"""Evaluation metrics and deterministic CSV logging."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

PSNR_CAP = 99.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise for [-1, 1]-scaled pixels: 10*log10(4/MSE),
    capped at 99 dB (identical inputs)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(4.0 / mse))


def codebook_usage(counts: np.ndarray) -> float:
    """Fraction of codebook entries hit at least once."""
    counts = np.asarray(counts)
    if counts.size == 0:
        return 0.0
    return float((counts > 0).sum() / counts.size)


def codebook_perplexity(counts: np.ndarray) -> float:
    """exp(entropy) of the empirical code distribution; 1.0 on collapse."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        return 0.0
    p = counts / total
    nz = p[p > 0]
    return float(np.exp(-(nz * np.log(nz)).sum()))


def format_value(value) -> str:
    if value is None or value == "":
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.10g}"


class MetricsWriter:
    """Fixed-header CSV writer with stable float formatting."""

    def __init__(self, path, header: list[str]):
        self.path = Path(path)
        self.header = list(header)
        self._fh = open(self.path, "w", newline="")
        self._fh.write(",".join(self.header) + "\n")

    def row(self, values: dict) -> None:
        unknown = set(values) - set(self.header)
        if unknown:
            raise ValueError(f"unknown metrics columns {sorted(unknown)}")
        cells = [format_value(values.get(col)) for col in self.header]
        self._fh.write(",".join(cells) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def read_metrics(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for record in csv.DictReader(fh):
            parsed = {}
            for key, raw in record.items():
                if raw is None or raw == "":
                    parsed[key] = None
                else:
                    try:
                        parsed[key] = float(raw)
                    except ValueError:
                        parsed[key] = raw
            rows.append(parsed)
    return rows
