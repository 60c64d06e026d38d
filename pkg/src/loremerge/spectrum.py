"""Singular-value spectra of task vectors, for checking the low-rank assumption.

For every mergeable parameter the analyzer takes the difference of two
checkpoints, reports its leading singular values, and the decay ratio
``sigma_r / sigma_1`` at the cutoff rank ``r = ceil(rank_fraction * min(m, n))``.
"""
from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import linalg
from .checkpoint import ParameterSet, check_compatibility, matrix_shape

CSV_HEADER = ["parameter", "rows", "cols", "index", "singular_value"]
DEFAULT_TOP_COUNT = 100


@dataclass(frozen=True)
class ParameterSpectrum:
    name: str
    rows: int
    cols: int
    top_values: np.ndarray
    sigma1: float
    sigma_r: float
    decay_ratio: float
    rank: int


@dataclass
class SpectrumReport:
    records: list[ParameterSpectrum] = field(default_factory=list)
    rank_fraction: float = 0.2
    top_count: int = DEFAULT_TOP_COUNT

    def __getitem__(self, name: str) -> ParameterSpectrum:
        for rec in self.records:
            if rec.name == name:
                return rec
        raise KeyError(name)

    @property
    def names(self) -> list[str]:
        return [r.name for r in self.records]


def spectrum_of(name: str, diff: np.ndarray, top_count: int, rank_fraction: float) -> ParameterSpectrum:
    rows, cols = diff.shape
    s = linalg.singular_values(diff, name)
    r = linalg.rank_cap((rows, cols), rank_fraction)
    sigma1, sigma_r = float(s[0]), float(s[r - 1])
    ratio = sigma_r / sigma1 if sigma1 > 0 else 0.0
    return ParameterSpectrum(name, rows, cols, s[: min(top_count, s.size)].copy(),
                             sigma1, sigma_r, ratio, r)


def analyze_task_vectors(model_a: ParameterSet, model_b: ParameterSet,
                         top_count: int = DEFAULT_TOP_COUNT, rank_fraction: float = 0.2,
                         workers: int = 1) -> SpectrumReport:
    if top_count < 1:
        raise ValueError(f"top_count must be at least 1, got {top_count}")
    if not 0 < rank_fraction <= 1:
        raise ValueError(f"rank_fraction must lie in (0, 1], got {rank_fraction}")
    check_compatibility([model_a, model_b]).raise_if_incompatible()

    jobs = []
    for name in model_a:
        mshape = matrix_shape(model_a[name].shape)
        if mshape is not None:
            jobs.append((name, mshape))

    def run(job):
        name, mshape = job
        diff = model_a[name].astype(np.float64) - model_b[name].astype(np.float64)
        return spectrum_of(name, diff.reshape(mshape), top_count, rank_fraction)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(run, jobs))
    else:
        records = [run(j) for j in jobs]
    return SpectrumReport(records, rank_fraction, top_count)


def sidecar_path(csv_path) -> Path:
    return Path(csv_path).with_suffix(".json")


def emit_report(report: SpectrumReport, path) -> None:
    """Write ``path`` (CSV of singular values) and a JSON sidecar next to it."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(CSV_HEADER)
        for rec in report.records:
            for i, v in enumerate(rec.top_values):
                w.writerow([rec.name, rec.rows, rec.cols, i, format(float(v), ".17g")])
    summary = {
        "rank_fraction": report.rank_fraction,
        "top_count": report.top_count,
        "parameters": {
            rec.name: {
                "rows": rec.rows,
                "cols": rec.cols,
                "rank": rec.rank,
                "sigma1": rec.sigma1,
                "sigma_r": rec.sigma_r,
                "decay_ratio": rec.decay_ratio,
            }
            for rec in report.records
        },
    }
    sidecar_path(path).write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")


def read_report(path) -> SpectrumReport:
    """Parse a report written by :func:`emit_report`."""
    path = Path(path)
    summary = json.loads(sidecar_path(path).read_text(encoding="utf-8"))
    values: dict[str, list[float]] = {name: [] for name in summary["parameters"]}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != CSV_HEADER:
            raise ValueError(f"unexpected CSV header {header}")
        for name, _rows, _cols, index, value in reader:
            if int(index) != len(values[name]):
                raise ValueError(f"rows for {name!r} are out of order at index {index}")
            values[name].append(float(value))
    records = [
        ParameterSpectrum(name, info["rows"], info["cols"], np.array(values[name]),
                          info["sigma1"], info["sigma_r"], info["decay_ratio"], info["rank"])
        for name, info in summary["parameters"].items()
    ]
    return SpectrumReport(records, summary["rank_fraction"], summary["top_count"])
