"""Rank and linear correlation, and the per-repeat metrics report."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Any, List, Sequence, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy.stats import rankdata

from .errors import MetricError

ArrayLike = Union[np.ndarray, Sequence[float]]

REPORT_HEADER = ("repeat", "srcc", "plcc")


def _pair(pred: ArrayLike, target: ArrayLike) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(pred, dtype=np.float64).reshape(-1)
    y = np.asarray(target, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise MetricError(f"prediction and target lengths differ: {x.size} vs {y.size}")
    if x.size < 2:
        raise MetricError(f"correlation needs at least 2 samples, got {x.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise MetricError("correlation of non-finite values")
    return x, y


def plcc(pred: ArrayLike, target: ArrayLike) -> float:
    """
    Pearson linear correlation coefficient.

    Raises:
        MetricError: If either argument has zero variance
    """
    x, y = _pair(pred, target)
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = float(np.dot(xc, xc)), float(np.dot(yc, yc))
    if sxx == 0.0 or syy == 0.0:
        raise MetricError("correlation is undefined for a constant input")
    r = float(np.dot(xc, yc)) / float(np.sqrt(sxx * syy))
    return float(np.clip(r, -1.0, 1.0))


def srcc(pred: ArrayLike, target: ArrayLike) -> float:
    """
    Spearman rank correlation: Pearson correlation of average ranks.

    Raises:
        MetricError: If either ranking is constant
    """
    x, y = _pair(pred, target)
    return plcc(rankdata(x, method="average"), rankdata(y, method="average"))


class MetricsReport(BaseModel):
    """Held-out correlations of every protocol repeat."""

    srcc: List[float] = Field(min_length=1)
    plcc: List[float] = Field(min_length=1)

    @model_validator(mode="after")
    def _check(self) -> "MetricsReport":
        if len(self.srcc) != len(self.plcc):
            raise ValueError("srcc and plcc need one value per repeat")
        for value in self.srcc + self.plcc:
            if not -1.0 <= value <= 1.0:
                raise ValueError(f"correlation {value} outside [-1, 1]")
        return self

    @property
    def repeats(self) -> int:
        return len(self.srcc)

    @property
    def median_srcc(self) -> float:
        return float(np.median(self.srcc))

    @property
    def median_plcc(self) -> float:
        return float(np.median(self.plcc))


def write_report(report: MetricsReport, path: Union[str, Path]) -> None:
    """CSV with one row per repeat and a closing ``median`` row."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(REPORT_HEADER)
        for i, (s, p) in enumerate(zip(report.srcc, report.plcc)):
            writer.writerow([i, repr(s), repr(p)])
        writer.writerow(["median", repr(report.median_srcc), repr(report.median_plcc)])


ABLATION_HEADER = ("variant", "seed", "median_srcc", "median_plcc")


def write_ablation(rows: Sequence[Any], path: Union[str, Path]) -> None:
    """CSV of ablation rows (objects with the ``ABLATION_HEADER`` attributes)."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(ABLATION_HEADER)
        for row in rows:
            writer.writerow([row.variant, row.seed, repr(row.median_srcc), repr(row.median_plcc)])
