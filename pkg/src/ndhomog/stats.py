"""Summaries, regressions and the report container shared by all experiments."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats as sst

__all__ = ["CellSummary", "Fit", "StatReport", "summarize_cell", "linear_fit", "bootstrap_slope"]


@dataclass
class CellSummary:
    label: str
    n: int
    mean: float
    variance: float
    sd: float
    stderr: float
    sd_stderr: float
    quantiles: dict

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Fit:
    """Straight-line fit ``y = intercept + slope * x``."""

    slope: float
    intercept: float
    ci: tuple[float, float]
    n_points: int
    degenerate: bool = False
    note: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ci"] = list(self.ci)
        return d


@dataclass
class StatReport:
    kind: str
    cells: list = field(default_factory=list)
    fits: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    failures: int = 0

    def cell(self, label: str) -> CellSummary:
        for c in self.cells:
            if c.label == label:
                return c
        raise KeyError(label)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "cells": [c.to_dict() for c in self.cells],
            "fits": {k: v.to_dict() for k, v in self.fits.items()},
            "checks": _clean(self.checks),
            "extra": _clean(self.extra),
            "seeds": _clean(self.seeds),
            "failures": self.failures,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=True)


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    return obj


def summarize_cell(label: str, values) -> CellSummary:
    x = np.asarray(values, dtype=float)
    n = x.size
    if n == 0:
        nan = float("nan")
        return CellSummary(label, 0, nan, nan, nan, nan, nan, {})
    mean = float(x.mean())
    var = float(x.var(ddof=1)) if n > 1 else 0.0
    sd = math.sqrt(var)
    stderr = sd / math.sqrt(n) if n > 1 else 0.0
    # stderr of the sample variance from the fourth central moment
    if n > 3 and var > 0:
        m4 = float(np.mean((x - mean) ** 4))
        var_var = max(m4 - var**2 * (n - 3) / (n - 1), 0.0) / n
        sd_stderr = math.sqrt(var_var) / (2.0 * sd)
    else:
        sd_stderr = 0.0
    qs = {str(q): float(np.quantile(x, q)) for q in (0.05, 0.25, 0.5, 0.75, 0.9, 0.95)}
    return CellSummary(label, n, mean, var, sd, stderr, sd_stderr, qs)


def linear_fit(x, y, level: float = 0.95) -> Fit:
    """Ordinary least squares with a t-interval for the slope."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ok = np.isfinite(x) & np.isfinite(y)
    x, y = x[ok], y[ok]
    n = x.size
    if n < 2 or np.ptp(x) == 0:
        return Fit(float("nan"), float("nan"), (float("nan"), float("nan")), n, True, "too few points")
    res = sst.linregress(x, y)
    if n > 2:
        t = sst.t.ppf(0.5 + level / 2, n - 2)
        ci = (res.slope - t * res.stderr, res.slope + t * res.stderr)
    else:
        ci = (float("nan"), float("nan"))
    return Fit(float(res.slope), float(res.intercept), (float(ci[0]), float(ci[1])), n)


def bootstrap_slope(groups, xs, stat, n_boot: int = 400, seed: int = 0, level: float = 0.95):
    """Percentile interval for the slope of ``log stat(group)`` against ``xs``.

    Samples are resampled with replacement inside each group; ``stat`` maps
    a 1-d array to a positive scalar.
    """
    rng = np.random.default_rng(seed)
    slopes = []
    xs = np.asarray(xs, dtype=float)
    arrays = [np.asarray(g, dtype=float) for g in groups]
    for _ in range(n_boot):
        ys = []
        for a in arrays:
            idx = rng.integers(0, a.size, a.size)
            ys.append(stat(a[idx]))
        ys = np.asarray(ys)
        # degenerate replicates (a resampled group with zero spread) are skipped
        if np.all(ys > 0):
            slopes.append(np.polyfit(xs, np.log(ys), 1)[0])
    if not slopes:
        return (float("nan"), float("nan"))
    lo, hi = np.quantile(slopes, [0.5 - level / 2, 0.5 + level / 2])
    return (float(lo), float(hi))
