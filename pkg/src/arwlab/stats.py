"""Monte Carlo report type and interval helpers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

Z95 = 1.959963984540054


@dataclass(frozen=True)
class EstimateReport:
    point: float
    stderr: float
    ci95: tuple[float, float]
    replicas: int
    root_seed: int
    echo: dict = field(default_factory=dict)
    failed: int = 0  # replicas lost to budget exhaustion, excluded from the point

    def __post_init__(self):
        if self.replicas <= 0:
            raise ValueError("a report needs at least one replica")
        if self.stderr < 0:
            raise ValueError("negative standard error")
        lo, hi = self.ci95
        if not lo <= self.point <= hi:
            raise ValueError(f"interval {self.ci95} does not contain {self.point}")

    def to_dict(self) -> dict:
        return {"point": self.point, "stderr": self.stderr, "ci95": list(self.ci95),
                "replicas": self.replicas, "failed": self.failed,
                "provenance": {"root_seed": self.root_seed}, "params": self.echo}


def wilson(k: int, n: int, z: float = Z95) -> tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    p = k / n
    den = 1 + z * z / n
    center = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    # the closed form can miss p by an ulp at the extremes
    return min(center - half, p), max(center + half, p)


def proportion_report(k: int, n: int, root_seed: int, echo: dict | None = None,
                      failed: int = 0) -> EstimateReport:
    p = k / n
    return EstimateReport(p, math.sqrt(p * (1 - p) / n), wilson(k, n), n, root_seed,
                          echo or {}, failed)


def mean_report(values, root_seed: int, echo: dict | None = None, failed: int = 0) -> EstimateReport:
    v = np.asarray(values, dtype=np.float64)
    m = float(v.mean())
    se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
    return EstimateReport(m, se, (m - Z95 * se, m + Z95 * se), len(v), root_seed, echo or {}, failed)


def geom_cdf(p: float, k) -> np.ndarray:
    """CDF of Geom(p) on {1, 2, ...}."""
    k = np.asarray(k, dtype=np.float64)
    return 1.0 - (1.0 - p) ** k


def geom_pgf(p: float, s: float) -> float:
    return p * s / (1.0 - (1.0 - p) * s)
