"""Rejection-ellipse plot data for two-dimensional stage increments.

On the ``sqrt(n) dU`` scale the stage rejects iff
``x^T (n dV)^{-1} x >= c`` with ``c`` the chi-square quantile at the stage's
conditional level, so the rejection boundary is an ellipse.  Points on the
ellipse count as rejections.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import chi2

from .errors import ConfigError, SingularCovarianceError

ELLIPSE_POINTS = 256


@dataclass(frozen=True)
class EllipsePlotData:
    """Observed point and boundary polyline for one stage."""

    stage: int
    point: np.ndarray
    boundary: np.ndarray
    critical: float
    statistic: float

    @property
    def rejects(self) -> bool:
        return bool(self.statistic >= self.critical)

    def rows(self):
        """``(x, y, series)`` rows: the boundary polyline then the observed point."""
        for x, y in self.boundary:
            yield float(x), float(y), f"boundary-stage{self.stage}"
        yield float(self.point[0]), float(self.point[1]), f"observed-stage{self.stage}"

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "y", "series"])
            for x, y, series in self.rows():
                writer.writerow([repr(x), repr(y), series])


def ellipse_plot_data(du, dv, n: int, level: float, stage: int = 1, statistic: float | None = None, points: int = ELLIPSE_POINTS) -> EllipsePlotData:
    """Boundary ``{x : x^T (n dV)^{-1} x = chi2_2.isf(level)}`` and the point ``sqrt(n) dU``.

    Pass the stage's ``statistic`` to classify the point with exactly the
    value behind the reported p-value.
    """
    du = np.asarray(du, dtype=float)
    dv = np.asarray(dv, dtype=float)
    if du.shape != (2,) or dv.shape != (2, 2):
        raise ConfigError("ellipse plot data needs two events")
    if not 0 < level <= 1:
        raise ConfigError("stage level must lie in (0, 1]")
    try:
        root = np.linalg.cholesky(dv)
    except np.linalg.LinAlgError:
        raise SingularCovarianceError(f"stage {stage} covariance increment is singular; no ellipse exists") from None
    critical = float(chi2.isf(level, 2))
    phi = np.linspace(0.0, 2.0 * math.pi, points)
    circle = math.sqrt(critical) * np.column_stack([np.cos(phi), np.sin(phi)])
    boundary = math.sqrt(n) * circle @ root.T
    if statistic is None:
        y = np.linalg.solve(root, du)
        statistic = float(y @ y)
    return EllipsePlotData(stage, math.sqrt(n) * du, boundary, critical, float(statistic))
