"""Space-time coordinates, lags and the canonical point ordering.

Coordinates are planar kilometres, time is in years. Monthly observations
sit at mid-month, ``year + (month - 0.5) / 12``. When every time in a point
set lies on that grid, lags are computed from integer month counts so that
geometrically identical configurations give bit-identical lags.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MONTHS_PER_YEAR = 12
PERIOD = 1.0
DEFAULT_SPACE_WEIGHT = 2.0 / 30.0
_GRID_TOL = 1e-6


def month_time(year, month):
    """Continuous time (years) of the middle of ``month`` (1..12) in ``year``."""
    return np.asarray(year) + (np.asarray(month) - 0.5) / MONTHS_PER_YEAR


def month_steps(times):
    """Integer month counts for times on the mid-month grid, else ``None``."""
    s = np.asarray(times, dtype=float) * MONTHS_PER_YEAR - 0.5
    r = np.rint(s)
    if s.size and np.all(np.abs(s - r) < _GRID_TOL):
        return r.astype(np.int64)
    return None


@dataclass(frozen=True)
class SpaceTimePoint:
    site_id: int
    easting: float
    northing: float
    time: float
    elevation: float = 0.0

    def __post_init__(self):
        for name in ("easting", "northing", "time", "elevation"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite, got {getattr(self, name)!r}")


@dataclass(frozen=True)
class Lag:
    h_s: float
    h_t: float
    h_star: float
    d_circ: float
    period: float = PERIOD


def time_lag(t1, t2):
    """Absolute time difference, exact in months when both sides are gridded."""
    t1, t2 = np.broadcast_arrays(np.asarray(t1, dtype=float), np.asarray(t2, dtype=float))
    s1, s2 = month_steps(t1.ravel()), month_steps(t2.ravel())
    if s1 is not None and s2 is not None:
        return (np.abs(s1 - s2) / MONTHS_PER_YEAR).reshape(t1.shape)
    return np.abs(t1 - t2)


def circular_lag(h_t, period=PERIOD):
    """Return ``(h_star, d_circ)``: lag modulo the period and its geodesic form."""
    h_star = np.mod(h_t, period)
    d_circ = np.minimum(h_star, period - h_star)
    return h_star, d_circ


def lag(p: SpaceTimePoint, q: SpaceTimePoint, period: float = PERIOD) -> Lag:
    h_s = math.hypot(p.easting - q.easting, p.northing - q.northing)
    h_t = float(time_lag(p.time, q.time))
    h_star, d_circ = circular_lag(h_t, period)
    return Lag(h_s, h_t, float(h_star), float(d_circ), period)


def combined_distance(h_s, h_t=None, space_weight=DEFAULT_SPACE_WEIGHT):
    """Heuristic space-time distance ``sqrt((h_s * w)**2 + h_t**2)`` in years.

    Accepts a :class:`Lag` or separate spatial (km) and temporal (years) lags.
    """
    if space_weight <= 0:
        raise ValueError(f"space_weight must be positive, got {space_weight}")
    if isinstance(h_s, Lag):
        h_s, h_t = h_s.h_s, h_s.h_t
    h_s = np.asarray(h_s, dtype=float) * space_weight
    h_t = np.asarray(h_t, dtype=float)
    d = np.sqrt(h_s * h_s + h_t * h_t)
    return float(d) if d.ndim == 0 else d


class PointSet:
    """Column-oriented collection of space-time points."""

    def __init__(self, site, easting, northing, time, elevation=None):
        self.site = np.asarray(site, dtype=np.int64)
        self.x = np.asarray(easting, dtype=float)
        self.y = np.asarray(northing, dtype=float)
        self.t = np.asarray(time, dtype=float)
        n = self.site.shape[0]
        self.elev = np.zeros(n) if elevation is None else np.asarray(elevation, dtype=float)
        if not (self.x.shape == self.y.shape == self.t.shape == self.elev.shape == (n,)):
            raise ValueError("point columns must be 1-d and of equal length")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y))
                and np.all(np.isfinite(self.t)) and np.all(np.isfinite(self.elev))):
            raise ValueError("point coordinates must be finite")
        self.step = month_steps(self.t)

    @classmethod
    def from_points(cls, points):
        points = list(points)
        return cls([p.site_id for p in points], [p.easting for p in points],
                   [p.northing for p in points], [p.time for p in points],
                   [p.elevation for p in points])

    def __len__(self):
        return self.site.shape[0]

    def point(self, i) -> SpaceTimePoint:
        return SpaceTimePoint(int(self.site[i]), float(self.x[i]), float(self.y[i]),
                              float(self.t[i]), float(self.elev[i]))

    def take(self, idx) -> "PointSet":
        idx = np.asarray(idx)
        return PointSet(self.site[idx], self.x[idx], self.y[idx], self.t[idx], self.elev[idx])

    @staticmethod
    def concat(a: "PointSet", b: "PointSet") -> "PointSet":
        return PointSet(np.concatenate([a.site, b.site]), np.concatenate([a.x, b.x]),
                        np.concatenate([a.y, b.y]), np.concatenate([a.t, b.t]),
                        np.concatenate([a.elev, b.elev]))

    def lags(self, i, j):
        """Spatial and temporal lags between index arrays ``i`` and ``j`` (broadcast)."""
        i = np.asarray(i)
        j = np.asarray(j)
        dx = self.x[i] - self.x[j]
        dy = self.y[i] - self.y[j]
        h_s = np.sqrt(dx * dx + dy * dy)
        if self.step is not None:
            h_t = np.abs(self.step[i] - self.step[j]) / MONTHS_PER_YEAR
        else:
            h_t = np.abs(self.t[i] - self.t[j])
        return h_s, h_t

    def distances(self, i, j, space_weight=DEFAULT_SPACE_WEIGHT):
        h_s, h_t = self.lags(i, j)
        return combined_distance(h_s, h_t, space_weight)


def canonical_order(points) -> np.ndarray:
    """Permutation sorting points by time, then easting, northing, site id.

    ``points`` may be a :class:`PointSet` or a sequence of :class:`SpaceTimePoint`.
    """
    if not isinstance(points, PointSet):
        points = PointSet.from_points(points)
    if len(points) == 0:
        raise ValueError("cannot order an empty point set")
    time_key = points.step if points.step is not None else points.t
    # lexsort: last key is primary
    return np.lexsort((points.site, points.y, points.x, time_key))


def is_canonical(points: PointSet) -> bool:
    perm = canonical_order(points)
    return bool(np.all(perm == np.arange(len(points))))
