"""Station data, latent response encoding and the hierarchical mean.

Latent responses on the model scale:

* ``y1`` = rain / rain_scale, censored at ``<= 0`` when rain is exactly 0;
* ``y2`` = standardised minimum temperature;
* ``y3`` = (tmax - tmin) / range_scale, censored at ``<= 0`` for a zero range.

Each latent is ``X(s) beta_z + omega + lambda + eps`` with elevation in km.
"""
from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import log_ndtr

from .spacetime import MONTHS_PER_YEAR, PointSet, month_time

CSV_COLUMNS = ("site_id", "easting_km", "northing_km", "elevation_m", "z2", "z3", "z4", "z5",
               "year", "month", "rain_mm", "tmin_c", "tmax_c")
GRID_COLUMNS = CSV_COLUMNS[:8]
RESPONSES = ("y1", "y2", "y3")
PHYSICAL = ("rain", "tmin", "tmax")
UNITS = {"rain": "mm", "tmin": "degC", "tmax": "degC"}
N_TIERS = 5

OBSERVED, CENSORED, MISSING = 0, 1, 2


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class StationRecord:
    site_id: int
    year: int
    month: int
    rain: float = math.nan
    tmin: float = math.nan
    tmax: float = math.nan

    def __post_init__(self):
        if not 1 <= self.month <= 12:
            raise DataError(f"month must be in 1..12, got {self.month}")
        if not math.isnan(self.rain) and self.rain < 0:
            raise DataError(f"negative rain {self.rain}")
        if not (math.isnan(self.tmin) or math.isnan(self.tmax)) and self.tmax < self.tmin:
            raise DataError(f"tmax {self.tmax} < tmin {self.tmin}")


@dataclass(frozen=True)
class TransformSpec:
    rain_scale: float
    tmin_center: float
    tmin_scale: float
    range_center: float
    range_scale: float

    def __post_init__(self):
        if not (self.rain_scale > 0 and self.tmin_scale > 0 and self.range_scale > 0):
            raise ValueError(f"transform scales must be positive: {self}")
        if self.range_center != 0.0:
            # zero-range censoring sits at latent 0, which needs an uncentred range
            raise ValueError("range_center must be 0")

    @classmethod
    def from_observations(cls, rain, tmin, tmax):
        rain = np.asarray(rain, dtype=float)
        tmin = np.asarray(tmin, dtype=float)
        tmax = np.asarray(tmax, dtype=float)
        r = rain[np.isfinite(rain)]
        t = tmin[np.isfinite(tmin)]
        rng = (tmax - tmin)[np.isfinite(tmax) & np.isfinite(tmin)]
        if r.size < 2 or t.size < 2 or rng.size < 2:
            raise DataError("too few observed values to fit the response transforms")
        return cls(float(np.std(r)), float(np.mean(t)), float(np.std(t)), 0.0, float(np.std(rng)))

    def to_dict(self):
        return asdict(self)

    def digest(self):
        return hashlib.sha256(repr(sorted(self.to_dict().items())).encode()).hexdigest()[:16]


def encode(rain, tmin, tmax, spec: TransformSpec):
    """Vectorised latent encoding; returns ``(y, flags)`` each shaped ``(N, 3)``.

    Censored and missing entries hold 0 in ``y``; they are imputed by the sampler.
    """
    rain = np.atleast_1d(np.asarray(rain, dtype=float))
    tmin = np.atleast_1d(np.asarray(tmin, dtype=float))
    tmax = np.atleast_1d(np.asarray(tmax, dtype=float))
    both = np.isfinite(tmin) & np.isfinite(tmax)
    if np.any(both & (tmax < tmin)):
        raise DataError("tmax < tmin")
    if np.any(np.isfinite(rain) & (rain < 0)):
        raise DataError("negative rain")
    n = rain.shape[0]
    y = np.zeros((n, 3))
    flags = np.full((n, 3), MISSING, dtype=np.int8)

    ok = np.isfinite(rain)
    pos = ok & (rain > 0)
    y[pos, 0] = rain[pos] / spec.rain_scale
    flags[pos, 0] = OBSERVED
    flags[ok & (rain == 0), 0] = CENSORED

    ok = np.isfinite(tmin)
    y[ok, 1] = (tmin[ok] - spec.tmin_center) / spec.tmin_scale
    flags[ok, 1] = OBSERVED

    with np.errstate(invalid="ignore"):
        rg = tmax - tmin
    pos = both & (rg > 0)
    y[pos, 2] = (rg[pos] - spec.range_center) / spec.range_scale
    flags[pos, 2] = OBSERVED
    flags[both & (rg == 0), 2] = CENSORED
    return y, flags


def encode_latent(record: StationRecord, spec: TransformSpec):
    y, flags = encode(record.rain, record.tmin, record.tmax, spec)
    return y[0], flags[0]


def decode(y, spec: TransformSpec):
    """Physical ``(rain, tmin, tmax)`` from latents; always rain >= 0 and tmax >= tmin."""
    y = np.asarray(y, dtype=float)
    rain = np.maximum(y[..., 0], 0.0) * spec.rain_scale
    tmin = y[..., 1] * spec.tmin_scale + spec.tmin_center
    tmax = tmin + np.maximum(y[..., 2] * spec.range_scale + spec.range_center, 0.0)
    return rain, tmin, tmax


def decode_latent(y, spec: TransformSpec):
    rain, tmin, tmax = decode(np.asarray(y, dtype=float).reshape(3), spec)
    return float(rain), float(tmin), float(tmax)


# ------------------------------------------------------------- ecoregions


def validate_tiers(z):
    """Check codes are contiguous 1..K per tier and nest into the tier above.

    ``z`` is ``(n_sites, 5)`` with column 0 the all-ones tier.
    """
    z = np.asarray(z)
    if z.ndim != 2 or z.shape[1] != N_TIERS:
        raise DataError(f"tier labels must be (sites, {N_TIERS})")
    if np.any(z[:, 0] != 1):
        raise DataError("tier 1 must be 1 for every site")
    for k in range(N_TIERS):
        codes = np.unique(z[:, k])
        if codes[0] != 1 or not np.array_equal(codes, np.arange(1, len(codes) + 1)):
            raise DataError(f"tier z{k + 1} codes must be contiguous 1..K, got {codes.tolist()}")
        if k:
            for c in codes:
                parents = np.unique(z[z[:, k] == c, k - 1])
                if len(parents) != 1:
                    raise DataError(f"tier z{k + 1} label {c} has several parents {parents.tolist()}")


def mean_value(label, beta, elevation_km):
    """``beta[z, 0] + beta[z, 1] * elevation`` for the site's region ``z`` (1-based)."""
    beta = np.asarray(beta, dtype=float)
    if not 1 <= label <= beta.shape[0]:
        raise DataError(f"unknown ecoregion label {label}")
    return beta[label - 1, 0] + beta[label - 1, 1] * elevation_km


def design_mean(beta, region, elevation_km):
    """Means for all points: ``beta`` is ``(K, 3, 2)``, ``region`` 0-based ``(N,)``."""
    return beta[region, :, 0] + beta[region, :, 1] * np.asarray(elevation_km)[:, None]


def loglik_terms(y, mu, sigma2_eps, flags):
    """Per-entry log-likelihood: normal for observed, mass below 0 for censored, 0 for missing."""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    s2 = np.broadcast_to(np.asarray(sigma2_eps, dtype=float), y.shape)
    out = np.zeros(y.shape)
    obs = flags == OBSERVED
    r = y[obs] - mu[obs]
    out[obs] = -0.5 * (math.log(2 * math.pi) + np.log(s2[obs]) + r * r / s2[obs])
    cen = flags == CENSORED
    out[cen] = log_ndtr(-mu[cen] / np.sqrt(s2[cen]))
    return out


def loglik_point(y_n, mean_n, omega_n, lambda_n, sigma2_eps, flags):
    mu = np.asarray(mean_n) + np.asarray(omega_n) + np.asarray(lambda_n)
    return float(np.sum(loglik_terms(y_n, mu, sigma2_eps, np.asarray(flags))))


# ---------------------------------------------------------------- dataset


class Dataset:
    """Monthly station records as aligned columns (one row per site-month)."""

    def __init__(self, site_id, easting, northing, elevation_m, tiers, year, month, rain, tmin, tmax):
        self.site_id = np.asarray(site_id, dtype=np.int64)
        self.easting = np.asarray(easting, dtype=float)
        self.northing = np.asarray(northing, dtype=float)
        self.elevation_m = np.asarray(elevation_m, dtype=float)
        self.tiers = np.asarray(tiers, dtype=np.int64)  # (N, 4): z2..z5
        self.year = np.asarray(year, dtype=np.int64)
        self.month = np.asarray(month, dtype=np.int64)
        self.rain = np.asarray(rain, dtype=float)
        self.tmin = np.asarray(tmin, dtype=float)
        self.tmax = np.asarray(tmax, dtype=float)
        self._validate()

    def __len__(self):
        return self.site_id.shape[0]

    def _validate(self):
        n = len(self)
        for name in ("easting", "northing", "elevation_m", "year", "month", "rain", "tmin", "tmax"):
            if getattr(self, name).shape != (n,):
                raise DataError(f"column {name} has wrong length")
        if self.tiers.shape != (n, N_TIERS - 1):
            raise DataError("tier columns must be (N, 4)")
        if n == 0:
            raise DataError("dataset is empty")
        bad = np.flatnonzero((self.month < 1) | (self.month > 12))
        if bad.size:
            raise DataError(f"row {bad[0] + 1}: month out of range")
        bad = np.flatnonzero(np.isfinite(self.rain) & (self.rain < 0))
        if bad.size:
            raise DataError(f"row {bad[0] + 1}: negative rain")
        with np.errstate(invalid="ignore"):
            bad = np.flatnonzero(self.tmax < self.tmin)
        if bad.size:
            raise DataError(f"row {bad[0] + 1}: tmax < tmin")
        key = self.site_id * 10**6 + self.year * 12 + self.month
        uniq, counts = np.unique(key, return_counts=True)
        if np.any(counts > 1):
            raise DataError("duplicate site-month records")
        sites, first = np.unique(self.site_id, return_index=True)
        idx = np.searchsorted(sites, self.site_id)
        for name in ("easting", "northing", "elevation_m"):
            col = getattr(self, name)
            bad = np.flatnonzero(col != col[first][idx])
            if bad.size:
                raise DataError(f"row {bad[0] + 1}: {name} differs from earlier rows of site {self.site_id[bad[0]]}")
        bad = np.flatnonzero(np.any(self.tiers != self.tiers[first][idx], axis=1))
        if bad.size:
            raise DataError(f"row {bad[0] + 1}: ecoregion labels differ across rows of site {self.site_id[bad[0]]}")
        validate_tiers(self.site_tiers())

    # -- per-site views
    @property
    def sites(self):
        return np.unique(self.site_id)

    def site_index(self):
        return np.searchsorted(self.sites, self.site_id)

    def _site_first(self):
        return np.unique(self.site_id, return_index=True)[1]

    def site_tiers(self):
        """``(n_sites, 5)`` labels including the all-ones tier."""
        first = self._site_first()
        return np.column_stack([np.ones(len(first), dtype=np.int64), self.tiers[first]])

    def site_coords(self):
        first = self._site_first()
        return self.easting[first], self.northing[first], self.elevation_m[first]

    def region(self, tier: int):
        """0-based region code of each row at ``tier`` (1..5)."""
        if not 1 <= tier <= N_TIERS:
            raise DataError(f"tier must be in 1..{N_TIERS}")
        return (self.site_tiers()[:, tier - 1] - 1)[self.site_index()]

    def n_regions(self, tier: int):
        return int(self.site_tiers()[:, tier - 1].max())

    def times(self):
        return month_time(self.year, self.month)

    def points(self) -> PointSet:
        return PointSet(self.site_id, self.easting, self.northing, self.times(), self.elevation_m / 1000.0)

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.site_id[idx], self.easting[idx], self.northing[idx], self.elevation_m[idx],
                       self.tiers[idx], self.year[idx], self.month[idx], self.rain[idx], self.tmin[idx],
                       self.tmax[idx])

    def with_values(self, rain, tmin, tmax) -> "Dataset":
        return Dataset(self.site_id, self.easting, self.northing, self.elevation_m, self.tiers, self.year,
                       self.month, rain, tmin, tmax)

    def transform(self) -> TransformSpec:
        return TransformSpec.from_observations(self.rain, self.tmin, self.tmax)

    def month_index(self):
        return self.month - 1

    # -- io
    @classmethod
    def read_csv(cls, path) -> "Dataset":
        with open(path, newline="", encoding="utf-8") as fh:
            return cls.from_csv_text(fh.read())

    @classmethod
    def from_csv_text(cls, text: str) -> "Dataset":
        rows = _read_rows(text, CSV_COLUMNS)
        cols = {c: [] for c in CSV_COLUMNS}
        for lineno, row in rows:
            try:
                vals = {
                    "site_id": int(row["site_id"]),
                    "easting_km": _req_float(row, "easting_km"),
                    "northing_km": _req_float(row, "northing_km"),
                    "elevation_m": _req_float(row, "elevation_m"),
                    "year": int(row["year"]),
                    "month": int(row["month"]),
                    "rain_mm": _opt_float(row["rain_mm"]),
                    "tmin_c": _opt_float(row["tmin_c"]),
                    "tmax_c": _opt_float(row["tmax_c"]),
                }
                for z in ("z2", "z3", "z4", "z5"):
                    vals[z] = int(row[z])
            except (TypeError, ValueError) as exc:
                raise DataError(f"line {lineno}: {exc}") from None
            if not 1 <= vals["month"] <= 12:
                raise DataError(f"line {lineno}: month {vals['month']} out of range")
            if math.isfinite(vals["rain_mm"]) and vals["rain_mm"] < 0:
                raise DataError(f"line {lineno}: negative rain")
            if math.isfinite(vals["tmin_c"]) and math.isfinite(vals["tmax_c"]) and vals["tmax_c"] < vals["tmin_c"]:
                raise DataError(f"line {lineno}: tmax {vals['tmax_c']} < tmin {vals['tmin_c']}")
            for c in CSV_COLUMNS:
                cols[c].append(vals[c])
        if not rows:
            raise DataError("no data rows")
        tiers = np.column_stack([cols["z2"], cols["z3"], cols["z4"], cols["z5"]])
        return cls(cols["site_id"], cols["easting_km"], cols["northing_km"], cols["elevation_m"], tiers,
                   cols["year"], cols["month"], cols["rain_mm"], cols["tmin_c"], cols["tmax_c"])

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for i in range(len(self)):
            w.writerow([int(self.site_id[i]), _fmt(self.easting[i]), _fmt(self.northing[i]),
                        _fmt(self.elevation_m[i]), *[int(v) for v in self.tiers[i]], int(self.year[i]),
                        int(self.month[i]), _fmt(self.rain[i]), _fmt(self.tmin[i]), _fmt(self.tmax[i])])
        return buf.getvalue()

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(self.to_csv_text())

    def digest(self):
        return hashlib.sha256(self.to_csv_text().encode()).hexdigest()[:16]


@dataclass
class Grid:
    """Prediction sites: coordinates, elevation and tier labels (z2..z5)."""

    site_id: np.ndarray
    easting: np.ndarray
    northing: np.ndarray
    elevation_m: np.ndarray
    tiers: np.ndarray

    def __len__(self):
        return len(self.site_id)

    @classmethod
    def read_csv(cls, path) -> "Grid":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = _read_rows(fh.read(), GRID_COLUMNS, allow_extra=True)
        if not rows:
            raise DataError("grid file has no points")
        try:
            out = cls(np.array([int(r["site_id"]) for _, r in rows]),
                      np.array([_req_float(r, "easting_km") for _, r in rows]),
                      np.array([_req_float(r, "northing_km") for _, r in rows]),
                      np.array([_req_float(r, "elevation_m") for _, r in rows]),
                      np.array([[int(r[z]) for z in ("z2", "z3", "z4", "z5")] for _, r in rows]))
        except (TypeError, ValueError) as exc:
            raise DataError(f"grid file: {exc}") from None
        if len(np.unique(out.site_id)) != len(out):
            raise DataError("grid site ids must be unique")
        return out

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(GRID_COLUMNS)
            for i in range(len(self)):
                w.writerow([int(self.site_id[i]), _fmt(self.easting[i]), _fmt(self.northing[i]),
                            _fmt(self.elevation_m[i]), *[int(v) for v in self.tiers[i]]])


def _read_rows(text, columns, allow_extra=False):
    reader = csv.DictReader(io.StringIO(text))
    header = reader.fieldnames
    if header is None:
        raise DataError("missing header row")
    header = [h.strip() for h in header]
    missing = [c for c in columns if c not in header]
    if missing:
        raise DataError(f"missing columns: {', '.join(missing)}")
    extra = [c for c in header if c not in columns]
    if extra and not allow_extra:
        raise DataError(f"unexpected columns: {', '.join(extra)}")
    reader.fieldnames = header
    return [(i + 2, {k: (v.strip() if isinstance(v, str) else v) for k, v in row.items()})
            for i, row in enumerate(reader)]


def _req_float(row, name):
    v = row[name]
    if v is None or v == "":
        raise ValueError(f"{name} is required")
    out = float(v)
    if not math.isfinite(out):
        raise ValueError(f"{name} must be finite")
    return out


def _opt_float(v):
    if v is None or v == "":
        return math.nan
    return float(v)


def _fmt(v):
    return "" if not np.isfinite(v) else repr(float(v))


def steps_of(year, month):
    return np.asarray(year) * MONTHS_PER_YEAR + np.asarray(month) - 1
