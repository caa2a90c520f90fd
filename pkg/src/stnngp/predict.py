"""Posterior prediction on a grid, monthly-effect maps and holdout validation."""
from __future__ import annotations

import csv
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import numba
from scipy.spatial import cKDTree

from .covariance import N_RESPONSES, correlation_stack, month_correlation, sym_sqrt
from .inference import FitContext, PosteriorArchive, Priors, SamplerConfig, run_chain, stream
from .model import PHYSICAL, RESPONSES, UNITS, DataError, Dataset, Grid, TransformSpec, decode, design_mean
from .nngp import _masked_cov, weights_from_cov
from .spacetime import MONTHS_PER_YEAR, PointSet, month_time

P = N_RESPONSES
QUANTILES = (0.025, 0.5, 0.975)
SERIES_COLUMNS = ("site", "easting", "northing", "month", "year", "response", "mean", "sd", "q025", "q50", "q975",
                  "unit")
SEASONAL_COLUMNS = ("site", "calendar_month", "response", "mean", "sd", "q025", "q975")


class ArchiveMismatch(ValueError):
    pass


@dataclass
class PredictionTask:
    grid: Grid
    start_year: int
    start_month: int = 1
    n_months: int = 12
    draws: int | None = None      # archived draws to use (evenly spaced); None = all
    outputs: str = "both"         # "series", "seasonal" or "both"
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.start_month <= 12:
            raise ValueError("start_month must be in 1..12")
        if self.n_months < 1:
            raise ValueError("n_months must be >= 1")
        if self.outputs not in ("series", "seasonal", "both"):
            raise ValueError("outputs must be 'series', 'seasonal' or 'both'")
        if self.draws is not None and self.draws < 1:
            raise ValueError("draws must be >= 1")

    def calendar(self):
        k = (self.start_month - 1) + np.arange(self.n_months)
        return self.start_year + k // 12, k % 12 + 1


@dataclass
class PredictionResult:
    grid: Grid
    year: np.ndarray
    month: np.ndarray
    latent: np.ndarray      # (G, J, 3, D) model-scale draws
    physical: np.ndarray    # (G, J, 3, D) rain, tmin, tmax
    seasonal: np.ndarray | None = None  # (G, 3, 12, D)
    seconds: float = 0.0

    @staticmethod
    def _summ(x):
        q = np.quantile(x, QUANTILES, axis=-1)
        sd = np.std(x, axis=-1, ddof=1) if x.shape[-1] > 1 else np.zeros(x.shape[:-1])
        return np.mean(x, axis=-1), sd, q[0], q[1], q[2]

    def summary(self, scale="latent"):
        """``(mean, sd, q025, q50, q975)`` each shaped ``(G, J, 3)``."""
        return self._summ(self.latent if scale == "latent" else self.physical)

    def series_rows(self):
        rows = []
        lat = self.summary("latent")
        phy = self.summary("physical")
        g = self.grid
        for a in range(len(g)):
            for j in range(len(self.month)):
                base = [int(g.site_id[a]), g.easting[a], g.northing[a], int(self.month[j]), int(self.year[j])]
                for i in range(P):
                    rows.append(base + [RESPONSES[i]] + [s[a, j, i] for s in lat] + ["latent"])
                for i in range(P):
                    rows.append(base + [PHYSICAL[i]] + [s[a, j, i] for s in phy] + [UNITS[PHYSICAL[i]]])
        return rows

    def seasonal_rows(self):
        if self.seasonal is None:
            return []
        mean, sd, q025, _, q975 = self._summ(self.seasonal)
        rows = []
        for a in range(len(self.grid)):
            for k in range(12):
                for i in range(P):
                    rows.append([int(self.grid.site_id[a]), k + 1, RESPONSES[i], mean[a, i, k], sd[a, i, k],
                                 q025[a, i, k], q975[a, i, k]])
        return rows

    def write(self, out_dir):
        import os
        os.makedirs(out_dir, exist_ok=True)
        paths = []
        if self.latent is not None and self.latent.size:
            paths.append(write_table(os.path.join(out_dir, "grid_predictions.csv"), SERIES_COLUMNS,
                                     self.series_rows()))
        if self.seasonal is not None:
            paths.append(write_table(os.path.join(out_dir, "seasonal_effects.csv"), SEASONAL_COLUMNS,
                                     self.seasonal_rows()))
        return paths


def _cell(v):
    if isinstance(v, (str, int, np.integer)):
        return str(v)
    return repr(float(v))


def write_table(path, columns, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(v) for v in r])
    return path


# ------------------------------------------------------------ compatibility


def check_archive(archive: PosteriorArchive, data: Dataset, m=None, tier=None):
    man = archive.manifest
    if man.get("data_hash") != data.digest():
        raise ArchiveMismatch("archive was fitted to a different dataset (data hash differs)")
    if m is not None and man.get("m") != m:
        raise ArchiveMismatch(f"archive uses m={man.get('m')}, configuration asks for m={m}")
    if tier is not None and man.get("tier") != tier:
        raise ArchiveMismatch(f"archive uses tier {man.get('tier')}, configuration asks for tier {tier}")
    if len(archive) == 0:
        raise ArchiveMismatch("archive holds no draws")


def _fit_context(archive, data):
    cfg = archive.manifest["config"]
    sc = SamplerConfig(**{k: cfg[k] for k in ("iterations", "burn_in", "thin", "m", "tier", "seed",
                                               "space_weight", "period")})
    return FitContext(data, sc, TransformSpec(**archive.manifest["transform"]))


def draw_indices(n_archived, n_use):
    if n_use is None or n_use >= n_archived:
        return np.arange(n_archived)
    return np.unique(np.linspace(0, n_archived - 1, n_use).round().astype(np.int64))


# ---------------------------------------------------------------- geometry


@dataclass
class GridGeometry:
    """Neighbour sets of grid points among fitted points and the site's own earlier months."""
    points: PointSet          # fitted (canonical) followed by grid points
    n_fitted: int
    neighbors: np.ndarray     # (G*J, m) into ``points``, -1 padded
    counts: np.ndarray
    h_s: np.ndarray           # (G*J, m+1, m+1)
    h_t: np.ndarray
    valid: np.ndarray


def grid_geometry(fitted: PointSet, grid: Grid, year, month, m, space_weight, period) -> GridGeometry:
    n_fit = len(fitted)
    G, J = len(grid), len(month)
    t = month_time(year, month)
    gp = PointSet(np.repeat(grid.site_id, J), np.repeat(grid.easting, J), np.repeat(grid.northing, J),
                  np.tile(t, G), np.repeat(grid.elevation_m / 1000.0, J))
    allp = PointSet.concat(fitted, gp)
    if allp.step is None:
        raise DataError("prediction months must lie on the monthly grid")
    w = space_weight
    coords = np.column_stack([fitted.x * w, fitted.y * w, fitted.t])
    tree = cKDTree(coords)
    year_steps = int(round(period * MONTHS_PER_YEAR))
    k_fit = min(m, n_fit)
    nbrs = np.full((G * J, m), -1, dtype=np.int64)
    counts = np.zeros(G * J, dtype=np.int64)
    gsteps = allp.step[n_fit:]
    for a in range(G):
        for j in range(J):
            row = a * J + j
            me = n_fit + row
            q = np.array([gp.x[row] * w, gp.y[row] * w, gp.t[row]])
            dk, _ = tree.query(q, k=k_fit)
            radius = float(np.max(np.atleast_1d(dk)))
            cand = np.array(tree.query_ball_point(q, radius * (1 + 1e-12) + 1e-15), dtype=np.int64)
            own = n_fit + a * J + np.arange(j)
            cand = np.concatenate([cand, own])
            dist = allp.distances(me, cand, w)
            order = np.lexsort((cand, dist))
            sel = list(cand[order][:m])
            # annual-cycle boundary: the site's own months one year back
            forced = []
            for back in (year_steps, year_steps - 1):
                hit = np.flatnonzero(gsteps[a * J: a * J + j] == gsteps[row] - back)
                if hit.size:
                    forced.append(n_fit + a * J + int(hit[0]))
            forced = forced[: max(m - 1, 0)]
            for f in forced:
                if f in sel:
                    continue
                others = [s for s in sel if s not in forced]
                if len(sel) >= m and others:
                    far = max(others, key=lambda s: (float(allp.distances(me, s, w)), s))
                    sel.remove(far)
                sel.append(f)
            sel = np.array(sel, dtype=np.int64)
            d = allp.distances(me, sel, w)
            sel = sel[np.lexsort((sel, d))]
            nbrs[row, : len(sel)] = sel
            counts[row] = len(sel)
    me = n_fit + np.arange(G * J)
    members = np.column_stack([me, np.where(nbrs >= 0, nbrs, me[:, None])])
    valid = np.column_stack([np.ones(G * J, dtype=bool), nbrs >= 0])
    h_s, h_t = allp.lags(members[:, :, None], members[:, None, :])
    return GridGeometry(allp, n_fit, nbrs, counts, h_s, h_t, valid)


@numba.njit(cache=True)
def _sequential(values, n_fit, nbrs, counts, b, fchol, z):
    for r in range(nbrs.shape[0]):
        n = n_fit + r
        for a in range(3):
            v = 0.0
            for j in range(counts[r]):
                nb = nbrs[r, j]
                for c in range(3):
                    v += b[r, a, 3 * j + c] * values[nb, c]
            for c in range(a + 1):
                v += fchol[r, a, c] * z[r, c]
            values[n, a] = v


# ---------------------------------------------------------------- prediction


def _grid_regions(grid: Grid, tier, n_regions):
    if tier == 1:
        lab = np.ones(len(grid), dtype=np.int64)
    else:
        lab = np.asarray(grid.tiers)[:, tier - 2]
    bad = np.flatnonzero((lab < 1) | (lab > n_regions))
    if bad.size:
        raise DataError(f"grid site {int(grid.site_id[bad[0]])} has no ecoregion label in 1..{n_regions} "
                        f"at tier {tier}")
    return lab - 1


def _coincident_sites(grid: Grid, data: Dataset):
    x, y, _ = data.site_coords()
    out = np.full(len(grid), -1, dtype=np.int64)
    for a in range(len(grid)):
        hit = np.flatnonzero((x == grid.easting[a]) & (y == grid.northing[a]))
        if hit.size:
            out[a] = hit[0]
    return out


def predict_seasonal(task: PredictionTask, archive: PosteriorArchive, data: Dataset):
    """Monthly-effect draws ``(G, 3, 12, D)`` for each grid site.

    Sites coinciding with a station reuse that station's archived draws;
    elsewhere each draw comes from the cyclical prior of that posterior draw.
    """
    check_archive(archive, data)
    grid = task.grid
    idx = draw_indices(len(archive), task.draws)
    same = _coincident_sites(grid, data)
    period = archive.manifest["config"]["period"]
    out = np.zeros((len(grid), P, 12, len(idx)))
    for a in range(len(grid)):
        if same[a] >= 0:
            out[a] = np.moveaxis(archive.lam[idx, same[a]], 0, -1)
            continue
        rng = stream(task.seed, "predict", int(grid.site_id[a]), 1)
        for e, d in enumerate(idx):
            z = rng.standard_normal((P, 12))
            for i in range(P):
                s2_i = archive.column(f"sigma2_cy_{i + 1}")[d]
                if s2_i <= 0:
                    continue
                phi = archive.column(f"phi_cy_{i + 1}")[d]
                L = np.linalg.cholesky(month_correlation(phi, period))
                out[a, i, :, e] = np.sqrt(s2_i) * (L @ z[i])
    return out


def predict_series(task: PredictionTask, archive: PosteriorArchive, data: Dataset, m=None, tier=None,
                   geometry: GridGeometry | None = None) -> PredictionResult:
    """Posterior predictive draws of the three responses at every grid point and month."""
    t0 = time.perf_counter()
    check_archive(archive, data, m, tier)
    man = archive.manifest
    grid = task.grid
    if len(grid) == 0:
        raise DataError("grid has no points")
    ctx = _fit_context(archive, data)
    year, month = task.calendar()
    G, J = len(grid), len(month)
    region = _grid_regions(grid, man["tier"], man["n_regions"])
    cfg = man["config"]
    geo = geometry or grid_geometry(ctx.points, grid, year, month, man["m"], cfg["space_weight"], cfg["period"])
    idx = draw_indices(len(archive), task.draws)
    lam0 = predict_seasonal(task, archive, data)  # (G, 3, 12, D)
    spec = TransformSpec(**man["transform"])
    elev = grid.elevation_m / 1000.0
    streams = [stream(task.seed, "predict", int(grid.site_id[a]), 0) for a in range(G)]
    latent = np.zeros((G, J, P, len(idx)))
    values = np.zeros((geo.n_fitted + G * J, P))
    mon = month - 1
    for e, d in enumerate(idx):
        ps = archive.parameter_set(d)
        coreg = sym_sqrt(ps.sigma)
        corr = correlation_stack(geo.h_s, geo.h_t, ps.phi_sp, ps.phi_ti, ps.eta)
        K = _masked_cov(corr, coreg.t_matrices, geo.valid)
        b, _, fchol, _, _, _ = weights_from_cov(K, geo.n_fitted + np.arange(G * J))
        z = np.empty((G * J, P))
        eps = np.empty((G, J, P))
        for a in range(G):
            z[a * J:(a + 1) * J] = streams[a].standard_normal((J, P))
            eps[a] = streams[a].standard_normal((J, P))
        values[: geo.n_fitted] = archive.omega[d][ctx.order]
        _sequential(values, geo.n_fitted, geo.neighbors, geo.counts, b, fchol, z)
        omega0 = values[geo.n_fitted:].reshape(G, J, P)
        mean0 = design_mean(ps.beta, region, elev)  # (G, 3)
        lam = np.moveaxis(lam0[:, :, mon, e], 1, 2)  # (G, J, 3)
        latent[..., e] = mean0[:, None, :] + omega0 + lam + eps * np.sqrt(ps.sigma2_eps)
    rain, tmin, tmax = decode(np.moveaxis(latent, 3, 2), spec)
    physical = np.moveaxis(np.stack([rain, tmin, tmax], axis=-1), 2, 3)  # (G, J, 3, D)
    seasonal = lam0 if task.outputs in ("seasonal", "both") else None
    if task.outputs == "seasonal":
        latent = physical = np.zeros((G, J, P, 0))
    return PredictionResult(grid, year, month, latent, physical, seasonal, time.perf_counter() - t0)


def posterior_predictive_rows(archive: PosteriorArchive, data: Dataset, rows, seed=0, draws=None):
    """Predictive draws ``(D, R, 3)`` of the latent responses at fitted data rows."""
    check_archive(archive, data)
    rows = np.asarray(rows, dtype=np.int64)
    idx = draw_indices(len(archive), draws)
    region = data.region(archive.manifest["tier"])[rows]
    elev = data.elevation_m[rows] / 1000.0
    site = data.site_index()[rows]
    mon = data.month[rows] - 1
    rng = stream(seed, "predict", 0, 2)
    out = np.empty((len(idx), len(rows), P))
    for e, d in enumerate(idx):
        ps = archive.parameter_set(d)
        mu = design_mean(ps.beta, region, elev) + archive.omega[d][rows] + archive.lam[d][site, :, mon]
        out[e] = mu + rng.standard_normal(mu.shape) * np.sqrt(ps.sigma2_eps)
    return out


# ---------------------------------------------------------------- validation


@dataclass
class Split:
    train: Dataset              # all rows, held-out values masked
    validation_rows: np.ndarray
    excluded_regions: list = field(default_factory=list)
    retained_stations: dict = field(default_factory=dict)

    def validation(self, data: Dataset) -> Dataset:
        return data.take(self.validation_rows)


def holdout_split(data: Dataset, fraction=0.10, tier=5, seed=0) -> Split:
    """Stratified holdout of observed records by ecoregion.

    One randomly chosen station per ecoregion stays fully in training; regions
    with a single station contribute nothing.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    rng = stream(seed, "split")
    region = data.region(tier)
    site = data.site_id
    has_obs = np.isfinite(data.rain) | np.isfinite(data.tmin) | np.isfinite(data.tmax)
    chosen = []
    excluded = []
    kept = {}
    for z in range(data.n_regions(tier)):
        in_z = region == z
        stations = np.unique(site[in_z])
        if len(stations) < 2:
            excluded.append(z + 1)
            continue
        anchor = int(stations[rng.integers(len(stations))])
        kept[z + 1] = anchor
        pool = np.flatnonzero(in_z & has_obs & (site != anchor))
        n_pick = int(round(fraction * np.count_nonzero(in_z & has_obs)))
        n_pick = min(n_pick, len(pool))
        if n_pick:
            chosen.append(np.sort(rng.choice(pool, size=n_pick, replace=False)))
    rows = np.sort(np.concatenate(chosen)) if chosen else np.zeros(0, dtype=np.int64)
    rain, tmin, tmax = data.rain.copy(), data.tmin.copy(), data.tmax.copy()
    rain[rows] = tmin[rows] = tmax[rows] = np.nan
    return Split(data.with_values(rain, tmin, tmax), rows, excluded, kept)


@dataclass
class ValidationReport:
    responses: tuple
    rmse: np.ndarray
    relative: np.ndarray
    n: np.ndarray
    excluded_regions: list

    def rows(self):
        return [[r, self.rmse[i], self.relative[i], int(self.n[i])] for i, r in enumerate(self.responses)]


def rmse_table(observed, predicted, value_range):
    """Per-column RMSE and ``100 * RMSE / range``, ignoring missing observations."""
    observed = np.asarray(observed, dtype=float)
    predicted = np.asarray(predicted, dtype=float)
    ok = np.isfinite(observed)
    n = ok.sum(axis=0)
    if np.any(n == 0):
        raise ValueError("empty validation set for at least one response")
    err = np.where(ok, observed - predicted, 0.0)
    rmse = np.sqrt((err * err).sum(axis=0) / n)
    return rmse, 100.0 * rmse / np.asarray(value_range, dtype=float), n


def validate(data: Dataset, split: Split, config: SamplerConfig, priors: Priors | None = None, seed=0,
             archive: PosteriorArchive | None = None):
    """Fit on the masked training data and score predictive means at the held-out records."""
    if len(split.validation_rows) == 0:
        raise ValueError("empty validation set")
    spec = data.transform()
    if archive is None:
        archive = run_chain(split.train, config, priors, spec)
    draws = posterior_predictive_rows(archive, split.train, split.validation_rows, seed)
    rain, tmin, tmax = decode(draws, spec)
    pred = np.column_stack([rain.mean(axis=0), tmin.mean(axis=0), tmax.mean(axis=0)])
    rows = split.validation_rows
    obs = np.column_stack([data.rain[rows], data.tmin[rows], data.tmax[rows]])
    full = np.column_stack([data.rain, data.tmin, data.tmax])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        vrange = np.nanmax(full, axis=0) - np.nanmin(full, axis=0)
    rmse, rel, n = rmse_table(obs, pred, vrange)
    return ValidationReport(PHYSICAL, rmse, rel, n, split.excluded_regions), archive
