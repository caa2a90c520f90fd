"""Synthetic station data drawn exactly from the generative model."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .covariance import N_RESPONSES, GneitingParams, joint_covariance, month_correlation, sym_sqrt
from .inference import ParameterSet, stream
from .model import Dataset, TransformSpec, decode, design_mean
from .nngp import build_graph, build_weight_cache, sample_nngp
from .spacetime import DEFAULT_SPACE_WEIGHT, PERIOD, canonical_order

P = N_RESPONSES
DENSE_ROWS = 500


@dataclass
class SiteLayout:
    site_id: np.ndarray
    easting: np.ndarray
    northing: np.ndarray
    elevation_m: np.ndarray
    tiers: np.ndarray  # (S, 4): z2..z5

    def __len__(self):
        return len(self.site_id)


def random_layout(n_sites, rng, extent=40.0, n_regions=3, max_elev_m=2000.0):
    """Uniform stations in a square; regions are vertical bands in easting (all finer tiers equal)."""
    x = rng.uniform(0.0, extent, n_sites)
    y = rng.uniform(0.0, extent, n_sites)
    elev = rng.uniform(0.0, max_elev_m, n_sites)
    region = np.minimum((x / extent * n_regions).astype(np.int64), n_regions - 1) + 1
    # relabel so codes are contiguous even if a band is empty
    _, region = np.unique(region, return_inverse=True)
    region = region + 1
    tiers = np.column_stack([np.ones(n_sites, dtype=np.int64), region, region, region])
    return SiteLayout(np.arange(1, n_sites + 1), x, y, np.round(elev, 1), tiers)


def demo_layout(rng, n_sites=12, extent=40.0, max_elev_m=1500.0):
    """Two divisions split by easting, five nested provinces; the last province has one station."""
    x = np.sort(rng.uniform(0.0, extent, n_sites))
    y = rng.uniform(0.0, extent, n_sites)
    elev = np.round(rng.uniform(0.0, max_elev_m, n_sites), 1)
    sizes = np.array([3, 3, 2, 3, 1]) * n_sites // 12
    sizes[-1] = n_sites - sizes[:-1].sum()
    z3 = np.repeat(np.arange(1, 6), sizes)
    z2 = np.where(z3 <= 2, 1, 2)
    tiers = np.column_stack([z2, z3, z3, z3])
    return SiteLayout(np.arange(1, n_sites + 1), x, y, elev, tiers)


def grid_layout(layout: SiteLayout, n_side=3, extent=40.0, max_elev_m=1500.0, first_id=1001):
    """Regular lattice; each point takes the tier labels of its nearest station."""
    c = (np.arange(n_side) + 0.5) * extent / n_side
    gx, gy = [v.ravel() for v in np.meshgrid(c, c, indexing="xy")]
    d = (gx[:, None] - layout.easting[None]) ** 2 + (gy[:, None] - layout.northing[None]) ** 2
    near = np.argmin(d, axis=1)
    elev = np.round(np.linspace(100.0, max_elev_m, len(gx)), 1)
    return SiteLayout(first_id + np.arange(len(gx)), gx, gy, elev, layout.tiers[near])


def reference_params(n_regions=3, range_shift=0.0) -> ParameterSet:
    """Parameter values of the size reported for the Italian fit (first regions, slopes per km).

    ``range_shift`` is added to the temperature-range intercepts; with an uncentred
    range the published intercepts would censor about half of all range values.
    """
    b0 = np.array([[1.348, 0.207, 0.155], [0.741, 0.225, 0.008], [0.965, 0.094, 0.779]])
    b0[:, 2] += range_shift
    b1 = np.array([[0.029, -0.747, -0.366], [0.498, -0.322, -0.094], [0.248, -0.452, -1.073]])
    reps = int(np.ceil(n_regions / 3))
    beta = np.stack([np.tile(b0, (reps, 1))[:n_regions], np.tile(b1, (reps, 1))[:n_regions]], axis=-1)
    var = np.array([0.413, 0.050, 0.525])
    corr = np.array([[1.0, 0.210, -0.214], [0.210, 1.0, -0.493], [-0.214, -0.493, 1.0]])
    sd = np.sqrt(var)
    return ParameterSet(
        beta=beta,
        sigma2_eps=np.array([0.176, 0.008, 0.062]),
        phi_sp=np.array([0.188, 0.138, 0.431]),
        phi_ti=np.array([28.979, 9.628, 23.814]),
        eta=np.array([0.774, 0.943, 0.166]),
        sigma2_cy=np.array([0.617, 6.968, 2.799]),
        phi_cy=np.array([15.210, 10.176, 9.760]),
        sigma=corr * np.outer(sd, sd),
    )


def check_params(params: ParameterSet, n_regions):
    if params.beta.shape != (n_regions, P, 2):
        raise ValueError(f"beta must have shape ({n_regions}, 3, 2)")
    for name in ("sigma2_eps", "sigma2_cy"):
        if np.any(getattr(params, name) < 0):
            raise ValueError(f"{name} must be non-negative")
    for name in ("phi_sp", "phi_ti", "phi_cy"):
        if np.any(getattr(params, name) <= 0):
            raise ValueError(f"{name} must be positive")
    if np.any((params.eta < 0) | (params.eta > 1)):
        raise ValueError("eta must lie in [0, 1]")


@dataclass
class Simulation:
    data: Dataset
    y: np.ndarray       # latent responses, dataset row order
    omega: np.ndarray
    lam: np.ndarray     # (S, 3, 12)
    mean: np.ndarray
    params: ParameterSet
    transform: TransformSpec


def simulate(layout: SiteLayout, params: ParameterSet, transform: TransformSpec, n_months=36, start_year=2000,
             seed=0, tier=3, m=10, dense=None, space_weight=DEFAULT_SPACE_WEIGHT, period=PERIOD,
             rng=None, missing_fraction=0.0) -> Simulation:
    """Draw one synthetic dataset; omega is exact (dense) for small designs, NNGP otherwise.

    ``missing_fraction`` blanks that share of records (all three values) at random.
    """
    n_sites = len(layout)
    site_tiers = np.column_stack([np.ones(n_sites, dtype=np.int64), layout.tiers])
    n_regions = int(site_tiers[:, tier - 1].max())
    check_params(params, n_regions)
    rng = rng or stream(seed, "simulate")
    months = np.arange(n_months)
    s_idx = np.repeat(np.arange(n_sites), n_months)
    k = np.tile(months, n_sites)
    year = start_year + k // 12
    month = k % 12 + 1
    rows = dict(site_id=layout.site_id[s_idx], easting=layout.easting[s_idx], northing=layout.northing[s_idx],
                elevation_m=layout.elevation_m[s_idx], tiers=layout.tiers[s_idx], year=year, month=month)
    nan = np.full(len(s_idx), np.nan)
    skeleton = Dataset(**rows, rain=nan, tmin=nan, tmax=nan)
    n = len(skeleton)

    region = skeleton.region(tier)
    mean = design_mean(params.beta, region, skeleton.elevation_m / 1000.0)

    lam = np.zeros((n_sites, P, 12))
    for i in range(P):
        if params.sigma2_cy[i] > 0:
            cov = params.sigma2_cy[i] * month_correlation(params.phi_cy[i], period)
            lam[:, i, :] = rng.multivariate_normal(np.zeros(12), cov, size=n_sites, method="cholesky")

    omega = np.zeros((n, P))
    if np.any(np.linalg.eigvalsh(params.sigma) > 0):
        pts = skeleton.points()
        order = canonical_order(pts)
        ordered = pts.take(order)
        coreg = sym_sqrt(params.sigma)
        thetas = [GneitingParams(params.phi_sp[i], params.phi_ti[i], params.eta[i]) for i in range(P)]
        use_dense = (n <= DENSE_ROWS) if dense is None else dense
        if use_dense:
            cov = joint_covariance(ordered, coreg, thetas, dense_limit=n)
            L = np.linalg.cholesky(cov + 1e-12 * np.trace(cov) / len(cov) * np.eye(len(cov)))
            w = (L @ rng.standard_normal(3 * n)).reshape(n, P)
        else:
            graph = build_graph(ordered, m, space_weight, period)
            weights = build_weight_cache(graph, coreg, thetas)
            w = sample_nngp(graph, weights, rng.standard_normal((n, P)))
        omega[order] = w

    eps = rng.standard_normal((n, P)) * np.sqrt(params.sigma2_eps)
    y = mean + omega + lam[s_idx, :, k % 12] + eps
    rain, tmin, tmax = decode(y, transform)
    if missing_fraction > 0:
        gone = rng.random(n) < missing_fraction
        rain[gone] = tmin[gone] = tmax[gone] = np.nan
    data = Dataset(**rows, rain=rain, tmin=tmin, tmax=tmax)
    return Simulation(data, y, omega, lam, mean, params, transform)


def default_transform():
    """Unit-scale transform in the spirit of rain in tens of mm and temperatures in degrees."""
    return TransformSpec(rain_scale=50.0, tmin_center=8.0, tmin_scale=5.0, range_center=0.0, range_scale=5.0)
