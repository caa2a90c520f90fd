"""Dense oracles and small synthetic designs shared by the test modules."""
import numpy as np
from scipy.stats import multivariate_normal

from stnngp.covariance import GneitingParams, joint_covariance, sym_sqrt
from stnngp.model import Dataset
from stnngp.nngp import build_graph, build_weight_cache, nngp_logdet_cov, nngp_precision
from stnngp.spacetime import PointSet, canonical_order, month_time


def random_spd(rng, scale=1.0):
    g = rng.standard_normal((3, 3)) * scale
    return g @ g.T + 0.05 * scale ** 2 * np.eye(3)


def random_thetas(rng):
    return [GneitingParams(rng.uniform(0.05, 0.6), rng.uniform(1.0, 30.0), rng.uniform(0, 1)) for _ in range(3)]


def random_points(rng, n, n_sites=None, months=24, extent=40.0):
    """Canonically ordered random space-time points on the monthly grid (no duplicates)."""
    n_sites = n_sites or max(2, n // 3)
    xs, ys = rng.uniform(0, extent, n_sites), rng.uniform(0, extent, n_sites)
    cells = rng.choice(n_sites * months, size=n, replace=False)
    s, k = cells // months, cells % months
    pts = PointSet(s + 1, xs[s], ys[s], month_time(2000, 1) + k / 12)
    return pts.take(canonical_order(pts))


def regular_points(n_sites, n_months, rng=None, extent=40.0):
    rng = rng or np.random.default_rng(0)
    xs, ys = rng.uniform(0, extent, n_sites), rng.uniform(0, extent, n_sites)
    s = np.repeat(np.arange(n_sites), n_months)
    k = np.tile(np.arange(n_months), n_sites)
    pts = PointSet(s + 1, xs[s], ys[s], month_time(2000, 1) + k / 12)
    return pts.take(canonical_order(pts))


def dense_logpdf(omega, points, coreg, thetas):
    cov = joint_covariance(points, coreg, thetas)
    return multivariate_normal(np.zeros(len(cov)), cov, allow_singular=False).logpdf(omega.reshape(-1))


def kl_exact_to_nngp(points, coreg, thetas, m):
    """KL( exact GP || NNGP ) for zero-mean fields on ``points``."""
    cov = joint_covariance(points, coreg, thetas)
    with np.errstate(all="ignore"):
        graph = build_graph(points, m)
    w = build_weight_cache(graph, coreg, thetas, cached=False)
    q = nngp_precision(graph, w)
    _, logdet = np.linalg.slogdet(cov)
    return 0.5 * (np.trace(q @ cov) - len(cov) + nngp_logdet_cov(w) - logdet)


def tiny_dataset(n_sites=3, n_months=12, rng=None, tiers=None):
    """Regular station records with unit-scale values (no censoring)."""
    rng = rng or np.random.default_rng(0)
    s = np.repeat(np.arange(n_sites), n_months)
    k = np.tile(np.arange(n_months), n_sites)
    xs, ys = rng.uniform(0, 30, n_sites), rng.uniform(0, 30, n_sites)
    elev = rng.uniform(0, 1500, n_sites)
    if tiers is None:
        z = (np.arange(n_sites) % 2) + 1
        tiers = np.column_stack([np.ones(n_sites, dtype=int), z, z, z])
    tmin = rng.normal(8, 3, s.size)
    return Dataset(site_id=s + 1, easting=xs[s], northing=ys[s], elevation_m=np.round(elev[s], 1),
                   tiers=np.asarray(tiers)[s], year=2000 + k // 12, month=k % 12 + 1,
                   rain=rng.gamma(2.0, 40.0, s.size) + 1.0, tmin=tmin, tmax=tmin + rng.uniform(2, 12, s.size))


def coreg_and_thetas(seed):
    rng = np.random.default_rng(seed)
    return sym_sqrt(random_spd(rng)), random_thetas(rng)


def prediction_oracle_case(n_sites=5, n_months=12, grid_xy=((12.0, 9.0), (25.0, 21.0)), draws=2000, seed=0):
    """Synthetic archive with known parameters plus the exact mixture moments of the grid predictive.

    Every archived draw shares the covariance parameters; the fitted field omega and
    the nugget variance vary by draw. With ``m`` at least the number of fitted points
    plus the grid series length, each grid site's NNGP conditional is the exact
    Gaussian conditional given all fitted points and its own earlier months, so the
    predictive mean and variance are available in closed form.
    """
    import warnings

    from stnngp.inference import FitContext, ParameterSet, PosteriorArchive, Priors, SamplerConfig, build_manifest
    from stnngp.model import Grid, design_mean
    from stnngp.simulate import reference_params

    rng = np.random.default_rng(seed)
    data = tiny_dataset(n_sites, n_months, rng)
    n_fit = len(data)
    m = n_fit + n_months - 1
    cfg = SamplerConfig(iterations=draws + 1, burn_in=1, thin=1, m=m, tier=3, seed=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ctx = FitContext(data, cfg)
    n_regions = ctx.n_regions
    p = reference_params(n_regions)
    p.phi_sp = np.array([0.15, 0.1, 0.2])
    p.sigma2_cy = np.array([0.3, 0.5, 0.2])
    p.sigma2_eps = np.array([0.05, 0.02, 0.04])
    coreg = sym_sqrt(p.sigma)
    thetas = [GneitingParams(p.phi_sp[i], p.phi_ti[i], p.eta[i]) for i in range(3)]

    cov_f = joint_covariance(ctx.points, coreg, thetas)
    L = np.linalg.cholesky(cov_f)
    omega_can = (L @ rng.standard_normal((3 * n_fit, draws))).T.reshape(draws, n_fit, 3)
    s2e = p.sigma2_eps[None, :] * rng.uniform(0.8, 1.2, (draws, 3))
    vecs = []
    for d in range(draws):
        q = p.copy()
        q.sigma2_eps = s2e[d]
        vecs.append(q.to_vector())
    manifest = build_manifest(ctx, Priors(), cfg)
    archive = PosteriorArchive(ParameterSet.names(n_regions), np.array(vecs), np.zeros(draws),
                               np.arange(2, draws + 2), omega_can[:, ctx.inverse],
                               np.zeros((draws, n_sites, 3, 12)), manifest)

    gx, gy = np.array(grid_xy, dtype=float).T
    G = len(gx)
    labels = (np.arange(G) % n_regions) + 1
    grid = Grid(np.arange(1001, 1001 + G), gx, gy, np.linspace(200.0, 900.0, G),
                np.column_stack([np.ones(G, dtype=int), labels, labels, labels]))

    # exact per-site conditional moments, mixed over the archived draws
    J = n_months
    t = month_time(2000 + np.arange(J) // 12, np.arange(J) % 12 + 1)
    mean = np.zeros((G, J, 3))
    var = np.zeros((G, J, 3))
    noise = np.zeros((G, J, 3))
    mu0 = design_mean(p.beta, labels - 1, grid.elevation_m / 1000.0)
    for a in range(G):
        gp = PointSet(np.full(J, grid.site_id[a]), np.full(J, gx[a]), np.full(J, gy[a]), t)
        allp = PointSet.concat(ctx.points, gp)
        K = joint_covariance(allp, coreg, thetas)
        f = slice(0, 3 * n_fit)
        g = slice(3 * n_fit, None)
        W = np.linalg.solve(K[f, f], K[f, g]).T
        C = K[g, g] - W @ K[f, g]
        cm = omega_can.reshape(draws, -1) @ W.T  # (D, 3J)
        cond_var = np.diag(C).reshape(J, 3)
        nv = cond_var + p.sigma2_cy + s2e.mean(axis=0)
        mean[a] = mu0[a] + cm.mean(axis=0).reshape(J, 3)
        var[a] = nv + cm.var(axis=0).reshape(J, 3)
        noise[a] = nv
    return dict(data=data, archive=archive, grid=grid, m=m, mean=mean, var=var, noise_var=noise, params=p,
                draws=draws, n_months=J)


def prediction_z_scores(latent, case):
    """Monte Carlo z-scores of predictive means and variances against the exact mixture moments."""
    D = latent.shape[-1]
    m_hat = latent.mean(axis=-1)
    v_hat = latent.var(axis=-1, ddof=1)
    z_mean = (m_hat - case["mean"]) / np.sqrt(case["noise_var"] / D)
    z_var = (v_hat - case["var"]) / (case["var"] * np.sqrt(2.0 / (D - 1)))
    return z_mean, z_var
