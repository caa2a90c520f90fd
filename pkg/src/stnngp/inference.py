"""MCMC for the hierarchical NNGP model.

One iteration runs five blocks in a fixed order:

1. augmentation of missing and censored latent responses;
2. regression coefficients (conjugate draw plus an exact location-shift move
   that trades level between beta, the monthly effects and omega);
3. monthly effects lambda, one 12-dimensional conjugate draw per site/response;
4. omega, a coloured Gibbs sweep over the neighbour graph;
5. variance and correlation parameters (conjugate for the variances,
   adaptive random-walk Metropolis for the rest).

All randomness comes from one counter-based generator; the omega sweep uses
noise drawn up front, so results do not depend on the number of threads.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import pickle
import warnings
from dataclasses import asdict, dataclass, field

import numba
import numpy as np
from scipy.special import log_ndtr, ndtri_exp

from . import __version__
from .covariance import N_RESPONSES, gneiting, month_correlation, sym_sqrt
from .model import CENSORED, MISSING, OBSERVED, Dataset, TransformSpec, design_mean, encode, loglik_terms
from .nngp import (NeighborGraph, NumericalError, WeightCache, apply_precision, build_graph, color_classes,
                   coneighbors, nngp_logdensity, sample_nngp, whiten)
from .spacetime import DEFAULT_SPACE_WEIGHT, PERIOD, canonical_order

log = logging.getLogger(__name__)

P = N_RESPONSES
MONTHS = 12
STREAMS = {"fit": 1, "simulate": 2, "split": 3, "predict": 4}
_IDX = np.arange(P)


def stream(seed: int, name: str, *key: int) -> np.random.Generator:
    """Independent counter-based generator for a named substream."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), STREAMS[name], *key])))


# ------------------------------------------------------------------ config


def _km_to_years(km, space_weight=DEFAULT_SPACE_WEIGHT):
    return km * space_weight


@dataclass
class Priors:
    beta_var: float = 100.0
    sigma2_shape: float = 2.0
    sigma2_rate: float = 1.0
    # uniform supports; practical ranges between 1 km and 2000 km (time via the space weight)
    phi_sp: tuple = (3.0 / 2000.0, 3.0)
    phi_ti: tuple = (19.0 / _km_to_years(2000.0) ** 2, 19.0 / _km_to_years(1.0) ** 2)
    phi_cy: tuple = (3.0 / _km_to_years(2000.0), 3.0 / _km_to_years(1.0))
    eta: tuple = (0.0, 1.0)
    iw_df: float = 4.0
    iw_scale: float = 1.0

    def __post_init__(self):
        self.phi_sp, self.phi_ti, self.phi_cy, self.eta = (tuple(float(v) for v in x) for x in
                                                           (self.phi_sp, self.phi_ti, self.phi_cy, self.eta))
        for name in ("phi_sp", "phi_ti", "phi_cy"):
            lo, hi = getattr(self, name)
            if not (0 < lo < hi and math.isfinite(hi)):
                raise ValueError(f"prior range {name} must satisfy 0 < lo < hi < inf")
        if not (0.0 <= self.eta[0] < self.eta[1] <= 1.0):
            raise ValueError("eta prior range must lie in [0, 1]")
        if not (self.beta_var > 0 and self.sigma2_shape > 0 and self.sigma2_rate > 0 and self.iw_scale > 0):
            raise ValueError("prior hyperparameters must be positive")
        if self.iw_df <= P - 1:
            raise ValueError(f"inverse-Wishart degrees of freedom must exceed {P - 1}")


@dataclass
class SamplerConfig:
    iterations: int = 100_000
    burn_in: int = 70_000
    thin: int = 12
    m: int = 10
    tier: int = 3
    seed: int = 0
    space_weight: float = DEFAULT_SPACE_WEIGHT
    period: float = PERIOD
    adapt_every: int = 50
    target_accept: float = 0.3
    threads: int = 1

    def __post_init__(self):
        if not (0 <= self.burn_in < self.iterations):
            raise ValueError("burn_in must satisfy 0 <= burn_in < iterations")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if not 1 <= self.tier <= 5:
            raise ValueError("tier must be in 1..5")
        if self.space_weight <= 0 or self.period <= 0:
            raise ValueError("space_weight and period must be positive")

    @property
    def n_draws(self):
        return (self.iterations - self.burn_in) // self.thin

    def model_key(self):
        return {"m": self.m, "tier": self.tier, "space_weight": self.space_weight, "period": self.period}


# ---------------------------------------------------------------- parameters


@dataclass
class ParameterSet:
    beta: np.ndarray        # (K, 3, 2): intercept, slope per km
    sigma2_eps: np.ndarray  # (3,)
    phi_sp: np.ndarray
    phi_ti: np.ndarray
    eta: np.ndarray
    sigma2_cy: np.ndarray
    phi_cy: np.ndarray
    sigma: np.ndarray       # (3, 3)

    def copy(self):
        return ParameterSet(*(np.array(getattr(self, f)) for f in self.__dataclass_fields__))

    @staticmethod
    def names(n_regions):
        out = [f"beta{c}_{r + 1}_{i + 1}" for r in range(n_regions) for i in range(P) for c in (0, 1)]
        for f in ("sigma2_eps", "phi_sp", "phi_ti", "eta", "phi_cy", "sigma2_cy"):
            out += [f"{f}_{i + 1}" for i in range(P)]
        out += [f"sigma_{a + 1}{b + 1}" for a in range(P) for b in range(a, P)]
        return out

    def to_vector(self):
        iu = np.triu_indices(P)
        return np.concatenate([self.beta.reshape(-1), self.sigma2_eps, self.phi_sp, self.phi_ti, self.eta,
                               self.phi_cy, self.sigma2_cy, self.sigma[iu]])

    @classmethod
    def from_vector(cls, v, n_regions):
        v = np.asarray(v, dtype=float)
        k = n_regions * P * 2
        beta = v[:k].reshape(n_regions, P, 2)
        rest = v[k:]
        parts = [rest[i * P:(i + 1) * P] for i in range(6)]
        sigma = np.zeros((P, P))
        iu = np.triu_indices(P)
        sigma[iu] = rest[6 * P:]
        sigma = sigma + np.triu(sigma, 1).T
        s2e, psp, pti, eta, pcy, s2cy = parts
        return cls(beta.copy(), s2e.copy(), psp.copy(), pti.copy(), eta.copy(), s2cy.copy(), pcy.copy(), sigma)


# ------------------------------------------------------------------ context


class FitContext:
    """Data in canonical point order plus all structures fixed during a fit."""

    def __init__(self, data: Dataset, config: SamplerConfig, transform: TransformSpec | None = None):
        self.data = data
        self.config = config
        self.transform = transform or data.transform()
        pts = data.points()
        self.order = canonical_order(pts)
        self.inverse = np.argsort(self.order)
        self.points = pts.take(self.order)
        d = data.take(self.order)
        self.y_obs, self.flags = encode(d.rain, d.tmin, d.tmax, self.transform)
        self.n = len(d)
        self.site = d.site_index()
        self.n_sites = len(data.sites)
        self.month = d.month_index()
        self.region = d.region(config.tier)
        self.n_regions = data.n_regions(config.tier)
        self.elev = d.elevation_m / 1000.0
        _, _, site_elev_m = data.site_coords()
        self.site_elev = site_elev_m / 1000.0
        self.site_region = data.site_tiers()[:, config.tier - 1] - 1
        empty = np.setdiff1d(np.arange(self.n_regions), self.site_region)
        if empty.size:
            warnings.warn(f"ecoregions {list(empty + 1)} have no stations; their coefficients follow the prior")

        with warnings.catch_warnings():
            warnings.simplefilter("ignore") if config.m in (10, 15, 20) else None
            self.graph: NeighborGraph = build_graph(self.points, config.m, config.space_weight, config.period)
        self.cache = WeightCache(self.graph, cached=True)
        self.co_ptr, self.co_k, self.co_pos = coneighbors(self.graph)
        colors = color_classes(self.graph)
        self.color_ptr = np.cumsum([0] + [len(c) for c in colors]).astype(np.int64)
        self.color_pts = np.concatenate(colors).astype(np.int64)

        # regression design
        X = np.column_stack([np.ones(self.n), self.elev])
        self.xtx = np.zeros((self.n_regions, 2, 2))
        np.add.at(self.xtx, self.region, X[:, :, None] * X[:, None, :])
        self.X = X
        # per site-month counts for lambda
        self.site_month = self.site * MONTHS + self.month
        self.sm_counts = np.bincount(self.site_month, minlength=self.n_sites * MONTHS).reshape(self.n_sites, MONTHS)
        # distances between calendar months on the circle
        self.month_d = -np.log(month_correlation(1.0, config.period, MONTHS))
        self.missing = self.flags == MISSING
        self.censored = self.flags == CENSORED
        self.observed = self.flags == OBSERVED
        # shift-move directions
        self._site_points = [np.flatnonzero(self.site == s) for s in range(self.n_sites)]

    def mean(self, beta):
        return design_mean(beta, self.region, self.elev)

    def lam_at_points(self, lam):
        """``(N, 3)`` monthly effects at each point from ``(S, 3, 12)``."""
        return lam[self.site, :, self.month]

    def loglik(self, y, mu, sigma2_eps):
        """Observed-data log-likelihood (missing entries excluded)."""
        return float(np.sum(loglik_terms(y, mu, sigma2_eps, self.flags)))

    def digest(self):
        return self.data.digest()


@dataclass
class ChainState:
    y: np.ndarray
    omega: np.ndarray
    lam: np.ndarray
    params: ParameterSet
    coreg: object = None
    corr: np.ndarray = None
    weights: object = None
    ld: float = 0.0

    def refresh(self, ctx: FitContext):
        self.coreg = sym_sqrt(self.params.sigma)
        self.corr = ctx.cache.correlations(self.params.phi_sp, self.params.phi_ti, self.params.eta)
        self.weights = ctx.cache.weights_from_corr(self.corr, self.coreg.t_matrices)
        self.ld = nngp_logdensity(self.omega, ctx.graph, self.weights)


def default_init(ctx: FitContext, priors: Priors) -> ChainState:
    """Data-driven starting point."""
    y = ctx.y_obs.copy()
    for i in range(P):
        obs = ctx.observed[:, i]
        fill = np.mean(y[obs, i]) if obs.any() else 0.0
        y[ctx.missing[:, i], i] = fill
        y[ctx.censored[:, i], i] = -0.1
    beta = np.zeros((ctx.n_regions, P, 2))
    for r in range(ctx.n_regions):
        sel = ctx.region == r
        if sel.sum() >= 2:
            A = ctx.xtx[r] + 1e-6 * np.eye(2)
            beta[r] = np.linalg.solve(A, ctx.X[sel].T @ y[sel]).T
    resid = y - ctx.mean(beta)
    lam = np.zeros((ctx.n_sites, P, MONTHS))
    sums = np.zeros((ctx.n_sites * MONTHS, P))
    np.add.at(sums, ctx.site_month, resid)
    cnt = ctx.sm_counts.reshape(-1, 1)
    lam = (0.5 * sums / np.maximum(cnt, 1)).reshape(ctx.n_sites, MONTHS, P).transpose(0, 2, 1)
    v = np.var(resid - ctx.lam_at_points(lam), axis=0) + 1e-3
    pts = ctx.points
    xs, ys = np.unique(np.column_stack([pts.x, pts.y]), axis=0).T
    dist = np.sqrt((xs[:, None] - xs[None]) ** 2 + (ys[:, None] - ys[None]) ** 2)
    med = np.median(dist[dist > 0]) if np.any(dist > 0) else 10.0
    clip = lambda x, rng: np.clip(x, rng[0] * 1.01, rng[1] / 1.01)
    params = ParameterSet(
        beta=beta,
        sigma2_eps=0.5 * v,
        phi_sp=np.full(P, clip(3.0 / med, priors.phi_sp)),
        phi_ti=np.full(P, clip(19.0 / 0.25, priors.phi_ti)),
        eta=np.full(P, 0.5),
        sigma2_cy=np.maximum(np.var(lam, axis=(0, 2)), 0.05),
        phi_cy=np.full(P, clip(12.0, priors.phi_cy)),
        sigma=np.diag(0.5 * v),
    )
    return ChainState(y, np.zeros((ctx.n, P)), lam, params)


# ------------------------------------------------------------------ blocks


def update_augmented(state: ChainState, ctx: FitContext, rng):
    """Impute missing latents from the model and censored ones from the normal truncated to (-inf, 0]."""
    p = state.params
    mu = ctx.mean(p.beta) + state.omega + ctx.lam_at_points(state.lam)
    sd = np.broadcast_to(np.sqrt(p.sigma2_eps), mu.shape)
    z = rng.standard_normal(mu.shape)
    u = rng.random(mu.shape)
    y = state.y
    miss = ctx.missing
    y[miss] = mu[miss] + sd[miss] * z[miss]
    cen = ctx.censored
    if cen.any():
        y[cen] = truncated_below_zero(mu[cen], sd[cen], u[cen])
    return y


def truncated_below_zero(mu, sd, u):
    """Inverse-CDF draw from N(mu, sd^2) restricted to (-inf, 0], stable in the far tail."""
    logp = np.log(u) + log_ndtr(-mu / sd)
    x = mu + sd * ndtri_exp(logp)
    return np.minimum(x, 0.0)


def beta_conditional(state: ChainState, ctx: FitContext, priors: Priors):
    """Mean and precision of each (region, response) coefficient pair."""
    p = state.params
    r = state.y - state.omega - ctx.lam_at_points(state.lam)
    xtr = np.zeros((ctx.n_regions, P, 2))
    np.add.at(xtr, ctx.region, r[:, :, None] * ctx.X[:, None, :])
    prec = ctx.xtx[:, None] / p.sigma2_eps[None, :, None, None] + np.eye(2) / priors.beta_var
    rhs = xtr / p.sigma2_eps[None, :, None]
    mean = np.linalg.solve(prec, rhs[..., None])[..., 0]
    return mean, prec


def update_beta(state: ChainState, ctx: FitContext, priors: Priors, rng):
    mean, prec = beta_conditional(state, ctx, priors)
    L = np.linalg.cholesky(prec)
    z = rng.standard_normal(mean.shape)
    # x = mean + L^-T z
    step = np.linalg.solve(np.swapaxes(L, -1, -2), z[..., None])[..., 0]
    state.params.beta = mean + step
    return state.params.beta


def lambda_conditional(state: ChainState, ctx: FitContext):
    """Per-site posterior precision ``(3, S, 12, 12)`` and right-hand side ``(3, S, 12)``."""
    p = state.params
    r = state.y - ctx.mean(p.beta) - state.omega
    sums = np.zeros((ctx.n_sites * MONTHS, P))
    np.add.at(sums, ctx.site_month, r)
    sums = sums.reshape(ctx.n_sites, MONTHS, P).transpose(2, 0, 1)
    prec = np.empty((P, ctx.n_sites, MONTHS, MONTHS))
    for i in range(P):
        prior_prec = np.linalg.inv(p.sigma2_cy[i] * np.exp(-p.phi_cy[i] * ctx.month_d))
        prec[i] = prior_prec[None] + ctx.sm_counts[:, :, None] * np.eye(MONTHS) / p.sigma2_eps[i]
    rhs = sums / p.sigma2_eps[:, None, None]
    return prec, rhs


def update_lambda(state: ChainState, ctx: FitContext, priors: Priors, rng):
    prec, rhs = lambda_conditional(state, ctx)
    L = np.linalg.cholesky(prec)
    mean = np.linalg.solve(prec, rhs[..., None])[..., 0]
    z = rng.standard_normal(mean.shape)
    step = np.linalg.solve(np.swapaxes(L, -1, -2), z[..., None])[..., 0]
    state.lam = (mean + step).transpose(1, 0, 2).copy()
    return state.lam


def _shift_directions(ctx: FitContext):
    n_b = ctx.n_regions * P * 2
    n_c = ctx.n_sites * P
    return n_b, n_c


def update_shift(state: ChainState, ctx: FitContext, priors: Priors, rng):
    """Exact Gaussian move along directions that leave the fitted mean unchanged.

    Directions: (beta_{z,i,c} + d, lambda_{s,i,.} - X_c(s) d for sites in z) and
    (lambda_{s,i,.} + d, omega_{s,i} - d). Along them only the beta, lambda and
    omega priors vary, so the conditional of the shift is Gaussian.
    """
    p = state.params
    n_b, n_c = _shift_directions(ctx)
    dim = n_b + n_c
    M = np.zeros((dim, dim))
    h = np.zeros(dim)
    # beta prior
    M[np.arange(n_b), np.arange(n_b)] += 1.0 / priors.beta_var
    h[:n_b] -= p.beta.reshape(-1) / priors.beta_var
    # lambda prior: the site/response effect moves by a constant a = g . delta
    for i in range(P):
        prior_prec = np.linalg.inv(p.sigma2_cy[i] * np.exp(-p.phi_cy[i] * ctx.month_d))
        kappa = prior_prec.sum()
        gl = state.lam[:, i, :] @ prior_prec.sum(axis=0)  # 1' P lambda_s
        for s in range(ctx.n_sites):
            z = ctx.site_region[s]
            g = np.zeros(dim)
            g[n_b + s * P + i] = 1.0
            g[(z * P + i) * 2] = -1.0
            g[(z * P + i) * 2 + 1] = -ctx.site_elev[s]
            nz = np.flatnonzero(g)
            M[np.ix_(nz, nz)] += kappa * np.outer(g[nz], g[nz])
            h[nz] -= gl[s] * g[nz]
    # omega prior: omega moves by -U delta_c
    U = np.zeros((ctx.n, P, n_c))
    cols = ctx.site * P
    for i in range(P):
        U[np.arange(ctx.n), i, cols + i] = 1.0
    QU = apply_precision(U, ctx.graph, state.weights)
    # U' V sums the rows of V over each site's points
    UQU = np.zeros((ctx.n_sites, P, n_c))
    np.add.at(UQU, ctx.site, QU)
    M[n_b:, n_b:] += UQU.reshape(n_c, n_c)
    h[n_b:] += np.einsum("nac,na->c", QU, state.omega)
    M = 0.5 * (M + M.T)
    L = np.linalg.cholesky(M)
    mean = np.linalg.solve(M, h)
    delta = mean + np.linalg.solve(L.T, rng.standard_normal(dim))
    db = delta[:n_b].reshape(ctx.n_regions, P, 2)
    dc = delta[n_b:].reshape(ctx.n_sites, P)
    p.beta = p.beta + db
    a = dc - db[ctx.site_region, :, 0] - db[ctx.site_region, :, 1] * ctx.site_elev[:, None]
    state.lam = state.lam + a[:, :, None]
    state.omega = state.omega - dc[ctx.site]
    state.ld = nngp_logdensity(state.omega, ctx.graph, state.weights)


@numba.njit(cache=True)
def _chol3(a, L):
    for j in range(3):
        d = a[j, j]
        for k in range(j):
            d -= L[j, k] * L[j, k]
        if not d > 0.0:
            return False
        d = math.sqrt(d)
        L[j, j] = d
        for i in range(j + 1, 3):
            v = a[i, j]
            for k in range(j):
                v -= L[i, k] * L[j, k]
            L[i, j] = v / d
        for i in range(j):
            L[i, j] = 0.0
    return True


@numba.njit(parallel=True, cache=True)
def _omega_color(pts, omega, nbrs, counts, slot, b, finv, co_ptr, co_k, co_pos, dinv, resid, z, status):
    for ii in numba.prange(pts.shape[0]):
        n = pts[ii]
        Pm = np.zeros((3, 3))
        h = np.zeros(3)
        mu = np.zeros(3)
        rk = np.zeros(3)
        G = np.zeros((3, 3))
        L = np.zeros((3, 3))
        s = slot[n]
        for a in range(3):
            v = 0.0
            for j in range(counts[n]):
                nb = nbrs[n, j]
                for c in range(3):
                    v += b[s, a, 3 * j + c] * omega[nb, c]
            mu[a] = v
        for a in range(3):
            for c in range(3):
                Pm[a, c] += finv[s, a, c]
                h[a] += finv[s, a, c] * mu[c]
        for e in range(co_ptr[n], co_ptr[n + 1]):
            k = co_k[e]
            pos = co_pos[e]
            sk = slot[k]
            for a in range(3):
                v = omega[k, a]
                for j in range(counts[k]):
                    if j == pos:
                        continue
                    nb = nbrs[k, j]
                    for c in range(3):
                        v -= b[sk, a, 3 * j + c] * omega[nb, c]
                rk[a] = v
            # G = B_kn' F_k^-1
            for a in range(3):
                for c in range(3):
                    v = 0.0
                    for d in range(3):
                        v += b[sk, d, 3 * pos + a] * finv[sk, d, c]
                    G[a, c] = v
            for a in range(3):
                for c in range(3):
                    v = 0.0
                    for d in range(3):
                        v += G[a, d] * b[sk, d, 3 * pos + c]
                    Pm[a, c] += v
                v = 0.0
                for d in range(3):
                    v += G[a, d] * rk[d]
                h[a] += v
        for a in range(3):
            Pm[a, a] += dinv[a]
            h[a] += dinv[a] * resid[n, a]
        if not _chol3(Pm, L):
            status[0] = n + 1
            continue
        # mean = P^-1 h via L
        w = np.zeros(3)
        for a in range(3):
            v = h[a]
            for c in range(a):
                v -= L[a, c] * w[c]
            w[a] = v / L[a, a]
        # x = L^-T (w + z)
        x = np.zeros(3)
        for a in range(2, -1, -1):
            v = w[a] + z[n, a]
            for c in range(a + 1, 3):
                v -= L[c, a] * x[c]
            x[a] = v / L[a, a]
        for a in range(3):
            omega[n, a] = x[a]


def update_omega(state: ChainState, ctx: FitContext, rng):
    """Coloured Gibbs sweep of the 3-vectors omega_n."""
    p = state.params
    resid = np.ascontiguousarray(state.y - ctx.mean(p.beta) - ctx.lam_at_points(state.lam))
    z = rng.standard_normal((ctx.n, P))
    dinv = 1.0 / p.sigma2_eps
    w = state.weights
    status = np.zeros(1, dtype=np.int64)
    omega = np.ascontiguousarray(state.omega)
    g = ctx.graph
    for c in range(len(ctx.color_ptr) - 1):
        pts = ctx.color_pts[ctx.color_ptr[c]: ctx.color_ptr[c + 1]]
        _omega_color(pts, omega, g.neighbors, g.counts, w.slot, w.b, w.f_inv, ctx.co_ptr, ctx.co_k,
                     ctx.co_pos, dinv, resid, z, status)
    if status[0]:
        raise NumericalError(f"omega full conditional not positive definite at point {status[0] - 1}")
    state.omega = omega
    state.ld = nngp_logdensity(omega, g, w)
    return omega


class RWBlock:
    """Adaptive Gaussian random walk on an unconstrained vector."""

    def __init__(self, name, dim, scale=0.1, target=0.3):
        self.name = name
        self.dim = dim
        self.log_scale = math.log(scale)
        self.chol = np.eye(dim)
        self.target = target
        self.history = []
        self.n_prop = 0
        self.n_acc = 0
        self.window_acc = 0
        self.window_n = 0

    def propose(self, x, rng):
        return x + math.exp(self.log_scale) * (self.chol @ rng.standard_normal(self.dim))

    def record(self, accepted, x, adapting, every):
        self.n_prop += 1
        self.n_acc += int(accepted)
        if not adapting:
            return
        self.window_n += 1
        self.window_acc += int(accepted)
        self.history.append(np.array(x))
        if self.window_n >= every:
            rate = self.window_acc / self.window_n
            self.log_scale += (rate - self.target) * 2.0 / math.sqrt(1.0 + self.n_prop / every)
            self.window_acc = self.window_n = 0
            if self.dim > 1 and len(self.history) >= 10 * self.dim:
                hist = np.array(self.history[-2000:])
                cov = np.cov(hist.T) + 1e-8 * np.eye(self.dim)
                scale0 = math.exp(self.log_scale)
                try:
                    chol = np.linalg.cholesky(cov)
                except np.linalg.LinAlgError:
                    return
                # keep the current overall step length when switching shape
                norm = math.sqrt(np.trace(cov) / self.dim)
                self.chol = chol / norm
                self.log_scale = math.log(scale0)

    @property
    def acceptance(self):
        return self.n_acc / self.n_prop if self.n_prop else float("nan")

    def freeze(self):
        self.history = []


def _logit(x):
    return math.log(x) - math.log1p(-x)


def _expit(u):
    return 1.0 / (1.0 + math.exp(-u)) if u >= 0 else math.exp(u) / (1.0 + math.exp(u))


def _in(x, rng):
    return rng[0] <= x <= rng[1]


def _iw_logpdf(sigma, df, scale):
    sign, logdet = np.linalg.slogdet(sigma)
    if sign <= 0:
        return -math.inf
    return -0.5 * (df + P + 1) * logdet - 0.5 * scale * np.trace(np.linalg.inv(sigma))


def _cholesky_params(sigma):
    L = np.linalg.cholesky(sigma)
    u = L[np.tril_indices(P)].copy()
    diag_pos = [i * (i + 1) // 2 + i for i in range(P)]
    u[diag_pos] = np.log(np.diag(L))
    return u


def _sigma_from_params(u):
    L = np.zeros((P, P))
    L[np.tril_indices(P)] = u
    d = np.exp(np.diag(L))
    L[np.diag_indices(P)] = d
    return L @ L.T, d


def _cyc_loglik(lam_i, sigma2, phi, month_d):
    R = np.exp(-phi * month_d)
    c = np.linalg.cholesky(R)
    sol = np.linalg.solve(c, lam_i.T)
    quad = np.sum(sol * sol)
    n = lam_i.shape[0]
    logdet = 2.0 * np.sum(np.log(np.diag(c)))
    return -0.5 * quad / sigma2 - 0.5 * n * (MONTHS * math.log(sigma2) + logdet), quad


def make_blocks(target):
    blocks = {f"phi_cy_{i + 1}": RWBlock(f"phi_cy_{i + 1}", 1, 0.3, target) for i in range(P)}
    for kind in ("", "nc_"):
        blocks.update({f"theta_{kind}{i + 1}": RWBlock(f"theta_{kind}{i + 1}", 3, 0.15, target) for i in range(P)})
        blocks[f"sigma{'_nc' if kind else ''}"] = RWBlock("sigma", 6, 0.05, target)
    return blocks


def update_covariance_params(state: ChainState, ctx: FitContext, priors: Priors, rng, blocks, adapting):
    """Variances by conjugate draws; correlation parameters and Sigma by random-walk Metropolis."""
    p = state.params
    cfg = ctx.config
    a0, b0 = priors.sigma2_shape, priors.sigma2_rate
    # nugget variances
    r = state.y - ctx.mean(p.beta) - state.omega - ctx.lam_at_points(state.lam)
    ss = np.sum(r * r, axis=0)
    p.sigma2_eps = 1.0 / rng.gamma(a0 + 0.5 * ctx.n, 1.0 / (b0 + 0.5 * ss))
    # cyclical variance (conjugate given the decay) and decay (random walk on log scale)
    for i in range(P):
        lam_i = state.lam[:, i, :]
        _, quad = _cyc_loglik(lam_i, 1.0, p.phi_cy[i], ctx.month_d)
        p.sigma2_cy[i] = 1.0 / rng.gamma(a0 + 0.5 * MONTHS * ctx.n_sites, 1.0 / (b0 + 0.5 * quad))
        blk = blocks[f"phi_cy_{i + 1}"]
        x = np.array([math.log(p.phi_cy[i])])
        xp = blk.propose(x, rng)
        phi_new = math.exp(xp[0])
        acc = False
        if _in(phi_new, priors.phi_cy):
            cur, _ = _cyc_loglik(lam_i, p.sigma2_cy[i], p.phi_cy[i], ctx.month_d)
            new, _ = _cyc_loglik(lam_i, p.sigma2_cy[i], phi_new, ctx.month_d)
            if math.log(rng.random()) < new + xp[0] - cur - x[0]:
                p.phi_cy[i] = phi_new
                acc = True
        else:
            rng.random()
        blk.record(acc, np.array([math.log(p.phi_cy[i])]), adapting, cfg.adapt_every)

    for i in range(P):
        _theta_step(state, ctx, priors, rng, blocks[f"theta_{i + 1}"], i, adapting, centred=True)
    _sigma_step(state, ctx, priors, rng, blocks["sigma"], adapting, centred=True)
    # interweaved steps with the whitened innovations held fixed
    resid = state.y - ctx.mean(p.beta) - ctx.lam_at_points(state.lam)
    for i in range(P):
        _theta_step(state, ctx, priors, rng, blocks[f"theta_nc_{i + 1}"], i, adapting, centred=False, resid=resid)
    _sigma_step(state, ctx, priors, rng, blocks["sigma_nc"], adapting, centred=False, resid=resid)


def _data_loglik(resid, omega, sigma2_eps):
    r = resid - omega
    return -0.5 * float(np.sum(r * r / sigma2_eps))


def _try_weights(ctx, corr, t_matrices):
    try:
        return ctx.cache.weights_from_corr(corr, t_matrices)
    except NumericalError:
        return None


def _theta_x(p, i):
    return np.array([math.log(p.phi_sp[i]), math.log(p.phi_ti[i]), _logit(p.eta[i])])


def _theta_jac(v):
    e = _expit(v[2])
    return v[0] + v[1] + math.log(e) + math.log1p(-e)


def _accept(state, ctx, corr, coreg, w, omega):
    state.corr, state.coreg, state.weights = corr, coreg, w
    if omega is not None:
        state.omega = omega
    state.ld = nngp_logdensity(state.omega, ctx.graph, w)


def _theta_step(state, ctx, priors, rng, blk, i, adapting, centred, resid=None):
    """Random walk on (log phi_sp, log phi_ti, logit eta) of component ``i``.

    Centred: omega held fixed, target is the NNGP density of omega.
    Non-centred: the whitened innovations are held fixed and omega moves with
    the weights, so the target is the data likelihood given the implied omega.
    """
    p = state.params
    x = _theta_x(p, i)
    xp = blk.propose(x, rng)
    u = rng.random()
    psp, pti, eta = math.exp(xp[0]), math.exp(xp[1]), _expit(xp[2])
    acc = False
    if (_in(psp, priors.phi_sp) and _in(pti, priors.phi_ti) and _in(eta, priors.eta) and 0.0 < eta < 1.0):
        corr = state.corr.copy()
        corr[i] = gneiting(ctx.cache.h_s, ctx.cache.h_t, psp, pti, eta)
        w = _try_weights(ctx, corr, state.coreg.t_matrices)
        if w is not None:
            if centred:
                omega_new = None
                new = nngp_logdensity(state.omega, ctx.graph, w)
                cur = state.ld
            else:
                z = whiten(state.omega, ctx.graph, state.weights)
                omega_new = sample_nngp(ctx.graph, w, z)
                new = _data_loglik(resid, omega_new, p.sigma2_eps)
                cur = _data_loglik(resid, state.omega, p.sigma2_eps)
            if math.log(u) < new + _theta_jac(xp) - cur - _theta_jac(x):
                p.phi_sp[i], p.phi_ti[i], p.eta[i] = psp, pti, eta
                _accept(state, ctx, corr, state.coreg, w, omega_new)
                acc = True
    blk.record(acc, _theta_x(p, i), adapting, ctx.config.adapt_every)


def _sigma_logprior(sigma, d, priors):
    expo = np.arange(P + 1, 1, -1)  # Jacobian of the log-Cholesky map
    return _iw_logpdf(sigma, priors.iw_df, priors.iw_scale) + float(np.sum(expo * np.log(d)))


def _sigma_step(state, ctx, priors, rng, blk, adapting, centred, resid=None):
    """Random walk on the log-Cholesky factor of Sigma; centred or non-centred as for theta."""
    p = state.params
    x = _cholesky_params(p.sigma)
    xp = blk.propose(x, rng)
    u = rng.random()
    sigma_new, d_new = _sigma_from_params(xp)
    _, d_old = _sigma_from_params(x)
    acc = False
    try:
        coreg = sym_sqrt(sigma_new)
    except ValueError:
        coreg = None
    w = _try_weights(ctx, state.corr, coreg.t_matrices) if coreg is not None else None
    if w is not None:
        if centred:
            omega_new = None
            new = nngp_logdensity(state.omega, ctx.graph, w)
            cur = state.ld
        else:
            z = whiten(state.omega, ctx.graph, state.weights)
            omega_new = sample_nngp(ctx.graph, w, z)
            new = _data_loglik(resid, omega_new, p.sigma2_eps)
            cur = _data_loglik(resid, state.omega, p.sigma2_eps)
        if math.log(u) < new + _sigma_logprior(sigma_new, d_new, priors) - cur - _sigma_logprior(p.sigma, d_old,
                                                                                                    priors):
            p.sigma = sigma_new
            _accept(state, ctx, state.corr, coreg, w, omega_new)
            acc = True
    blk.record(acc, _cholesky_params(p.sigma), adapting, ctx.config.adapt_every)


# ------------------------------------------------------------------ archive


@dataclass
class PosteriorArchive:
    names: list
    params: np.ndarray      # (D, n_params)
    loglik: np.ndarray      # (D,)
    iterations: np.ndarray  # (D,)
    omega: np.ndarray       # (D, N, 3) in dataset row order
    lam: np.ndarray         # (D, S, 3, 12)
    manifest: dict = field(default_factory=dict)

    def __len__(self):
        return self.params.shape[0]

    @property
    def n_regions(self):
        return self.manifest["n_regions"]

    def parameter_set(self, d) -> ParameterSet:
        return ParameterSet.from_vector(self.params[d], self.n_regions)

    def column(self, name):
        return self.params[:, self.names.index(name)]

    def save(self, path):
        os.makedirs(path, exist_ok=True)
        with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(self.manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(os.path.join(path, "draws.csv"), "w", encoding="utf-8", newline="") as fh:
            fh.write(",".join(["draw", "iteration", "loglik"] + list(self.names)) + "\n")
            for d in range(len(self)):
                vals = [str(d), str(int(self.iterations[d])), repr(float(self.loglik[d]))]
                vals += [repr(float(v)) for v in self.params[d]]
                fh.write(",".join(vals) + "\n")
        with open(os.path.join(path, "latent.npz"), "wb") as fh:
            np.savez(fh, omega=self.omega, lam=self.lam)

    @classmethod
    def load(cls, path) -> "PosteriorArchive":
        with open(os.path.join(path, "manifest.json"), encoding="utf-8") as fh:
            manifest = json.load(fh)
        with open(os.path.join(path, "draws.csv"), encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
            rows = [line.strip().split(",") for line in fh if line.strip()]
        table = np.array(rows, dtype=float).reshape(len(rows), len(header))
        lat = np.load(os.path.join(path, "latent.npz"))
        return cls(header[3:], table[:, 3:], table[:, 2], table[:, 1].astype(np.int64), lat["omega"], lat["lam"],
                   manifest)


def _hash_json(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def build_manifest(ctx: FitContext, priors: Priors, config: SamplerConfig):
    cfg = asdict(config)
    cfg.pop("threads")
    return {
        "config": cfg,
        "priors": asdict(priors),
        "config_hash": _hash_json({"config": cfg, "priors": asdict(priors)}),
        "data_hash": ctx.digest(),
        "transform": ctx.transform.to_dict(),
        "transform_hash": ctx.transform.digest(),
        "code_version": __version__,
        "n_regions": ctx.n_regions,
        "n_points": ctx.n,
        "sites": [int(s) for s in ctx.data.sites],
        "m": config.m,
        "tier": config.tier,
        "weight_computations": int(ctx.cache.n_computations),
        "weight_cache": bool(ctx.cache.cached),
        "neighbour_composition": {k: float(v) for k, v in ctx.graph.composition().items()},
        "param_columns": ParameterSet.names(ctx.n_regions),
        "latent_layout": {"omega": "draw x data row x response", "lam": "draw x site x response x month"},
    }


# ------------------------------------------------------------------ driver


def iteration(state, ctx, priors, rng, blocks, adapting):
    update_augmented(state, ctx, rng)
    update_beta(state, ctx, priors, rng)
    update_shift(state, ctx, priors, rng)
    update_lambda(state, ctx, priors, rng)
    update_omega(state, ctx, rng)
    update_covariance_params(state, ctx, priors, rng, blocks, adapting)


def _state_loglik(state, ctx):
    mu = ctx.mean(state.params.beta) + state.omega + ctx.lam_at_points(state.lam)
    return ctx.loglik(state.y, mu, state.params.sigma2_eps)


def run_chain(data: Dataset, config: SamplerConfig, priors: Priors | None = None,
              transform: TransformSpec | None = None, init: ParameterSet | None = None,
              checkpoint: str | None = None, resume: str | None = None, ctx: FitContext | None = None,
              callback=None) -> PosteriorArchive:
    """Run the sampler and archive every ``thin``-th post-burn-in draw."""
    priors = priors or Priors()
    if config.threads > 0:
        numba.set_num_threads(min(config.threads, numba.config.NUMBA_NUM_THREADS))
    ctx = ctx or FitContext(data, config, transform)
    if resume:
        with open(resume, "rb") as fh:
            saved = pickle.load(fh)
        state, blocks, start, kept = saved["state"], saved["blocks"], saved["iteration"], saved["kept"]
        rng = np.random.Generator(np.random.Philox())
        rng.bit_generator.state = saved["rng"]
        state.refresh(ctx)
    else:
        rng = stream(config.seed, "fit")
        state = default_init(ctx, priors)
        if init is not None:
            state.params = init.copy()
        blocks = make_blocks(config.target_accept)
        start = 0
        kept = {"params": [], "loglik": [], "iter": [], "omega": [], "lam": []}
        state.refresh(ctx)

    for it in range(start, config.iterations):
        adapting = it < config.burn_in
        if it == config.burn_in:
            for blk in blocks.values():
                blk.freeze()
        rng_state = rng.bit_generator.state
        try:
            iteration(state, ctx, priors, rng, blocks, adapting)
        except (NumericalError, np.linalg.LinAlgError) as exc:
            if checkpoint:
                rng.bit_generator.state = rng_state
                with open(checkpoint, "wb") as fh:
                    pickle.dump({"state": _strip(state), "blocks": blocks, "iteration": it, "kept": kept,
                                 "rng": rng_state}, fh)
            raise NumericalError(f"iteration {it} failed: {exc}") from exc
        if it >= config.burn_in and (it - config.burn_in + 1) % config.thin == 0:
            kept["params"].append(state.params.to_vector())
            kept["loglik"].append(_state_loglik(state, ctx))
            kept["iter"].append(it + 1)
            kept["omega"].append(state.omega[ctx.inverse].copy())
            kept["lam"].append(state.lam.copy())
            if np.any(state.y[ctx.censored[:, 0], 0] > 0):
                raise NumericalError("censored rain latent above zero")
        if callback is not None:
            callback(it, state)

    manifest = build_manifest(ctx, priors, config)
    manifest["acceptance"] = {k: b.acceptance for k, b in blocks.items()}
    return PosteriorArchive(ParameterSet.names(ctx.n_regions), np.array(kept["params"]),
                            np.array(kept["loglik"]), np.array(kept["iter"], dtype=np.int64),
                            np.array(kept["omega"]), np.array(kept["lam"]), manifest)


def _strip(state: ChainState):
    return ChainState(state.y.copy(), state.omega.copy(), state.lam.copy(), state.params.copy())


# ------------------------------------------------------------------ DIC


def dic_from_values(loglik_draws, loglik_at_mean):
    """``(DIC, D_bar, p_D)`` from per-draw log-likelihoods and the plug-in value."""
    ll = np.asarray(loglik_draws, dtype=float)
    if ll.size == 0:
        raise ValueError("empty archive")
    d_bar = float(np.mean(-2.0 * ll))
    p_d = d_bar - (-2.0 * float(loglik_at_mean))
    return d_bar + p_d, d_bar, p_d


def plug_in_loglik(archive: PosteriorArchive, data: Dataset):
    """Observed-data log-likelihood at the posterior mean of the parameters and latent fields."""
    spec = TransformSpec(**archive.manifest["transform"])
    tier = archive.manifest["tier"]
    y, flags = encode(data.rain, data.tmin, data.tmax, spec)
    region = data.region(tier)
    beta = archive.params[:, : archive.n_regions * P * 2].reshape(-1, archive.n_regions, P, 2).mean(axis=0)
    s2 = np.exp(np.mean(np.log(np.column_stack([archive.column(f"sigma2_eps_{i + 1}") for i in range(P)])),
                        axis=0))
    omega = archive.omega.mean(axis=0)
    lam = archive.lam.mean(axis=0)
    mu = design_mean(beta, region, data.elevation_m / 1000.0) + omega + lam[data.site_index(), :, data.month - 1]
    return float(np.sum(loglik_terms(y, mu, s2, flags)))


def dic(archive: PosteriorArchive, data: Dataset):
    if len(archive) == 0:
        raise ValueError("empty archive")
    return dic_from_values(archive.loglik, plug_in_loglik(archive, data))


# ------------------------------------------------------------------ summaries


def effective_sample_size(x):
    """Initial-positive-sequence ESS of a scalar chain."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 4 or np.var(x) == 0:
        return float(n)
    xc = x - x.mean()
    f = np.fft.rfft(xc, 2 * n)
    acf = np.fft.irfft(f * np.conj(f))[:n] / (n * np.var(x))
    s = 0.0
    for k in range(1, n - 1, 2):
        pair = acf[k] + acf[k + 1]
        if pair < 0:
            break
        s += pair
    tau = -1.0 + 2.0 * (acf[0] + s) if s > 0 else 1.0
    return float(n / max(tau, 1e-12))


def convergence_table(archive: PosteriorArchive):
    rows = []
    for j, name in enumerate(archive.names):
        x = archive.params[:, j]
        rows.append({"parameter": name, "mean": float(np.mean(x)), "sd": float(np.std(x)),
                     "q025": float(np.quantile(x, 0.025)), "q975": float(np.quantile(x, 0.975)),
                     "ess": effective_sample_size(x)})
    return rows
