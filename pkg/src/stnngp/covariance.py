"""Gneiting space-time correlation, circular cyclical kernel and coregionalization."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .spacetime import PERIOD, Lag, PointSet, circular_lag

N_RESPONSES = 3
DENSE_LIMIT = 2000
YEAR_DAYS = 365.0
SPD_RTOL = 1e-10
# correlation level defining the practical range
PRACTICAL_LEVEL = 0.05


class NotPositiveDefiniteError(ValueError):
    pass


@dataclass(frozen=True)
class GneitingParams:
    phi_sp: float
    phi_ti: float
    eta: float
    alpha: float = 1.0
    gamma: float = 0.5
    tau: float = 1.0

    def __post_init__(self):
        if not (self.phi_sp > 0 and self.phi_ti > 0):
            raise ValueError(f"scale parameters must be positive: {self}")
        if not (0.0 <= self.eta <= 1.0):
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        if not (0.0 < self.alpha <= 1.0 and 0.0 < self.gamma <= 1.0):
            raise ValueError(f"alpha and gamma must lie in (0, 1]: {self}")
        if self.tau < 1.0:  # tau >= d/2 with d = 2
            raise ValueError(f"tau must be >= 1, got {self.tau}")

    @property
    def is_default_shape(self) -> bool:
        return self.alpha == 1.0 and self.gamma == 0.5 and self.tau == 1.0


@dataclass(frozen=True)
class CyclicalParams:
    sigma2: float
    phi: float

    def __post_init__(self):
        if not (self.sigma2 > 0 and self.phi > 0):
            raise ValueError(f"cyclical parameters must be positive: {self}")


def gneiting(h_s, h_t, phi_sp, phi_ti, eta):
    """Vectorised correlation for alpha = 1, gamma = 1/2, tau = 1."""
    psi = phi_ti * h_t * h_t + 1.0
    return np.exp(-phi_sp * h_s * psi ** (-0.5 * eta)) / psi


def gneiting_general(h_s, h_t, p: GneitingParams):
    """Full Gneiting form with free smoothness and tau (dense cross-check)."""
    psi = p.phi_ti * np.abs(h_t) ** (2 * p.alpha) + 1.0
    return psi ** (-p.tau) * np.exp(-p.phi_sp * np.abs(h_s) ** (2 * p.gamma) / psi ** (p.eta * p.gamma))


def gneiting_corr(lag, p: GneitingParams):
    """Correlation at a :class:`Lag` (or a ``(h_s, h_t)`` pair)."""
    h_s, h_t = (lag.h_s, lag.h_t) if isinstance(lag, Lag) else lag
    if p.is_default_shape:
        out = gneiting(np.asarray(h_s, dtype=float), np.asarray(h_t, dtype=float), p.phi_sp, p.phi_ti, p.eta)
    else:
        out = gneiting_general(np.asarray(h_s, dtype=float), np.asarray(h_t, dtype=float), p)
    return float(out) if np.ndim(out) == 0 else out


def cyclical_kernel(d_circ, sigma2, phi):
    return sigma2 * np.exp(-phi * np.asarray(d_circ))


def cyclical_cov(lag, p: CyclicalParams, period=PERIOD):
    """Annual-cycle covariance using the geodesic circular lag.

    ``lag`` is a :class:`Lag` or a raw time lag in years.
    """
    if isinstance(lag, Lag):
        d = lag.d_circ
    else:
        d = circular_lag(np.asarray(lag, dtype=float), period)[1]
    out = cyclical_kernel(d, p.sigma2, p.phi)
    return float(out) if np.ndim(out) == 0 else out


def month_correlation(phi, period=PERIOD, months=12):
    """``months x months`` correlation of calendar-month effects."""
    k = np.arange(months)
    d = np.abs(k[:, None] - k[None, :]) * (period / months)
    d = np.minimum(d, period - d)
    return np.exp(-phi * d)


@dataclass(frozen=True)
class Coregionalization:
    sigma: np.ndarray
    a_matrix: np.ndarray
    t_matrices: np.ndarray = field(repr=False)


def sym_sqrt(sigma) -> Coregionalization:
    """Symmetric square root ``A = Psi diag(sqrt(ev)) Psi'`` of an SPD matrix."""
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise ValueError(f"sigma must be square, got shape {sigma.shape}")
    if not np.allclose(sigma, sigma.T, rtol=0, atol=1e-12 * max(1.0, np.abs(sigma).max())):
        raise NotPositiveDefiniteError("sigma is not symmetric")
    sym = 0.5 * (sigma + sigma.T)
    ev, vecs = np.linalg.eigh(sym)
    if not np.all(np.isfinite(ev)) or ev[-1] <= 0 or ev[0] <= SPD_RTOL * ev[-1]:
        raise NotPositiveDefiniteError(f"sigma is not positive definite: eigenvalue {ev[0]:.6g}")
    a = (vecs * np.sqrt(ev)) @ vecs.T
    a = 0.5 * (a + a.T)
    t = np.einsum("pi,qi->ipq", a, a)
    return Coregionalization(sym, a, t)


def _as_gneiting(thetas):
    thetas = list(thetas)
    if len(thetas) != N_RESPONSES:
        raise ValueError(f"expected {N_RESPONSES} correlation parameter sets")
    return thetas


def cross_cov_block(lag, coreg: Coregionalization, thetas):
    """``sum_i T_i C(lag; theta_i)``: 3x3 cross-covariance of omega at a lag."""
    thetas = _as_gneiting(thetas)
    c = np.array([gneiting_corr(lag, th) for th in thetas])
    return np.einsum("i,ipq->pq", c, coreg.t_matrices)


def stack_thetas(thetas):
    """Arrays ``(phi_sp, phi_ti, eta)`` for a sequence of :class:`GneitingParams`."""
    thetas = _as_gneiting(thetas)
    return (np.array([t.phi_sp for t in thetas]), np.array([t.phi_ti for t in thetas]),
            np.array([t.eta for t in thetas]))


def correlation_stack(h_s, h_t, phi_sp, phi_ti, eta):
    """Correlations of every component on a lag array; leading axis = component."""
    return np.stack([gneiting(h_s, h_t, phi_sp[i], phi_ti[i], eta[i]) for i in range(len(phi_sp))])


def block_covariance(corr, t_matrices):
    """Assemble ``(..., k, k)`` component correlations into ``(..., 3k, 3k)``."""
    k = corr.shape[-1]
    out = np.einsum("ipq,i...ab->...apbq", t_matrices, corr)
    return out.reshape(out.shape[:-4] + (N_RESPONSES * k, N_RESPONSES * k))


def joint_covariance(points, coreg: Coregionalization, thetas, dense_limit=DENSE_LIMIT, general=False):
    """Dense ``3N x 3N`` covariance of omega; layout is point-major.

    Refuses when ``N`` exceeds ``dense_limit``. ``general=True`` evaluates the
    unsimplified Gneiting form.
    """
    if not isinstance(points, PointSet):
        points = PointSet.from_points(points)
    n = len(points)
    if n > dense_limit:
        raise ValueError(f"dense covariance refused: {n} points exceeds limit {dense_limit}")
    idx = np.arange(n)
    h_s, h_t = points.lags(idx[:, None], idx[None, :])
    thetas = _as_gneiting(thetas)
    if general:
        corr = np.stack([gneiting_general(h_s, h_t, th) for th in thetas])
    else:
        corr = correlation_stack(h_s, h_t, *stack_thetas(thetas))
    cov = block_covariance(corr, coreg.t_matrices)
    return 0.5 * (cov + cov.T)


def practical_range(kind: str, param: float) -> float:
    """Lag at which correlation is effectively 0.05, other lag held at 0.

    Exponential decays use the conventional ``3 / phi`` (correlation e^-3);
    the temporal factor ``1 / (phi h^2 + 1)`` is solved exactly for 0.05.
    ``spatial`` returns km, ``temporal`` and ``cyclical`` return years.
    """
    if param <= 0:
        raise ValueError("decay parameter must be positive")
    if kind in ("spatial", "cyclical"):
        return 3.0 / param
    if kind == "temporal":
        return math.sqrt((1.0 / PRACTICAL_LEVEL - 1.0) / param)
    raise ValueError(f"unknown range kind {kind!r}")


def variance_decomposition(sigma2_cy, sigma2_eps, sigma2_omega):
    """Seasonal, residual and space-time shares of the summed variance."""
    v = np.array([sigma2_cy, sigma2_eps, sigma2_omega], dtype=float)
    if np.any(v < 0):
        raise ValueError("variances must be non-negative")
    total = v.sum(axis=0)
    if np.any(total == 0):
        raise ValueError("variances are all zero")
    return tuple(v / total)


def cross_correlations(sigma):
    """``(rho_12, rho_13, rho_23)`` from a 3x3 covariance."""
    sigma = np.asarray(sigma, dtype=float)
    sym_sqrt(sigma)  # definiteness check
    sd = np.sqrt(np.diag(sigma))
    r = sigma / np.outer(sd, sd)
    return r[0, 1], r[0, 2], r[1, 2]
