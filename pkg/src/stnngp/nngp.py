"""Nearest-neighbour GP machinery for the trivariate process omega.

Points are handled in canonical order. Every point conditions on at most
``m`` earlier points chosen by the combined space-time distance, with the
same-site points one year back (and the following month) forced in so that
annual cycles are visible from each neighbourhood.

Kriging weights are stored per *slot*. Under a regular design (every site
observed at every month) all points of a site beyond the longest neighbour
lag share a slot, so only ``sites x (max_lag + 1)`` weight computations are
needed; otherwise every point gets its own slot.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.spatial import cKDTree

from .covariance import N_RESPONSES, Coregionalization, correlation_stack, stack_thetas
from .spacetime import DEFAULT_SPACE_WEIGHT, MONTHS_PER_YEAR, PERIOD, PointSet, is_canonical

log = logging.getLogger(__name__)

STUDIED_M = (10, 15, 20)
JITTER_LADDER = (0.0, 1e-10, 1e-8, 1e-6)
_LOG2PI = math.log(2.0 * math.pi)
P = N_RESPONSES


class NumericalError(RuntimeError):
    pass


@dataclass
class NeighborGraph:
    points: PointSet
    neighbors: np.ndarray  # (N, m) earlier-point indices, nearest first, -1 padded
    counts: np.ndarray
    m: int
    space_weight: float = DEFAULT_SPACE_WEIGHT
    period: float = PERIOD

    def __len__(self):
        return len(self.points)

    def neighbor_list(self, n):
        return self.neighbors[n, : self.counts[n]]

    def composition(self):
        """Mean number of same-site and same-time neighbours per point."""
        n = np.repeat(np.arange(len(self)), self.counts)
        j = self.neighbors[self.neighbors >= 0]
        same_site = self.points.site[n] == self.points.site[j]
        same_time = self.points.t[n] == self.points.t[j]
        total = max(len(self), 1)
        return {"same_site": same_site.sum() / total, "same_time": same_time.sum() / total,
                "other": (~same_site & ~same_time).sum() / total}

    def max_lag_steps(self):
        if self.points.step is None:
            return None
        n = np.repeat(np.arange(len(self)), self.counts)
        j = self.neighbors[self.neighbors >= 0]
        if j.size == 0:
            return 0
        return int(np.max(self.points.step[n] - self.points.step[j]))


def _scaled_coords(points: PointSet, w):
    t = points.step / MONTHS_PER_YEAR if points.step is not None else points.t
    return np.column_stack([points.x * w, points.y * w, t])


def _nearest_earlier(tree, coords, points, n, k, w):
    """Exact ``k`` nearest among indices ``< n``; ties broken by lower index."""
    kq = min(len(points), 2 * k + 2)
    while True:
        d, idx = tree.query(coords[n], k=kq)
        idx = np.atleast_1d(idx)
        d = np.atleast_1d(d)
        earlier = idx[(idx < n) & (idx < len(points))]
        if len(earlier) >= k or kq >= len(points):
            break
        kq = min(len(points), 2 * kq)
    if len(earlier) == 0:
        return earlier, np.empty(0)
    # radius covering the k-th candidate, then collect every tie within it
    de = points.distances(n, earlier, w)
    order = np.lexsort((earlier, de))
    radius = de[order[min(k, len(order)) - 1]]
    cand = np.asarray(tree.query_ball_point(coords[n], radius * (1 + 1e-9) + 1e-12), dtype=np.int64)
    cand = cand[cand < n]
    dc = points.distances(n, cand, w)
    order = np.lexsort((cand, dc))[:k]
    return cand[order], dc[order]


def build_graph(points: PointSet, m: int, space_weight=DEFAULT_SPACE_WEIGHT, period=PERIOD,
                cycle_boundary=True) -> NeighborGraph:
    """Neighbour sets under the combined distance for canonically ordered points."""
    if len(points) == 0:
        raise ValueError("cannot build a neighbour graph on no points")
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    if not is_canonical(points):
        raise ValueError("points must be in canonical order")
    if m not in STUDIED_M:
        warnings.warn(f"m={m} is outside the studied neighbourhood sizes {STUDIED_M}", stacklevel=2)
    n_pts = len(points)
    coords = _scaled_coords(points, space_weight)
    tree = cKDTree(coords)
    nbrs = np.full((n_pts, m), -1, dtype=np.int64)
    counts = np.zeros(n_pts, dtype=np.int64)

    lookup = None
    year_steps = None
    if cycle_boundary and points.step is not None:
        year_steps = int(round(period * MONTHS_PER_YEAR))
        lookup = {(int(s), int(k)): i for i, (s, k) in enumerate(zip(points.site, points.step))}

    for n in range(1, n_pts):
        k = min(m, n)
        sel, dist = _nearest_earlier(tree, coords, points, n, k, space_weight)
        if lookup is not None and k >= 2:
            sel, dist = _force_cycle(points, n, sel, dist, k, lookup, year_steps, space_weight)
        counts[n] = len(sel)
        nbrs[n, : len(sel)] = sel
    return NeighborGraph(points, nbrs, counts, m, space_weight, period)


def _force_cycle(points, n, sel, dist, k, lookup, year_steps, w):
    s, step = int(points.site[n]), int(points.step[n])
    forced = []
    for back in (year_steps, year_steps - 1):
        j = lookup.get((s, step - back))
        if j is not None and j < n:
            forced.append(j)
    forced = forced[: k - 1]
    missing = [j for j in forced if j not in set(sel.tolist())]
    if not missing:
        return sel, dist
    sel = list(sel)
    dist = list(dist)
    for j in missing:
        # displace the farthest non-forced member (larger index on ties)
        cands = [(dist[i], sel[i], i) for i in range(len(sel)) if sel[i] not in forced]
        if len(sel) >= k and cands:
            _, _, pos = max(cands)
            del sel[pos]
            del dist[pos]
        sel.append(j)
        dist.append(float(points.distances(n, j, w)))
    sel = np.asarray(sel, dtype=np.int64)
    dist = np.asarray(dist)
    order = np.lexsort((sel, dist))
    return sel[order], dist[order]


# ---------------------------------------------------------------- weights


@dataclass
class KrigingWeights:
    b: np.ndarray  # (3, 3k)
    f: np.ndarray  # (3, 3)


@dataclass
class Weights:
    """Kriging weights per slot plus the point-to-slot map."""

    b: np.ndarray       # (S, 3, 3m)
    f: np.ndarray       # (S, 3, 3)
    f_chol: np.ndarray  # (S, 3, 3) lower
    f_inv: np.ndarray   # (S, 3, 3)
    logdet: np.ndarray  # (S,)
    slot: np.ndarray    # (N,)
    jitter_level: np.ndarray = field(repr=False, default=None)

    def point(self, n) -> KrigingWeights:
        s = self.slot[n]
        return KrigingWeights(self.b[s], self.f[s])


@numba.njit(cache=True)
def _chol_inplace(a, n):
    for j in range(n):
        d = a[j, j]
        for k in range(j):
            d -= a[j, k] * a[j, k]
        if not d > 0.0:
            return False
        d = math.sqrt(d)
        a[j, j] = d
        for i in range(j + 1, n):
            v = a[i, j]
            for k in range(j):
                v -= a[i, k] * a[j, k]
            a[i, j] = v / d
    return True


@numba.njit(cache=True)
def _kriging_kernel(K, jitters, b_out, f_out, fchol_out, finv_out, logdet_out, level_out):
    n_slot = K.shape[0]
    d = K.shape[1]
    q = d - 3
    L = np.empty((q, q))
    X = np.empty((q, 3))
    Fc = np.empty((3, 3))
    for s in range(n_slot):
        scale = (K[s, 0, 0] + K[s, 1, 1] + K[s, 2, 2]) / 3.0
        ok = False
        lev = -1
        for li in range(jitters.shape[0]):
            for i in range(q):
                for j in range(i + 1):
                    L[i, j] = K[s, 3 + i, 3 + j]
                L[i, i] += jitters[li] * scale
            if _chol_inplace(L, q):
                ok = True
                lev = li
                break
        if not ok:
            level_out[s] = -1
            continue
        # X = L^-1 k_nc
        for c in range(3):
            for i in range(q):
                v = K[s, 3 + i, c]
                for k in range(i):
                    v -= L[i, k] * X[k, c]
                X[i, c] = v / L[i, i]
        for a in range(3):
            for c in range(3):
                v = K[s, a, c]
                for i in range(q):
                    v -= X[i, a] * X[i, c]
                f_out[s, a, c] = v
        for a in range(3):
            for c in range(a):
                v = 0.5 * (f_out[s, a, c] + f_out[s, c, a])
                f_out[s, a, c] = v
                f_out[s, c, a] = v
        # B' = L^-T X
        for c in range(3):
            for i in range(q - 1, -1, -1):
                v = X[i, c]
                for k in range(i + 1, q):
                    v -= L[k, i] * b_out[s, c, k]
                b_out[s, c, i] = v / L[i, i]
        fok = False
        for li in range(jitters.shape[0]):
            for a in range(3):
                for c in range(3):
                    Fc[a, c] = f_out[s, a, c] if c <= a else 0.0
                Fc[a, a] += jitters[li] * scale
            if _chol_inplace(Fc, 3):
                fok = True
                if li > 0:
                    for a in range(3):
                        f_out[s, a, a] += jitters[li] * scale
                lev = max(lev, li)
                break
        if not fok:
            level_out[s] = -2
            continue
        level_out[s] = lev
        for a in range(3):
            for c in range(3):
                fchol_out[s, a, c] = Fc[a, c] if c <= a else 0.0
        logdet_out[s] = 2.0 * (math.log(Fc[0, 0]) + math.log(Fc[1, 1]) + math.log(Fc[2, 2]))
        # inverse via L^-1
        Li = np.zeros((3, 3))
        for c in range(3):
            for i in range(3):
                v = 1.0 if i == c else 0.0
                for k in range(i):
                    v -= Fc[i, k] * Li[k, c]
                Li[i, c] = v / Fc[i, i]
        for a in range(3):
            for c in range(3):
                v = 0.0
                for k in range(3):
                    v += Li[k, a] * Li[k, c]
                finv_out[s, a, c] = v


@numba.njit(cache=True)
def _masked_cov_kernel(corr, t, valid, out):
    n_comp, n_slot, k = corr.shape[0], corr.shape[1], corr.shape[2]
    for s in range(n_slot):
        for a in range(k):
            for b in range(k):
                both = valid[s, a] and valid[s, b]
                for p in range(3):
                    for q in range(3):
                        v = 0.0
                        if both:
                            for i in range(n_comp):
                                v += t[i, p, q] * corr[i, s, a, b]
                        elif a == b and p == q:
                            v = 1.0
                        out[s, 3 * a + p, 3 * b + q] = v


def _masked_cov(corr, t_matrices, valid):
    """Block covariance with padded neighbours decoupled (identity, zero cross-cov)."""
    corr = np.ascontiguousarray(corr, dtype=float)
    n_slot, k = corr.shape[1], corr.shape[2]
    K = np.empty((n_slot, P * k, P * k))
    _masked_cov_kernel(corr, np.ascontiguousarray(t_matrices, dtype=float), np.ascontiguousarray(valid), K)
    return K


def weights_from_cov(K, rep=None):
    """Kriging weights from stacked ``(S, 3(k+1), 3(k+1))`` covariances (target first)."""
    K = np.ascontiguousarray(K, dtype=float)
    n_slot, d = K.shape[0], K.shape[1]
    q = d - P
    b = np.zeros((n_slot, P, q))
    f = np.zeros((n_slot, P, P))
    fchol = np.zeros((n_slot, P, P))
    finv = np.zeros((n_slot, P, P))
    logdet = np.zeros(n_slot)
    level = np.zeros(n_slot, dtype=np.int64)
    _kriging_kernel(K, np.asarray(JITTER_LADDER), b, f, fchol, finv, logdet, level)
    bad = np.flatnonzero(level < 0)
    if bad.size:
        s = int(bad[0])
        where = f"point {int(rep[s])}" if rep is not None else f"slot {s}"
        what = "neighbour covariance" if level[s] == -1 else "conditional covariance"
        raise NumericalError(f"{what} is singular at {where} after maximum jitter")
    return b, f, fchol, finv, logdet, level


def kriging_weights(target, nbrs, coreg: Coregionalization, thetas, pad_to=None) -> KrigingWeights:
    """``B = C(n, nbrs) C(nbrs, nbrs)^-1`` and ``F = Sigma - B C(nbrs, n)`` for one point.

    ``target`` is a :class:`SpaceTimePoint`; ``nbrs`` a sequence of them.
    """
    pts = PointSet.from_points([target] + list(nbrs))
    k = len(nbrs)
    width = max(k, pad_to or 0)
    idx = np.zeros(width + 1, dtype=np.int64)
    idx[: k + 1] = np.arange(k + 1)
    valid = np.zeros(width + 1, dtype=bool)
    valid[: k + 1] = True
    h_s, h_t = pts.lags(idx[:, None], idx[None, :])
    corr = correlation_stack(h_s, h_t, *stack_thetas(thetas))[:, None]
    K = _masked_cov(corr, coreg.t_matrices, valid[None])
    b, f, *_ = weights_from_cov(K)
    return KrigingWeights(b[0][:, : P * k], f[0])


class WeightCache:
    """Slot layout and lag geometry for a graph; weights are recomputed per parameter set."""

    def __init__(self, graph: NeighborGraph, cached=True):
        self.graph = graph
        pts = graph.points
        n_pts = len(graph)
        self.cached = False
        slot = np.arange(n_pts)
        if cached:
            slot = self._regular_slots(graph)
            self.cached = slot is not None
            if slot is None:
                slot = np.arange(n_pts)
        uniq, rep_pos, inverse = np.unique(slot, return_index=True, return_inverse=True)
        self.slot = inverse.astype(np.int64)
        self.rep = rep_pos.astype(np.int64)  # representative point for each slot
        m = graph.m
        members = np.full((len(self.rep), m + 1), 0, dtype=np.int64)
        members[:, 0] = self.rep
        members[:, 1:] = np.where(graph.neighbors[self.rep] >= 0, graph.neighbors[self.rep], self.rep[:, None])
        self.valid = np.ones((len(self.rep), m + 1), dtype=bool)
        self.valid[:, 1:] = graph.neighbors[self.rep] >= 0
        self.h_s, self.h_t = pts.lags(members[:, :, None], members[:, None, :])
        self.n_computations = len(self.rep)
        self.hit_ratio = 1.0 - self.n_computations / n_pts

    @staticmethod
    def _regular_slots(graph: NeighborGraph):
        pts = graph.points
        if pts.step is None:
            warnings.warn("times are not on the monthly grid; weight caching disabled", stacklevel=3)
            return None
        sites = np.unique(pts.site)
        steps = np.unique(pts.step)
        regular = len(pts) == len(sites) * len(steps) and np.all(np.diff(steps) == 1)
        if regular:
            for s in sites:
                if not np.array_equal(np.sort(pts.step[pts.site == s]), steps):
                    regular = False
                    break
        if not regular:
            warnings.warn("irregular monitoring design; weight caching disabled", stacklevel=3)
            return None
        max_lag = graph.max_lag_steps()
        pos = pts.step - steps[0]
        site_idx = np.searchsorted(sites, pts.site)
        key = site_idx * (max_lag + 1) + np.minimum(pos, max_lag)
        # verify that every reusing point has the same relative neighbour geometry
        first = {}
        slot = key.copy()
        extra = key.max() + 1
        for n in range(len(pts)):
            sig = _signature(graph, n)
            k = int(key[n])
            if k not in first:
                first[k] = sig
            elif first[k] != sig:
                slot[n] = extra
                extra += 1
        if extra > key.max() + 1:
            log.warning("%d points did not match their cache slot geometry", extra - key.max() - 1)
        return slot

    def correlations(self, phi_sp, phi_ti, eta):
        return correlation_stack(self.h_s, self.h_t, phi_sp, phi_ti, eta)

    def weights_from_corr(self, corr, t_matrices) -> Weights:
        K = _masked_cov(corr, t_matrices, self.valid)
        b, f, fchol, finv, logdet, level = weights_from_cov(K, self.rep)
        return Weights(b, f, fchol, finv, logdet, self.slot, level)

    def compute(self, coreg: Coregionalization, thetas) -> Weights:
        return self.weights_from_corr(self.correlations(*stack_thetas(thetas)), coreg.t_matrices)


def _signature(graph, n):
    pts = graph.points
    nb = graph.neighbor_list(n)
    return tuple((int(pts.site[j]), int(pts.step[n] - pts.step[j])) for j in nb)


def build_weight_cache(graph: NeighborGraph, coreg: Coregionalization, thetas, cached=True) -> Weights:
    """Kriging weights for every point, shared across slots when the design allows."""
    cache = WeightCache(graph, cached=cached)
    w = cache.compute(coreg, thetas)
    w.cache = cache
    log.info("weight cache: %d computations for %d points (hit ratio %.3f)",
             cache.n_computations, len(graph), cache.hit_ratio)
    return w


# ---------------------------------------------------------------- densities


@numba.njit(cache=True)
def _nngp_terms(omega, nbrs, counts, slot, b, finv, logdet, out):
    n_pts = omega.shape[0]
    r = np.empty(3)
    for n in range(n_pts):
        s = slot[n]
        for a in range(3):
            v = omega[n, a]
            for j in range(counts[n]):
                nb = nbrs[n, j]
                for c in range(3):
                    v -= b[s, a, 3 * j + c] * omega[nb, c]
            r[a] = v
        quad = 0.0
        for a in range(3):
            for c in range(3):
                quad += r[a] * finv[s, a, c] * r[c]
        out[n] = -0.5 * quad - 0.5 * logdet[s] - 1.5 * math.log(2.0 * math.pi)


def nngp_terms(omega, graph: NeighborGraph, weights: Weights):
    omega = np.ascontiguousarray(omega, dtype=float)
    if omega.shape != (len(graph), P):
        raise ValueError(f"omega must have shape {(len(graph), P)}, got {omega.shape}")
    out = np.empty(len(graph))
    _nngp_terms(omega, graph.neighbors, graph.counts, weights.slot, weights.b, weights.f_inv,
                weights.logdet, out)
    return out


def nngp_logdensity(omega, graph: NeighborGraph, weights: Weights) -> float:
    """``sum_n log N(omega_n | B_n omega_N(n), F_n)`` with ``omega`` shaped ``(N, 3)``."""
    return float(np.sum(nngp_terms(omega, graph, weights)))


@numba.njit(cache=True)
def _apply_precision(V, nbrs, counts, slot, b, finv, out):
    n_pts, _, ncol = V.shape
    W = np.empty((n_pts, 3, ncol))
    u = np.empty((3, ncol))
    for n in range(n_pts):
        s = slot[n]
        for a in range(3):
            for c in range(ncol):
                u[a, c] = V[n, a, c]
        for j in range(counts[n]):
            nb = nbrs[n, j]
            for a in range(3):
                for e in range(3):
                    w = b[s, a, 3 * j + e]
                    if w != 0.0:
                        for c in range(ncol):
                            u[a, c] -= w * V[nb, e, c]
        for a in range(3):
            for c in range(ncol):
                v = 0.0
                for e in range(3):
                    v += finv[s, a, e] * u[e, c]
                W[n, a, c] = v
    for n in range(n_pts):
        for a in range(3):
            for c in range(ncol):
                out[n, a, c] = W[n, a, c]
    for n in range(n_pts):
        s = slot[n]
        for j in range(counts[n]):
            nb = nbrs[n, j]
            for e in range(3):
                for a in range(3):
                    w = b[s, a, 3 * j + e]
                    if w != 0.0:
                        for c in range(ncol):
                            out[nb, e, c] -= w * W[n, a, c]


def apply_precision(V, graph: NeighborGraph, weights: Weights):
    """``Q V`` for the NNGP precision ``Q = (I - B)' F^-1 (I - B)``; ``V`` is ``(N, 3, c)``."""
    V = np.ascontiguousarray(V, dtype=float)
    squeeze = V.ndim == 2
    if squeeze:
        V = V[:, :, None]
    out = np.empty_like(V)
    _apply_precision(V, graph.neighbors, graph.counts, weights.slot, weights.b, weights.f_inv, out)
    return out[:, :, 0] if squeeze else out


def nngp_precision(graph: NeighborGraph, weights: Weights):
    """Dense ``3N x 3N`` NNGP precision (small problems only)."""
    n = len(graph)
    eye = np.eye(P * n).reshape(n, P, P * n)
    return apply_precision(eye, graph, weights).reshape(P * n, P * n)


def nngp_logdet_cov(weights: Weights):
    """Log-determinant of the implied joint covariance."""
    return float(np.sum(weights.logdet[weights.slot]))


def conditional_draw(weights: KrigingWeights, neighbor_values, z):
    """``B v + chol(F) z`` for neighbour values ``v`` shaped ``(k, 3)``."""
    v = np.asarray(neighbor_values, dtype=float).reshape(-1)
    mean = weights.b @ v if v.size else np.zeros(P)
    f = weights.f
    try:
        lf = np.linalg.cholesky(f)
    except np.linalg.LinAlgError:
        scale = np.trace(f) / P if np.trace(f) > 0 else 1.0
        for jit in JITTER_LADDER[1:]:
            try:
                lf = np.linalg.cholesky(f + jit * scale * np.eye(P))
                break
            except np.linalg.LinAlgError:
                continue
        else:
            raise NumericalError("conditional covariance is not positive definite")
    return mean + lf @ np.asarray(z, dtype=float)


@numba.njit(cache=True)
def _ancestral(nbrs, counts, slot, b, fchol, z, out):
    for n in range(z.shape[0]):
        s = slot[n]
        for a in range(3):
            v = 0.0
            for j in range(counts[n]):
                nb = nbrs[n, j]
                for c in range(3):
                    v += b[s, a, 3 * j + c] * out[nb, c]
            for c in range(a + 1):
                v += fchol[s, a, c] * z[n, c]
            out[n, a] = v


def sample_nngp(graph: NeighborGraph, weights: Weights, z):
    """Ancestral draw of omega through the graph from standard normals ``z`` (N, 3)."""
    z = np.ascontiguousarray(z, dtype=float)
    out = np.zeros((len(graph), P))
    _ancestral(graph.neighbors, graph.counts, weights.slot, weights.b, weights.f_chol, z, out)
    return out


@numba.njit(cache=True)
def _whiten(omega, nbrs, counts, slot, b, fchol, out):
    r = np.zeros(3)
    for n in range(omega.shape[0]):
        s = slot[n]
        for a in range(3):
            v = omega[n, a]
            for j in range(counts[n]):
                nb = nbrs[n, j]
                for c in range(3):
                    v -= b[s, a, 3 * j + c] * omega[nb, c]
            r[a] = v
        for a in range(3):
            v = r[a]
            for c in range(a):
                v -= fchol[s, a, c] * out[n, c]
            out[n, a] = v / fchol[s, a, a]


def whiten(omega, graph: NeighborGraph, weights: Weights):
    """Standardised innovations; the inverse of :func:`sample_nngp`."""
    omega = np.ascontiguousarray(omega, dtype=float)
    out = np.zeros((len(graph), P))
    _whiten(omega, graph.neighbors, graph.counts, weights.slot, weights.b, weights.f_chol, out)
    return out


def coneighbors(graph: NeighborGraph):
    """CSR adjacency: for each point, the points that condition on it and its position there."""
    n_pts = len(graph)
    kk, pos = np.nonzero(graph.neighbors >= 0)
    j = graph.neighbors[kk, pos]
    order = np.lexsort((kk, j))
    j, kk, pos = j[order], kk[order], pos[order]
    ptr = np.zeros(n_pts + 1, dtype=np.int64)
    np.add.at(ptr, j + 1, 1)
    ptr = np.cumsum(ptr)
    return ptr, kk.astype(np.int64), pos.astype(np.int64)


def color_classes(graph: NeighborGraph):
    """Greedy colouring: same-coloured points are conditionally independent given the rest."""
    n_pts = len(graph)
    ptr, kk, _ = coneighbors(graph)
    color = np.full(n_pts, -1, dtype=np.int64)
    for n in range(n_pts):
        conflict = set(graph.neighbor_list(n).tolist())
        for k in kk[ptr[n]: ptr[n + 1]]:
            conflict.add(int(k))
            conflict.update(graph.neighbor_list(k).tolist())
        used = {int(color[c]) for c in conflict if color[c] >= 0}
        c = 0
        while c in used:
            c += 1
        color[n] = c
    return [np.flatnonzero(color == c) for c in range(color.max() + 1)]
