import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal
from scipy import stats

from helpers import dense_logpdf, tiny_dataset
from stnngp.covariance import GneitingParams, month_correlation
from stnngp.inference import (
    ChainState,
    FitContext,
    ParameterSet,
    PosteriorArchive,
    Priors,
    RWBlock,
    SamplerConfig,
    _data_loglik,
    _sigma_step,
    _theta_jac,
    _theta_step,
    _theta_x,
    beta_conditional,
    default_init,
    dic,
    dic_from_values,
    effective_sample_size,
    lambda_conditional,
    make_blocks,
    run_chain,
    stream,
    truncated_below_zero,
    update_augmented,
    update_beta,
    update_covariance_params,
    update_lambda,
    update_omega,
    update_shift,
)
from stnngp.model import CENSORED, MISSING, TransformSpec, loglik_terms
from stnngp.nngp import nngp_precision, sample_nngp, whiten
from stnngp.simulate import reference_params

P = 3


def small_params(n_regions):
    p = reference_params(n_regions)
    p.phi_sp = np.array([0.3, 0.2, 0.5])
    p.sigma2_eps = np.array([0.3, 0.2, 0.25])
    return p


def make_state(data, m=10, seed=0, params=None):
    cfg = SamplerConfig(iterations=10, burn_in=5, m=m, seed=seed)
    ctx = FitContext(data, cfg)
    st_ = default_init(ctx, Priors())
    st_.params = params or small_params(ctx.n_regions)
    st_.lam = np.random.default_rng(seed).normal(0, 0.3, st_.lam.shape)
    st_.omega = np.random.default_rng(seed + 1).normal(0, 0.3, st_.omega.shape)
    st_.refresh(ctx)
    return ctx, st_


@pytest.fixture(scope="module")
def tiny():
    return make_state(tiny_dataset(2, 5, np.random.default_rng(3)))


def lam_prior_precision(p, i):
    return np.linalg.inv(p.sigma2_cy[i] * month_correlation(p.phi_cy[i]))


def dense_gaussian_posterior(ctx, state, priors):
    """Joint normal conditional of (beta, lambda, omega) given y and covariance parameters."""
    p = state.params
    K, S, N = ctx.n_regions, ctx.n_sites, ctx.n
    nb, nl = K * P * 2, S * P * 12
    dim = nb + nl + N * P
    H = np.zeros((N * P, dim))
    for n in range(N):
        for i in range(P):
            row = n * P + i
            z = ctx.region[n]
            H[row, (z * P + i) * 2] = 1.0
            H[row, (z * P + i) * 2 + 1] = ctx.elev[n]
            H[row, nb + (ctx.site[n] * P + i) * 12 + ctx.month[n]] = 1.0
            H[row, nb + nl + row] = 1.0
    prior = np.zeros((dim, dim))
    prior[np.arange(nb), np.arange(nb)] = 1.0 / priors.beta_var
    for s in range(S):
        for i in range(P):
            o = nb + (s * P + i) * 12
            prior[o:o + 12, o:o + 12] = lam_prior_precision(p, i)
    prior[nb + nl:, nb + nl:] = nngp_precision(ctx.graph, state.weights)
    dinv = np.tile(1.0 / p.sigma2_eps, N)
    prec = prior + H.T @ (dinv[:, None] * H)
    cov = np.linalg.inv(prec)
    mean = cov @ (H.T @ (dinv * state.y.reshape(-1)))
    return mean, cov


def flat_state(state):
    return np.concatenate([state.params.beta.reshape(-1), state.lam.reshape(-1), state.omega.reshape(-1)])


# ------------------------------------------------------------------ configs


def test_priors_defaults_and_validation():
    pr = Priors()
    assert (pr.beta_var, pr.sigma2_shape, pr.sigma2_rate, pr.iw_df, pr.iw_scale) == (100.0, 2.0, 1.0, 4.0, 1.0)
    assert pr.eta == (0.0, 1.0)
    # uniform ranges correspond to practical ranges from 1 km to 2000 km
    assert_allclose(3.0 / np.array(pr.phi_sp), [2000.0, 1.0])
    with pytest.raises(ValueError):
        Priors(phi_sp=(1.0, 0.5))
    with pytest.raises(ValueError):
        Priors(iw_df=2.0)


def test_sampler_config_draw_count():
    assert SamplerConfig().n_draws == 2500
    assert SamplerConfig(iterations=100, burn_in=50, thin=5).n_draws == 10
    with pytest.raises(ValueError):
        SamplerConfig(iterations=10, burn_in=10)
    with pytest.raises(ValueError):
        SamplerConfig(thin=0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(0, 10 ** 6))
def test_parameter_vector_round_trip(k, seed):
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((3, 3))
    p = ParameterSet(rng.standard_normal((k, 3, 2)), *rng.uniform(0.1, 2, (6, 3)), sigma=g @ g.T + np.eye(3))
    v = p.to_vector()
    assert len(v) == len(ParameterSet.names(k))
    q = ParameterSet.from_vector(v, k)
    assert_array_equal(q.to_vector(), v)
    assert_array_equal(q.sigma, p.sigma)


def test_streams_are_independent_and_reproducible():
    a = stream(5, "fit").standard_normal(4)
    assert_array_equal(a, stream(5, "fit").standard_normal(4))
    assert not np.allclose(a, stream(5, "predict").standard_normal(4))
    assert not np.allclose(stream(5, "predict", 1).random(3), stream(5, "predict", 2).random(3))


# ------------------------------------------------------------------ beta


def test_beta_conditional_normal_equations(tiny):
    ctx, state = tiny
    pr = Priors()
    mean, prec = beta_conditional(state, ctx, pr)
    r = state.y - state.omega - ctx.lam_at_points(state.lam)
    for z in range(ctx.n_regions):
        X = ctx.X[ctx.region == z]
        for i in range(P):
            s2 = state.params.sigma2_eps[i]
            A = X.T @ X / s2 + np.eye(2) / pr.beta_var
            rhs = X.T @ r[ctx.region == z, i] / s2
            assert_allclose(prec[z, i], A, rtol=1e-12)
            assert_allclose(mean[z, i], np.linalg.solve(A, rhs), rtol=1e-10, atol=1e-12)


def test_beta_draws_match_conditional_moments(tiny):
    ctx, state = tiny
    pr = Priors()
    mean, prec = beta_conditional(state, ctx, pr)
    rng = np.random.default_rng(0)
    saved = state.params.beta.copy()
    draws = np.array([update_beta(state, ctx, pr, rng).copy() for _ in range(20000)])
    state.params.beta = saved
    cov = np.linalg.inv(prec[0, 1])
    assert_allclose(draws[:, 0, 1].mean(axis=0), mean[0, 1], atol=4 * np.sqrt(np.diag(cov) / 20000).max())
    assert_allclose(np.cov(draws[:, 0, 1].T), cov, rtol=0.05, atol=0.05 * np.abs(cov).max())


def test_beta_conditional_reduces_to_prior_without_information(tiny):
    ctx, state = tiny
    saved = state.params.sigma2_eps.copy()
    state.params.sigma2_eps = np.full(3, 1e12)
    mean, prec = beta_conditional(state, ctx, Priors())
    state.params.sigma2_eps = saved
    assert_allclose(mean, 0.0, atol=1e-8)
    assert_allclose(np.linalg.inv(prec), np.broadcast_to(100 * np.eye(2), prec.shape), rtol=1e-6, atol=1e-6)


# ------------------------------------------------------------------ lambda


def test_lambda_conditional_dense_oracle(tiny):
    ctx, state = tiny
    prec, rhs = lambda_conditional(state, ctx)
    p = state.params
    r = state.y - ctx.mean(p.beta) - state.omega
    for s in range(ctx.n_sites):
        for i in range(P):
            sel = ctx.site == s
            Z = np.zeros((sel.sum(), 12))
            Z[np.arange(sel.sum()), ctx.month[sel]] = 1.0
            A = lam_prior_precision(p, i) + Z.T @ Z / p.sigma2_eps[i]
            b = Z.T @ r[sel, i] / p.sigma2_eps[i]
            assert_allclose(prec[i, s], A, rtol=1e-10, atol=1e-10)
            assert_allclose(np.linalg.solve(prec[i, s], rhs[i, s]), np.linalg.solve(A, b), rtol=1e-10,
                            atol=1e-10)


def test_lambda_likelihood_dominated_limit():
    ctx, state = make_state(tiny_dataset(2, 12, np.random.default_rng(4)))
    state.params.sigma2_eps = np.full(3, 1e-10)
    lam = update_lambda(state, ctx, Priors(), np.random.default_rng(0))
    r = state.y - ctx.mean(state.params.beta) - state.omega
    for s in range(ctx.n_sites):
        sel = ctx.site == s
        assert_allclose(lam[s][:, ctx.month[sel]], r[sel].T, atol=1e-4)


# ------------------------------------------------------------------ augmentation


def test_truncated_draws_distribution():
    rng = np.random.default_rng(0)
    n = 100_000
    mu, sd = 0.4, 1.3
    x = truncated_below_zero(np.full(n, mu), np.full(n, sd), rng.random(n))
    assert np.all(x <= 0)
    a = (0.0 - mu) / sd
    ref = stats.truncnorm(-np.inf, a, loc=mu, scale=sd)
    assert stats.kstest(x, ref.cdf).pvalue > 0.01


def test_truncated_half_normal_median_and_tail():
    rng = np.random.default_rng(1)
    x = truncated_below_zero(np.zeros(100_000), np.full(100_000, 2.0), rng.random(100_000))
    assert np.all(x < 0)
    assert_allclose(np.median(x), -0.674 * 2.0, rtol=0.02)
    # far tail: mean 40 sd above zero still yields finite negative draws
    far = truncated_below_zero(np.full(1000, 40.0), np.ones(1000), rng.random(1000))
    assert np.all(np.isfinite(far)) and np.all(far <= 0)
    assert far.mean() > -0.1


def test_augmentation_fills_missing_and_censored():
    d = tiny_dataset(2, 6, np.random.default_rng(5))
    rain, tmin, tmax = d.rain.copy(), d.tmin.copy(), d.tmax.copy()
    rain[[0, 3]] = 0.0
    tmax[4] = tmin[4]
    rain[7] = tmin[7] = tmax[7] = np.nan
    ctx, state = make_state(d.with_values(rain, tmin, tmax))
    assert ctx.censored.sum() == 3 and ctx.missing.sum() == 3
    rng = np.random.default_rng(0)
    for _ in range(200):
        y = update_augmented(state, ctx, rng)
        assert np.all(y[ctx.censored] <= 0)
        assert_array_equal(y[ctx.observed], ctx.y_obs[ctx.observed])
    # missing entries collapse onto the mean as the noise vanishes
    state.params.sigma2_eps = np.full(3, 1e-16)
    y = update_augmented(state, ctx, rng)
    mu = ctx.mean(state.params.beta) + state.omega + ctx.lam_at_points(state.lam)
    assert_allclose(y[ctx.missing], mu[ctx.missing], atol=1e-6)


# ------------------------------------------------------------------ omega


def _single_point_draw(ctx, state, n, z):
    from stnngp.inference import _omega_color
    om = state.omega.copy()
    p = state.params
    resid = np.ascontiguousarray(state.y - ctx.mean(p.beta) - ctx.lam_at_points(state.lam))
    zz = np.zeros((ctx.n, 3))
    zz[n] = z
    w = state.weights
    g = ctx.graph
    _omega_color(np.array([n]), om, g.neighbors, g.counts, w.slot, w.b, w.f_inv, ctx.co_ptr, ctx.co_k, ctx.co_pos,
                 1.0 / p.sigma2_eps, resid, zz, np.zeros(1, dtype=np.int64))
    return om[n]


def test_omega_conditional_precision_finite_differences():
    ctx, state = make_state(tiny_dataset(1, 5, np.random.default_rng(6)), m=10)
    p = state.params
    resid = state.y - ctx.mean(p.beta) - ctx.lam_at_points(state.lam)

    def logjoint(om):
        from stnngp.nngp import nngp_logdensity
        return nngp_logdensity(om, ctx.graph, state.weights) + _data_loglik(resid, om, p.sigma2_eps)

    for n in range(ctx.n):
        mean = _single_point_draw(ctx, state, n, np.zeros(3))
        cols = np.stack([_single_point_draw(ctx, state, n, e) - mean for e in np.eye(3)], axis=1)
        cond_prec = np.linalg.inv(cols @ cols.T)
        h = 1e-3
        hess = np.zeros((3, 3))
        base = state.omega.copy()
        base[n] = mean
        for a in range(3):
            for b in range(3):
                def f(da, db):
                    om = base.copy()
                    om[n, a] += da
                    om[n, b] += db
                    return logjoint(om)
                hess[a, b] = (f(h, h) - f(h, -h) - f(-h, h) + f(-h, -h)) / (4 * h * h)
        assert_allclose(cond_prec, -hess, rtol=1e-6, atol=1e-6 * np.abs(hess).max())
        # the conditional mean is a stationary point of the joint log-density
        grad = [(logjoint(base + np.eye(3)[a] * h * (np.arange(ctx.n) == n)[:, None])
                 - logjoint(base - np.eye(3)[a] * h * (np.arange(ctx.n) == n)[:, None])) / (2 * h)
                for a in range(3)]
        assert_allclose(grad, 0.0, atol=1e-6 * np.abs(hess).max())


def test_omega_sweep_targets_dense_posterior():
    ctx, state = make_state(tiny_dataset(2, 4, np.random.default_rng(7)), m=10)
    p = state.params
    Q = nngp_precision(ctx.graph, state.weights)
    resid = (state.y - ctx.mean(p.beta) - ctx.lam_at_points(state.lam)).reshape(-1)
    dinv = np.tile(1.0 / p.sigma2_eps, ctx.n)
    cov = np.linalg.inv(Q + np.diag(dinv))
    mean = cov @ (dinv * resid)
    rng = np.random.default_rng(0)
    n_sweeps = 100_000
    draws = np.empty((n_sweeps, ctx.n * 3))
    for k in range(n_sweeps):
        draws[k] = update_omega(state, ctx, rng).reshape(-1)
    draws = draws[1000:]
    ess = min(effective_sample_size(draws[:, j]) for j in range(0, draws.shape[1], 5))
    thin = max(1, int(math.ceil(2 * len(draws) / ess)))
    se = np.sqrt(np.diag(cov) * thin / len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - mean) < 4.5 * se)
    assert_allclose(np.cov(draws.T), cov, atol=0.05 * np.abs(cov).max())
    # marginal distribution of a random projection, on a thinned chain
    u = np.random.default_rng(1).standard_normal(len(mean))
    proj = draws[::thin] @ u
    ref = stats.norm(u @ mean, math.sqrt(u @ cov @ u))
    assert stats.kstest(proj, ref.cdf).pvalue > 0.01


def test_gaussian_blocks_leave_joint_conditional_invariant():
    ctx, state = make_state(tiny_dataset(2, 5, np.random.default_rng(8)), m=10)
    pr = Priors()
    mean, cov = dense_gaussian_posterior(ctx, state, pr)
    rng = np.random.default_rng(2)
    n_iter = 20000
    out = np.empty((n_iter, len(mean)))
    for k in range(n_iter):
        update_beta(state, ctx, pr, rng)
        update_shift(state, ctx, pr, rng)
        update_lambda(state, ctx, pr, rng)
        update_omega(state, ctx, rng)
        out[k] = flat_state(state)
    out = out[500:]
    sd = np.sqrt(np.diag(cov))
    zs = []
    for j in range(len(mean)):
        ess = effective_sample_size(out[:, j])
        zs.append((out[:, j].mean() - mean[j]) / (sd[j] / math.sqrt(ess)))
    zs = np.abs(zs)
    assert zs.max() < 5.0
    assert np.mean(zs < 2.0) > 0.85
    emp_sd = out.std(axis=0)
    assert np.all(np.abs(emp_sd / sd - 1) < 0.15)


def test_shift_move_preserves_fitted_mean(tiny):
    ctx, state = tiny
    pr = Priors()
    before = ctx.mean(state.params.beta) + state.omega + ctx.lam_at_points(state.lam)
    update_shift(state, ctx, pr, np.random.default_rng(0))
    after = ctx.mean(state.params.beta) + state.omega + ctx.lam_at_points(state.lam)
    assert_allclose(after, before, atol=1e-10)


# ------------------------------------------------------------------ covariance parameters


class ScriptedRng:
    """Feeds fixed normals and uniforms to the Metropolis steps."""

    def __init__(self, normals, uniform):
        self.normals = np.asarray(normals, dtype=float)
        self.uniform = uniform

    def standard_normal(self, size=None):
        return self.normals.copy()

    def random(self, size=None):
        return self.uniform


def _five_point():
    return make_state(tiny_dataset(1, 5, np.random.default_rng(9)), m=10)


def test_zero_step_always_accepted():
    ctx, state = _five_point()
    blk = RWBlock("t", 3, 0.2)
    blk.log_scale = -math.inf
    before = _theta_x(state.params, 0)
    _theta_step(state, ctx, Priors(), ScriptedRng(np.ones(3), 0.999999), blk, 0, False, centred=True)
    assert blk.n_acc == 1
    assert_allclose(_theta_x(state.params, 0), before)


@pytest.mark.parametrize("centred", [True, False])
def test_metropolis_ratio_by_hand(centred):
    ctx, state = _five_point()
    p = state.params
    pr = Priors()
    x = _theta_x(p, 1)
    thetas = [GneitingParams(p.phi_sp[i], p.phi_ti[i], p.eta[i]) for i in range(3)]
    resid = state.y - ctx.mean(p.beta) - ctx.lam_at_points(state.lam)
    assert_allclose(dense_logpdf(state.omega, ctx.points, state.coreg, thetas), state.ld, rtol=1e-10)

    def log_ratio(step):
        xp = x + step
        new_th = list(thetas)
        new_th[1] = GneitingParams(math.exp(xp[0]), math.exp(xp[1]), 1 / (1 + math.exp(-xp[2])))
        if centred:
            # full conditioning: the NNGP density is the dense Gaussian density
            out = dense_logpdf(state.omega, ctx.points, state.coreg, new_th) - state.ld
        else:
            from stnngp.nngp import build_weight_cache
            w_new = build_weight_cache(ctx.graph, state.coreg, new_th)
            om_new = sample_nngp(ctx.graph, w_new, whiten(state.omega, ctx.graph, state.weights))
            out = _data_loglik(resid, om_new, p.sigma2_eps) - _data_loglik(resid, state.omega, p.sigma2_eps)
        return out + _theta_jac(xp) - _theta_jac(x)

    # pick a downhill step so that both outcomes of the uniform comparison are reachable
    rng = np.random.default_rng(0)
    while True:
        step = 0.4 * rng.standard_normal(3)
        log_r = log_ratio(step)
        if -6 < log_r < -0.05:
            break
    xp = x + step
    for factor, accepted in ((0.999, True), (1.001, False)):
        c2, s2 = _five_point()
        blk = RWBlock("t", 3, 1.0)
        _theta_step(s2, c2, pr, ScriptedRng(step, math.exp(log_r) * factor), blk, 1, False, centred=centred,
                    resid=resid)
        assert blk.n_acc == int(accepted)
        if accepted:
            assert_allclose(_theta_x(s2.params, 1), xp, rtol=1e-12)


def test_out_of_support_proposal_rejected():
    ctx, state = _five_point()
    blk = RWBlock("t", 3, 1.0)
    # eta far into the logit tail is fine, phi_sp beyond the upper bound is not
    step = np.array([20.0, 0.0, 0.0])
    _theta_step(state, ctx, Priors(), ScriptedRng(step, 1e-300), blk, 0, False, centred=True)
    assert blk.n_acc == 0


def test_sigma_step_keeps_spd_and_consistent_state():
    ctx, state = _five_point()
    blk = RWBlock("sigma", 6, 0.05)
    rng = np.random.default_rng(0)
    for _ in range(50):
        _sigma_step(state, ctx, Priors(), rng, blk, True, centred=True)
        assert np.linalg.eigvalsh(state.params.sigma).min() > 0
        assert_allclose(state.coreg.a_matrix @ state.coreg.a_matrix, state.params.sigma, rtol=1e-10, atol=1e-12)
    assert blk.n_acc > 0


def test_conjugate_variance_draws_replicate_exactly(tiny):
    ctx, state = tiny
    pr = Priors()
    p = state.params
    r = state.y - ctx.mean(p.beta) - state.omega - ctx.lam_at_points(state.lam)
    lam = state.lam.copy()
    phi0 = p.phi_cy[0]
    rng = np.random.default_rng(11)
    twin = np.random.default_rng(11)
    update_covariance_params(state, ctx, pr, rng, make_blocks(0.3), False)
    s2e = 1.0 / twin.gamma(pr.sigma2_shape + 0.5 * ctx.n, 1.0 / (pr.sigma2_rate + 0.5 * np.sum(r * r, axis=0)))
    assert_allclose(state.params.sigma2_eps, s2e, rtol=1e-14)
    R = month_correlation(phi0)
    quad = np.einsum("sa,ab,sb->", lam[:, 0], np.linalg.inv(R), lam[:, 0])
    s2cy = 1.0 / twin.gamma(pr.sigma2_shape + 0.5 * 12 * ctx.n_sites, 1.0 / (pr.sigma2_rate + 0.5 * quad))
    assert_allclose(state.params.sigma2_cy[0], s2cy, rtol=1e-10)


def test_adaptation_moves_scale_towards_target():
    blk = RWBlock("x", 1, 1.0, target=0.3)
    for _ in range(500):
        blk.record(False, np.zeros(1), True, 50)
    assert blk.log_scale < 0
    frozen = blk.log_scale
    blk.freeze()
    blk.record(True, np.zeros(1), False, 50)
    assert blk.log_scale == frozen


# ------------------------------------------------------------------ chain, archive, DIC


@pytest.fixture(scope="module")
def short_run():
    d = tiny_dataset(3, 12, np.random.default_rng(12))
    cfg = SamplerConfig(iterations=100, burn_in=50, thin=5, seed=3)
    return d, cfg, run_chain(d, cfg)


def test_run_chain_draw_count_and_determinism(short_run):
    d, cfg, arch = short_run
    assert len(arch) == 10
    assert_array_equal(arch.iterations, np.arange(55, 101, 5))
    again = run_chain(d, cfg)
    assert_array_equal(again.params, arch.params)
    assert_array_equal(again.omega, arch.omega)
    assert set(arch.manifest["acceptance"]) == set(make_blocks(0.3))
    assert tuple(arch.manifest["priors"]["phi_sp"]) == Priors().phi_sp


def test_archive_round_trip(short_run, tmp_path):
    _, _, arch = short_run
    arch.save(tmp_path / "a")
    back = PosteriorArchive.load(tmp_path / "a")
    assert back.names == arch.names
    assert_array_equal(back.params, arch.params)
    assert_array_equal(back.loglik, arch.loglik)
    assert_array_equal(back.lam, arch.lam)
    assert back.manifest["data_hash"] == arch.manifest["data_hash"]
    header = (tmp_path / "a" / "draws.csv").read_text().splitlines()[0].split(",")
    assert header[:3] == ["draw", "iteration", "loglik"]


def test_archived_loglik_is_observed_data_likelihood(short_run):
    d, cfg, arch = short_run
    spec = TransformSpec(**arch.manifest["transform"])
    from stnngp.model import design_mean, encode
    y, flags = encode(d.rain, d.tmin, d.tmax, spec)
    k = len(arch) - 1
    p = arch.parameter_set(k)
    mu = design_mean(p.beta, d.region(3), d.elevation_m / 1000) + arch.omega[k] + arch.lam[k][
        d.site_index(), :, d.month - 1]
    assert_allclose(arch.loglik[k], loglik_terms(y, mu, p.sigma2_eps, flags).sum(), rtol=1e-10)


def test_resume_from_checkpoint(tmp_path, monkeypatch):
    import stnngp.inference as inf
    from stnngp.nngp import NumericalError
    d = tiny_dataset(2, 12, np.random.default_rng(13))
    cfg = SamplerConfig(iterations=40, burn_in=20, thin=2, seed=1)
    real = inf.update_omega
    calls = {"n": 0}

    def flaky(state, ctx, rng):
        calls["n"] += 1
        if calls["n"] == 30:
            raise NumericalError("injected")
        return real(state, ctx, rng)

    monkeypatch.setattr(inf, "update_omega", flaky)
    ck = tmp_path / "ck.pkl"
    with pytest.raises(NumericalError, match="iteration 29"):
        run_chain(d, cfg, checkpoint=str(ck))
    assert ck.exists()
    monkeypatch.setattr(inf, "update_omega", real)
    arch = run_chain(d, cfg, resume=str(ck))
    assert len(arch) == cfg.n_draws
    assert arch.iterations[-1] == 40


def test_dic_degenerate_and_hand_computed():
    dic_, dbar, pd = dic_from_values([-10.0, -10.0, -10.0], -10.0)
    assert pd == 0.0 and dic_ == dbar == 20.0
    # two draws with log-likelihoods -3 and -5, plug-in value -3.5
    dic_, dbar, pd = dic_from_values([-3.0, -5.0], -3.5)
    assert dbar == 8.0 and pd == 1.0 and dic_ == 9.0
    with pytest.raises(ValueError):
        dic_from_values([], 0.0)


def test_dic_on_archive(short_run):
    d, _, arch = short_run
    value, dbar, pd = dic(arch, d)
    assert np.isfinite(value)
    assert_allclose(dbar, np.mean(-2 * arch.loglik))
    assert_allclose(value, dbar + pd)


def test_effective_sample_size():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(20000)
    assert 0.8 * 20000 < effective_sample_size(x) < 1.2 * 20000
    rho = 0.9
    ar = np.zeros(50000)
    e = rng.standard_normal(50000)
    for t in range(1, len(ar)):
        ar[t] = rho * ar[t - 1] + e[t]
    expected = 50000 * (1 - rho) / (1 + rho)
    assert 0.7 * expected < effective_sample_size(ar) < 1.3 * expected
    assert effective_sample_size(np.ones(10)) == 10


def test_censored_latents_stay_non_positive():
    d = tiny_dataset(3, 12, np.random.default_rng(14))
    rain = d.rain.copy()
    rain[::4] = 0.0
    d = d.with_values(rain, d.tmin, d.tmax)
    cfg = SamplerConfig(iterations=60, burn_in=30, thin=3, seed=2)
    ctx = FitContext(d, cfg)
    seen = []

    def check(it, state):
        seen.append(bool(np.all(state.y[ctx.censored] <= 0)))

    run_chain(d, cfg, ctx=ctx, callback=check)
    assert len(seen) == 60 and all(seen)
    assert ctx.censored[:, 0].sum() == len(rain[::4])
