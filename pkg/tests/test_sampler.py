import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import integrate, stats

from plnspatial.covariance import Block, SiteGeometry, cholesky_jittered, Isotropic
from plnspatial.diagnostics import ess, split_psrf
from plnspatial.errors import InsufficientChains
from plnspatial.model import Hyperpriors, get_model
from plnspatial.sampler import (
    ChainConfig,
    _BlockCache,
    beta0_conditional,
    diagnostics,
    gamma_conditional,
    gibbs_sigma2,
    mh_beta_gamerman,
    mh_corr_params,
    mh_W_randomwalk,
    reflect_angle,
    run_chains,
    sigma2_conditional,
)

from .conftest import make_dataset


def _grid_cdf(logpdf, lo, hi, m=4001):
    x = np.linspace(lo, hi, m)
    lp = np.array([logpdf(v) for v in x])
    p = np.exp(lp - lp.max())
    cdf = integrate.cumulative_trapezoid(p, x, initial=0)
    return x, cdf / cdf[-1]


def _ks_to_grid(draws, x, cdf):
    return stats.kstest(draws, lambda v: np.interp(v, x, cdf)).statistic


# -- closed-form conditionals ---------------------------------------------------


def test_beta0_conditional_examples():
    mean, var = beta0_conditional(np.eye(2), np.array([2.0, 2.0]), 1.0)
    assert mean == pytest.approx(4 / 3) and var == pytest.approx(1 / 3)
    resid = np.array([0.3, -1.2, 2.5])
    mean, _ = beta0_conditional(np.eye(3) / 0.7, resid, 1e12)
    assert mean == pytest.approx(resid.mean())
    assert beta0_conditional(np.eye(3), np.zeros(3), 1.0)[0] == 0.0


def test_beta0_conditional_matches_integration():
    resid = np.array([2.0, 2.0])
    f = lambda b: math.exp(-0.5 * np.sum((resid - b) ** 2) - 0.5 * b * b)  # noqa: E731
    z = integrate.quad(f, -20, 20)[0]
    m = integrate.quad(lambda b: b * f(b), -20, 20)[0] / z
    assert m == pytest.approx(4 / 3, abs=1e-8)


def test_gamma_conditional_single_day():
    r, tau2 = 0.8, 0.5
    B = np.ones((4, 1))
    mean, L = gamma_conditional(np.eye(4), B, np.full(4, r), tau2)
    assert mean[0] == pytest.approx(4 * r / (4 + 1 / tau2))
    f = lambda g: math.exp(-0.5 * 4 * (r - g) ** 2 - 0.5 * g * g / tau2)  # noqa: E731
    z = integrate.quad(f, -10, 10)[0]
    assert integrate.quad(lambda g: g * f(g), -10, 10)[0] / z == pytest.approx(mean[0], abs=1e-8)
    mean, _ = gamma_conditional(np.eye(4), B, np.full(4, r), 1e-12)
    assert abs(mean[0]) < 1e-10
    assert np.all(np.diag(L) > 0)


def test_sigma2_conditional_examples():
    assert sigma2_conditional(np.zeros(5), np.eye(5), 2.0, 1.5) == (4.5, 1.5)
    z = np.array([1.0, 2.0, 2.0, 1.0])  # z'z = 10
    assert sigma2_conditional(z, np.eye(4), 2.0, 1.0) == (4.0, 6.0)


def test_gibbs_sigma2_distribution():
    rng = np.random.default_rng(0)
    z = np.array([1.0, 2.0, 2.0, 1.0])
    draws = np.array([gibbs_sigma2(z, np.eye(4), 2.0, 1.0, rng) for _ in range(20000)])
    assert stats.kstest(draws, stats.invgamma(4, scale=6).cdf).statistic < 0.02


# -- IRLS-proposal MH for the coefficients -------------------------------------


def _poisson_setup(seed=0, n=60):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 1))
    off = rng.normal(1.0, 0.3, n)
    y = rng.poisson(np.exp(off + 0.4 * x[:, 0]))
    return rng, x, off, y


def test_gamerman_acceptance_at_mode():
    rng, x, off, y = _poisson_setup()
    beta = np.array([0.4])
    acc = 0
    for _ in range(1000):
        beta, a = mh_beta_gamerman(beta, x, off, y, 100.0, rng)
        acc += a
    assert acc / 1000 > 0.9


def test_gamerman_tight_prior_collapses():
    rng, x, off, y = _poisson_setup()
    beta = np.array([0.0])
    for _ in range(50):
        beta, _ = mh_beta_gamerman(beta, x, off, y, 1e-10, rng)
    assert abs(beta[0]) < 1e-3


def test_gamerman_stationary_matches_grid():
    rng, x, off, y = _poisson_setup(1)
    logpost = lambda b: float(np.sum(y * (off + x[:, 0] * b) - np.exp(off + x[:, 0] * b)) - b * b / 200)  # noqa: E731
    grid, cdf = _grid_cdf(logpost, -1.0, 2.0)
    beta = np.array([0.0])
    draws = []
    for i in range(10500):
        beta, _ = mh_beta_gamerman(beta, x, off, y, 100.0, rng)
        if i >= 500:
            draws.append(beta[0])
    assert _ks_to_grid(np.array(draws), grid, cdf) < 0.05


# -- random walk on W ------------------------------------------------------------


def _w_chain(scale, n_iter, seed=0, y=3, mu=0.5, q=2.0):
    rng = np.random.default_rng(seed)
    W = np.array([0.0])
    Q = np.array([[q]])
    out = np.empty(n_iter)
    acc = 0
    for i in range(n_iter):
        W, a = mh_W_randomwalk(W, np.zeros(1), np.array([y]), np.array([mu]), Q, np.array([scale]), rng)
        out[i] = W[0]
        acc += int(a[0])
    return out, acc / n_iter


def test_w_scale_limits():
    _, small = _w_chain(1e-8, 500)
    _, big = _w_chain(1e6, 500)
    assert small > 0.99
    assert big < 0.01


def test_w_stationary_matches_grid():
    y, mu, q = 3, 0.5, 2.0
    logpost = lambda w: y * w - math.exp(w) - 0.5 * q * (w - mu) ** 2  # noqa: E731
    grid, cdf = _grid_cdf(logpost, -4, 4)
    draws, _ = _w_chain(1.4, 100000, seed=3, y=y, mu=mu, q=q)
    assert _ks_to_grid(draws[::10], grid, cdf) < 0.05


# -- correlation hyperparameters ---------------------------------------------------


def test_reflection_rule():
    eps = 0.1
    assert reflect_angle(math.pi + eps) == pytest.approx(math.pi - eps)
    assert reflect_angle(-eps) == pytest.approx(eps)
    assert reflect_angle(2 * math.pi + 0.3) == pytest.approx(0.3)
    for x in np.linspace(-10, 10, 101):
        assert 0 <= reflect_angle(x) <= math.pi


def _corr_setup(seed=0, n=100, phi=1.0):
    rng = np.random.default_rng(seed)
    coords = rng.uniform(0, 10, (n, 2))
    geom = SiteGeometry(coords)
    L, _ = cholesky_jittered(Isotropic(phi).matrix(geom))
    z = L @ rng.standard_normal(n)
    model = get_model("M2")
    cache = _BlockCache(Block("", np.arange(n), geom), model, {"phi": 3.0})
    hp = Hyperpriors(sigma2_scale=1.0, tau2_scale=1.0, phi_rate={"phi": np.array([0.2])})
    return rng, geom, z, model, cache, hp


def test_phi_walk_stays_positive_and_recovers_truth():
    rng, geom, z, model, cache, hp = _corr_setup()
    draws = []
    for i in range(3000):
        mh_corr_params(cache, 0, z, 1.0, hp, {"phi": 0.5}, rng)
        assert cache.params["phi"] > 0
        if i >= 500:
            draws.append(cache.params["phi"])
    assert 0.5 <= np.median(draws) <= 2.0


def test_phi_walk_matches_grid_posterior():
    rng, geom, z, model, cache, hp = _corr_setup(seed=4, n=30)

    def logpost(phi):
        L, _ = cholesky_jittered(Isotropic(phi).matrix(geom))
        u = np.linalg.solve(L, z)
        return -0.5 * u @ u - np.sum(np.log(np.diag(L))) - 0.2 * phi

    grid, cdf = _grid_cdf(logpost, 1e-3, 20, 1500)
    draws = []
    for i in range(30000):
        mh_corr_params(cache, 0, z, 1.0, hp, {"phi": 0.8}, rng)
        if i >= 1000 and i % 5 == 0:
            draws.append(cache.params["phi"])
    assert _ks_to_grid(np.array(draws), grid, cdf) < 0.05


# -- chains -----------------------------------------------------------------------


def test_stored_draw_count():
    assert ChainConfig().n_stored * ChainConfig().n_chains == 2000


def test_config_validation():
    for bad in (dict(burn_in=10, n_iter=10), dict(thin=0), dict(n_chains=0), dict(freeze={"nope"})):
        with pytest.raises(ValueError):
            ChainConfig(**bad)


def _small_cfg(**kw):
    base = dict(n_iter=300, burn_in=100, thin=2, n_chains=2, seed=11)
    base.update(kw)
    return ChainConfig(**base)


def test_determinism(two_shore_data):
    m = get_model("M9")
    a = run_chains(_small_cfg(), m, two_shore_data)
    b = run_chains(_small_cfg(), m, two_shore_data)
    for k, v in a.columns().items():
        np.testing.assert_array_equal(v, b.columns()[k])
    c = run_chains(_small_cfg(seed=12), m, two_shore_data)
    assert not np.array_equal(a.beta0, c.beta0)


def test_draw_count_and_shapes(two_shore_data):
    s = run_chains(_small_cfg(), get_model("M10"), two_shore_data)
    assert s.n_draws == 2 * 100
    assert s.sigma2.shape == (200, 2) and set(s.corr) == {"phi1", "phi2"}
    assert s.gamma.shape == (200, two_shore_data.T)
    assert all(d["psrf"] >= 1.0 for d in s.diagnostics.values())


def test_baseline_has_no_spatial_effect(two_shore_data):
    s = run_chains(_small_cfg(), get_model("M0"), two_shore_data)
    assert np.all(s.Z == 0)
    assert s.sigma2.shape == (200, 0) and not s.corr


def test_adaptation_frozen_after_burn_in(two_shore_data):
    s = run_chains(_small_cfg(), get_model("M9"), two_shore_data)
    for at_burn, final in zip(s.meta["scales_at_burn_in"], s.meta["scales_final"]):
        assert at_burn == final


def test_freeze_keeps_values(two_shore_data):
    s = run_chains(_small_cfg(freeze={"corr", "tau2"}), get_model("M8"), two_shore_data)
    assert np.unique(s.tau2[s.chain == 0]).size == 1
    assert np.unique(s.corr["phi"][s.chain == 0, 0]).size == 1


def test_update_order_permutation_preserves_moments():
    rng = np.random.default_rng(8)
    n = 5
    coords = rng.uniform(0, 3, (n, 2))
    X = rng.standard_normal((n, 1))
    d = make_dataset(rng.poisson(np.exp(1 + 0.5 * X[:, 0])), X, coords, days=[1, 2, 1, 2, 1])
    m = get_model("M2")
    hp = Hyperpriors(sigma2_scale=0.5, tau2_scale=0.5)
    base = ChainConfig(n_iter=8000, burn_in=1000, thin=1, n_chains=2, seed=3)
    a = run_chains(base, m, d, hp)
    order = ("corr", "tau2", "sigma2", "gamma", "beta0", "ridge", "W", "beta")
    b = run_chains(replace(base, update_order=order, seed=4), m, d, hp)
    assert not np.array_equal(a.beta, b.beta)
    for name in ("beta1", "beta0", "sigma2"):
        xa, xb = a.scalar_columns()[name], b.scalar_columns()[name]
        se = math.hypot(xa.std() / math.sqrt(ess(a.by_chain(xa))), xb.std() / math.sqrt(ess(b.by_chain(xb))))
        assert abs(xa.mean() - xb.mean()) < 4 * se


# -- diagnostics ---------------------------------------------------------------------


def test_psrf_constant_chains():
    assert split_psrf(np.ones((2, 100))) == 1.0


def test_psrf_detects_shift():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 1000))
    x[1] += 10
    assert split_psrf(x) > 2


def test_ess_white_noise():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 5000))
    assert abs(ess(x) / x.size - 1) < 0.2


def test_ess_bounds_for_autocorrelated_chain():
    rng = np.random.default_rng(2)
    e = rng.standard_normal((2, 5000))
    x = np.zeros_like(e)
    for t in range(1, 5000):
        x[:, t] = 0.9 * x[:, t - 1] + e[:, t]
    v = ess(x)
    # AR(1) with rho = 0.9: ESS ~ N (1 - rho) / (1 + rho)
    assert 0 < v < x.size
    assert v == pytest.approx(x.size * 0.1 / 1.9, rel=0.35)


def test_diagnostics_need_two_chains(two_shore_data):
    s = run_chains(_small_cfg(n_chains=1), get_model("M1"), two_shore_data)
    with pytest.raises(InsufficientChains):
        diagnostics(s)
    with pytest.raises(InsufficientChains):
        split_psrf(np.zeros((1, 10)))
