import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from plnspatial.confounding import (
    StudyConfig,
    coefficient_draws,
    confounding_report,
    fit_rsr,
    misspecification_study,
    projection,
    rsr_ppd,
    simulate_replicate,
    write_coverage,
)
from plnspatial.covariance import Isotropic, SiteGeometry, cholesky_jittered
from plnspatial.diagnostics import ess
from plnspatial.errors import RankDeficientDesign
from plnspatial.model import get_model, poisson_loglik
from plnspatial.sampler import ChainConfig, run_chains
from plnspatial.simulate import DesignSpec

from .conftest import make_dataset


def test_projection_examples():
    P = projection(np.ones((2, 1)))
    np.testing.assert_allclose(P.P_perp, [[0.5, -0.5], [-0.5, 0.5]], atol=1e-12)
    assert P.rank == 1


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (9, 2), elements=st.floats(-5, 5)))
def test_projection_invariants(cols):
    X = np.column_stack([np.ones(9), cols])
    assume(np.linalg.cond(X) < 1e6)
    P = projection(X)
    np.testing.assert_allclose(P.P_perp @ P.P_perp, P.P_perp, atol=1e-10)
    np.testing.assert_allclose(P.P_perp @ X, 0, atol=1e-10)
    np.testing.assert_allclose(P.P_perp, P.P_perp.T, atol=1e-12)
    assert P.rank == 9 - 3
    assert np.trace(P.P_perp) == pytest.approx(6)


def test_projection_rank_deficient():
    X = np.column_stack([np.ones(5), np.arange(5.0), 2 * np.arange(5.0)])
    with pytest.raises(RankDeficientDesign):
        projection(X)
    with pytest.raises(RankDeficientDesign):
        rsr_ppd(np.zeros((1, 3)), X, np.zeros((1, 5)))


def test_rsr_ppd_identities():
    rng = np.random.default_rng(0)
    X = np.column_stack([np.ones(8), rng.standard_normal((8, 2))])
    alpha = rng.standard_normal((5, 3))
    np.testing.assert_array_equal(rsr_ppd(alpha, X, np.zeros((5, 8))), alpha)
    c = rng.standard_normal((5, 3))
    np.testing.assert_allclose(rsr_ppd(alpha, X, c @ X.T), alpha - c, atol=1e-12)
    once = rsr_ppd(alpha, X, rng.standard_normal((5, 8)))
    np.testing.assert_array_equal(rsr_ppd(once, X, np.zeros((5, 8))), once)
    # the component of Z orthogonal to X leaves the coefficients untouched
    z_perp = projection(X)(rng.standard_normal((5, 8)))
    np.testing.assert_allclose(rsr_ppd(alpha, X, z_perp), alpha, atol=1e-12)


def _gp_data(seed, n=40, confound=0.0, orth=False, phi=800.0):
    rng = np.random.default_rng(seed)
    coords = rng.uniform(0, 3000, (n, 2))
    L, _ = cholesky_jittered(0.6 * Isotropic(phi).matrix(SiteGeometry(coords)))
    z = L @ rng.standard_normal(n)
    x = rng.standard_normal(n)
    if orth:
        x = projection(np.column_stack([np.ones(n), z]))(x)
        x /= x.std()
    if confound:
        x = (z - z.mean()) / z.std()
        z = z + confound * x
    days = [1 + i % 4 for i in range(n)]
    y = rng.poisson(np.exp(1.0 + 0.5 * x + z))
    return make_dataset(y, x[:, None], coords, days=days), z


CHAIN = ChainConfig(n_iter=4000, burn_in=1000, thin=2, n_chains=2, seed=5)


def test_restricted_effect_is_orthogonal_and_likelihoods_match():
    data, _ = _gp_data(1, n=20)
    s = fit_rsr(replace(CHAIN, n_iter=400, burn_in=100), "M2", data)
    eff = s.spatial_effect(data)
    np.testing.assert_allclose(eff @ data.design, 0, atol=1e-8)
    # same composite predictor, same conditional likelihood under both parameterisations
    eta = s.linear_predictor(data)
    as_sglm = replace(s, restricted=False, Z=eff)
    np.testing.assert_allclose(as_sglm.linear_predictor(data), eta, atol=1e-10)
    np.testing.assert_array_equal(poisson_loglik(eta, data.counts), poisson_loglik(as_sglm.linear_predictor(data), data.counts))


def test_rsr_needs_spatial_model():
    data, _ = _gp_data(1, n=10)
    with pytest.raises(ValueError):
        fit_rsr(CHAIN, "M0", data)


def _mcse(sample, x):
    return x.std() / math.sqrt(ess(sample.by_chain(x)))


def test_no_confounding_means_agree():
    data, _ = _gp_data(2, orth=True)
    m = get_model("M2")
    sglm = run_chains(CHAIN, m, data)
    rsr = fit_rsr(CHAIN, m, data)
    a, b = sglm.beta[:, 0], rsr.beta[:, 0]
    # the two posteriors differ slightly (posterior uncertainty in Z leaks onto x),
    # so agreement is judged on the posterior scale rather than Monte Carlo error alone
    tol = 3 * math.hypot(_mcse(sglm, a), _mcse(rsr, b)) + 0.5 * a.std()
    assert abs(a.mean() - b.mean()) < tol


def test_collinear_effect_absorbed_by_restricted_fit():
    data, _ = _gp_data(3, confound=0.6)
    m = get_model("M2")
    sglm = run_chains(CHAIN, m, data)
    rsr = fit_rsr(CHAIN, m, data)
    total = 0.5 + 0.6 * 1.0  # true slope plus the part of Z carried by x (approximately)
    alpha = rsr.beta[:, 0].mean()
    beta = sglm.beta[:, 0].mean()
    assert abs(alpha - total) < abs(beta - total)
    rep = confounding_report(sglm, rsr, data)
    widths = {(r["fitter"], r["coefficient"]): r["width"] for r in rep.rows()}
    for name in ("beta0", "x1"):
        assert widths[("RSR-PPD", name)] >= widths[("RSR", name)]
    for r in rep.rows():
        assert r["lower"] <= r["mean"] <= r["upper"] and r["width"] > 0
    np.testing.assert_array_equal(coefficient_draws(rsr, data, "RSR"), rsr.beta_draws())


def _tiny_study(seed=0):
    return StudyConfig(
        design=DesignSpec(n_locations=24, n_days=6, cluster_sizes=((4, 6),)),
        chain=ChainConfig(n_iter=60, burn_in=20, thin=1, n_chains=1),
        seed=seed,
    )


def test_study_rows_and_determinism(tmp_path):
    with pytest.raises(ValueError):
        misspecification_study(19, "SGLM")
    with pytest.raises(ValueError):
        misspecification_study(20, "CAR", _tiny_study())
    rows = misspecification_study(20, "RSR", _tiny_study())
    assert len(rows) == 3 * 4
    assert {r["fitter"] for r in rows} == {"SGLM", "RSR", "RSR-PPD"}
    for r in rows:
        assert 0 <= r["coverage"] <= 1 and r["mean_width"] > 0
    again = misspecification_study(20, "RSR", _tiny_study())
    assert rows == again
    path = tmp_path / "coverage.csv"
    write_coverage(rows, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "generator,fitter,coefficient,coverage,mean_width"
    assert len(lines) == 13


def test_rsr_generator_is_orthogonal():
    cfg = _tiny_study()
    a, truth = simulate_replicate(cfg, "RSR", 3)
    b, _ = simulate_replicate(cfg, "RSR", 3)
    np.testing.assert_array_equal(a.counts, b.counts)
    assert truth.tolist() == list(cfg.beta)
    assert a.n == 24 and a.covariates.shape == (24, 4)
