"""Acceptance criteria, one test each, at the pinned tolerances.

Every test prints a single ``PASS``/``FAIL`` line (visible even when output
is captured) before asserting. The statistical criteria take tens of
minutes in total; run ``pytest -m "not acceptance"`` to skip them.
"""
import math
import subprocess
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from plnspatial.confounding import StudyConfig, misspecification_study
from plnspatial.covariance import (
    ByShore,
    CovariateInCorr,
    GeomAniso,
    Independence,
    Isotropic,
    SiteGeometry,
    build_covariance,
)
from plnspatial.diagnostics import ess, mcse
from plnspatial.evaluation import anisotropy_summary, dic, score_model, slowest_decay_angle
from plnspatial.model import Hyperpriors, ParameterState, get_model, marginal_moments
from plnspatial.sampler import ChainConfig, run_chains
from plnspatial.simulate import DesignSpec, generate_locations, simulate_study_dataset

from .conftest import make_dataset
from .oracles import grid_means, pln_grid_posterior
from .test_evaluation import PUBLISHED_DIC, _expected_scores

pytestmark = pytest.mark.acceptance

TESTS = Path(__file__).parent


@pytest.fixture
def report(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} [{name}] {detail}")
        return ok

    return emit


def test_dic_identity(report):
    worst = 0.0
    for dbar, pd, printed in PUBLISHED_DIC.values():
        _, _, value = dic([dbar], dbar - pd)
        worst = max(worst, abs(value - printed))
    ok = worst <= 0.1 + 1e-9
    report("DIC identity", ok, f"11 rows, max |Dbar + pD - DIC| = {worst:.3f} (tol 0.1)")
    assert ok


def test_nesting_identities(report):
    locs = generate_locations(DesignSpec(), np.random.default_rng(0))
    dom = ByShore()
    phi = {"N": 2000.0, "S": 500.0}
    var = {"N": 1.0, "S": 0.3}

    def cov(make):
        return build_covariance(dom, {k: make(v) for k, v in phi.items()}, var, locs).values

    m8 = cov(Isotropic)
    d1 = np.max(np.abs(cov(lambda p: GeomAniso(p, 0.0, 1.0)) - m8))
    d2 = np.max(np.abs(cov(lambda p: CovariateInCorr(p, 1e12)) - m8))
    tiny = build_covariance(dom, {"N": Isotropic(1e-12), "S": Isotropic(1e-12)}, var, locs).values
    diag = build_covariance(dom, {"N": Independence(), "S": Independence()}, var, locs).values
    d3 = np.max(np.abs(tiny - diag))
    ok = d1 <= 1e-12 and d2 <= 1e-9 and d3 <= 1e-9
    report("nesting identities", ok, f"M9->M8 {d1:.1e} (1e-12), M10->M8 {d2:.1e} (1e-9), M8->M7 {d3:.1e} (1e-9)")
    assert ok


def test_posterior_oracle(report):
    y = np.array([1, 3, 4, 9])
    x = np.array([-1.0, -0.3, 0.4, 1.2])
    coords = np.array([[0, 0], [1, 0], [1, 1], [2, 1.5]])
    phi, tau2, ig_scale = 1.0, 0.2, 1.0
    R = Isotropic(phi).matrix(SiteGeometry(coords))
    B = np.array([[1, 0], [1, 0], [0, 1], [0, 1.0]])
    bg, sg = np.linspace(-5, 7, 81), np.linspace(-9, 8, 61)
    oracle = grid_means(pln_grid_posterior(y, x, R, B, tau2, 100.0, 2.0, ig_scale, bg, sg), bg, sg)
    assert oracle["beta1_mass_at_edges"] < 1e-4 and oracle["sigma2_mass_at_edges"] < 1e-8

    data = make_dataset(y, x[:, None], coords, days=[1, 1, 2, 2])
    hp = Hyperpriors(sigma2_scale=ig_scale, tau2_scale=1.0, phi_rate={"phi": np.array([1.0])})
    init = ParameterState(beta0=0.5, beta=np.array([0.5]), gamma=np.zeros(2), W=np.log(y + 0.5) - 0.5 * x,
                          sigma2=np.array([1.0]), tau2=tau2, corr={"phi": np.array([phi])})
    cfg = ChainConfig(n_iter=40000, burn_in=5000, thin=1, n_chains=2, seed=1, freeze={"tau2", "corr"})
    s = run_chains(cfg, get_model("M2"), data, hp, init=init)
    ok = True
    parts = []
    for name in ("beta1", "sigma2"):
        chains = s.by_chain(s.scalar_columns()[name])
        est, se, n_eff = chains.mean(), mcse(chains), ess(chains)
        good = abs(est - oracle[name]) <= 3 * se and n_eff > 500
        ok &= good
        parts.append(f"{name} {est:.4f} vs {oracle[name]:.4f} ({abs(est - oracle[name]) / se:.1f} MCSE, ESS {n_eff:.0f})")
    report("posterior oracle", ok, "; ".join(parts) + " (tol 3 MCSE, ESS > 500)")
    assert ok


def test_moment_formulas(report):
    rng = np.random.default_rng(2024)
    N = 10**6
    mu = np.array([1.0, 0.4])
    sigma2, rho = 0.5, 0.6
    L = np.linalg.cholesky(sigma2 * np.array([[1, rho], [rho, 1]]))
    W = mu + rng.standard_normal((N, 2)) @ L.T
    Y = rng.poisson(np.exp(W)).astype(float)
    mean, cov = marginal_moments(mu, sigma2, np.array([[1, rho], [rho, 1]]))
    c = Y - Y.mean(axis=0)
    stats_ = {
        "mean0": (Y[:, 0].mean(), mean[0], Y[:, 0].std() / math.sqrt(N)),
        "mean1": (Y[:, 1].mean(), mean[1], Y[:, 1].std() / math.sqrt(N)),
        "var0": ((c[:, 0] ** 2).mean(), cov[0, 0], (c[:, 0] ** 2).std() / math.sqrt(N)),
        "var1": ((c[:, 1] ** 2).mean(), cov[1, 1], (c[:, 1] ** 2).std() / math.sqrt(N)),
        "cov01": ((c[:, 0] * c[:, 1]).mean(), cov[0, 1], (c[:, 0] * c[:, 1]).std() / math.sqrt(N)),
    }
    z = {k: abs(a - b) / se for k, (a, b, se) in stats_.items()}
    ok = all(v <= 3 for v in z.values())
    report("moment formulas", ok, ", ".join(f"{k} {v:.2f} SE" for k, v in z.items()) + " (tol 3 SE, 1e6 draws)")
    assert ok


@pytest.fixture(scope="module")
def recovery_runs():
    """50 M9 datasets on the default design, one 10k-iteration chain each."""
    model = get_model("M9")
    out = []
    for seed in range(50):
        data, truth = simulate_study_dataset(seed, "M9")
        s = run_chains(ChainConfig(n_iter=10000, burn_in=3000, thin=5, n_chains=1, seed=seed), model, data)
        lo, hi = np.quantile(s.beta, [0.025, 0.975], axis=0)
        out.append({
            "covered": (lo <= truth.beta) & (truth.beta <= hi),
            "phi_ratio": float(np.median(s.corr["phi"][:, 0]) / truth.corr["phi"][0]),
            "w_accept": np.asarray(s.acceptance["W"]).ravel(),
        })
    return out


def test_simulation_recovery(report, recovery_runs):
    cov = np.array([r["covered"] for r in recovery_runs], dtype=float).mean(axis=0)
    ratios = np.array([r["phi_ratio"] for r in recovery_runs])
    within = float(np.mean((ratios >= 0.5) & (ratios <= 2.0)))
    ok = bool(np.all((cov >= 0.85) & (cov <= 1.0)) and within >= 0.6)
    report("simulation recovery", ok,
           f"coverage beta1..4 = {np.round(cov, 2).tolist()} (tol [0.85, 1]); "
           f"phi_N within x2 in {within:.0%} of 50 (tol >= 60%)")
    assert ok


def test_adaptive_w_acceptance(report, recovery_runs):
    acc = np.concatenate([r["w_accept"] for r in recovery_runs])
    first = recovery_runs[0]["w_accept"]
    ok = bool(np.all((acc >= 0.3) & (acc <= 0.6)))
    report("adaptive MH", ok,
           f"standard fit: W acceptance in [{first.min():.3f}, {first.max():.3f}]; "
           f"all 50 fits: [{acc.min():.3f}, {acc.max():.3f}] (tol [0.3, 0.6])")
    assert ok


def test_scoring_rule_propriety(report):
    grid = np.round(np.arange(0.2, 15.0, 0.2), 10)
    step = grid[1] - grid[0]
    worst = 0.0
    for true_lam in (0.6, 1.4, 3.0, 5.2, 9.0):
        table = np.array([_expected_scores(true_lam, g) for g in grid])
        worst = max(worst, max(abs(grid[np.argmin(table[:, j])] - true_lam) for j in range(3)))
    ok = worst <= step + 1e-9
    report("scoring-rule propriety", ok, f"max |argmin - true lambda| = {worst:.2f} over RPS/LogS/DSS (tol {step:.1f})")
    assert ok


def test_model_ranking(report):
    m8, m0 = get_model("M8"), get_model("M0")
    cfg = ChainConfig(n_iter=4000, burn_in=1000, thin=3, n_chains=1)
    wins = 0
    for rep in range(20):
        data, _ = simulate_study_dataset(1000 + rep, "M8")
        a = score_model(run_chains(replace(cfg, seed=rep), m8, data), data)
        b = score_model(run_chains(replace(cfg, seed=rep), m0, data), data)
        wins += all(getattr(a, c) < getattr(b, c) for c in ("DIC", "RPS", "LogS", "DSS"))
    ok = wins / 20 >= 0.9
    report("model ranking", ok, f"M8 beats M0 on DIC, RPS, LogS and DSS in {wins}/20 replicates (tol >= 90%)")
    assert ok


def test_confounding_study(report):
    rows = misspecification_study(30, "SGLM", StudyConfig())
    cov = {(r["fitter"], r["coefficient"]): r["coverage"] for r in rows}
    width = {(r["fitter"], r["coefficient"]): r["mean_width"] for r in rows}
    names = StudyConfig().covariates.names
    rsr_low = [n for n in names if cov[("RSR", n)] < 0.95]
    calibrated = all(0.85 <= cov[(f, n)] <= 1.0 for f in ("SGLM", "RSR-PPD") for n in names)
    narrower = np.mean([width[("RSR", n)] for n in names]) < np.mean([width[("SGLM", n)] for n in names])
    ok = bool(rsr_low) and calibrated and narrower
    fmt = lambda f: "/".join(f"{cov[(f, n)]:.2f}" for n in names)  # noqa: E731
    report("confounding study", ok,
           f"coverage x1..x4 SGLM {fmt('SGLM')}, RSR {fmt('RSR')}, RSR-PPD {fmt('RSR-PPD')}; "
           f"RSR below nominal for {rsr_low}; mean width RSR "
           f"{np.mean([width[('RSR', n)] for n in names]):.3f} vs SGLM {np.mean([width[('SGLM', n)] for n in names]):.3f}")
    assert ok


def test_anisotropy_retrieval(report):
    data, truth = simulate_study_dataset(0, "M9")
    psi_A = float(truth.corr["psi_A"][0])
    assert psi_A == pytest.approx(3 * math.pi / 4)
    s = run_chains(ChainConfig(n_iter=10000, burn_in=2500, thin=10, n_chains=2, seed=0), get_model("M9"), data)
    tab = anisotropy_summary(s, data, n_bins=3)
    target = slowest_decay_angle(psi_A)
    ok = tab.peak.contains(target)
    bins = ", ".join(f"[{b.lower:.2f},{b.upper:.2f}]={b.mean_corr:.3f}" for b in tab.bins)
    report("anisotropy retrieval", ok,
           f"psi_A = 3pi/4, direction {target:.3f} rad; bins {bins}; peak [{tab.peak.lower:.2f},{tab.peak.upper:.2f}]")
    assert ok


def test_geometry_unit_suite(report):
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
         str(TESTS / "test_geometry.py"), str(TESTS / "test_covariance.py")],
        capture_output=True, text=True,
    )
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    ok = proc.returncode == 0
    report("geometry unit suite", ok, summary)
    assert ok
