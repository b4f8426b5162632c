"""Metropolis-within-Gibbs sampler for the Poisson-lognormal models.

Spatial models (M1-M10) use the reparametrisation

    log lambda = X* beta* + W,   W ~ N(1 beta0 + B gamma, Sigma)

so that beta0 and gamma have normal full conditionals and the variances
inverse-gamma ones. beta* is moved by a Metropolis-Hastings step whose
proposal is one IRLS (Fisher scoring) step from the current value, W by a
sitewise adaptive random walk, and the correlation hyperparameters by
random walks on transformed scales.

The baseline M0 and the restricted spatial regression have no such
reparametrisation; they run in "direct" form

    log lambda = X alpha + B gamma + M Z,   Z ~ N(0, Sigma)

with M = P_perp (restricted) or no Z at all (M0), where alpha and gamma
are both moved by IRLS-proposal Metropolis steps.
"""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg

from . import _kernels
from .covariance import Block, cholesky_jittered
from .diagnostics import summarize
from .errors import NotPositiveDefinite, NumericalError, SamplerFailure, SingularCovariance
from .model import (
    Dataset,
    Hyperpriors,
    ModelConfig,
    ParameterState,
    log_gamma_pdf,
    log_pareto,
    log_uniform_angle,
    poisson_loglik,
    prelim_loglinear_fit,
    residual_projector,
    temporal_cov,
    temporal_design,
)

log = logging.getLogger(__name__)

DEFAULT_ORDER = ("beta", "W", "ridge", "beta0", "gamma", "sigma2", "tau2", "corr")
BLOCK_NAMES = frozenset(DEFAULT_ORDER) | {"phi_gamma"}
THREADS_ENV = "PLNSPATIAL_THREADS"
LOG_2PI = math.log(2 * math.pi)


@dataclass
class ChainConfig:
    n_iter: int = 70000
    burn_in: int = 10000
    thin: int = 60
    n_chains: int = 2
    seed: int = 0
    adapt_target: float = 0.44
    adapt_window: int = 50
    freeze: frozenset = frozenset()
    update_order: tuple = DEFAULT_ORDER

    def __post_init__(self):
        if not 0 <= self.burn_in < self.n_iter:
            raise ValueError("need 0 <= burn_in < n_iter")
        if self.thin < 1 or self.n_chains < 1 or self.adapt_window < 1:
            raise ValueError("thin, n_chains and adapt_window must be >= 1")
        self.freeze = frozenset(self.freeze)
        unknown = (self.freeze | set(self.update_order)) - BLOCK_NAMES
        if unknown:
            raise ValueError(f"unknown sampler blocks: {sorted(unknown)}")
        self.update_order = tuple(self.update_order)

    @property
    def n_stored(self) -> int:
        return (self.n_iter - self.burn_in) // self.thin

    def to_dict(self) -> dict:
        d = asdict(self)
        d["freeze"] = sorted(self.freeze)
        d["update_order"] = list(self.update_order)
        return d


# -- closed-form conditionals -----------------------------------------------


def beta0_conditional(Q, resid, prior_var):
    """Mean and variance of beta0 | W, gamma with ``resid = W - B gamma``."""
    ones_Q = np.asarray(Q).sum(axis=0)
    prec = ones_Q.sum() + 1.0 / prior_var
    if not prec > 0:
        raise SingularCovariance("non-positive precision for beta0")
    return float(ones_Q @ resid / prec), float(1.0 / prec)


def gibbs_beta0(Q, resid, prior_var, rng) -> float:
    mean, var = beta0_conditional(Q, resid, prior_var)
    return mean + math.sqrt(var) * rng.standard_normal()


def gamma_conditional(Q, B, resid, tau2, corr_inv=None):
    """Mean and Cholesky factor of the precision of gamma | W, beta0.

    ``resid = W - beta0``; ``corr_inv`` is the inverse temporal correlation
    (identity when None).
    """
    BtQ = B.T @ Q
    prior = np.eye(B.shape[1]) if corr_inv is None else corr_inv
    prec = BtQ @ B + prior / tau2
    try:
        L = linalg.cholesky(prec, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise SingularCovariance("gamma precision not positive definite") from exc
    mean = linalg.cho_solve((L, True), BtQ @ resid, check_finite=False)
    return mean, L


def gibbs_gamma(Q, B, resid, tau2, rng, corr_inv=None) -> np.ndarray:
    mean, L = gamma_conditional(Q, B, resid, tau2, corr_inv)
    z = rng.standard_normal(mean.size)
    return mean + linalg.solve_triangular(L.T, z, lower=False, check_finite=False)


def sigma2_conditional(z, corr_inv, shape, scale):
    """Inverse-gamma (shape, scale) of a variance given ``z ~ N(0, s2 R)``."""
    z = np.asarray(z, dtype=float)
    quad = float(z @ corr_inv @ z) if corr_inv is not None else float(z @ z)
    return shape + 0.5 * z.size, scale + 0.5 * quad


def draw_invgamma(shape, scale, rng) -> float:
    return scale / rng.gamma(shape)


def gibbs_sigma2(z, corr_inv, shape, scale, rng) -> float:
    a, b = sigma2_conditional(z, corr_inv, shape, scale)
    return draw_invgamma(a, b, rng)


# -- IRLS-proposal Metropolis-Hastings ------------------------------------------


def irls_proposal(coef, X, offset, y, prior_prec):
    """Gaussian proposal from one weighted-least-squares step at ``coef``.

    Working response ``eta + (y - lambda) / lambda`` (minus the offset),
    weights ``lambda``, zero-mean Gaussian prior with precision
    ``prior_prec``. Returns (mean, lower Cholesky factor of the precision).
    """
    lin = X @ coef
    with np.errstate(over="ignore"):
        lam = np.exp(lin + offset)
    if not np.all(np.isfinite(lam)) or np.any(lam <= 0):
        raise NumericalError("non-finite rate in IRLS proposal")
    work = lin + (y - lam) / lam
    prec = (X * lam[:, None]).T @ X + prior_prec
    L = linalg.cholesky(prec, lower=True, check_finite=False)
    mean = linalg.cho_solve((L, True), X.T @ (lam * work), check_finite=False)
    return mean, L


def _log_q(x, mean, L) -> float:
    u = L.T @ (x - mean)
    return float(np.sum(np.log(np.diag(L))) - 0.5 * u @ u - 0.5 * x.size * LOG_2PI)


def _log_target(coef, X, offset, y, prior_prec) -> float:
    eta = X @ coef + offset
    with np.errstate(over="ignore"):
        lam = np.exp(eta)
    if not np.all(np.isfinite(lam)):
        return -math.inf
    return float(np.sum(y * eta - lam) - 0.5 * coef @ prior_prec @ coef)


def mh_irls(coef, X, offset, y, prior_prec, rng):
    """One IRLS-proposal MH step; returns (coef, accepted)."""
    coef = np.asarray(coef, dtype=float)
    if coef.size == 0:
        return coef, False
    try:
        m_fwd, L_fwd = irls_proposal(coef, X, offset, y, prior_prec)
        prop = m_fwd + linalg.solve_triangular(
            L_fwd.T, rng.standard_normal(coef.size), lower=False, check_finite=False
        )
        m_bwd, L_bwd = irls_proposal(prop, X, offset, y, prior_prec)
    except (NumericalError, linalg.LinAlgError, FloatingPointError):
        rng.random()  # keep the stream aligned with an ordinary step
        return coef, False
    log_ratio = (
        _log_target(prop, X, offset, y, prior_prec)
        - _log_target(coef, X, offset, y, prior_prec)
        + _log_q(coef, m_bwd, L_bwd)
        - _log_q(prop, m_fwd, L_fwd)
    )
    if math.log(rng.random()) < log_ratio:
        return prop, True
    return coef, False


def penalized_mode(X, offset, y, prior_prec, start=None, max_iter=100, tol=1e-10):
    """Posterior mode of a Poisson log-linear model with a Gaussian prior.

    Damped Newton (IRLS) iterations; returns (mode, lower Cholesky factor of
    the Hessian at the mode).
    """
    coef = np.zeros(X.shape[1]) if start is None else np.array(start, dtype=float)
    cur = _log_target(coef, X, offset, y, prior_prec)
    for _ in range(max_iter):
        mean, _ = irls_proposal(coef, X, offset, y, prior_prec)
        step = mean - coef
        t = 1.0
        while t > 1e-8:
            new = coef + t * step
            val = _log_target(new, X, offset, y, prior_prec)
            if val >= cur:
                break
            t *= 0.5
        coef, cur = new, val
        if np.max(np.abs(t * step)) < tol:
            break
    lam = np.exp(X @ coef + offset)
    H = (X * lam[:, None]).T @ X + prior_prec
    return coef, linalg.cholesky(H, lower=True, check_finite=False)


def mh_beta_gamerman(beta, X, W, y, prior_var, rng):
    """MH update of the covariate coefficients given W (the offset)."""
    k = np.asarray(beta).size
    return mh_irls(beta, X, W, y, np.eye(k) / prior_var, rng)


def centered_beta_conditional(Q, X, resid, prior_var):
    """Mean and precision Cholesky of beta* given eta = X beta* + W held fixed.

    ``resid = eta - 1 beta0 - B gamma``; then W - mean(W) = resid - X beta*
    and the Poisson likelihood does not change, so the conditional is normal.
    """
    QX = Q @ X
    prec = X.T @ QX + np.eye(X.shape[1]) / prior_var
    try:
        L = linalg.cholesky(prec, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise SingularCovariance("beta precision not positive definite") from exc
    return linalg.cho_solve((L, True), QX.T @ resid, check_finite=False), L


def gibbs_beta_centered(Q, X, resid, prior_var, rng) -> np.ndarray:
    mean, L = centered_beta_conditional(Q, X, resid, prior_var)
    return mean + linalg.solve_triangular(L.T, rng.standard_normal(mean.size), lower=False, check_finite=False)


# -- latent field random walks ------------------------------------------------


def mh_W_randomwalk(W, eta_fixed, y, mu, Q, scales, rng):
    """Sitewise random-walk MH over W; returns (W, per-site 0/1 acceptance)."""
    n = W.size
    eps = rng.standard_normal(n)
    logu = np.log(rng.random(n))
    W = np.array(W, dtype=float)
    accepted = np.zeros(n, dtype=np.int8)
    _kernels.w_sweep(
        W,
        np.ascontiguousarray(eta_fixed, dtype=float),
        np.ascontiguousarray(y, dtype=float),
        np.ascontiguousarray(mu, dtype=float),
        np.ascontiguousarray(Q, dtype=float),
        np.ascontiguousarray(scales, dtype=float),
        eps,
        logu,
        accepted,
    )
    return W, accepted


def mh_Z_projected(Z, eta, y, Q, M, scales, rng):
    """Sitewise random walk on Z when the log-rate sees ``M @ Z``."""
    n = Z.size
    eps = rng.standard_normal(n)
    logu = np.log(rng.random(n))
    Z = np.array(Z, dtype=float)
    eta = np.array(eta, dtype=float)
    accepted = np.zeros(n, dtype=np.int8)
    _kernels.z_sweep(Z, eta, np.ascontiguousarray(y, dtype=float), Q, M, scales, eps, logu, accepted)
    return Z, eta, accepted


# -- correlation hyperparameters ------------------------------------------------


def reflect_angle(x: float, upper: float = math.pi) -> float:
    """Fold ``x`` into [0, upper] by reflection at both ends."""
    period = 2.0 * upper
    x = math.fmod(x, period)
    if x < 0:
        x += period
    return period - x if x > upper else x


def _to_free(name, x):
    if name.startswith("phi"):
        return math.log(x)
    if name == "psi_R":
        return math.log(x - 1.0) if x > 1.0 else -50.0
    return x


def _from_free(name, u):
    if name.startswith("phi"):
        return math.exp(u)
    if name == "psi_R":
        return 1.0 + math.exp(u)
    return reflect_angle(u)


def _log_jacobian(name, x):
    if name.startswith("phi"):
        return math.log(x)
    if name == "psi_R":
        return math.log(x - 1.0) if x > 1.0 else -math.inf
    return 0.0


def log_corr_prior(name, x, hp: Hyperpriors, block: int) -> float:
    if name.startswith("phi"):
        rate = np.atleast_1d(hp.phi_rate[name])
        return log_gamma_pdf(x, hp.phi_shape, float(rate[min(block, rate.size - 1)]))
    if name == "psi_R":
        return log_pareto(x, hp.pareto_scale, hp.pareto_shape)
    if name == "psi_A":
        return log_uniform_angle(x, hp.psi_A_upper)
    raise KeyError(name)


class _BlockCache:
    """Factorised correlation matrix of one spatial block."""

    def __init__(self, block: Block, model: ModelConfig, params: dict):
        self.block = block
        self.model = model
        self.params = dict(params)
        self.jitter_events = 0
        self.set(*self.factor(self.params))

    def factor(self, params):
        if not self.model.param_names:
            n = self.block.index.size
            return np.eye(n), 0.0, 0.0
        R = self.model.make_spec(params).matrix(self.block.geom)
        L, jitter = cholesky_jittered(R)
        return L, jitter, 2.0 * float(np.sum(np.log(np.diag(L))))

    def set(self, L, jitter, logdet):
        self.L, self.logdet = L, logdet
        if jitter > 0:
            self.jitter_events += 1
        if self.model.param_names:
            self.Rinv = linalg.cho_solve((L, True), np.eye(L.shape[0]), check_finite=False)
        else:
            self.Rinv = np.eye(L.shape[0])

    def quad(self, z, L=None):
        L = self.L if L is None else L
        u = linalg.solve_triangular(L, z, lower=True, check_finite=False)
        return float(u @ u)


def mh_corr_params(cache: _BlockCache, block_index: int, z, sigma2, hp, scales, rng):
    """One-at-a-time random-walk MH over a block's correlation hyperparameters.

    Decay parameters move on the log scale, psi_R on log(psi_R - 1), psi_A by a
    reflected walk on [0, pi]. Returns a dict of 0/1 acceptance flags.
    """
    flags = {}
    cur_quad = cache.quad(z)
    for name in cache.model.param_names:
        x = cache.params[name]
        u_new = _to_free(name, x) + scales[name] * rng.standard_normal()
        x_new = _from_free(name, u_new)
        logu = math.log(rng.random())
        prop = dict(cache.params)
        prop[name] = x_new
        lp_new = log_corr_prior(name, x_new, hp, block_index)
        if not math.isfinite(lp_new):
            flags[name] = 0
            continue
        try:
            L, jitter, logdet = cache.factor(prop)
        except NotPositiveDefinite:
            flags[name] = 0
            continue
        new_quad = cache.quad(z, L)
        log_ratio = (
            -0.5 * (new_quad - cur_quad) / sigma2
            - 0.5 * (logdet - cache.logdet)
            + lp_new
            - log_corr_prior(name, x, hp, block_index)
            + _log_jacobian(name, x_new)
            - _log_jacobian(name, x)
        )
        if logu < log_ratio:
            cache.params = prop
            cache.set(L, jitter, logdet)
            cur_quad = new_quad
            flags[name] = 1
        else:
            flags[name] = 0
    return flags


# -- posterior container ------------------------------------------------------


@dataclass
class PosteriorSample:
    model_id: str
    beta0: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    Z: np.ndarray
    sigma2: np.ndarray
    tau2: np.ndarray
    corr: dict
    chain: np.ndarray
    block_labels: tuple = ("",)
    phi_gamma: np.ndarray | None = None
    restricted: bool = False
    acceptance: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return self.beta0.size

    @property
    def n_chains(self) -> int:
        return int(self.chain.max()) + 1 if self.chain.size else 0

    def spatial_effect(self, data: Dataset) -> np.ndarray:
        """Spatial term entering the log-rate: Z, or P_perp Z when restricted."""
        if self.restricted:
            return self.Z @ residual_projector(data.design).T
        return self.Z

    def linear_predictor(self, data: Dataset) -> np.ndarray:
        """(n_draws, n) log-rates."""
        return (
            self.beta[:, None, :] @ data.covariates.T[None, :, :]
        )[:, 0, :] + self.beta0[:, None] + self.gamma[:, data.day - 1] + self.spatial_effect(data)

    def W(self, data: Dataset) -> np.ndarray:
        return self.beta0[:, None] + self.gamma[:, data.day - 1] + self.spatial_effect(data)

    def state(self, m: int, data: Dataset) -> ParameterState:
        return ParameterState(
            beta0=float(self.beta0[m]),
            beta=self.beta[m],
            gamma=self.gamma[m],
            W=self.W(data)[m] if data is not None else self.Z[m],
            sigma2=self.sigma2[m],
            tau2=float(self.tau2[m]),
            corr={k: v[m] for k, v in self.corr.items()},
            phi_gamma=None if self.phi_gamma is None else float(self.phi_gamma[m]),
        )

    def draws(self, data: Dataset) -> list[ParameterState]:
        return [self.state(m, data) for m in range(self.n_draws)]

    def _suffix(self, b):
        label = self.block_labels[b]
        return f"_{label}" if label else ""

    def columns(self) -> dict[str, np.ndarray]:
        """Flat named columns, one value per stored draw."""
        cols = {"chain": self.chain.astype(float), "beta0": self.beta0}
        for k in range(self.beta.shape[1]):
            cols[f"beta{k + 1}"] = self.beta[:, k]
        for t in range(self.gamma.shape[1]):
            cols[f"gamma_{t + 1}"] = self.gamma[:, t]
        for i in range(self.Z.shape[1]):
            cols[f"Z_{i + 1}"] = self.Z[:, i]
        for b in range(self.sigma2.shape[1]):
            cols[f"sigma2{self._suffix(b)}"] = self.sigma2[:, b]
        cols["tau2"] = self.tau2
        for name, v in self.corr.items():
            for b in range(v.shape[1]):
                cols[f"{name}{self._suffix(b)}"] = v[:, b]
        if self.phi_gamma is not None:
            cols["phi_gamma"] = self.phi_gamma
        return cols

    def scalar_columns(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.columns().items() if not k.startswith("Z_") and k != "chain"}

    def by_chain(self, values: np.ndarray) -> np.ndarray:
        """Reshape a per-draw vector into (n_chains, draws_per_chain)."""
        return np.stack([values[self.chain == c] for c in range(self.n_chains)])

    def beta_draws(self) -> np.ndarray:
        """(n_draws, K) coefficients including the intercept."""
        return np.column_stack([self.beta0, self.beta])


# -- the chain ----------------------------------------------------------------


class _Chain:
    def __init__(self, data, model, hp, cfg, chain_index, init=None, restricted=False):
        self.data, self.model, self.hp, self.cfg = data, model, hp, cfg
        self.c = chain_index
        self.rng = np.random.default_rng([cfg.seed, chain_index])
        self.y = data.counts.astype(float)
        self.X = data.covariates
        self.B = temporal_design(data)
        self.day = data.day - 1
        self.n, self.T = data.n, data.T
        self.direct = restricted or not model.spatial
        self.restricted = restricted
        self.blocks = model.blocks(data) if model.spatial else []
        self.nb = len(self.blocks)
        if restricted:
            self.M = np.ascontiguousarray(residual_projector(data.design))
            self.Xfull = data.design
        elif self.direct:
            self.Xfull = data.design
        self._init_state(init)
        self.caches = [
            _BlockCache(b, model, {k: self.corr[k][i] for k in model.param_names})
            for i, b in enumerate(self.blocks)
        ]
        self._refresh_temporal()
        self._refresh_Q()
        self._init_scales()
        self.acc_total = {}
        self.acc_window = {}

    # -- initialisation
    def _init_state(self, init):
        data, hp, rng = self.data, self.hp, self.rng
        coef, _ = prelim_loglinear_fit(data, hp.prelim_shift)
        C = self.cfg.n_chains
        offset = 0.0 if C == 1 else float(np.linspace(-0.5, 0.5, C)[self.c])
        self.corr = {}
        if init is not None:
            s = init.copy()
            self.beta0, self.beta, self.gamma = float(s.beta0), s.beta.copy(), s.gamma.copy()
            self.sigma2 = s.sigma2.copy() if s.sigma2.size else np.ones(self.nb)
            self.tau2 = float(s.tau2)
            self.corr = {k: v.copy() for k, v in s.corr.items()}
            self.phi_gamma = s.phi_gamma
            if self.direct:
                self.Z = s.Z(data) if self.model.spatial else np.zeros(self.n)
            else:
                self.W = s.W.copy()
            if self.model.spatial and self.sigma2.size != self.nb:
                raise ValueError("initial state has the wrong number of spatial blocks")
            if self.hp.phi_gamma is not None and self.phi_gamma is None:
                self.phi_gamma = self.hp.phi_gamma[0] / self.hp.phi_gamma[1]
            return
        K1 = self.X.shape[1]
        self.beta = coef[1:] + 0.5 * rng.standard_normal(K1)
        self.gamma = np.zeros(self.T)
        self.tau2 = hp.tau2_scale / (hp.ig_shape - 1.0) if hp.ig_shape > 1 else hp.tau2_scale
        s2 = hp.sigma2_scale / (hp.ig_shape - 1.0) if hp.ig_shape > 1 else hp.sigma2_scale
        self.sigma2 = np.full(self.nb, s2 * math.exp(2 * offset))
        for name in self.model.param_names:
            if name.startswith("phi"):
                rate = np.broadcast_to(np.atleast_1d(hp.phi_rate[name]), (self.nb,))
                self.corr[name] = hp.phi_shape / rate * math.exp(offset)
            elif name == "psi_A":
                self.corr[name] = np.full(self.nb, math.pi / 2 + offset)
            elif name == "psi_R":
                self.corr[name] = np.full(self.nb, 2.0 + offset)
        self.phi_gamma = None
        if hp.phi_gamma is not None:
            self.phi_gamma = hp.phi_gamma[0] / hp.phi_gamma[1] * math.exp(offset)
        base = np.log(self.y + hp.prelim_shift) - self.X @ self.beta + offset
        self.beta0 = float(base.mean())
        if self.direct:
            self.Z = np.zeros(self.n)
            self._init_direct(offset != 0.0)
        else:
            self.W = base

    def _init_direct(self, jitter):
        """Start alpha and gamma at their joint mode, spread at twice the Laplace scale.

        One-step IRLS proposals mix poorly from far-off starts when the
        posterior is sharp, so overdispersion is measured in posterior units.
        """
        D = np.hstack([self.Xfull, self.B])
        k = self.Xfull.shape[1]
        prior = np.zeros((D.shape[1], D.shape[1]))
        prior[:k, :k] = np.eye(k) / self.hp.beta_prior_var
        prior[k:, k:] = np.eye(self.T) / self.tau2
        start = np.concatenate([[self.beta0], self.beta, self.gamma])
        mode, L = penalized_mode(D, np.zeros(self.n), self.y, prior, start)
        if jitter:
            z = 2.0 * self.rng.standard_normal(mode.size)
            mode = mode + linalg.solve_triangular(L.T, z, lower=False, check_finite=False)
        self.beta0, self.beta, self.gamma = float(mode[0]), mode[1:k], mode[k:]

    def _init_scales(self):
        qd = np.diag(self.Q) if self.nb else np.zeros(self.n)
        self.w_scale = 2.4 / np.sqrt(qd + np.maximum(self.y, 0.5))
        self.corr_scale = [
            {k: 0.3 for k in self.model.param_names} for _ in self.blocks
        ]
        self.pg_scale = 0.3

    # -- cached matrices
    def _refresh_temporal(self):
        if self.phi_gamma is None:
            self.Rg_inv = None
        else:
            R = temporal_cov(1.0, self.phi_gamma, self.data.julian)
            L, _ = cholesky_jittered(R)
            self.Rg_inv = linalg.cho_solve((L, True), np.eye(self.T), check_finite=False)

    def _refresh_Q(self):
        Q = np.zeros((self.n, self.n))
        for b, cache in enumerate(self.caches):
            idx = cache.block.index
            Q[np.ix_(idx, idx)] = cache.Rinv / self.sigma2[b]
        self.Q = Q

    # -- derived quantities
    def Zvec(self):
        if self.direct:
            return self.Z
        return self.W - self.beta0 - self.gamma[self.day]

    def eta(self):
        if self.direct:
            out = self.Xfull @ np.concatenate([[self.beta0], self.beta]) + self.gamma[self.day]
            if self.restricted:
                out = out + self.M @ self.Z
            return out
        return self.X @ self.beta + self.W

    def _gamma_prior_prec(self):
        base = np.eye(self.T) if self.Rg_inv is None else self.Rg_inv
        return base / self.tau2

    # -- bookkeeping
    def _tally(self, name, flags, post):
        flags = np.asarray(flags, dtype=float)
        w = self.acc_window.setdefault(name, np.zeros_like(flags))
        w += flags
        if post:
            t = self.acc_total.setdefault(name, np.zeros_like(flags))
            t += flags

    # -- updates
    def step_beta(self, post):
        if self.direct:
            coef = np.concatenate([[self.beta0], self.beta])
            offset = self.gamma[self.day] + (self.M @ self.Z if self.restricted else 0.0)
            prior = np.eye(coef.size) / self.hp.beta_prior_var
            coef, acc = mh_irls(coef, self.Xfull, offset, self.y, prior, self.rng)
            self.beta0, self.beta = float(coef[0]), coef[1:]
        else:
            if self.beta.size == 0:
                return
            self.beta, acc = mh_beta_gamerman(
                self.beta, self.X, self.W, self.y, self.hp.beta_prior_var, self.rng
            )
        self._tally("beta", [acc], post)

    def step_W(self, post):
        if not self.model.spatial:
            return
        if self.restricted:
            base = self.Xfull @ np.concatenate([[self.beta0], self.beta]) + self.gamma[self.day]
            eta = base + self.M @ self.Z
            self.Z, _, acc = mh_Z_projected(self.Z, eta, self.y, self.Q, self.M, self.w_scale, self.rng)
            self._tally("Z", acc, post)
            return
        mu = self.beta0 + self.gamma[self.day]
        self.W, acc = mh_W_randomwalk(self.W, self.X @ self.beta, self.y, mu, self.Q, self.w_scale, self.rng)
        self._tally("W", acc, post)

    def step_ridge(self, post):
        """Exact draw along directions the likelihood cannot see.

        Spatial model: beta* given eta = X* beta* + W (W follows). Restricted
        model: the part of Z inside col(X), which never enters the log-rate.
        """
        if self.restricted:
            u = self.M @ self.Z
            XtQ = self.Xfull.T @ self.Q
            L = linalg.cholesky(XtQ @ self.Xfull, lower=True, check_finite=False)
            mean = -linalg.cho_solve((L, True), XtQ @ u, check_finite=False)
            c = mean + linalg.solve_triangular(L.T, self.rng.standard_normal(mean.size), lower=False,
                                               check_finite=False)
            self.Z = u + self.Xfull @ c
            return
        if self.direct or self.beta.size == 0:
            return
        eta = self.X @ self.beta + self.W
        resid = eta - self.beta0 - self.gamma[self.day]
        self.beta = gibbs_beta_centered(self.Q, self.X, resid, self.hp.beta_prior_var, self.rng)
        self.W = eta - self.X @ self.beta

    def step_beta0(self, post):
        if self.direct:
            return
        resid = self.W - self.gamma[self.day]
        self.beta0 = gibbs_beta0(self.Q, resid, self.hp.beta_prior_var, self.rng)

    def step_gamma(self, post):
        if self.direct:
            offset = self.Xfull @ np.concatenate([[self.beta0], self.beta])
            if self.restricted:
                offset = offset + self.M @ self.Z
            self.gamma, acc = mh_irls(self.gamma, self.B, offset, self.y, self._gamma_prior_prec(), self.rng)
            self._tally("gamma", [acc], post)
            return
        self.gamma = gibbs_gamma(self.Q, self.B, self.W - self.beta0, self.tau2, self.rng, self.Rg_inv)

    def step_sigma2(self, post):
        if not self.model.spatial:
            return
        Z = self.Zvec()
        for b, cache in enumerate(self.caches):
            z = Z[cache.block.index]
            self.sigma2[b] = gibbs_sigma2(z, cache.Rinv, self.hp.ig_shape, self.hp.sigma2_scale, self.rng)
        self._refresh_Q()

    def step_tau2(self, post):
        quad = self.gamma @ (self.gamma if self.Rg_inv is None else self.Rg_inv @ self.gamma)
        a = self.hp.ig_shape + 0.5 * self.T
        self.tau2 = draw_invgamma(a, self.hp.tau2_scale + 0.5 * quad, self.rng)

    def step_corr(self, post):
        if not self.model.param_names:
            return
        Z = self.Zvec()
        changed = False
        for b, cache in enumerate(self.caches):
            flags = mh_corr_params(
                cache, b, Z[cache.block.index], self.sigma2[b], self.hp, self.corr_scale[b], self.rng
            )
            for name, f in flags.items():
                self.corr[name][b] = cache.params[name]
                self._tally(f"{name}{_suffix(cache.block.label)}", [f], post)
                changed |= bool(f)
        if changed:
            self._refresh_Q()

    def step_phi_gamma(self, post):
        if self.phi_gamma is None:
            return
        cur = self.phi_gamma
        new = math.exp(math.log(cur) + self.pg_scale * self.rng.standard_normal())
        logu = math.log(self.rng.random())

        def target(phi):
            C = temporal_cov(self.tau2, phi, self.data.julian)
            try:
                L, _ = cholesky_jittered(C)
            except NotPositiveDefinite:
                return -math.inf
            u = linalg.solve_triangular(L, self.gamma, lower=True, check_finite=False)
            return -0.5 * u @ u - np.sum(np.log(np.diag(L))) + log_gamma_pdf(phi, *self.hp.phi_gamma) + math.log(phi)

        acc = logu < target(new) - target(cur)
        if acc:
            self.phi_gamma = new
            self._refresh_temporal()
        self._tally("phi_gamma", [acc], post)

    # -- adaptation
    def _adapt(self, k):
        step = 1.0 / k
        target, win = self.cfg.adapt_target, self.cfg.adapt_window
        for name, counts in self.acc_window.items():
            rate = counts / win
            if name in ("W", "Z"):
                self.w_scale = self.w_scale * np.exp(step * (rate - target))
            elif name == "phi_gamma":
                self.pg_scale *= math.exp(step * (rate[0] - target))
            elif name in ("beta", "gamma"):
                pass
            else:
                for b, cache in enumerate(self.caches):
                    for p in self.model.param_names:
                        if name == f"{p}{_suffix(cache.block.label)}":
                            self.corr_scale[b][p] *= math.exp(step * (rate[0] - target))
        self.acc_window = {}

    def snapshot(self):
        return (
            self.beta0,
            self.beta.copy(),
            self.gamma.copy(),
            self.Zvec().copy(),
            self.sigma2.copy(),
            self.tau2,
            {k: v.copy() for k, v in self.corr.items()},
            self.phi_gamma,
        )

    def run(self):
        cfg = self.cfg
        steps = {
            "beta": self.step_beta,
            "W": self.step_W,
            "ridge": self.step_ridge,
            "beta0": self.step_beta0,
            "gamma": self.step_gamma,
            "sigma2": self.step_sigma2,
            "tau2": self.step_tau2,
            "corr": self.step_corr,
            "phi_gamma": self.step_phi_gamma,
        }
        order = [s for s in cfg.update_order if s not in cfg.freeze]
        if "phi_gamma" not in cfg.update_order and "phi_gamma" not in cfg.freeze:
            order.append("phi_gamma")
        stored = []
        scales_at_burn = None
        for it in range(1, cfg.n_iter + 1):
            post = it > cfg.burn_in
            try:
                for name in order:
                    steps[name](post)
            except NumericalError as exc:
                raise SamplerFailure(
                    f"chain {self.c} failed at iteration {it}: {exc}", iteration=it, chain=self.c
                ) from exc
            if not post and it % cfg.adapt_window == 0:
                self._adapt(it // cfg.adapt_window)
            if it == cfg.burn_in:
                scales_at_burn = self._scales()
            if post and (it - cfg.burn_in) % cfg.thin == 0:
                stored.append(self.snapshot())
        if scales_at_burn is None:
            scales_at_burn = self._scales()
        n_post = cfg.n_iter - cfg.burn_in
        rates = {k: (v / n_post).tolist() for k, v in self.acc_total.items()}
        return {
            "stored": stored,
            "acceptance": rates,
            "scales_at_burn_in": scales_at_burn,
            "scales_final": self._scales(),
            "jitter_events": int(sum(c.jitter_events for c in self.caches)),
        }

    def _scales(self):
        return {
            "W": self.w_scale.tolist(),
            "corr": [dict(s) for s in self.corr_scale],
            "phi_gamma": self.pg_scale,
        }


def _suffix(label):
    return f"_{label}" if label else ""


def _run_one(args):
    data, model, hp, cfg, c, init, restricted = args
    return _Chain(data, model, hp, cfg, c, init, restricted).run()


def _n_workers(n_chains):
    try:
        threads = int(os.environ.get(THREADS_ENV, "1"))
    except ValueError:
        threads = 1
    return max(1, min(threads, n_chains))


def run_chains(
    config: ChainConfig,
    model: ModelConfig,
    data: Dataset,
    hp: Hyperpriors | None = None,
    init: ParameterState | None = None,
    restricted: bool = False,
) -> PosteriorSample:
    """Run ``config.n_chains`` independent chains and pool the thinned draws.

    Each chain seeds its generator from ``(config.seed, chain_index)`` so the
    output does not depend on whether chains run in parallel.
    """
    hp = (hp or Hyperpriors())
    if not hp.resolved:
        hp = hp.resolve(data, model)
    if restricted and not model.spatial:
        raise ValueError("restricted spatial regression needs a spatial model")
    jobs = [(data, model, hp, config, c, init, restricted) for c in range(config.n_chains)]
    workers = _n_workers(config.n_chains)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]

    stored = [(c, s) for c, r in enumerate(results) for s in r["stored"]]
    blocks = model.blocks(data) if model.spatial else []
    labels = tuple(b.label for b in blocks) or ("",)
    nb = len(blocks)
    M = len(stored)

    def stack(i, shape):
        return np.array([s[i] for _, s in stored], dtype=float).reshape((M,) + shape)

    corr = {
        name: np.array([s[6][name] for _, s in stored], dtype=float).reshape(M, nb)
        for name in model.param_names
    }
    pg = None
    if hp.phi_gamma is not None or (init is not None and init.phi_gamma is not None):
        pg = np.array([s[7] for _, s in stored], dtype=float)
    sample = PosteriorSample(
        model_id=model.model_id,
        beta0=stack(0, ()),
        beta=stack(1, (data.covariates.shape[1],)),
        gamma=stack(2, (data.T,)),
        Z=stack(3, (data.n,)),
        sigma2=stack(4, (nb,)),
        tau2=stack(5, ()),
        corr=corr,
        chain=np.array([c for c, _ in stored], dtype=int),
        block_labels=labels,
        phi_gamma=pg,
        restricted=restricted,
    )
    acc = {}
    for r in results:
        for k, v in r["acceptance"].items():
            acc.setdefault(k, []).append(v)
    sample.acceptance = {k: np.array(v) for k, v in acc.items()}
    if M and config.n_chains >= 2 and M // config.n_chains >= 4:
        sample.diagnostics = summarize({k: sample.by_chain(v) for k, v in sample.scalar_columns().items()})
    elif M >= 4:
        sample.diagnostics = summarize({k: v[None, :] for k, v in sample.scalar_columns().items()})
    sample.meta = {
        "model": model.model_id,
        "domain": model.domain_name,
        "spatial_structure": model.structure,
        "restricted": restricted,
        "block_labels": list(labels),
        "corr_params": list(model.param_names),
        "circle_kernel": "arc" if model.structure == "CircleArc" else "chord",
        "chain_config": config.to_dict(),
        "hyperpriors": hp.summary(),
        "jitter_events": [r["jitter_events"] for r in results],
        "scales_at_burn_in": [r["scales_at_burn_in"] for r in results],
        "scales_final": [r["scales_final"] for r in results],
        "covariate_names": list(data.covariate_names),
        "standardized": data.standardized,
    }
    return sample


def diagnostics(sample: PosteriorSample) -> dict:
    """Per-parameter split-PSRF and ESS; needs at least two chains."""
    from .errors import InsufficientChains

    if sample.n_chains < 2:
        raise InsufficientChains("PSRF needs at least two chains")
    return summarize({k: sample.by_chain(v) for k, v in sample.scalar_columns().items()})
