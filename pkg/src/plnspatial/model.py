"""Poisson-lognormal hierarchy.

    y_i | lambda_i ~ Poisson(lambda_i)
    log lambda_i = X*_i beta* + W_i
    W_i = beta0 + gamma[t(i)] + Z_i

``gamma`` is a day effect (independent normal, or exponentially correlated
in Julian time when a temporal decay is supplied) and ``Z`` the latent
spatial effect whose covariance depends on the model (M0-M10).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg, special, stats

from .covariance import (
    ByShore,
    Block,
    Circle,
    CircleArc,
    CircleChord,
    CorrelationSpec,
    CovariateInCorr,
    GeomAniso,
    Independence,
    Isotropic,
    WholeLake,
    cholesky_jittered,
    make_blocks,
)
from .errors import NonFiniteLinearPredictor, RankDeficientDesign
from .geometry import Location

# -- model lattice ----------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    model_id: str
    domain: object | None  # None for the non-spatial baseline
    spec_type: type | None
    label: str

    @property
    def spatial(self) -> bool:
        return self.domain is not None

    @property
    def param_names(self) -> tuple[str, ...]:
        return () if self.spec_type is None else self.spec_type.param_names

    @property
    def structure(self) -> str:
        return "None" if self.spec_type is None else self.spec_type.name

    @property
    def domain_name(self) -> str:
        if self.domain is None:
            return "None"
        if isinstance(self.domain, Circle):
            return f"Circle({self.domain.projection})"
        return self.domain.name

    def make_spec(self, params: dict) -> CorrelationSpec:
        return self.spec_type(**{k: float(params[k]) for k in self.param_names})

    def blocks(self, data: "Dataset") -> list[Block]:
        return make_blocks(self.domain, data.coords, data.shore, data.depth)


def _table():
    wl, bs = WholeLake(), ByShore()
    rows = [
        ("M0", None, None, "None"),
        ("M1", wl, Independence, "Independence"),
        ("M2", wl, Isotropic, "Isotropy"),
        ("M3", wl, GeomAniso, "Anisotropy - Geom."),
        ("M4", wl, CovariateInCorr, "Anisotropy - Cov. in cor."),
        ("M5", Circle("M5"), CircleChord, "Isotropy"),
        ("M6", Circle("M6"), CircleChord, "Isotropy"),
        ("M7", bs, Independence, "Independence"),
        ("M8", bs, Isotropic, "Isotropy"),
        ("M9", bs, GeomAniso, "Anisotropy - Geom."),
        ("M10", bs, CovariateInCorr, "Anisotropy - Cov. in cor."),
    ]
    return {r[0]: ModelConfig(*r) for r in rows}


MODELS: dict[str, ModelConfig] = _table()


def get_model(model_id: str, circle_kernel: str = "chord") -> ModelConfig:
    key = model_id.strip().upper()
    if key not in MODELS:
        raise ValueError(f"unknown model {model_id!r}; expected one of M0..M10")
    m = MODELS[key]
    if isinstance(m.domain, Circle):
        if circle_kernel == "arc":
            return replace(m, spec_type=CircleArc)
        if circle_kernel != "chord":
            raise ValueError("circle_kernel must be 'chord' or 'arc'")
    return m


# -- data -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Dataset:
    counts: np.ndarray
    covariates: np.ndarray
    locations: tuple[Location, ...]
    standardized: bool = False
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 1 or np.any(counts < 0) or not np.all(counts == np.round(counts)):
            raise ValueError("counts must be a vector of non-negative integers")
        counts = counts.astype(np.int64)
        n = counts.size
        X = np.asarray(self.covariates, dtype=float)
        if X.ndim == 1:
            X = X.reshape(n, -1) if n else X.reshape(0, 0)
        if X.shape[0] != n:
            raise ValueError("covariates must have one row per count")
        locs = tuple(self.locations)
        if len(locs) != n:
            raise ValueError("need one location per count")
        names = tuple(self.covariate_names) or tuple(f"x{k + 1}" for k in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise ValueError("covariate_names length mismatch")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "covariates", X)
        object.__setattr__(self, "locations", locs)
        object.__setattr__(self, "covariate_names", names)

        day = np.array([l.day_index for l in locs], dtype=int)
        T = int(day.max()) if n else 0
        present = np.zeros(T + 1, dtype=bool)
        present[day] = True
        if n and not present[1:].all():
            missing = [t for t in range(1, T + 1) if not present[t]]
            raise ValueError(f"sampling days without locations: {missing}")
        julian = np.zeros(T, dtype=int)
        for l in locs:
            j = julian[l.day_index - 1]
            if j and j != l.julian_day:
                raise ValueError(f"day {l.day_index} has conflicting Julian days")
            julian[l.day_index - 1] = l.julian_day
        object.__setattr__(self, "day", day)
        object.__setattr__(self, "julian", julian)
        object.__setattr__(self, "coords", np.array([l.xy for l in locs], dtype=float).reshape(n, 2))
        object.__setattr__(self, "shore", np.array([l.shore.code for l in locs]))
        object.__setattr__(self, "depth", np.array([l.geodetic_depth for l in locs], dtype=float))

    @property
    def n(self) -> int:
        return self.counts.size

    @property
    def T(self) -> int:
        return self.julian.size

    @property
    def K(self) -> int:
        """Number of mean-structure coefficients, intercept included."""
        return self.covariates.shape[1] + 1

    @property
    def day_counts(self) -> np.ndarray:
        return np.bincount(self.day - 1, minlength=self.T)

    @property
    def design(self) -> np.ndarray:
        """Full design matrix ``[1, X*]``."""
        return np.column_stack([np.ones(self.n), self.covariates])

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            np.array_equal(self.counts, other.counts)
            and np.array_equal(self.covariates, other.covariates)
            and self.locations == other.locations
            and self.standardized == other.standardized
            and self.covariate_names == other.covariate_names
        )

    __hash__ = None


def temporal_design(data: Dataset) -> np.ndarray:
    """n x T indicator matrix B with ``B[i, t(i)] = 1``."""
    B = np.zeros((data.n, data.T))
    B[np.arange(data.n), data.day - 1] = 1.0
    return B


def temporal_cov(tau2: float, phi_gamma: float | None, julian) -> np.ndarray:
    julian = np.asarray(julian, dtype=float)
    if phi_gamma is None:
        return tau2 * np.eye(julian.size)
    lag = np.abs(julian[:, None] - julian[None, :])
    return tau2 * np.exp(-lag / phi_gamma)


# -- parameter state --------------------------------------------------------


@dataclass
class ParameterState:
    beta0: float
    beta: np.ndarray
    gamma: np.ndarray
    W: np.ndarray
    sigma2: np.ndarray = field(default_factory=lambda: np.zeros(0))
    tau2: float = 1.0
    corr: dict[str, np.ndarray] = field(default_factory=dict)
    phi_gamma: float | None = None

    def __post_init__(self):
        self.beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        self.gamma = np.atleast_1d(np.asarray(self.gamma, dtype=float))
        self.W = np.atleast_1d(np.asarray(self.W, dtype=float))
        self.sigma2 = np.atleast_1d(np.asarray(self.sigma2, dtype=float))
        self.corr = {k: np.atleast_1d(np.asarray(v, dtype=float)) for k, v in self.corr.items()}

    def Z(self, data: Dataset) -> np.ndarray:
        return self.W - self.beta0 - self.gamma[data.day - 1]

    def linear_predictor(self, data: Dataset) -> np.ndarray:
        return data.covariates @ self.beta + self.W

    def copy(self) -> "ParameterState":
        return ParameterState(
            float(self.beta0),
            self.beta.copy(),
            self.gamma.copy(),
            self.W.copy(),
            self.sigma2.copy(),
            float(self.tau2),
            {k: v.copy() for k, v in self.corr.items()},
            self.phi_gamma,
        )

    def block_params(self, b: int) -> dict[str, float]:
        return {k: float(v[b]) for k, v in self.corr.items()}


def poisson_loglik(eta, y) -> np.ndarray:
    """Per-site Poisson log-pmf at log-rate ``eta`` (normalising term included)."""
    eta = np.asarray(eta, dtype=float)
    with np.errstate(over="ignore"):
        lam = np.exp(eta)
    if not np.all(np.isfinite(lam)):
        raise NonFiniteLinearPredictor("exp(linear predictor) is not finite")
    y = np.asarray(y)
    return y * eta - lam - special.gammaln(y + 1.0)


def log_likelihood(state: ParameterState, data: Dataset) -> float:
    return float(np.sum(poisson_loglik(state.linear_predictor(data), data.counts)))


def marginal_moments(mu, sigma2: float, rho):
    """Mean vector and covariance matrix of Y under the lognormal mixture."""
    mu = np.asarray(mu, dtype=float)
    rho = np.asarray(rho, dtype=float)
    alpha = np.exp(mu + sigma2 / 2.0)
    cov = np.outer(alpha, alpha) * np.expm1(sigma2 * rho)
    cov[np.diag_indices_from(cov)] = alpha + alpha**2 * np.expm1(sigma2)
    return alpha, cov


# -- priors -----------------------------------------------------------------


def log_normal_pdf(x, var):
    x = np.asarray(x, dtype=float)
    return float(np.sum(-0.5 * math.log(2 * math.pi * var) - 0.5 * x * x / var))


def log_invgamma(x, shape, scale):
    if not x > 0:
        return -math.inf
    return shape * math.log(scale) - special.gammaln(shape) - (shape + 1) * math.log(x) - scale / x


def log_gamma_pdf(x, shape, rate):
    if not x > 0:
        return -math.inf
    return shape * math.log(rate) - special.gammaln(shape) + (shape - 1) * math.log(x) - rate * x


def log_pareto(x, scale=1.0, shape=2.0):
    if not x >= scale:
        return -math.inf
    return math.log(shape) + shape * math.log(scale) - (shape + 1) * math.log(x)


def log_uniform_angle(x, upper=math.pi):
    return -math.log(upper) if 0.0 <= x <= upper else -math.inf


@dataclass
class Hyperpriors:
    """Prior settings. ``None`` entries are filled by :meth:`resolve`.

    Inverse-gamma priors use shape 2 (finite mean, infinite variance) with the
    scale set to the residual variance of a preliminary log-linear fit. Decay
    parameters get gamma priors whose rate makes ``3 * phi <= d_max / 2``
    hold with probability ``range_prob``.
    """

    beta_prior_var: float = 100.0
    ig_shape: float = 2.0
    sigma2_scale: float | None = None
    tau2_scale: float | None = None
    phi_shape: float = 1.0
    phi_rate: dict[str, np.ndarray] | None = None
    range_prob: float = 0.99
    pareto_scale: float = 1.0
    pareto_shape: float = 2.0
    psi_A_upper: float = math.pi
    phi_gamma: tuple[float, float] | None = None
    prelim_shift: float = 0.5

    @property
    def resolved(self) -> bool:
        return self.sigma2_scale is not None and self.tau2_scale is not None and self.phi_rate is not None

    def resolve(self, data: Dataset, model: ModelConfig, blocks=None) -> "Hyperpriors":
        hp = replace(self)
        if hp.sigma2_scale is None or hp.tau2_scale is None:
            _, s2 = prelim_loglinear_fit(data, hp.prelim_shift)
            scale = s2 * (hp.ig_shape - 1.0)
            hp.sigma2_scale = scale if hp.sigma2_scale is None else hp.sigma2_scale
            hp.tau2_scale = scale if hp.tau2_scale is None else hp.tau2_scale
        if hp.phi_rate is None:
            hp.phi_rate = {}
            if model.spatial:
                blocks = model.blocks(data) if blocks is None else blocks
                q = stats.gamma.ppf(hp.range_prob, hp.phi_shape)
                for name in model.param_names:
                    if not name.startswith("phi"):
                        continue
                    rates = []
                    for b in blocks:
                        if name == "phi2":
                            dmax = b.geom.max_depth_difference()
                        elif model.spec_type is CircleArc:
                            dmax = float(b.geom.omega.max()) if b.geom.n > 1 else 0.0
                        else:
                            dmax = b.geom.max_distance()
                        rates.append(q / (dmax / 6.0) if dmax > 0 else 1.0)
                    hp.phi_rate[name] = np.array(rates)
        return hp

    def summary(self) -> dict:
        out = {
            "beta_prior_var": self.beta_prior_var,
            "ig_shape": self.ig_shape,
            "sigma2_scale": self.sigma2_scale,
            "tau2_scale": self.tau2_scale,
            "phi_shape": self.phi_shape,
            "range_prob": self.range_prob,
            "pareto": [self.pareto_scale, self.pareto_shape],
            "psi_A_upper": self.psi_A_upper,
            "phi_gamma": None if self.phi_gamma is None else list(self.phi_gamma),
            "prelim_shift": self.prelim_shift,
        }
        if self.phi_rate is not None:
            out["phi_rate"] = {k: np.asarray(v).tolist() for k, v in self.phi_rate.items()}
            out["phi_prior_mean"] = {
                k: (self.phi_shape / np.asarray(v)).tolist() for k, v in self.phi_rate.items()
            }
        return out


def log_prior(state: ParameterState, hp: Hyperpriors) -> float:
    """Sum of the independent prior log-densities of the model parameters."""
    lp = log_normal_pdf(state.beta0, hp.beta_prior_var)
    lp += log_normal_pdf(state.beta, hp.beta_prior_var)
    for s2 in state.sigma2:
        lp += log_invgamma(s2, hp.ig_shape, hp.sigma2_scale)
    lp += log_invgamma(state.tau2, hp.ig_shape, hp.tau2_scale)
    for name, values in state.corr.items():
        for b, x in enumerate(values):
            if name.startswith("phi"):
                rate = np.atleast_1d(hp.phi_rate[name])
                lp += log_gamma_pdf(x, hp.phi_shape, float(rate[min(b, rate.size - 1)]))
            elif name == "psi_A":
                lp += log_uniform_angle(x, hp.psi_A_upper)
            elif name == "psi_R":
                lp += log_pareto(x, hp.pareto_scale, hp.pareto_shape)
    if state.phi_gamma is not None and hp.phi_gamma is not None:
        lp += log_gamma_pdf(state.phi_gamma, *hp.phi_gamma)
    return float(lp)


def prelim_loglinear_fit(data: Dataset, shift: float = 0.5, max_iter: int = 50):
    """Poisson log-linear fit by IRLS; returns (coefficients, residual variance).

    The residual variance is that of ``log(y + shift)`` about the fitted
    linear predictor, on ``n - K`` degrees of freedom.
    """
    X = data.design
    y = data.counts.astype(float)
    z0 = np.log(y + shift)
    coef = np.linalg.lstsq(X, z0, rcond=None)[0]
    for _ in range(max_iter):
        eta = X @ coef
        mu = np.exp(eta)
        z = eta + (y - mu) / mu
        w = mu
        new = np.linalg.lstsq(X * np.sqrt(w)[:, None], z * np.sqrt(w), rcond=None)[0]
        done = np.max(np.abs(new - coef)) < 1e-10
        coef = new
        if done:
            break
    dof = data.n - X.shape[1]
    if dof <= 0:
        return coef, 1.0
    resid = z0 - X @ coef
    return coef, float(resid @ resid / dof)


def spatial_specs(model: ModelConfig, state: ParameterState) -> list[CorrelationSpec]:
    nb = state.sigma2.size
    return [model.make_spec(state.block_params(b)) for b in range(nb)]


def log_latent(state: ParameterState, data: Dataset, model: ModelConfig, blocks=None) -> float:
    """log p(Z | sigma2, corr) + log p(gamma | tau2, phi_gamma)."""
    out = 0.0
    C = temporal_cov(state.tau2, state.phi_gamma, data.julian)
    out += float(stats.multivariate_normal(np.zeros(data.T), C).logpdf(state.gamma))
    if model.spatial:
        blocks = model.blocks(data) if blocks is None else blocks
        Z = state.Z(data)
        for b, blk in enumerate(blocks):
            R = model.make_spec(state.block_params(b)).matrix(blk.geom)
            L, _ = cholesky_jittered(state.sigma2[b] * R)
            u = linalg.solve_triangular(L, Z[blk.index], lower=True)
            out += -0.5 * u @ u - np.sum(np.log(np.diag(L))) - 0.5 * blk.index.size * math.log(2 * math.pi)
    return float(out)


def log_posterior(state, data, model, hp, blocks=None) -> float:
    """Unnormalised joint log posterior of the W-parametrised model."""
    lp = log_prior(state, hp)
    if not math.isfinite(lp):
        return -math.inf
    return log_likelihood(state, data) + lp + log_latent(state, data, model, blocks)


def residual_projector(X) -> np.ndarray:
    """``I - X (X'X)^-1 X'``: projection onto the orthogonal complement of col(X)."""
    X = np.asarray(X, dtype=float)
    n, k = X.shape
    if k and np.linalg.matrix_rank(X) < k:
        raise RankDeficientDesign(f"design has rank {np.linalg.matrix_rank(X)} < {k} columns")
    if k == 0:
        return np.eye(n)
    q, _ = np.linalg.qr(X)
    return np.eye(n) - q @ q.T
