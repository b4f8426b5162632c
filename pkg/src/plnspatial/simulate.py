"""Synthetic lake surveys that mimic the field sampling design.

Locations sit on two arcs along the north and south sides of an elliptical
lake. Each sampling day visits one cluster of adjacent locations, shores
alternating from one day to the next, on unevenly spaced Julian days.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .covariance import Isotropic, SiteGeometry, cholesky_jittered, make_blocks
from .geometry import EllipseParams, Location, Shore
from .model import Dataset, ModelConfig, ParameterState, get_model, temporal_cov

# north arc on the upper side of the (rotated) ellipse, south arc opposite
NORTH_ARC = (0.15 * math.pi, 0.85 * math.pi)
SOUTH_ARC = (1.15 * math.pi, 1.85 * math.pi)
DEFAULT_LAKE = EllipseParams(center=(680000.0, 5120000.0), semi_major=14000.0, semi_minor=5000.0,
                             rotation=math.radians(35.0))
# transparency (+), depth (-), vegetation and substrate (no effect); rate spans
# roughly 4x and 11x across +/-2 standard deviations
DEFAULT_BETA = (0.35, -0.6, 0.0, 0.0)
COVARIATE_NAMES = ("x1", "x2", "x3", "x4")


@dataclass
class DesignSpec:
    n_locations: int = 160
    n_days: int = 38
    span_days: int = 70
    cluster_sizes: tuple = ((4, 36), (8, 2))  # (size, number of days)
    alternate_shores: bool = True
    lake: EllipseParams = DEFAULT_LAKE
    jitter: float = 60.0  # metres, perpendicular to the shore
    depth_range: tuple = (0.5, 6.0)

    def __post_init__(self):
        self.cluster_sizes = tuple((int(s), int(d)) for s, d in self.cluster_sizes)
        days = sum(d for _, d in self.cluster_sizes)
        total = sum(s * d for s, d in self.cluster_sizes)
        if days != self.n_days:
            raise ValueError(f"cluster schedule covers {days} days, expected {self.n_days}")
        if total != self.n_locations:
            raise ValueError(f"cluster sizes sum to {total}, expected {self.n_locations}")
        if not 1 <= self.n_days <= self.span_days:
            raise ValueError("need 1 <= n_days <= span_days")
        if any(s < 1 for s, _ in self.cluster_sizes):
            raise ValueError("cluster sizes must be positive")


def _deal_clusters(spec: DesignSpec, rng):
    """Cluster sizes in day order and the shore visited on each day."""
    sizes = [s for s, d in spec.cluster_sizes for _ in range(d)]
    if not spec.alternate_shores:
        sizes = list(rng.permutation(sizes))
        labels = [Shore.NORTH if i % 2 == 0 else Shore.SOUTH for i in range(len(sizes))]
        return sizes, [labels[i] for i in rng.permutation(len(labels))]
    # alternate N, S, N, ...; give each shore an equal share of every cluster size
    # when the counts allow it, so both shores hold the same number of locations
    n_days = len(sizes)
    north_days = (n_days + 1) // 2
    pool_n, pool_s = [], []
    for s, d in spec.cluster_sizes:
        k = d // 2 + (d % 2) * (len(pool_n) <= len(pool_s))
        pool_n += [s] * k
        pool_s += [s] * (d - k)
    while len(pool_n) > north_days:
        pool_s.append(pool_n.pop())
    while len(pool_n) < north_days:
        pool_n.append(pool_s.pop())
    pool_n = list(rng.permutation(pool_n))
    pool_s = list(rng.permutation(pool_s))
    if len(pool_n) == len(pool_s) and rng.random() < 0.5:
        first, second = Shore.SOUTH, Shore.NORTH
    else:
        first, second = Shore.NORTH, Shore.SOUTH
    out_sizes, out_shores = [], []
    for i in range(n_days):
        shore = first if i % 2 == 0 else second
        out_shores.append(shore)
        out_sizes.append(pool_n.pop() if shore is Shore.NORTH else pool_s.pop())
    return out_sizes, out_shores


def _arc_positions(spec: DesignSpec, arc, m, rng):
    """``m`` points spread along an elliptical arc with perpendicular jitter."""
    lo, hi = arc
    base = np.linspace(lo, hi, m)
    step = (hi - lo) / max(m - 1, 1)
    t = base + rng.uniform(-0.3, 0.3, m) * step
    t = np.clip(t, lo, hi)
    t.sort()
    e = spec.lake
    pts = np.asarray(e.point(t), dtype=float).reshape(-1, 2)
    # push points inwards (towards the centre) by a random amount
    inward = np.asarray(e.center, dtype=float) - pts
    inward /= np.linalg.norm(inward, axis=1, keepdims=True)
    pts = pts + inward * rng.uniform(0.0, spec.jitter, m)[:, None]
    frac = (t - lo) / (hi - lo)
    return pts, frac


def generate_locations(spec: DesignSpec, rng) -> list[Location]:
    """Locations on two arcs, clustered by day, shores alternating across days."""
    rng = np.random.default_rng(rng)
    sizes, shores = _deal_clusters(spec, rng)
    julian = np.sort(rng.choice(np.arange(1, spec.span_days + 1), spec.n_days, replace=False))
    d0, d1 = spec.depth_range
    locs = []
    for shore, arc in ((Shore.NORTH, NORTH_ARC), (Shore.SOUTH, SOUTH_ARC)):
        days = [i for i, s in enumerate(shores) if s is shore]
        m = sum(sizes[i] for i in days)
        if m == 0:
            continue
        pts, frac = _arc_positions(spec, arc, m, rng)
        # smooth depth profile along the arc: shallow bays towards the ends
        phase = rng.uniform(0, 2 * math.pi)
        depth = d0 + (d1 - d0) * (0.5 + 0.35 * np.sin(math.pi * frac) + 0.15 * np.sin(3 * math.pi * frac + phase))
        depth = np.clip(depth, d0, d1)
        # adjacent clusters along the arc, assigned to the shore's days at random
        order = rng.permutation(days)
        start = 0
        for day in order:
            for j in range(start, start + sizes[day]):
                locs.append((shore, pts[j], float(depth[j]), int(day) + 1, int(julian[day])))
            start += sizes[day]
    locs.sort(key=lambda r: (r[3], r[1][0]))
    return [
        Location(
            id=i + 1,
            easting=float(p[0]),
            northing=float(p[1]),
            shore=shore,
            geodetic_depth=dep,
            day_index=day,
            julian_day=jd,
        )
        for i, (shore, p, dep, day, jd) in enumerate(locs)
    ]


@dataclass
class CovariateSpec:
    """How synthetic covariates are drawn.

    ``spatial_share`` is the fraction of each covariate's variance carried by
    a smooth spatial field (independent of the latent effect); ``z_corr`` is
    the target correlation of each covariate with the latent spatial effect
    Z, used to build confounded designs.
    """

    n_covariates: int = 4
    spatial_share: tuple = (0.5, 0.7, 0.5, 0.3)
    z_corr: tuple = (0.0, 0.0, 0.0, 0.0)
    range_m: float = 3000.0
    standardize: bool = True
    names: tuple = field(default=COVARIATE_NAMES)

    def __post_init__(self):
        k = self.n_covariates
        self.spatial_share = tuple(np.broadcast_to(np.asarray(self.spatial_share, float), (k,)))
        self.z_corr = tuple(np.broadcast_to(np.asarray(self.z_corr, float), (k,)))
        if any(not 0 <= s <= 1 for s in self.spatial_share) or any(abs(c) > 1 for c in self.z_corr):
            raise ValueError("spatial_share must lie in [0, 1] and |z_corr| <= 1")
        if len(self.names) != k:
            self.names = tuple(f"x{i + 1}" for i in range(k))


def _gaussian_field(coords, range_m, rng):
    R = Isotropic(range_m / 3.0).matrix(SiteGeometry(coords))
    L, _ = cholesky_jittered(R)
    return L @ rng.standard_normal(coords.shape[0])


def draw_covariates(locs, spec: CovariateSpec, rng, z=None) -> np.ndarray:
    rng = np.random.default_rng(rng)
    coords = np.array([l.xy for l in locs], dtype=float)
    n = coords.shape[0]
    X = np.empty((n, spec.n_covariates))
    zs = None
    if z is not None and np.std(z) > 0:
        zs = (z - z.mean()) / z.std()
    for k in range(spec.n_covariates):
        share = spec.spatial_share[k]
        x = math.sqrt(share) * _gaussian_field(coords, spec.range_m, rng) + math.sqrt(1 - share) * rng.standard_normal(n)
        c = spec.z_corr[k]
        if zs is not None and c != 0.0:
            x = (x - x.mean()) / (x.std() or 1.0)
            # remove the accidental overlap with Z before mixing it in
            x = x - (x @ zs / n) * zs
            x = (x - x.mean()) / (x.std() or 1.0)
            x = c * zs + math.sqrt(1 - c * c) * x
        X[:, k] = x
    if spec.standardize and n > 1:
        sd = X.std(axis=0)
        sd[sd == 0] = 1.0
        X = (X - X.mean(axis=0)) / sd
    return X


def default_truth(model: ModelConfig | str = "M9", n_days: int = 38, beta=DEFAULT_BETA) -> ParameterState:
    """Reference parameter values used by the synthetic studies."""
    model = get_model(model) if isinstance(model, str) else model
    beta = np.asarray(beta, dtype=float)
    by_shore = model.domain is not None and model.domain_name == "ByShore"
    nb = 2 if by_shore else (1 if model.spatial else 0)
    sigma2 = np.array([1.0, 0.3][:nb]) if by_shore else np.full(nb, 0.6)
    values = {
        "phi": [2000.0, 500.0],
        "phi1": [2000.0, 500.0],
        "phi2": [2.0, 1.0],
        "psi_A": [0.75 * math.pi, math.pi / 3],
        "psi_R": [3.5, 1.5],
    }
    corr = {}
    for name in model.param_names:
        v = values[name][:nb]
        if model.domain_name.startswith("Circle") and name == "phi":
            v = [0.3]
        corr[name] = np.array(v)
    return ParameterState(
        beta0=1.5,
        beta=beta,
        gamma=np.zeros(n_days),
        W=np.zeros(0),
        sigma2=sigma2,
        tau2=0.1,
        corr=corr,
    )


def simulate_latent(model: ModelConfig, truth: ParameterState, locs, rng) -> np.ndarray:
    """Draw Z ~ N(0, Sigma(truth)) at ``locs`` (zeros for the baseline model)."""
    rng = np.random.default_rng(rng)
    n = len(locs)
    Z = np.zeros(n)
    if not model.spatial:
        return Z
    coords = np.array([l.xy for l in locs], dtype=float)
    shore = np.array([l.shore.code for l in locs])
    depth = np.array([l.geodetic_depth for l in locs], dtype=float)
    for b, blk in enumerate(make_blocks(model.domain, coords, shore, depth)):
        s2 = float(truth.sigma2[min(b, truth.sigma2.size - 1)])
        if s2 == 0:
            continue
        R = model.make_spec(truth.block_params(min(b, truth.sigma2.size - 1))).matrix(blk.geom)
        L, _ = cholesky_jittered(s2 * R)
        Z[blk.index] = L @ rng.standard_normal(blk.index.size)
    return Z


def generate_dataset(
    model: ModelConfig | str,
    truth: ParameterState,
    locs,
    rng,
    covariates: CovariateSpec | np.ndarray | None = None,
    return_latent: bool = False,
):
    """Draw gamma, Z, covariates and Poisson counts from the hierarchy.

    ``truth.W`` is ignored; the latent field is simulated from ``truth``'s
    variance and correlation parameters. With ``return_latent`` the realised
    ``ParameterState`` (W filled in) is returned alongside the data.
    """
    model = get_model(model) if isinstance(model, str) else model
    rng = np.random.default_rng(rng)
    locs = list(locs)
    n = len(locs)
    T = max(l.day_index for l in locs)
    julian = np.zeros(T)
    for l in locs:
        julian[l.day_index - 1] = l.julian_day
    C = temporal_cov(truth.tau2, truth.phi_gamma, julian)
    gamma = np.zeros(T)
    if truth.tau2 > 0:
        L, _ = cholesky_jittered(C)
        gamma = L @ rng.standard_normal(T)
    Z = simulate_latent(model, truth, locs, rng)
    if covariates is None:
        covariates = CovariateSpec(n_covariates=truth.beta.size)
    if isinstance(covariates, CovariateSpec):
        names = covariates.names
        X = draw_covariates(locs, covariates, rng, z=Z)
        standardized = covariates.standardize
    else:
        X = np.asarray(covariates, dtype=float).reshape(n, -1)
        names = tuple(f"x{k + 1}" for k in range(X.shape[1]))
        standardized = False
    if X.shape[1] != truth.beta.size:
        raise ValueError("truth.beta length must match the number of covariates")
    day = np.array([l.day_index for l in locs]) - 1
    W = truth.beta0 + gamma[day] + Z
    eta = X @ truth.beta + W
    y = rng.poisson(np.exp(eta))
    data = Dataset(y, X, tuple(locs), standardized=standardized, covariate_names=names)
    if not return_latent:
        return data
    realised = truth.copy()
    realised.gamma = gamma
    realised.W = W
    return data, realised


def simulate_study_dataset(seed: int, model: str = "M9", design: DesignSpec | None = None,
                           truth: ParameterState | None = None, covariates: CovariateSpec | None = None):
    """Convenience: locations, truth and data from one seed."""
    rng = np.random.default_rng(seed)
    design = design or DesignSpec()
    locs = generate_locations(design, rng)
    m = get_model(model)
    truth = truth or default_truth(m, design.n_days)
    data, realised = generate_dataset(m, truth, locs, rng, covariates, return_latent=True)
    return data, realised


__all__ = [
    "DesignSpec",
    "CovariateSpec",
    "generate_locations",
    "generate_dataset",
    "draw_covariates",
    "default_truth",
    "simulate_latent",
    "simulate_study_dataset",
    "DEFAULT_BETA",
    "DEFAULT_LAKE",
]
