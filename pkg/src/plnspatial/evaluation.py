"""In-sample model comparison: DIC, proper scoring rules, anisotropy summary."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import special, stats

from .errors import DegenerateVariance
from .geometry import pairwise_equator_angles
from .model import Dataset, ModelConfig, get_model, poisson_loglik

TAIL_TOL = 1e-10
LOGS_FLOOR = 1e-300
SCORE_COLUMNS = ("model", "Dbar", "pD", "DIC", "RPS", "LogS", "DSS")


def dic(deviance_draws, deviance_at_mean: float):
    """(Dbar, pD, DIC) with pD = Dbar - D(theta_bar) and DIC = Dbar + pD."""
    d = np.asarray(deviance_draws, dtype=float)
    if d.size == 0:
        raise ValueError("need at least one deviance draw")
    dbar = float(d.mean())
    pd = dbar - float(deviance_at_mean)
    return dbar, pd, dbar + pd


def _as_pmf(pmf) -> np.ndarray:
    if isinstance(pmf, dict):
        out = np.zeros(max(pmf) + 1)
        for k, p in pmf.items():
            out[int(k)] = p
        return out
    return np.asarray(pmf, dtype=float)


def rps(pmf, y: int) -> float:
    """Ranked probability score of a count pmf (index = count) at observation y."""
    p = _as_pmf(pmf)
    y = int(y)
    kmax = max(p.size - 1, y)
    F = np.cumsum(np.pad(p, (0, kmax + 1 - p.size)))
    ind = (np.arange(kmax + 1) >= y).astype(float)
    terms = (F - ind) ** 2
    # terms past y with 1 - F below the tolerance contribute nothing
    tail = np.flatnonzero((np.arange(kmax + 1) >= y) & (1.0 - F < TAIL_TOL))
    stop = tail[0] + 1 if tail.size else kmax + 1
    return float(terms[:stop].sum())


def log_score(pmf, y: int) -> float:
    """-log p(y), capped at -log(1e-300) when p(y) underflows."""
    p = _as_pmf(pmf)
    py = p[int(y)] if int(y) < p.size else 0.0
    return -math.log(max(py, LOGS_FLOOR))


def dss(mu: float, sigma: float, y: float) -> float:
    """Dawid-Sebastiani score ((y - mu) / sigma)^2 + 2 log sigma."""
    if not sigma > 0:
        raise DegenerateVariance("predictive standard deviation must be positive")
    return ((y - mu) / sigma) ** 2 + 2.0 * math.log(sigma)


class PredictiveDistribution:
    """Per-site Poisson mixture over posterior draws of the rate.

    ``lam`` has shape (M, n). The pmf of site i is evaluated on 0..kmax_i,
    where kmax_i leaves less than 1e-12 of mass in every component's tail.
    """

    def __init__(self, lam):
        lam = np.asarray(lam, dtype=float)
        if lam.ndim == 1:
            lam = lam[:, None]
        if lam.shape[0] == 0:
            raise ValueError("need at least one draw")
        if not np.all(np.isfinite(lam)) or np.any(lam < 0):
            raise ValueError("rates must be finite and non-negative")
        self.lam = lam
        self.mean = lam.mean(axis=0)
        self.var = self.mean + lam.var(axis=0)
        self.sd = np.sqrt(self.var)
        self.kmax = stats.poisson.isf(1e-12, lam.max(axis=0)).astype(int) + 1

    @property
    def n_sites(self) -> int:
        return self.lam.shape[1]

    def pmf(self, i: int, kmax: int | None = None) -> np.ndarray:
        kmax = int(self.kmax[i] if kmax is None else kmax)
        k = np.arange(kmax + 1)
        return stats.poisson.pmf(k[None, :], self.lam[:, i : i + 1]).mean(axis=0)

    def log_prob(self, i: int, y: int) -> float:
        """log p_i(y) evaluated stably in log space."""
        lp = stats.poisson.logpmf(int(y), self.lam[:, i])
        return float(special.logsumexp(lp) - math.log(lp.size))


@dataclass
class ScoreReport:
    model_id: str
    Dbar: float
    pD: float
    DIC: float
    RPS: float
    LogS: float
    DSS: float
    flagged_sites: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {
            "model": self.model_id,
            "Dbar": self.Dbar,
            "pD": self.pD,
            "DIC": self.DIC,
            "RPS": self.RPS,
            "LogS": self.LogS,
            "DSS": self.DSS,
        }

    def to_dict(self) -> dict:
        return asdict(self)


def deviance(eta, y) -> float:
    return -2.0 * float(np.sum(poisson_loglik(eta, y)))


def score_model(sample, data: Dataset) -> ScoreReport:
    """DIC and mean-per-observation RPS, LogS and DSS from all stored draws."""
    if sample.n_draws == 0:
        raise ValueError("posterior sample is empty")
    eta = sample.linear_predictor(data)
    y = data.counts
    devs = -2.0 * poisson_loglik(eta, y[None, :]).sum(axis=1)
    dbar, pd, dic_value = dic(devs, deviance(eta.mean(axis=0), y))
    pred = PredictiveDistribution(np.exp(eta))
    n = data.n
    r = np.empty(n)
    ls = np.empty(n)
    ds = np.empty(n)
    flagged = []
    for i in range(n):
        r[i] = rps(pred.pmf(i), y[i])
        lp = pred.log_prob(i, y[i])
        if lp < math.log(LOGS_FLOOR):
            flagged.append(i)
            lp = math.log(LOGS_FLOOR)
        ls[i] = -lp
        ds[i] = dss(pred.mean[i], pred.sd[i], y[i])
    return ScoreReport(
        model_id=sample.model_id,
        Dbar=dbar,
        pD=pd,
        DIC=dic_value,
        RPS=float(r.mean()),
        LogS=float(ls.mean()),
        DSS=float(ds.mean()),
        flagged_sites=flagged,
        meta={"score_convention": "mean per observation", "n_draws": int(sample.n_draws), "n": n,
              "plug_in": "posterior mean of linear predictor"},
    )


def write_reports(reports, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCORE_COLUMNS)
        for rep in reports:
            row = rep.row()
            w.writerow([row["model"]] + [repr(float(row[c])) for c in SCORE_COLUMNS[1:]])


def read_reports(path) -> list[ScoreReport]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [ScoreReport(r["model"], *(float(r[c]) for c in SCORE_COLUMNS[1:])) for r in rows]


def rank_reports(reports) -> list[dict]:
    """Rows sorted by DIC, each listing the criteria on which it is best."""
    crits = SCORE_COLUMNS[3:]
    best = {c: min(rep.row()[c] for rep in reports) for c in crits}
    rows = []
    for rep in sorted(reports, key=lambda r: r.DIC):
        row = rep.row()
        row["best"] = ";".join(c for c in crits if row[c] == best[c])
        rows.append(row)
    return rows


# -- anisotropy summary -------------------------------------------------------


@dataclass
class AngleBin:
    lower: float
    upper: float
    mean_corr: float
    raw_mean: float
    n_pairs: int
    too_few_pairs: bool

    @property
    def centre(self) -> float:
        return 0.5 * (self.lower + self.upper)

    def contains(self, theta: float) -> bool:
        return self.lower <= theta <= self.upper


@dataclass
class AnisotropyTable:
    bins: list
    n_strata: int
    block: str

    @property
    def peak(self) -> AngleBin:
        ok = [b for b in self.bins if not b.too_few_pairs] or self.bins
        return max(ok, key=lambda b: b.mean_corr)

    def rows(self) -> list[dict]:
        return [
            {"theta_lower": b.lower, "theta_upper": b.upper, "mean_corr": b.mean_corr,
             "raw_mean": b.raw_mean, "n_pairs": b.n_pairs, "too_few_pairs": b.too_few_pairs}
            for b in self.bins
        ]


def fold_angle(theta: float) -> float:
    """Acute angle in [0, pi/2] between a direction and the horizontal axis."""
    t = math.fmod(theta, math.pi)
    if t < 0:
        t += math.pi
    return math.pi - t if t > math.pi / 2 else t


def slowest_decay_angle(psi_A: float) -> float:
    """Folded direction along which a geometric-anisotropy correlation decays slowest.

    The transform scales the coordinate along (-sin psi_A, cos psi_A) by
    1 / psi_R, so correlation persists longest in direction psi_A + pi/2.
    """
    return fold_angle(psi_A + math.pi / 2)


def _posterior_mean_corr(sample, model, block, max_draws):
    m = sample.n_draws
    idx = np.unique(np.linspace(0, m - 1, min(m, max_draws)).astype(int))
    b = sample.block_labels.index(block.label) if block.label in sample.block_labels else 0
    acc = np.zeros((block.index.size, block.index.size))
    for j in idx:
        params = {k: sample.corr[k][j, b] for k in model.param_names}
        acc += model.make_spec(params).matrix(block.geom) if model.param_names else np.eye(block.index.size)
    return acc / idx.size


def anisotropy_summary(sample, data: Dataset, n_bins: int = 3, model: ModelConfig | None = None,
                       block: str | None = None, n_strata: int = 8, min_pairs: int = 10,
                       max_draws: int = 400) -> AnisotropyTable:
    """Posterior-mean correlation by pair angle, adjusted for distance.

    Pairs within one spatial block (the north shore for by-shore models) are
    grouped into distance-quantile strata. Inside each stratum the log
    correlation is regressed linearly on distance, pooling all angles; for an
    exponential-type kernel this removes the distance effect exactly along any
    one direction, so what remains is the directional part. A bin's value is
    the grand mean correlation times exp(average over strata of the bin's mean
    residual), so a single bin returns the global mean and an isotropic kernel
    gives equal bins. Bins with fewer than ``min_pairs`` pairs are flagged and
    ignored by ``peak``.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    model = model or get_model(sample.model_id)
    if not model.spatial:
        raise ValueError("anisotropy summary needs a spatial model")
    blocks = model.blocks(data)
    if block is None:
        block = "N" if any(b.label == "N" for b in blocks) else blocks[0].label
    blk = next(b for b in blocks if b.label == block)
    R = _posterior_mean_corr(sample, model, blk, max_draws)
    coords = data.coords[blk.index]
    iu = np.triu_indices(blk.index.size, k=1)
    dist = np.hypot(*(coords[iu[0]] - coords[iu[1]]).T)
    keep = dist > 0
    theta = pairwise_equator_angles(coords)[iu][keep]
    dist = dist[keep]
    corr = R[iu][keep]
    edges = np.linspace(0.0, math.pi / 2, n_bins + 1)
    which = np.clip(np.searchsorted(edges, theta, side="right") - 1, 0, n_bins - 1)
    q = np.quantile(dist, np.linspace(0, 1, n_strata + 1))
    stratum = np.clip(np.searchsorted(q, dist, side="right") - 1, 0, n_strata - 1)
    grand = corr.mean()
    logc = np.log(np.maximum(corr, LOGS_FLOOR))
    resid = np.empty_like(logc)
    for s in range(n_strata):
        in_s = stratum == s
        if not in_s.any():
            continue
        d = dist[in_s]
        if in_s.sum() > 2 and np.ptp(d) > 0:
            slope, icept = np.polyfit(d, logc[in_s], 1)
            resid[in_s] = logc[in_s] - (icept + slope * d)
        else:
            resid[in_s] = logc[in_s] - logc[in_s].mean()
    bins = []
    for k in range(n_bins):
        sel = which == k
        devs = [resid[sel & (stratum == s)].mean() for s in range(n_strata) if (sel & (stratum == s)).any()]
        adj = grand * math.exp(np.mean(devs)) if devs else float("nan")
        bins.append(AngleBin(
            float(edges[k]), float(edges[k + 1]), float(adj),
            float(corr[sel].mean()) if sel.any() else float("nan"),
            int(sel.sum()), bool(sel.sum() < min_pairs),
        ))
    return AnisotropyTable(bins, n_strata, block)
