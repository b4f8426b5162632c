"""Correlation functions and covariance matrices for every spatial structure.

All kernels are exponential in an effective distance:

* isotropic: Euclidean distance,
* geometric anisotropy: distance after ``s -> s @ A``,
* covariate-in-correlation: ``d / phi1 + |q - q'| / phi2`` with ``q`` the
  geodetic depth,
* circle kernels: chord (``2 sin(omega / 2)``) or arc (``omega``) on the unit
  circle.

Pairwise differences are computed once per location set (``SiteGeometry``);
only the kernel evaluation depends on the hyperparameters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import ClassVar, Mapping, Sequence

import numpy as np
from scipy import linalg

from .errors import EmptyShore, MissingCovariate, NotOnCircle, NotPositiveDefinite
from .geometry import (
    CIRCLE_TOL,
    Location,
    Shore,
    aniso_matrix,
    as_coords,
    fit_ellipse_ols,
    pairwise_angular_distances,
    project_m5,
    project_m6,
)

CIRCLE_RADIUS = 1.0
JITTER_LADDER = (0.0, 1e-10, 1e-8, 1e-6)


class SiteGeometry:
    """Cached pairwise quantities for one set of sites.

    ``coords`` are planar coordinates, or unit-circle points when
    ``on_circle`` is set.
    """

    def __init__(self, coords, depth=None, on_circle: bool = False):
        self.coords = as_coords(coords)
        self.depth = None if depth is None else np.asarray(depth, dtype=float)
        self.on_circle = on_circle
        self.n = self.coords.shape[0]

    @cached_property
    def dx(self) -> np.ndarray:
        return self.coords[:, None, 0] - self.coords[None, :, 0]

    @cached_property
    def dy(self) -> np.ndarray:
        return self.coords[:, None, 1] - self.coords[None, :, 1]

    @cached_property
    def dist(self) -> np.ndarray:
        return np.hypot(self.dx, self.dy)

    @cached_property
    def ddepth(self) -> np.ndarray:
        if self.depth is None:
            raise MissingCovariate("geodetic depth required by covariate-in-correlation")
        return np.abs(self.depth[:, None] - self.depth[None, :])

    @cached_property
    def omega(self) -> np.ndarray:
        if not self.on_circle:
            raise NotOnCircle("circle kernels need projected unit-circle points")
        return pairwise_angular_distances(self.coords)

    def subset(self, idx) -> "SiteGeometry":
        depth = None if self.depth is None else self.depth[idx]
        return SiteGeometry(self.coords[idx], depth, self.on_circle)

    def max_distance(self) -> float:
        if self.n < 2:
            return 0.0
        if self.on_circle:
            return float(chord(self.omega).max())
        return float(self.dist.max())

    def max_depth_difference(self) -> float:
        if self.n < 2:
            return 0.0
        return float(self.ddepth.max())


def chord(omega):
    return 2.0 * CIRCLE_RADIUS * np.sin(np.asarray(omega) / 2.0)


# -- correlation specs ------------------------------------------------------


class CorrelationSpec:
    """Base class; subclasses are small frozen dataclasses of hyperparameters."""

    name: ClassVar[str] = ""
    param_names: ClassVar[tuple[str, ...]] = ()
    circular: ClassVar[bool] = False

    def params(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in self.param_names}

    def _check(self):
        for k in self.param_names:
            if k.startswith("phi") and not getattr(self, k) > 0:
                raise ValueError(f"{type(self).__name__}: {k} must be > 0")

    def matrix(self, geom: SiteGeometry) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class Independence(CorrelationSpec):
    name: ClassVar[str] = "Independence"

    def matrix(self, geom):
        return np.eye(geom.n)


@dataclass(frozen=True)
class Isotropic(CorrelationSpec):
    phi: float
    name: ClassVar[str] = "Isotropic"
    param_names: ClassVar[tuple[str, ...]] = ("phi",)

    def __post_init__(self):
        self._check()

    def matrix(self, geom):
        return np.exp(-geom.dist / self.phi)


@dataclass(frozen=True)
class GeomAniso(CorrelationSpec):
    phi: float
    psi_A: float
    psi_R: float
    name: ClassVar[str] = "GeomAniso"
    param_names: ClassVar[tuple[str, ...]] = ("phi", "psi_A", "psi_R")

    def __post_init__(self):
        self._check()
        if not self.psi_R >= 1.0:
            raise ValueError("GeomAniso: psi_R must be >= 1")

    def matrix(self, geom):
        A = aniso_matrix(self.psi_A, self.psi_R)
        u = geom.dx * A[0, 0] + geom.dy * A[1, 0]
        v = geom.dx * A[0, 1] + geom.dy * A[1, 1]
        return np.exp(-np.hypot(u, v) / self.phi)


@dataclass(frozen=True)
class CovariateInCorr(CorrelationSpec):
    phi1: float
    phi2: float
    name: ClassVar[str] = "CovariateInCorr"
    param_names: ClassVar[tuple[str, ...]] = ("phi1", "phi2")

    def __post_init__(self):
        self._check()

    def matrix(self, geom):
        return np.exp(-geom.dist / self.phi1 - geom.ddepth / self.phi2)


@dataclass(frozen=True)
class CircleChord(CorrelationSpec):
    phi: float
    name: ClassVar[str] = "CircleChord"
    param_names: ClassVar[tuple[str, ...]] = ("phi",)
    circular: ClassVar[bool] = True

    def __post_init__(self):
        self._check()

    def matrix(self, geom):
        return np.exp(-chord(geom.omega) / self.phi)


@dataclass(frozen=True)
class CircleArc(CorrelationSpec):
    phi: float
    name: ClassVar[str] = "CircleArc"
    param_names: ClassVar[tuple[str, ...]] = ("phi",)
    circular: ClassVar[bool] = True

    def __post_init__(self):
        self._check()

    def matrix(self, geom):
        return np.exp(-geom.omega / self.phi)


SPEC_TYPES = {
    cls.name: cls
    for cls in (Independence, Isotropic, GeomAniso, CovariateInCorr, CircleChord, CircleArc)
}


def _site(point, spec: CorrelationSpec):
    """(coords, depth) for a Location, coordinate pair or circle point."""
    if isinstance(point, Location):
        return np.array(point.xy, dtype=float), point.geodetic_depth
    arr = np.asarray(point, dtype=float)
    return arr[:2], (arr[2] if arr.size > 2 else None)


def correlate(spec: CorrelationSpec, a, b) -> float:
    """Correlation between two sites under ``spec``.

    Sites are Locations (or coordinate pairs) for planar kernels and unit-circle
    points for the circle kernels. ``CovariateInCorr`` needs the geodetic depth,
    so plain pairs must carry it as a third element.
    """
    if isinstance(spec, Independence):
        ca, _ = _site(a, spec)
        cb, _ = _site(b, spec)
        same = a is b or (a == b if isinstance(a, Location) else np.array_equal(ca, cb))
        return 1.0 if same else 0.0
    ca, qa = _site(a, spec)
    cb, qb = _site(b, spec)
    if spec.circular:
        for c in (ca, cb):
            if abs(math.hypot(c[0], c[1]) - 1.0) >= CIRCLE_TOL:
                raise NotOnCircle("circle kernels need unit-circle points")
        geom = SiteGeometry(np.vstack([ca, cb]), on_circle=True)
        return float(spec.matrix(geom)[0, 1])
    depth = None
    if isinstance(spec, CovariateInCorr):
        if qa is None or qb is None:
            raise MissingCovariate("both sites must carry geodetic depth")
        depth = [qa, qb]
    geom = SiteGeometry(np.vstack([ca, cb]), depth)
    return float(spec.matrix(geom)[0, 1])


# -- domains ----------------------------------------------------------------


@dataclass(frozen=True)
class WholeLake:
    name: ClassVar[str] = "WholeLake"


@dataclass(frozen=True)
class Circle:
    projection: str = "M6"
    name: ClassVar[str] = "Circle"

    def __post_init__(self):
        if self.projection not in ("M5", "M6"):
            raise ValueError("circle projection must be 'M5' or 'M6'")


@dataclass(frozen=True)
class ByShore:
    name: ClassVar[str] = "ByShore"


Domain = WholeLake | Circle | ByShore


@dataclass
class CovarianceMatrix:
    values: np.ndarray
    jitter_used: float = 0.0
    order: np.ndarray | None = None  # shore-sorted row order for ByShore

    @property
    def dim(self) -> int:
        return self.values.shape[0]


@dataclass
class Block:
    """Index set of sites sharing one Gaussian process."""

    label: str  # "" for a single process, "N"/"S" by shore
    index: np.ndarray
    geom: SiteGeometry = field(repr=False)


def circle_points(domain: Circle, coords) -> np.ndarray:
    coords = as_coords(coords)
    if domain.projection == "M5":
        return project_m5(coords, fit_ellipse_ols(coords))
    return project_m6(coords)


def make_blocks(domain: Domain, coords, shore_codes=None, depth=None) -> list[Block]:
    """Split sites into independent Gaussian-process blocks for ``domain``."""
    coords = as_coords(coords)
    n = coords.shape[0]
    if isinstance(domain, Circle):
        geom = SiteGeometry(circle_points(domain, coords), on_circle=True)
        return [Block("", np.arange(n), geom)]
    geom = SiteGeometry(coords, depth)
    if isinstance(domain, ByShore):
        codes = np.asarray(shore_codes)
        blocks = []
        for label in ("N", "S"):
            idx = np.flatnonzero(codes == label)
            if idx.size == 0:
                raise EmptyShore(f"no locations on the {Shore.parse(label).value} shore")
            blocks.append(Block(label, idx, geom.subset(idx)))
        return blocks
    return [Block("", np.arange(n), geom)]


def _per_shore(value, label):
    if isinstance(value, Mapping):
        for key in (label, Shore.parse(label), Shore.parse(label).value):
            if key in value:
                return value[key]
        raise KeyError(f"missing entry for shore {label}")
    if isinstance(value, (tuple, list)):
        return value[0 if label == "N" else 1]
    return value


def build_covariance(
    domain: Domain,
    spec,
    variance,
    locs: Sequence[Location],
) -> CovarianceMatrix:
    """Dense covariance of the latent spatial effect at ``locs`` (input order).

    For ``ByShore`` pass ``spec``/``variance`` as ``{"N": ..., "S": ...}`` (or a
    2-tuple north-first); cross-shore entries are exactly zero and
    ``order`` holds the shore-sorted permutation that makes the matrix block
    diagonal.
    """
    locs = list(locs)
    if not locs:
        raise ValueError("need at least one location")
    coords = np.array([l.xy for l in locs], dtype=float)
    codes = np.array([l.shore.code for l in locs])
    depth = np.array([l.geodetic_depth for l in locs], dtype=float)
    blocks = make_blocks(domain, coords, codes, depth)
    n = len(locs)
    out = np.zeros((n, n))
    for b in blocks:
        s = _per_shore(spec, b.label) if b.label else spec
        v = _per_shore(variance, b.label) if b.label else variance
        if not v > 0:
            raise ValueError("variances must be > 0")
        out[np.ix_(b.index, b.index)] = v * s.matrix(b.geom)
    order = np.concatenate([b.index for b in blocks]) if isinstance(domain, ByShore) else None
    return CovarianceMatrix(out, 0.0, order)


def cholesky_jittered(m, ladder=JITTER_LADDER):
    """Lower Cholesky factor of ``m + jitter * I`` and the jitter used.

    Jitter climbs ``ladder`` (relative to the mean diagonal) until the
    factorisation succeeds.
    """
    values = m.values if isinstance(m, CovarianceMatrix) else np.asarray(m, dtype=float)
    scale = float(np.mean(np.diag(values))) if values.size else 1.0
    eye = np.eye(values.shape[0])
    for rel in ladder:
        jitter = rel * scale
        try:
            L = linalg.cholesky(values + jitter * eye, lower=True, check_finite=False)
        except linalg.LinAlgError:
            continue
        if np.all(np.isfinite(L)):
            if isinstance(m, CovarianceMatrix):
                m.jitter_used = jitter
            return L, jitter
    raise NotPositiveDefinite("matrix not positive definite at any jitter level")
