"""Planar geometry for sampling locations.

Distances, the rotate-and-stretch anisotropy transform, orthogonal
(geometric) ellipse fitting and the two radial projections of locations
onto the unit circle.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    CoincidentPoints,
    DegenerateConfiguration,
    NotOnCircle,
    ZeroNorm,
)

CIRCLE_TOL = 1e-9


class Shore(str, Enum):
    NORTH = "North"
    SOUTH = "South"

    @classmethod
    def parse(cls, value) -> "Shore":
        if isinstance(value, Shore):
            return value
        text = str(value).strip().lower()
        if text in ("north", "n"):
            return cls.NORTH
        if text in ("south", "s"):
            return cls.SOUTH
        raise ValueError(f"unknown shore label {value!r}")

    @property
    def code(self) -> str:
        return self.value[0]


@dataclass(frozen=True)
class Location:
    id: int
    easting: float
    northing: float
    shore: Shore
    geodetic_depth: float
    day_index: int
    julian_day: int

    def __post_init__(self):
        object.__setattr__(self, "shore", Shore.parse(self.shore))
        if self.day_index < 1:
            raise ValueError(f"location {self.id}: day_index must be >= 1")
        if not (math.isfinite(self.easting) and math.isfinite(self.northing)):
            raise ValueError(f"location {self.id}: non-finite coordinates")
        if not math.isfinite(self.geodetic_depth):
            raise ValueError(f"location {self.id}: non-finite geodetic depth")

    @property
    def xy(self) -> tuple[float, float]:
        return (self.easting, self.northing)


@dataclass(frozen=True)
class EllipseParams:
    center: tuple[float, float]
    semi_major: float
    semi_minor: float
    rotation: float

    def __post_init__(self):
        if not (self.semi_major >= self.semi_minor > 0):
            raise ValueError("need semi_major >= semi_minor > 0")
        if not (0.0 <= self.rotation < math.pi):
            raise ValueError("rotation must lie in [0, pi)")

    def point(self, t):
        """Points on the ellipse at parametric angle(s) ``t``."""
        t = np.asarray(t, dtype=float)
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        u = self.semi_major * np.cos(t)
        v = self.semi_minor * np.sin(t)
        return np.stack(
            [self.center[0] + u * c - v * s, self.center[1] + u * s + v * c], axis=-1
        )


@dataclass(frozen=True)
class AnisoTransform:
    """Geometric anisotropy: rotate by ``psi_A`` then shrink the second axis by ``psi_R``."""

    psi_A: float
    psi_R: float

    def __post_init__(self):
        if not self.psi_R >= 1.0:
            raise ValueError("anisotropy ratio psi_R must be >= 1")
        if not (0.0 <= self.psi_A < 2 * math.pi):
            raise ValueError("anisotropy angle psi_A must lie in [0, 2*pi)")

    @property
    def matrix(self) -> np.ndarray:
        return aniso_matrix(self.psi_A, self.psi_R)


def aniso_matrix(psi_A: float, psi_R: float) -> np.ndarray:
    c, s = math.cos(psi_A), math.sin(psi_A)
    rot = np.array([[c, -s], [s, c]])
    return rot @ np.diag([1.0, 1.0 / psi_R])


def as_coords(points) -> np.ndarray:
    """(n, 2) float array from Locations or coordinate pairs."""
    if isinstance(points, np.ndarray):
        arr = points.astype(float, copy=False)
    else:
        points = list(points)
        if points and isinstance(points[0], Location):
            arr = np.array([p.xy for p in points], dtype=float)
        else:
            arr = np.asarray(points, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(1, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("expected coordinate pairs with shape (n, 2)")
    return arr


def euclidean_distance(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(math.hypot(a[0] - b[0], a[1] - b[1]))


def pairwise_distances(coords) -> np.ndarray:
    coords = as_coords(coords)
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def apply_aniso(t: AnisoTransform, s) -> np.ndarray:
    """Row-vector product ``s @ A``; ``s`` may be one pair or an (n, 2) array."""
    return np.asarray(s, dtype=float) @ t.matrix


# -- ellipse fitting -------------------------------------------------------


def _conic_to_ellipse(coef):
    A, B, C, D, E, F = coef
    M = np.array([[2 * A, B], [B, 2 * C]])
    if abs(np.linalg.det(M)) < 1e-14 or B * B - 4 * A * C >= 0:
        raise DegenerateConfiguration("conic fit is not an ellipse")
    xc, yc = np.linalg.solve(M, [-D, -E])
    f0 = A * xc * xc + B * xc * yc + C * yc * yc + D * xc + E * yc + F
    evals, evecs = np.linalg.eigh(np.array([[A, B / 2], [B / 2, C]]))
    ax2 = -f0 / evals
    if np.any(ax2 <= 0):
        raise DegenerateConfiguration("conic fit is not a real ellipse")
    axes = np.sqrt(ax2)
    major = int(np.argmax(axes))
    v = evecs[:, major]
    theta = math.atan2(v[1], v[0]) % math.pi
    return np.array([xc, yc, axes[major], axes[1 - major], theta])


def _algebraic_fit(x, y):
    # Halir & Flusser's stable variant of the direct ellipse-specific fit.
    D1 = np.column_stack([x * x, x * y, y * y])
    D2 = np.column_stack([x, y, np.ones_like(x)])
    S1, S2, S3 = D1.T @ D1, D1.T @ D2, D2.T @ D2
    try:
        T = -np.linalg.solve(S3, S2.T)
    except np.linalg.LinAlgError as exc:
        raise DegenerateConfiguration("points do not determine a conic") from exc
    M = S1 + S2 @ T
    M = np.array([M[2] / 2, -M[1], M[0] / 2])
    evals, evecs = np.linalg.eig(M)
    evecs = np.real(evecs)
    cond = 4 * evecs[0] * evecs[2] - evecs[1] ** 2
    ok = np.flatnonzero(cond > 0)
    if ok.size == 0:
        raise DegenerateConfiguration("no ellipse-constrained conic solution")
    a1 = evecs[:, ok[0]]
    return _conic_to_ellipse(np.concatenate([a1, T @ a1]))


def _model_points(p, t):
    xc, yc, a, b, th = p
    c, s = math.cos(th), math.sin(th)
    ct, st = np.cos(t), np.sin(t)
    return xc + a * ct * c - b * st * s, yc + a * ct * s + b * st * c


def _geometric_refine(x, y, p0, max_iter=100, tol=1e-10):
    n = x.size
    xc, yc, a, b, th = p0
    c, s = math.cos(th), math.sin(th)
    u = (x - xc) * c + (y - yc) * s
    v = -(x - xc) * s + (y - yc) * c
    t = np.arctan2(v / b, u / a)
    p = np.array(p0, dtype=float)

    def cost(p, t):
        mx, my = _model_points(p, t)
        return np.sum((x - mx) ** 2 + (y - my) ** 2)

    current = cost(p, t)
    rows = np.arange(n)
    for _ in range(max_iter):
        xc, yc, a, b, th = p
        c, s = math.cos(th), math.sin(th)
        ct, st = np.cos(t), np.sin(t)
        mx, my = _model_points(p, t)
        r = np.concatenate([x - mx, y - my])
        J = np.zeros((2 * n, 5 + n))
        J[:n, 0] = 1.0
        J[n:, 1] = 1.0
        J[:n, 2], J[n:, 2] = ct * c, ct * s
        J[:n, 3], J[n:, 3] = -st * s, st * c
        J[:n, 4] = -a * ct * s - b * st * c
        J[n:, 4] = a * ct * c - b * st * s
        J[rows, 5 + rows] = -a * st * c - b * ct * s
        J[n + rows, 5 + rows] = -a * st * s + b * ct * c
        step = np.linalg.lstsq(J, r, rcond=None)[0]
        scale = 1.0
        while scale > 1e-6:
            p_new = p + scale * step[:5]
            t_new = t + scale * step[5:]
            if p_new[2] > 0 and p_new[3] > 0:
                trial = cost(p_new, t_new)
                if trial <= current:
                    break
            scale *= 0.5
        else:
            break
        p, t, current = p_new, t_new, trial
        if np.linalg.norm(scale * step) < tol:
            break
    return p, current


def fit_ellipse_ols(points) -> EllipseParams:
    """Orthogonal least-squares ellipse through ``points``.

    An ellipse-constrained algebraic conic fit seeds a Gauss-Newton
    minimisation of the summed squared orthogonal distances, carried out on
    (centre, axes, rotation) plus one foot-point angle per point.
    """
    xy = as_coords(points)
    if xy.shape[0] < 5:
        raise DegenerateConfiguration("ellipse fit needs at least 5 points")
    mean = xy.mean(axis=0)
    centered = xy - mean
    scale = math.sqrt(np.mean(np.sum(centered**2, axis=1)))
    if scale == 0:
        raise DegenerateConfiguration("all points coincide")
    sv = np.linalg.svd(centered / scale, compute_uv=False)
    if sv[-1] < 1e-10 * sv[0]:
        raise DegenerateConfiguration("points are collinear")
    x, y = (centered / scale).T
    p0 = _algebraic_fit(x, y)
    p, _ = _geometric_refine(x, y, p0)
    xc, yc, a, b, th = p
    if b > a:
        a, b = b, a
        th += math.pi / 2
    th %= math.pi
    if th >= math.pi:  # rounding at the upper end of the modulo
        th = 0.0
    return EllipseParams(
        center=(float(xc * scale + mean[0]), float(yc * scale + mean[1])),
        semi_major=float(a * scale),
        semi_minor=float(b * scale),
        rotation=float(th),
    )


def orthogonal_residuals(points, e: EllipseParams) -> np.ndarray:
    """Distance from each point to its nearest point on ``e`` (numerical)."""
    xy = as_coords(points)
    t = np.linspace(0, 2 * np.pi, 4096, endpoint=False)
    curve = e.point(t)
    out = np.empty(xy.shape[0])
    for i, p in enumerate(xy):
        d2 = np.sum((curve - p) ** 2, axis=1)
        k = int(np.argmin(d2))
        lo, hi = t[k] - 2 * np.pi / 4096, t[k] + 2 * np.pi / 4096
        for _ in range(60):  # golden-section refinement
            m1 = hi - (hi - lo) / 1.618033988749895
            m2 = lo + (hi - lo) / 1.618033988749895
            if np.sum((e.point(m1) - p) ** 2) < np.sum((e.point(m2) - p) ** 2):
                hi = m2
            else:
                lo = m1
        out[i] = math.sqrt(np.sum((e.point(0.5 * (lo + hi)) - p) ** 2))
    return out


# -- circle projections ----------------------------------------------------


def _normalize_rows(v: np.ndarray) -> np.ndarray:
    norms = np.hypot(v[:, 0], v[:, 1])
    if np.any(norms == 0):
        raise ZeroNorm("a centred point coincides with the centre")
    return v / norms[:, None]


def project_m5(locs, e: EllipseParams) -> np.ndarray:
    """Shrink the fitted ellipse to the unit circle, then project radially."""
    xy = as_coords(locs)
    c, s = math.cos(e.rotation), math.sin(e.rotation)
    d = xy - np.asarray(e.center)
    u = (d[:, 0] * c + d[:, 1] * s) / e.semi_major
    v = (-d[:, 0] * s + d[:, 1] * c) / e.semi_minor
    return _normalize_rows(np.column_stack([u, v]))


def project_m6(locs) -> np.ndarray:
    """Centre on the coordinate mean, then project radially."""
    xy = as_coords(locs)
    return _normalize_rows(xy - xy.mean(axis=0))


def _check_on_circle(c) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    norm = np.hypot(c[..., 0], c[..., 1])
    if np.any(np.abs(norm - 1.0) >= CIRCLE_TOL):
        raise NotOnCircle("point is not on the unit circle")
    return c


def angular_distance(c1, c2) -> float:
    c1 = _check_on_circle(c1)
    c2 = _check_on_circle(c2)
    cross = c1[0] * c2[1] - c1[1] * c2[0]
    dot = c1[0] * c2[0] + c1[1] * c2[1]
    return float(math.atan2(abs(cross), dot))


def pairwise_angular_distances(circle_points) -> np.ndarray:
    c = _check_on_circle(circle_points)
    cross = c[:, None, 0] * c[None, :, 1] - c[:, None, 1] * c[None, :, 0]
    dot = c @ c.T
    return np.arctan2(np.abs(cross), dot)


def chord_distance(omega, r: float = 1.0):
    return 2.0 * r * np.sin(np.asarray(omega, dtype=float) / 2.0)


def equator_angle(a, b) -> float:
    """Acute angle between segment ``ab`` and the east-west axis."""
    dx = float(b[0]) - float(a[0])
    dy = float(b[1]) - float(a[1])
    if dx == 0 and dy == 0:
        raise CoincidentPoints("equator angle undefined for coincident points")
    return math.atan2(abs(dy), abs(dx))


def pairwise_equator_angles(coords) -> np.ndarray:
    xy = as_coords(coords)
    dx = np.abs(xy[:, None, 0] - xy[None, :, 0])
    dy = np.abs(xy[:, None, 1] - xy[None, :, 1])
    return np.arctan2(dy, dx)


def locations_array(locs: Sequence[Location] | Iterable[Location]) -> dict:
    """Columnar view of a list of locations."""
    locs = list(locs)
    return {
        "coords": np.array([l.xy for l in locs], dtype=float).reshape(-1, 2),
        "shore": np.array([l.shore.code for l in locs]),
        "depth": np.array([l.geodetic_depth for l in locs], dtype=float),
        "day": np.array([l.day_index for l in locs], dtype=int),
        "julian": np.array([l.julian_day for l in locs], dtype=int),
        "id": np.array([l.id for l in locs], dtype=int),
    }
