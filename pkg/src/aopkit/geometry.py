"""Ellipse fitting, tangent construction and the angle measurement.

All geometry lives in pixel-center coordinates: x = col + 0.5,
y = row + 0.5, y growing downward.  Angles returned to callers are in
degrees; ellipse orientation is in radians within [0, pi).

The ellipse fit is the direct least-squares conic fit under the
constraint 4AC - B^2 = 1 (Fitzgibbon et al.), using the numerically
stabilized block decomposition of Halir and Flusser, extended with
per-point weights: each point's contribution to the scatter matrix is
multiplied by its weight.  Points are mean-centered before fitting and
the recovered center is shifted back.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import morphology
from .errors import (
    AnisotropicSpacing,
    AopKitError,
    DegenerateAxis,
    DegenerateFit,
    InsufficientPoints,
    InvalidInput,
    InvalidTriangle,
    PointNotExterior,
)
from .morphology import Component, WeightedPoints
from .raster import CLASS_FH, CLASS_PS, ConfMap, LabelMask, PixelSpacing, ensure_same_extent

#: minimum number of boundary points accepted by the ellipse fit; one
#: more than the conic's five degrees of freedom so the fit is never
#: an exact interpolation of noisy boundary pixels
MIN_FIT_POINTS = 6

Point = tuple[float, float]


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Ellipse:
    """Geometric ellipse: center (cx, cy), semi-axes a >= b, tilt theta.

    theta is the angle of the major axis against the +x axis, in
    radians, normalized to [0, pi).
    """

    cx: float
    cy: float
    a: float
    b: float
    theta: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.a, self.b, self.theta)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidInput(f"ellipse parameters must be finite, got {vals}")
        if not (self.a >= self.b > 0.0):
            raise InvalidInput(f"semi-axes must satisfy a >= b > 0, got a={self.a}, b={self.b}")
        if not (0.0 <= self.theta < math.pi):
            raise InvalidInput(f"theta must lie in [0, pi), got {self.theta}")

    def frame_coords(self, points: np.ndarray) -> np.ndarray:
        """World points (N, 2) -> axis-aligned ellipse frame (N, 2)."""
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        c, s = math.cos(self.theta), math.sin(self.theta)
        d = p - (self.cx, self.cy)
        return np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1]], axis=1)

    def implicit(self, points: np.ndarray) -> np.ndarray:
        """Normalized implicit value (xi/a)^2 + (eta/b)^2 - 1, shape (N,)."""
        f = self.frame_coords(points)
        return (f[:, 0] / self.a) ** 2 + (f[:, 1] / self.b) ** 2 - 1.0

    def point_at(self, phi: float | np.ndarray) -> np.ndarray:
        """Boundary point(s) at parametric angle(s) phi, shape (N, 2)."""
        phi = np.atleast_1d(np.asarray(phi, dtype=np.float64))
        c, s = math.cos(self.theta), math.sin(self.theta)
        xi, eta = self.a * np.cos(phi), self.b * np.sin(phi)
        return np.stack(
            [self.cx + c * xi - s * eta, self.cy + s * xi + c * eta], axis=1
        )


@dataclass(frozen=True)
class PsAxis:
    """Oriented principal axis of the pubic symphysis: two endpoints."""

    p_sup: Point
    p_inf: Point

    def __post_init__(self):
        for p in (self.p_sup, self.p_inf):
            if not (math.isfinite(p[0]) and math.isfinite(p[1])):
                raise InvalidInput(f"axis endpoint must be finite, got {p}")
        if self.p_sup == self.p_inf:
            raise InvalidInput("axis endpoints must be distinct")


@dataclass(frozen=True)
class AopResult:
    """Angle of Progression with its confidence and supporting geometry."""

    aop_deg: float
    c_aop: float
    p1: Point
    p3: Point
    p4: Point
    d13: float
    d34: float
    d14: float
    ellipse: Ellipse
    m_points: int

    def __post_init__(self):
        if not (0.0 <= self.aop_deg <= 180.0):
            raise InvalidInput(f"aop_deg must lie in [0, 180], got {self.aop_deg}")
        if not (0.0 < self.c_aop < 1.0):
            raise InvalidInput(f"c_aop must lie strictly inside (0, 1), got {self.c_aop}")
        if not (self.d13 > 0.0 and self.d34 > 0.0 and self.d14 > 0.0):
            raise InvalidInput("side lengths must be positive")
        if self.m_points < 1:
            raise InvalidInput("m_points must be at least 1")

    def to_dict(self) -> dict:
        return {
            "aop_deg": self.aop_deg,
            "c_aop": self.c_aop,
            "p1": list(self.p1),
            "p3": list(self.p3),
            "p4": list(self.p4),
            "d13": self.d13,
            "d34": self.d34,
            "d14": self.d14,
            "m_points": self.m_points,
            "ellipse": {
                "cx": self.ellipse.cx,
                "cy": self.ellipse.cy,
                "a": self.ellipse.a,
                "b": self.ellipse.b,
                "theta": self.ellipse.theta,
            },
        }


# ---------------------------------------------------------------------------
# ellipse fitting
# ---------------------------------------------------------------------------


def fit_ellipse_weighted(
    pts: WeightedPoints | np.ndarray, weights: np.ndarray | None = None
) -> Ellipse:
    """Weighted direct least-squares ellipse fit.

    ``pts`` is either a WeightedPoints bundle or an (N, 2) array with an
    optional separate ``weights`` vector in (0, 1]; omitted weights mean
    the unweighted fit.  Needs at least six points in general position.

    Raises InsufficientPoints or DegenerateFit accordingly.
    """
    if isinstance(pts, WeightedPoints):
        p, w = pts.points, pts.weights
    else:
        p = np.asarray(pts, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 2:
            raise InvalidInput(f"points must be an (N, 2) array, got {p.shape}")
        if weights is None:
            w = np.ones(p.shape[0])
        else:
            w = np.asarray(weights, dtype=np.float64)
            if w.shape != (p.shape[0],):
                raise InvalidInput("weights must match points one to one")
            if not np.isfinite(w).all() or w.min() <= 0.0 or w.max() > 1.0:
                raise InvalidInput("weights must lie in (0, 1]")
    if p.shape[0] < MIN_FIT_POINTS:
        raise InsufficientPoints(
            f"ellipse fit needs at least {MIN_FIT_POINTS} points, got {p.shape[0]}"
        )

    mx, my = p[:, 0].mean(), p[:, 1].mean()
    x = p[:, 0] - mx
    y = p[:, 1] - my

    d1 = np.stack([x * x, x * y, y * y], axis=1)
    d2 = np.stack([x, y, np.ones_like(x)], axis=1)
    wd1 = w[:, None] * d1
    s1 = d1.T @ wd1
    s2 = d1.T @ (w[:, None] * d2)
    s3 = d2.T @ (w[:, None] * d2)
    try:
        t = -np.linalg.solve(s3, s2.T)
    except np.linalg.LinAlgError:
        raise DegenerateFit("singular linear block; points nearly collinear") from None
    m = s1 + s2 @ t
    # premultiply by the inverse of the constraint matrix
    m = np.stack([m[2] / 2.0, -m[1], m[0] / 2.0])

    eigval, eigvec = np.linalg.eig(m)
    a1 = None
    for k in range(3):
        if abs(eigval[k].imag) > 1e-8 * (1.0 + abs(eigval[k].real)):
            continue
        v = eigvec[:, k].real
        if 4.0 * v[0] * v[2] - v[1] ** 2 > 0.0:
            a1 = v
            break
    if a1 is None:
        raise DegenerateFit("no elliptical solution to the constrained fit")
    a2 = t @ a1
    ca, cb, cc = a1
    cd, ce, cf = a2
    # undo the mean-centering substitution x -> x - mx, y -> y - my
    gd = cd - 2.0 * ca * mx - cb * my
    ge = ce - cb * mx - 2.0 * cc * my
    gf = cf + ca * mx * mx + cb * mx * my + cc * my * my - cd * mx - ce * my
    return _conic_to_ellipse(ca, cb, cc, gd, ge, gf)


def _conic_to_ellipse(a: float, b: float, c: float, d: float, e: float, f: float) -> Ellipse:
    """Convert conic coefficients Ax^2+Bxy+Cy^2+Dx+Ey+F=0 to an Ellipse."""
    disc = 4.0 * a * c - b * b
    if disc <= 0.0:
        raise DegenerateFit("conic discriminant is not elliptical")
    if a + c < 0.0:  # normalize sign so the quadratic form is positive definite
        a, b, c, d, e, f = -a, -b, -c, -d, -e, -f
    q = np.array([[a, b / 2.0], [b / 2.0, c]])
    center = np.linalg.solve(2.0 * q, [-d, -e])
    cx, cy = float(center[0]), float(center[1])
    v0 = a * cx * cx + b * cx * cy + c * cy * cy + d * cx + e * cy + f
    if v0 >= 0.0:
        raise DegenerateFit("conic has no real ellipse points")
    evals, evecs = np.linalg.eigh(q)
    if evals[0] <= 0.0:
        raise DegenerateFit("quadratic form is not positive definite")
    major = math.sqrt(-v0 / evals[0])
    minor = math.sqrt(-v0 / evals[1])
    theta = math.atan2(evecs[1, 0], evecs[0, 0]) % math.pi
    if theta == math.pi:  # guard the wrap for tiny negative angles
        theta = 0.0
    return Ellipse(cx=cx, cy=cy, a=major, b=minor, theta=theta)


# ---------------------------------------------------------------------------
# pubic symphysis axis
# ---------------------------------------------------------------------------


def ps_axis(comp: Component, conf: ConfMap, fh_centroid: Point) -> PsAxis:
    """Confidence-weighted principal axis of the PS component.

    The axis direction is the dominant eigenvector of the weighted
    covariance of pixel-center coordinates; the endpoints are the pixel
    centers with extreme scalar projections onto it.  p_inf is the
    endpoint closer to ``fh_centroid``.
    """
    centers = comp.centers()
    w = conf.values[comp.pixels[:, 0], comp.pixels[:, 1]]
    mean = (w[:, None] * centers).sum(axis=0) / w.sum()
    d = centers - mean
    cov = (w[:, None] * d).T @ d / w.sum()
    evals, evecs = np.linalg.eigh(cov)
    if evals[1] <= 1e-12:
        raise DegenerateAxis("PS pixels have no spatial spread")
    axis = evecs[:, 1]
    proj = centers @ axis
    lo = centers[int(np.argmin(proj))]
    hi = centers[int(np.argmax(proj))]
    if np.array_equal(lo, hi):
        raise DegenerateAxis("PS axis endpoints coincide")
    fh = np.asarray(fh_centroid, dtype=np.float64)
    d_lo = float(np.hypot(*(lo - fh)))
    d_hi = float(np.hypot(*(hi - fh)))
    if d_lo < d_hi or (d_lo == d_hi and tuple(lo) < tuple(hi)):
        inf_pt, sup_pt = lo, hi
    else:
        inf_pt, sup_pt = hi, lo
    return PsAxis(p_sup=(float(sup_pt[0]), float(sup_pt[1])),
                  p_inf=(float(inf_pt[0]), float(inf_pt[1])))


# ---------------------------------------------------------------------------
# tangent construction
# ---------------------------------------------------------------------------


def tangent_points(e: Ellipse, q: Point) -> tuple[Point, Point]:
    """Both tangent points on the ellipse as seen from exterior point q.

    Works in the unit-circle frame (translate, rotate, scale axes away),
    where tangency from an external point has a closed form, then maps
    back.  Raises PointNotExterior when q is inside or on the ellipse.
    """
    if not (math.isfinite(q[0]) and math.isfinite(q[1])):
        raise InvalidInput(f"tangent source point must be finite, got {q}")
    f = e.frame_coords(np.array([q]))[0]
    p = np.array([f[0] / e.a, f[1] / e.b])
    d2 = float(p @ p)
    if d2 <= 1.0:
        raise PointNotExterior(f"point {q} is not strictly outside the ellipse")
    s = math.sqrt(1.0 - 1.0 / d2)
    base = p / d2
    perp = np.array([-p[1], p[0]]) / math.sqrt(d2)
    out = []
    for sign in (1.0, -1.0):
        tc = base + sign * s * perp
        world = _frame_to_world(e, tc[0] * e.a, tc[1] * e.b)
        residual = abs(float(e.implicit(np.array([world]))[0]))
        if residual > 1e-9:
            raise DegenerateFit(f"tangent point residual {residual} exceeds 1e-9")
        out.append(world)
    return (out[0], out[1])


def _frame_to_world(e: Ellipse, xi: float, eta: float) -> Point:
    c, s = math.cos(e.theta), math.sin(e.theta)
    return (e.cx + c * xi - s * eta, e.cy + s * xi + c * eta)


def select_tangent(e: Ellipse, axis: PsAxis, candidates: Sequence[Point]) -> Point:
    """Pick the tangent point giving the larger angle at p_inf.

    The angle is measured at p_inf between the ray to p_sup and the ray
    to the candidate.  Exact ties resolve to the lexicographically
    smaller (x, y) candidate, so selection is deterministic.
    """
    if len(candidates) == 0:
        raise InvalidInput("no tangent candidates to select from")
    p3 = np.asarray(axis.p_inf, dtype=np.float64)
    u = np.asarray(axis.p_sup, dtype=np.float64) - p3
    un = np.linalg.norm(u)
    if un == 0.0:
        raise InvalidInput("degenerate axis: p_sup equals p_inf")
    best: tuple[float, Point] | None = None
    for cand in candidates:
        v = np.asarray(cand, dtype=np.float64) - p3
        vn = np.linalg.norm(v)
        if vn == 0.0:
            raise InvalidInput(f"tangent candidate coincides with p_inf: {cand}")
        cosang = float(np.clip(u @ v / (un * vn), -1.0, 1.0))
        ang = math.acos(cosang)
        key = (float(cand[0]), float(cand[1]))
        if best is None or ang > best[0] or (ang == best[0] and key < best[1]):
            best = (ang, key)
    return best[1]


# ---------------------------------------------------------------------------
# the angle and its confidence
# ---------------------------------------------------------------------------


def aop_from_sides(d13: float, d34: float, d14: float) -> float:
    """Angle at p3, in degrees, from the three pairwise distances.

    Law of cosines: arccos((d13^2 + d34^2 - d14^2) / (2 d13 d34)),
    scaled to degrees.  Side triples that cannot close a (possibly
    degenerate) triangle raise InvalidTriangle.
    """
    for name, v in (("d13", d13), ("d34", d34), ("d14", d14)):
        if not math.isfinite(v):
            raise InvalidTriangle(f"{name} must be finite, got {v}")
    if d13 <= 0.0 or d34 <= 0.0 or d14 < 0.0:
        raise InvalidTriangle(f"invalid side lengths ({d13}, {d34}, {d14})")
    cosang = (d13 * d13 + d34 * d34 - d14 * d14) / (2.0 * d13 * d34)
    if abs(cosang) > 1.0 + 1e-12:
        raise InvalidTriangle(f"sides ({d13}, {d34}, {d14}) violate the triangle inequality")
    return math.degrees(math.acos(max(-1.0, min(1.0, cosang))))


def aop_confidence(points: np.ndarray, conf: ConfMap) -> float:
    """Mean confidence over sample points, by nearest-pixel lookup.

    Points are (x, y); the containing pixel (floor, clipped to the
    extent) is the nearest pixel for pixel-center points, so boundary
    samples look up exactly.
    """
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if p.shape[0] == 0 or p.shape[1] != 2:
        raise InvalidInput(f"sample points must be a nonempty (M, 2) array, got {p.shape}")
    cols = np.clip(np.floor(p[:, 0]).astype(np.int64), 0, conf.width - 1)
    rows = np.clip(np.floor(p[:, 1]).astype(np.int64), 0, conf.height - 1)
    # exact summation keeps the mean invariant under sample permutation
    return math.fsum(conf.values[rows, cols]) / p.shape[0]


@contextmanager
def _stage(name: str) -> Iterator[None]:
    try:
        yield
    except AopKitError as err:
        if err.stage is None:
            err.stage = name
        raise


def compute_aop(
    mask: LabelMask, conf: ConfMap, spacing: PixelSpacing = PixelSpacing(1.0, 1.0)
) -> AopResult:
    """Full measurement pipeline from a label mask and confidence map.

    Largest PS and FH components -> weighted FH boundary -> ellipse fit
    -> PS axis -> tangent from p_inf -> angle at p_inf plus the mean
    confidence over the PS and FH boundary samples.  Any failure raises
    the stage-specific error with its ``stage`` attribute set.  All
    distances are in isotropic pixel units.
    """
    ensure_same_extent(mask, conf)
    with _stage("spacing"):
        if not spacing.is_isotropic:
            raise AnisotropicSpacing(
                f"angle measurement needs square pixels, got {spacing.row_mm} x {spacing.col_mm} mm"
            )
    with _stage("largest_component"):
        ps_comp = morphology.largest_component(mask, CLASS_PS)
        fh_comp = morphology.largest_component(mask, CLASS_FH)
    with _stage("boundary_points"):
        fh_boundary = morphology.boundary_points(fh_comp, mask)
        ps_boundary = morphology.boundary_points(ps_comp, mask)
    with _stage("weighted_boundary"):
        fh_weighted = morphology.weighted_boundary(fh_boundary, conf)
    with _stage("fit_ellipse_weighted"):
        ellipse = fit_ellipse_weighted(fh_weighted)
    with _stage("ps_axis"):
        axis = ps_axis(ps_comp, conf, (ellipse.cx, ellipse.cy))
    with _stage("tangent_points"):
        candidates = tangent_points(ellipse, axis.p_inf)
    with _stage("select_tangent"):
        p4 = select_tangent(ellipse, axis, candidates)
    p1, p3 = axis.p_sup, axis.p_inf
    d13 = math.hypot(p1[0] - p3[0], p1[1] - p3[1])
    d34 = math.hypot(p4[0] - p3[0], p4[1] - p3[1])
    d14 = math.hypot(p4[0] - p1[0], p4[1] - p1[1])
    with _stage("aop_from_sides"):
        aop_deg = aop_from_sides(d13, d34, d14)
    with _stage("aop_confidence"):
        ps_centers = np.stack(
            [ps_boundary[:, 1] + 0.5, ps_boundary[:, 0] + 0.5], axis=1
        ).astype(np.float64)
        samples = np.concatenate([ps_centers, fh_weighted.points], axis=0)
        c_aop = aop_confidence(samples, conf)
    return AopResult(
        aop_deg=aop_deg,
        c_aop=c_aop,
        p1=p1,
        p3=p3,
        p4=p4,
        d13=d13,
        d34=d34,
        d14=d14,
        ellipse=ellipse,
        m_points=samples.shape[0],
    )
