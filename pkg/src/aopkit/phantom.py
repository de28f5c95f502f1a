"""Synthetic phantoms with analytically known measurement geometry.

A phantom is an exact continuous scene (one ellipse, one thickened
segment) rasterized onto the pixel grid by a center-in-shape test.  The
ground-truth angle is computed on the continuous shapes with the exact
tangent construction, never through the pixel pipeline, so phantoms can
certify the measurement end to end.

The thickened segment has flat, chamfered caps: points within
half_width of the segment laterally, between the endpoint planes
axially, narrowing to half a pixel over the last half pixel at each
end.  With endpoints on pixel centers the rasterized strip then has a
unique extreme pixel at each end, exactly the stated endpoint, so the
measured axis endpoints match the continuous model.

Randomness comes from the counter-based, splittable Philox generator
(``philox4x64-10``); every case records the algorithm id and its seed,
so suites regenerate bit-identically from their metadata.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import InvalidInput, InvalidSpec
from .geometry import Ellipse, PsAxis, aop_from_sides, select_tangent, tangent_points
from .morphology import largest_component
from .raster import (
    CLASS_BACKGROUND,
    CLASS_FH,
    CLASS_PS,
    ConfMap,
    LabelMask,
    LogitMap,
    read_f32r,
    read_mask_pgm,
    write_f32r,
    write_mask_pgm,
)

RNG_ID = "philox4x64-10"
META_FORMAT = "aopkit-phantom-v1"

#: logit margin assigned to the true class of every pixel
CLEAN_MARGIN = 5.0

_MASK64 = (1 << 64) - 1
_EDGE_MARGIN = 4.0
_CLEARANCE = 0.6  # required gap between the segment envelope and the ellipse


def _rng(key0: int, key1: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[key0 & _MASK64, key1 & _MASK64]))


# ---------------------------------------------------------------------------
# scene description
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PsSegment:
    """Continuous PS model: endpoints (x, y) and lateral half-width."""

    p_sup: tuple
    p_inf: tuple
    half_width: float

    def __post_init__(self):
        for p in (self.p_sup, self.p_inf):
            if len(p) != 2 or not all(math.isfinite(v) for v in p):
                raise InvalidInput(f"segment endpoint must be a finite (x, y) pair, got {p}")
        if self.p_sup == self.p_inf:
            raise InvalidInput("segment endpoints must be distinct")
        if not (math.isfinite(self.half_width) and self.half_width > 0.0):
            raise InvalidInput(f"half_width must be positive, got {self.half_width}")

    @property
    def length(self) -> float:
        return math.hypot(
            self.p_sup[0] - self.p_inf[0], self.p_sup[1] - self.p_inf[1]
        )


@dataclass(frozen=True)
class ConfField:
    """Confidence model: uniform, or radial falloff from a center point."""

    kind: str
    value: float | None = None
    center: tuple | None = None
    v_max: float | None = None
    v_min: float | None = None

    def __post_init__(self):
        if self.kind == "uniform":
            if self.value is None or not (0.0 < self.value < 1.0):
                raise InvalidInput(f"uniform confidence must lie in (0, 1), got {self.value}")
        elif self.kind == "radial_falloff":
            if self.center is None or len(self.center) != 2:
                raise InvalidInput("radial_falloff needs a center point")
            if self.v_max is None or self.v_min is None:
                raise InvalidInput("radial_falloff needs v_max and v_min")
            if not (0.0 < self.v_min <= self.v_max < 1.0):
                raise InvalidInput(
                    f"need 0 < v_min <= v_max < 1, got {self.v_min}, {self.v_max}"
                )
        else:
            raise InvalidInput(f"unknown confidence field kind {self.kind!r}")

    def to_dict(self) -> dict:
        if self.kind == "uniform":
            return {"kind": "uniform", "value": self.value}
        return {
            "kind": "radial_falloff",
            "center": list(self.center),
            "v_max": self.v_max,
            "v_min": self.v_min,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConfField":
        if d["kind"] == "uniform":
            return cls(kind="uniform", value=d["value"])
        return cls(
            kind="radial_falloff",
            center=tuple(d["center"]),
            v_max=d["v_max"],
            v_min=d["v_min"],
        )


@dataclass(frozen=True)
class Corruption:
    """Logit corruption: none, additive noise, class bias, or erosion."""

    kind: str = "none"
    sigma: float | None = None
    class_id: int | None = None
    delta: float | None = None
    iterations: int | None = None

    def __post_init__(self):
        if self.kind == "none":
            pass
        elif self.kind == "logit_noise":
            if self.sigma is None or not (math.isfinite(self.sigma) and self.sigma >= 0.0):
                raise InvalidInput(f"logit_noise needs sigma >= 0, got {self.sigma}")
        elif self.kind == "logit_bias":
            if self.class_id not in (0, 1, 2):
                raise InvalidInput(f"logit_bias needs class_id in {{0, 1, 2}}, got {self.class_id}")
            if self.delta is None or not math.isfinite(self.delta):
                raise InvalidInput(f"logit_bias needs a finite delta, got {self.delta}")
        elif self.kind == "boundary_erosion":
            if not isinstance(self.iterations, int) or self.iterations < 1:
                raise InvalidInput(
                    f"boundary_erosion needs iterations >= 1, got {self.iterations}"
                )
        else:
            raise InvalidInput(f"unknown corruption kind {self.kind!r}")

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind}
        for name in ("sigma", "class_id", "delta", "iterations"):
            v = getattr(self, name)
            if v is not None:
                out[name] = v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Corruption":
        return cls(**d)


@dataclass(frozen=True)
class PhantomSpec:
    """Full recipe for one phantom case."""

    height: int
    width: int
    fh_ellipse: Ellipse
    ps_segment: PsSegment
    conf_field: ConfField
    corruption: Corruption
    seed: int

    def to_dict(self) -> dict:
        e = self.fh_ellipse
        return {
            "extent": [self.height, self.width],
            "fh_ellipse": {"cx": e.cx, "cy": e.cy, "a": e.a, "b": e.b, "theta": e.theta},
            "ps_segment": {
                "p_sup": list(self.ps_segment.p_sup),
                "p_inf": list(self.ps_segment.p_inf),
                "half_width": self.ps_segment.half_width,
            },
            "conf_field": self.conf_field.to_dict(),
            "corruption": self.corruption.to_dict(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        e = d["fh_ellipse"]
        s = d["ps_segment"]
        return cls(
            height=d["extent"][0],
            width=d["extent"][1],
            fh_ellipse=Ellipse(cx=e["cx"], cy=e["cy"], a=e["a"], b=e["b"], theta=e["theta"]),
            ps_segment=PsSegment(
                p_sup=tuple(s["p_sup"]), p_inf=tuple(s["p_inf"]), half_width=s["half_width"]
            ),
            conf_field=ConfField.from_dict(d["conf_field"]),
            corruption=Corruption.from_dict(d["corruption"]),
            seed=d["seed"],
        )


@dataclass(frozen=True)
class PhantomCase:
    """Rasterized phantom plus its analytic ground truth.

    ``mask`` is always the clean rasterization; corruption only touches
    the logits.
    """

    spec: PhantomSpec
    mask: LabelMask
    conf: ConfMap
    logits: LogitMap
    gt_aop_deg: float
    gt_tangent: tuple
    rng_id: str = RNG_ID


# ---------------------------------------------------------------------------
# validation and rasterization
# ---------------------------------------------------------------------------


def validate_spec(spec: PhantomSpec) -> None:
    """Check the continuous scene: in bounds, disjoint, p_inf exterior."""
    if spec.height < 16 or spec.width < 16:
        raise InvalidSpec(f"extent must be at least 16x16, got {spec.height}x{spec.width}")
    e = spec.fh_ellipse
    ex = math.hypot(e.a * math.cos(e.theta), e.b * math.sin(e.theta))
    ey = math.hypot(e.a * math.sin(e.theta), e.b * math.cos(e.theta))
    if (
        e.cx - ex < _EDGE_MARGIN
        or e.cx + ex > spec.width - _EDGE_MARGIN
        or e.cy - ey < _EDGE_MARGIN
        or e.cy + ey > spec.height - _EDGE_MARGIN
    ):
        raise InvalidSpec("ellipse leaves the image margin")
    seg = spec.ps_segment
    pts = np.array([seg.p_sup, seg.p_inf])
    reach = seg.half_width
    if (
        pts[:, 0].min() - reach < _EDGE_MARGIN
        or pts[:, 0].max() + reach > spec.width - _EDGE_MARGIN
        or pts[:, 1].min() - reach < _EDGE_MARGIN
        or pts[:, 1].max() + reach > spec.height - _EDGE_MARGIN
    ):
        raise InvalidSpec("segment leaves the image margin")
    if e.implicit(pts).min() <= 0.0:
        raise InvalidSpec("segment endpoints must be strictly outside the ellipse")
    # dense boundary sampling: for these sizes adjacent samples are a
    # fraction of a pixel apart, so the clearance absorbs the chord error
    boundary = e.point_at(np.linspace(0.0, 2.0 * math.pi, 2048, endpoint=False))
    if _segment_distance(boundary, seg.p_sup, seg.p_inf).min() <= seg.half_width + _CLEARANCE:
        raise InvalidSpec("segment envelope comes too close to the ellipse")


def _segment_distance(points: np.ndarray, a, b) -> np.ndarray:
    """Distance from each point to the segment [a, b]."""
    a = np.asarray(a, dtype=np.float64)
    d = np.asarray(b, dtype=np.float64) - a
    t = np.clip((points - a) @ d / (d @ d), 0.0, 1.0)
    closest = a + t[:, None] * d
    return np.hypot(*(points - closest).T)


def _rasterize(spec: PhantomSpec) -> LabelMask:
    xs = np.arange(spec.width) + 0.5
    ys = np.arange(spec.height) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    centers = np.stack([gx.ravel(), gy.ravel()], axis=1)

    labels = np.full(spec.height * spec.width, CLASS_BACKGROUND, dtype=np.uint8)
    labels[spec.fh_ellipse.implicit(centers) <= 0.0] = CLASS_FH

    seg = spec.ps_segment
    sup = np.asarray(seg.p_sup)
    axis = np.asarray(seg.p_inf) - sup
    length = float(np.linalg.norm(axis))
    axis = axis / length
    rel = centers - sup
    along = rel @ axis
    lateral = rel @ np.array([-axis[1], axis[0]])
    # chamfered caps: within half a pixel of an endpoint only the on-axis
    # pixel survives, so the strip's extreme pixel is the endpoint itself
    cap = 0.49 + 2.0 * np.maximum(np.minimum(along, length - along), 0.0)
    eps = 1e-9 * max(length, 1.0)  # endpoint pixels sit exactly on the cap plane
    in_ps = (
        (along >= -eps)
        & (along <= length + eps)
        & (np.abs(lateral) <= np.minimum(seg.half_width, cap))
    )
    labels[in_ps] = CLASS_PS
    return LabelMask(labels.reshape(spec.height, spec.width))


def _conf_values(spec: PhantomSpec) -> ConfMap:
    f = spec.conf_field
    if f.kind == "uniform":
        values = np.full((spec.height, spec.width), f.value)
    else:
        xs = np.arange(spec.width) + 0.5
        ys = np.arange(spec.height) + 0.5
        gx, gy = np.meshgrid(xs, ys)
        d = np.hypot(gx - f.center[0], gy - f.center[1])
        corners = np.array(
            [[0.0, 0.0], [spec.width, 0.0], [0.0, spec.height], [spec.width, spec.height]]
        )
        dmax = np.hypot(*(corners - f.center).T).max()
        values = f.v_max - (f.v_max - f.v_min) * (d / dmax)
    # round through binary32 so in-memory cases match their files exactly
    return ConfMap(values.astype(np.float32).astype(np.float64))


def _clean_logits(mask: LabelMask) -> LogitMap:
    z = np.zeros((3, mask.height, mask.width))
    for cid in (CLASS_BACKGROUND, CLASS_PS, CLASS_FH):
        z[cid][mask.labels == cid] = CLEAN_MARGIN
    return LogitMap(z)


def _analytic_gt(spec: PhantomSpec) -> tuple[float, tuple]:
    seg = spec.ps_segment
    axis = PsAxis(p_sup=tuple(seg.p_sup), p_inf=tuple(seg.p_inf))
    candidates = tangent_points(spec.fh_ellipse, axis.p_inf)
    p4 = select_tangent(spec.fh_ellipse, axis, candidates)
    p1, p3 = axis.p_sup, axis.p_inf
    gt = aop_from_sides(
        math.hypot(p1[0] - p3[0], p1[1] - p3[1]),
        math.hypot(p4[0] - p3[0], p4[1] - p3[1]),
        math.hypot(p4[0] - p1[0], p4[1] - p1[1]),
    )
    return gt, p4


def generate(spec: PhantomSpec) -> PhantomCase:
    """Rasterize a spec and attach its analytic ground truth.

    The corruption recorded in the spec is applied to the logits (with
    randomness derived from spec.seed), so regenerating from a stored
    spec reproduces the case bit for bit.
    """
    validate_spec(spec)
    mask = _rasterize(spec)
    if not (mask.labels == CLASS_PS).any() or not (mask.labels == CLASS_FH).any():
        raise InvalidSpec("rasterization produced an empty structure")
    conf = _conf_values(spec)
    logits = _clean_logits(mask)
    gt, p4 = _analytic_gt(spec)
    case = PhantomCase(
        spec=spec, mask=mask, conf=conf, logits=logits, gt_aop_deg=gt, gt_tangent=p4
    )
    if spec.corruption.kind != "none":
        case = corrupt(case, spec.corruption, spec.seed)
    return case


# ---------------------------------------------------------------------------
# corruption
# ---------------------------------------------------------------------------


def corrupt(case: PhantomCase, corruption: Corruption, seed: int) -> PhantomCase:
    """Corrupted copy of a case; mask, conf and ground truth are untouched."""
    z = np.array(case.logits.values)
    if corruption.kind == "none":
        pass
    elif corruption.kind == "logit_noise":
        rng = _rng(seed, 1)  # stream 1 is reserved for corruption noise
        z += rng.normal(0.0, corruption.sigma, size=z.shape)
    elif corruption.kind == "logit_bias":
        z[corruption.class_id] += corruption.delta
    elif corruption.kind == "boundary_erosion":
        for _ in range(corruption.iterations):
            labels = np.argmax(z, axis=0)
            region = labels != CLASS_BACKGROUND
            padded = np.zeros((z.shape[1] + 2, z.shape[2] + 2), dtype=bool)
            padded[1:-1, 1:-1] = region
            interior = (
                padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
            )
            ring = region & ~interior
            if not ring.any():
                break
            z[:, ring] = 0.0
            z[CLASS_BACKGROUND, ring] = CLEAN_MARGIN
    z = z.astype(np.float32).astype(np.float64)
    return replace(
        case,
        spec=replace(case.spec, corruption=corruption),
        logits=LogitMap(z),
    )


# ---------------------------------------------------------------------------
# seeded suites
# ---------------------------------------------------------------------------


def suite(
    n: int, base_seed: int, corruption: Corruption = Corruption(kind="none")
) -> list[PhantomCase]:
    """Generate ``n`` valid phantoms with broad, seeded geometry.

    Ground-truth angles span [70, 160] degrees, semi-axes stay within
    [15, 60] px and segment lengths within [30, 80] px on a 256x256
    grid.  Draws violating the scene validity rules are rejected and
    redrawn, so the suite depends only on (n, base_seed, corruption).
    """
    if n < 1:
        raise InvalidInput(f"suite size must be >= 1, got {n}")
    rng = _rng(base_seed, 0)
    cases = []
    for i in range(n):
        spec = _draw_spec(rng, base_seed, i, corruption)
        cases.append(generate(spec))
    return cases


def _snap(p: np.ndarray) -> tuple:
    """Snap a point to the nearest pixel center."""
    return (math.floor(p[0]) + 0.5, math.floor(p[1]) + 0.5)


def _draw_spec(
    rng: np.random.Generator, base_seed: int, index: int, corruption: Corruption
) -> PhantomSpec:
    height = width = 256
    kind_draw = rng.uniform()
    # thick: both axes >= 40 px; low: targets below 100 degrees
    kind = "thick" if kind_draw < 0.22 else ("low" if kind_draw < 0.52 else "far")
    for _ in range(800):
        alpha = rng.uniform(0.0, 2.0 * math.pi)
        if kind == "thick":
            # thick heads sit far out so the tangent ray is long enough to
            # absorb the sub-pixel inward bias of the boundary-pixel fit
            target = rng.uniform(102.0, 159.7)
            a = rng.uniform(47.0, 58.0)
            b = a * rng.uniform(0.86, 0.92)
            theta = rng.uniform(0.0, math.pi)
            dist = math.hypot(rng.uniform(160.0, 176.0), a)
            length = rng.uniform(48.0, 78.0)
            half_width = rng.uniform(0.9, 1.4)
        elif kind == "low":
            # low angles need a small head close to a long segment, slim
            # side facing it, or the axis orientation rule cannot hold
            target = rng.uniform(68.8, 99.9)
            a = rng.uniform(20.5, 23.0)
            b = rng.uniform(15.2, 0.75 * a)
            dist = a * rng.uniform(2.55, 2.85)
            theta = (alpha + 0.5 * math.pi + rng.uniform(-0.25, 0.25)) % math.pi
            length = rng.uniform(62.0, 79.5)
            half_width = rng.uniform(0.8, 1.1)
        else:
            target = rng.uniform(100.0, 159.7)
            a = rng.uniform(28.0, 39.5)
            b = a * rng.uniform(0.62, 0.88)
            dist = a + rng.uniform(55.0, 95.0) + 0.4 * a
            theta = rng.uniform(0.0, math.pi)
            length = rng.uniform(48.0, 78.0)
            half_width = rng.uniform(0.9, 1.4)
        # pick p_inf so both head and vertex land inside the frame margins
        ex = math.hypot(a * math.cos(theta), b * math.sin(theta))
        ey = math.hypot(a * math.sin(theta), b * math.cos(theta))
        off = (dist * math.cos(alpha), dist * math.sin(alpha))
        lo_x = max(60.0, 6.0 + ex - off[0])
        hi_x = min(196.0, 250.0 - ex - off[0])
        lo_y = max(60.0, 6.0 + ey - off[1])
        hi_y = min(196.0, 250.0 - ey - off[1])
        if lo_x >= hi_x or lo_y >= hi_y:
            continue
        p_inf = _snap(np.array([rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)]))
        center = (
            p_inf[0] + dist * math.cos(alpha),
            p_inf[1] + dist * math.sin(alpha),
        )
        # aim with the exact tangent fan: the max-angle rule selects the
        # tangent on the side opposite the segment, so the angle comes out
        # as (segment offset from the sight line) + (that side's half-angle)
        fan = tangent_points(
            Ellipse(cx=center[0], cy=center[1], a=a, b=b, theta=theta), p_inf
        )
        sight = math.atan2(center[1] - p_inf[1], center[0] - p_inf[0])
        half_angles = {}
        for tp in fan:
            rel = math.remainder(
                math.atan2(tp[1] - p_inf[1], tp[0] - p_inf[0]) - sight, math.tau
            )
            half_angles[1.0 if rel >= 0.0 else -1.0] = abs(rel)
        if len(half_angles) != 2:
            continue
        side = 1.0 if rng.uniform() < 0.5 else -1.0
        psi = sight + side * (math.radians(target) - half_angles[-side])
        p_sup = _snap(
            np.array([p_inf[0] + length * math.cos(psi), p_inf[1] + length * math.sin(psi)])
        )
        seg = PsSegment(p_sup=p_sup, p_inf=p_inf, half_width=half_width)
        if not 30.0 <= seg.length <= 80.0:
            continue
        # the measurement orients the axis toward the head, so the labeled
        # inferior endpoint must be the strictly closer one, with slack
        d_inf = math.hypot(p_inf[0] - center[0], p_inf[1] - center[1])
        d_sup = math.hypot(p_sup[0] - center[0], p_sup[1] - center[1])
        if d_inf > d_sup - 4.0:
            continue

        if rng.uniform() < 0.2:
            conf_field = ConfField(kind="uniform", value=round(rng.uniform(0.6, 0.9), 6))
        else:
            mid = (
                0.5 * (center[0] + 0.5 * (p_sup[0] + p_inf[0])),
                0.5 * (center[1] + 0.5 * (p_sup[1] + p_inf[1])),
            )
            conf_field = ConfField(
                kind="radial_falloff",
                center=mid,
                v_max=round(rng.uniform(0.82, 0.95), 6),
                v_min=round(rng.uniform(0.25, 0.4), 6),
            )

        spec = PhantomSpec(
            height=height,
            width=width,
            fh_ellipse=Ellipse(cx=center[0], cy=center[1], a=a, b=b, theta=theta),
            ps_segment=seg,
            conf_field=conf_field,
            corruption=corruption,
            seed=(base_seed * 1_000_003 + index) & ((1 << 63) - 1),
        )
        try:
            validate_spec(spec)
        except InvalidSpec:
            continue
        gt, _ = _analytic_gt(spec)
        if not 70.0 <= gt <= 160.0:
            continue
        mask = _rasterize(spec)
        if not _single_component(mask, CLASS_PS) or not _single_component(mask, CLASS_FH):
            continue
        return spec
    raise InvalidSpec(f"could not draw a valid phantom for case {index}")


def _single_component(mask: LabelMask, class_id: int) -> bool:
    total = int((mask.labels == class_id).sum())
    if total == 0:
        return False
    return largest_component(mask, class_id).pixel_count == total


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_case(case: PhantomCase, directory: str | Path) -> None:
    """Write mask.pgm, conf.f32r, logits.f32r and meta.json."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "mask.pgm").write_bytes(write_mask_pgm(case.mask))
    (d / "conf.f32r").write_bytes(write_f32r(case.conf))
    (d / "logits.f32r").write_bytes(write_f32r(case.logits))
    meta = {
        "format": META_FORMAT,
        "rng": case.rng_id,
        "spacing_mm": 1.0,
        "gt_aop_deg": case.gt_aop_deg,
        "gt_tangent": list(case.gt_tangent),
        **case.spec.to_dict(),
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_case(directory: str | Path) -> PhantomCase:
    """Read a case directory back into a PhantomCase."""
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    if meta.get("format") != META_FORMAT:
        raise InvalidInput(f"unexpected meta format {meta.get('format')!r} in {d}")
    spec = PhantomSpec.from_dict(meta)
    mask = read_mask_pgm((d / "mask.pgm").read_bytes())
    conf = read_f32r((d / "conf.f32r").read_bytes())
    logits = read_f32r((d / "logits.f32r").read_bytes())
    if not isinstance(conf, ConfMap) or not isinstance(logits, LogitMap):
        raise InvalidInput(f"case files in {d} have unexpected channel counts")
    return PhantomCase(
        spec=spec,
        mask=mask,
        conf=conf,
        logits=logits,
        gt_aop_deg=meta["gt_aop_deg"],
        gt_tangent=tuple(meta["gt_tangent"]),
        rng_id=meta["rng"],
    )
