"""SVG rendering of a measurement over its mask.

The viewBox matches the raster extent one unit per pixel, y growing
downward like the arrays, so geometry coordinates drop straight in.
The full render carries the two mask regions as filled paths, exactly
one ellipse outline, the two measurement segments, the angle arc with
its degree label, and a confidence caption.  When the measurement
fails, the masks are still rendered together with an error note.
"""

from __future__ import annotations

import math

from .errors import AopKitError
from .geometry import AopResult, compute_aop
from .raster import CLASS_FH, CLASS_PS, ConfMap, LabelMask, PixelSpacing

_FILLS = {CLASS_PS: "#e0913d", CLASS_FH: "#4f8fd0"}


def _region_path(mask: LabelMask, class_id: int) -> str:
    """Row run-length rectangles of one class, as a single path string."""
    runs = []
    labels = mask.labels
    for row in range(mask.height):
        line = labels[row] == class_id
        col = 0
        while col < mask.width:
            if line[col]:
                start = col
                while col < mask.width and line[col]:
                    col += 1
                runs.append(f"M{start} {row}h{col - start}v1h{start - col}z")
            else:
                col += 1
    return "".join(runs)


def _fmt(v: float) -> str:
    return f"{v:.3f}"


def _arc_path(result: AopResult, radius: float) -> tuple[str, tuple]:
    x3, y3 = result.p3
    a1 = math.atan2(result.p1[1] - y3, result.p1[0] - x3)
    a2 = math.atan2(result.p4[1] - y3, result.p4[0] - x3)
    delta = math.remainder(a2 - a1, 2.0 * math.pi)
    sweep = 1 if delta > 0 else 0
    sx, sy = x3 + radius * math.cos(a1), y3 + radius * math.sin(a1)
    ex, ey = x3 + radius * math.cos(a2), y3 + radius * math.sin(a2)
    mid = a1 + delta / 2.0
    label_at = (x3 + (radius + 9.0) * math.cos(mid), y3 + (radius + 9.0) * math.sin(mid))
    path = (
        f"M{_fmt(sx)} {_fmt(sy)}"
        f"A{_fmt(radius)} {_fmt(radius)} 0 0 {sweep} {_fmt(ex)} {_fmt(ey)}"
    )
    return path, label_at


def render_svg(
    mask: LabelMask,
    conf: ConfMap,
    spacing: PixelSpacing = PixelSpacing(1.0, 1.0),
) -> tuple[str, AopResult | None, AopKitError | None]:
    """Render the measurement; degrade to a mask-only image on failure.

    Returns (svg, result, error) where exactly one of result and error
    is set.
    """
    result: AopResult | None = None
    error: AopKitError | None = None
    try:
        result = compute_aop(mask, conf, spacing)
    except AopKitError as err:
        error = err

    h, w = mask.height, mask.width
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {w} {h}" '
        f'width="{4 * w}" height="{4 * h}">',
        f'<rect x="0" y="0" width="{w}" height="{h}" fill="#10151c"/>',
    ]
    for cid in (CLASS_FH, CLASS_PS):
        d = _region_path(mask, cid)
        if d:
            parts.append(f'<path d="{d}" fill="{_FILLS[cid]}" fill-opacity="0.55"/>')

    if result is not None:
        e = result.ellipse
        deg = math.degrees(e.theta)
        parts.append(
            f'<ellipse cx="{_fmt(e.cx)}" cy="{_fmt(e.cy)}" rx="{_fmt(e.a)}" ry="{_fmt(e.b)}" '
            f'transform="rotate({_fmt(deg)} {_fmt(e.cx)} {_fmt(e.cy)})" '
            f'fill="none" stroke="#d7e3f2" stroke-width="0.8"/>'
        )
        for a, b in ((result.p1, result.p3), (result.p3, result.p4)):
            parts.append(
                f'<line x1="{_fmt(a[0])}" y1="{_fmt(a[1])}" x2="{_fmt(b[0])}" y2="{_fmt(b[1])}" '
                f'stroke="#f2f5f9" stroke-width="1.1"/>'
            )
        radius = min(14.0, 0.45 * min(result.d13, result.d34))
        arc, label_at = _arc_path(result, radius)
        parts.append(f'<path d="{arc}" fill="none" stroke="#ffd166" stroke-width="1.1"/>')
        parts.append(
            f'<text x="{_fmt(label_at[0])}" y="{_fmt(label_at[1])}" fill="#ffd166" '
            f'font-family="sans-serif" font-size="9" text-anchor="middle">'
            f"{result.aop_deg:.1f}&#176;</text>"
        )
        caption = f"C_AoP = {result.c_aop:.3f}"
    else:
        caption = f"measurement failed: {type(error).__name__} at {error.stage}"
    parts.append(
        f'<text x="4" y="{h - 5}" fill="#d7e3f2" font-family="sans-serif" '
        f'font-size="8">{caption}</text>'
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n", result, error
