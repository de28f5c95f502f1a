"""Overlap and surface-distance metrics between label masks.

Regions are selected by a set of class ids, so the merged PS+FH region
is just class_set={1, 2}.  Surface distances are symmetric: distances
from every predicted boundary pixel to the nearest reference boundary
pixel, concatenated with the reverse direction.  Boundary pixels follow
the same 4-neighbor rule as the measurement pipeline, and distances are
physical (millimetres), so anisotropic spacing is respected.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyStructure, InvalidInput
from .raster import LabelMask, PixelSpacing, ensure_same_extent

#: per-case metric columns, in report order
METRIC_FIELDS = (
    "dice_ps",
    "dice_fh",
    "dice_psfh",
    "asd_ps",
    "asd_fh",
    "asd_psfh",
    "hd100_ps",
    "hd100_fh",
    "hd100_psfh",
    "aop_abs_err",
)

_STRUCTURES = (("ps", frozenset({1})), ("fh", frozenset({2})), ("psfh", frozenset({1, 2})))


def _region(mask: LabelMask, class_set: Iterable[int]) -> np.ndarray:
    ids = frozenset(class_set)
    if not ids or not ids.issubset({0, 1, 2}):
        raise InvalidInput(f"class_set must be a nonempty subset of {{0, 1, 2}}, got {set(class_set)}")
    return np.isin(mask.labels, sorted(ids))


def dice(pred: LabelMask, gt: LabelMask, class_set: Iterable[int]) -> float:
    """Dice overlap 2|A&B| / (|A|+|B|); two empty regions count as 1.0."""
    ensure_same_extent(pred, gt)
    a = _region(pred, class_set)
    b = _region(gt, class_set)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def _region_boundary(region: np.ndarray) -> np.ndarray:
    """(N, 2) boundary pixels of a boolean region, 4-neighbor rule."""
    padded = np.zeros((region.shape[0] + 2, region.shape[1] + 2), dtype=bool)
    padded[1:-1, 1:-1] = region
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    rows, cols = np.nonzero(region & ~interior)
    return np.stack([rows, cols], axis=1)


def surface_distances(
    pred: LabelMask,
    gt: LabelMask,
    class_set: Iterable[int],
    spacing: PixelSpacing = PixelSpacing(1.0, 1.0),
) -> np.ndarray:
    """Symmetric boundary-to-boundary distances in millimetres.

    Order is deterministic: all pred-to-gt distances (row-major over the
    pred boundary), then gt-to-pred.  Raises EmptyStructure when either
    region is empty.
    """
    ensure_same_extent(pred, gt)
    a = _region(pred, class_set)
    b = _region(gt, class_set)
    if not a.any() or not b.any():
        raise EmptyStructure(f"empty region for class_set {sorted(set(class_set))}")
    scale = np.array([spacing.row_mm, spacing.col_mm])
    pa = _region_boundary(a) * scale
    pb = _region_boundary(b) * scale
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    return np.concatenate([d_ab, d_ba])


def asd(distances: np.ndarray) -> float:
    """Average symmetric surface distance."""
    d = np.asarray(distances, dtype=np.float64)
    if d.ndim != 1 or d.size == 0:
        raise InvalidInput("distances must be a nonempty 1-d array")
    return float(d.mean())


def hd_percentile(distances: np.ndarray, q: float) -> float:
    """Hausdorff percentile by rank: value at rank ceil(q/100 * n).

    q must lie in (0, 100]; q = 100 returns the maximum.
    """
    d = np.asarray(distances, dtype=np.float64)
    if d.ndim != 1 or d.size == 0:
        raise InvalidInput("distances must be a nonempty 1-d array")
    if not (0.0 < q <= 100.0):
        raise InvalidInput(f"percentile must lie in (0, 100], got {q}")
    rank = math.ceil(q / 100.0 * d.size)
    return float(np.sort(d)[rank - 1])


def aop_abs_error(pred_deg: float, gt_deg: float) -> float:
    """Absolute angle difference in degrees."""
    for name, v in (("pred_deg", pred_deg), ("gt_deg", gt_deg)):
        if not math.isfinite(v):
            raise InvalidInput(f"{name} must be finite, got {v}")
    return abs(pred_deg - gt_deg)


def evaluate_pair(
    pred: LabelMask, gt: LabelMask, spacing: PixelSpacing = PixelSpacing(1.0, 1.0)
) -> dict:
    """All per-structure metrics for one mask pair.

    Dice is always defined; ASD and HD100 are None for structures empty
    on either side.  The AoP error column is left for callers that have
    confidence maps to measure with.
    """
    row: dict = {}
    for name, ids in _STRUCTURES:
        row[f"dice_{name}"] = dice(pred, gt, ids)
        try:
            d = surface_distances(pred, gt, ids, spacing)
        except EmptyStructure:
            row[f"asd_{name}"] = None
            row[f"hd100_{name}"] = None
        else:
            row[f"asd_{name}"] = asd(d)
            row[f"hd100_{name}"] = hd_percentile(d, 100.0)
    row["aop_abs_err"] = None
    return row


@dataclass(frozen=True)
class MetricsReport:
    """Per-case metric rows plus aggregate statistics."""

    case_ids: tuple
    per_case: tuple
    aggregates: dict
    exclusions: dict

    def to_json(self) -> str:
        payload = {
            "cases": [
                {"case_id": cid, **{f: row.get(f) for f in METRIC_FIELDS}}
                for cid, row in zip(self.case_ids, self.per_case)
            ],
            "aggregates": self.aggregates,
            "exclusions": self.exclusions,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("case_id",) + METRIC_FIELDS)
        for cid, row in zip(self.case_ids, self.per_case):
            writer.writerow(
                [cid] + ["" if row.get(f) is None else repr(row[f]) for f in METRIC_FIELDS]
            )
        for stat in ("mean", "std"):
            writer.writerow(
                [stat]
                + [
                    repr(self.aggregates[f][stat]) if f in self.aggregates else ""
                    for f in METRIC_FIELDS
                ]
            )
        return buf.getvalue()


def aggregate(case_ids: Sequence[str], per_case: Sequence[Mapping]) -> MetricsReport:
    """Mean and population standard deviation per metric field.

    Cases with a missing (None) value are excluded from that field's
    statistics and counted in ``exclusions``; a field with no valid
    cases is left out of the aggregates entirely.
    """
    if len(case_ids) != len(per_case):
        raise InvalidInput("case_ids and per_case must have equal length")
    aggregates: dict = {}
    exclusions: dict = {}
    for f in METRIC_FIELDS:
        values = [row.get(f) for row in per_case]
        valid = np.array([v for v in values if v is not None], dtype=np.float64)
        excluded = len(values) - valid.size
        if excluded:
            exclusions[f] = excluded
        if valid.size:
            aggregates[f] = {
                "mean": float(valid.mean()),
                "std": float(valid.std()),  # population std, ddof = 0
                "n": int(valid.size),
            }
    return MetricsReport(
        case_ids=tuple(case_ids),
        per_case=tuple(dict(r) for r in per_case),
        aggregates=aggregates,
        exclusions=exclusions,
    )
