"""Connected components and boundary extraction on label masks.

Connectivity is 8-neighbor for components and 4-neighbor for the
boundary test.  Boundary pixels are converted to geometry-space points
at pixel centers: x = col + 0.5, y = row + 0.5, y growing downward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InvalidInput, MissingStructure
from .raster import ConfMap, LabelMask

_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class Component:
    """One connected component: class id plus its (row, col) pixels.

    Pixels are stored row-major sorted, one pixel per row of the array.
    """

    class_id: int
    pixels: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.pixels, dtype=np.int64)
        if a.ndim != 2 or a.shape[1] != 2 or a.shape[0] == 0:
            raise InvalidInput(f"component pixels must be a nonempty (N, 2) array, got {a.shape}")
        a.setflags(write=False)
        object.__setattr__(self, "pixels", a)

    @property
    def pixel_count(self) -> int:
        return self.pixels.shape[0]

    def centers(self) -> np.ndarray:
        """Pixel-center coordinates, shape (N, 2), columns (x, y)."""
        return np.stack(
            [self.pixels[:, 1] + 0.5, self.pixels[:, 0] + 0.5], axis=1
        ).astype(np.float64)


@dataclass(frozen=True)
class WeightedPoints:
    """Points (x, y) with confidence weights strictly inside (0, 1)."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64)
        w = np.asarray(self.weights, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 2 or p.shape[0] == 0:
            raise InvalidInput(f"points must be a nonempty (N, 2) array, got {p.shape}")
        if w.shape != (p.shape[0],):
            raise InvalidInput("weights must match points one to one")
        if not np.isfinite(p).all() or not np.isfinite(w).all():
            raise InvalidInput("points and weights must be finite")
        if w.min() <= 0.0 or w.max() >= 1.0:
            raise InvalidInput("weights must lie strictly inside (0, 1)")
        p.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return self.points.shape[0]


def largest_component(mask: LabelMask, class_id: int) -> Component:
    """Largest 8-connected component of ``class_id`` pixels.

    Size ties resolve to the component containing the smallest
    (row, col) pixel in lexicographic order, so the result is a pure
    function of the mask.
    """
    if class_id not in (0, 1, 2):
        raise InvalidInput(f"class_id must be 0, 1 or 2, got {class_id}")
    binary = mask.labels == class_id
    if not binary.any():
        raise MissingStructure(class_id)
    labeled, n = ndimage.label(binary, structure=_EIGHT)
    flat = labeled.ravel()
    counts = np.bincount(flat, minlength=n + 1)
    counts[0] = 0
    best = counts.max()
    candidates = np.flatnonzero(counts == best)
    if len(candidates) > 1:
        # first row-major occurrence of each label is its seed pixel
        values, first = np.unique(flat, return_index=True)
        seed_of = dict(zip(values.tolist(), first.tolist()))
        winner = min(candidates, key=lambda lbl: seed_of[lbl])
    else:
        winner = candidates[0]
    rows, cols = np.nonzero(labeled == winner)
    return Component(class_id=class_id, pixels=np.stack([rows, cols], axis=1))


def boundary_points(comp: Component, mask: LabelMask) -> np.ndarray:
    """Boundary pixels of a component, as (row, col) pairs in row-major order.

    A component pixel is boundary when at least one 4-neighbor falls
    outside the image or is not of the component's class.  Neighboring
    pixels of the same class always count as interior support, even if
    they belong to a different component.
    """
    in_class = np.zeros((mask.height + 2, mask.width + 2), dtype=bool)
    in_class[1:-1, 1:-1] = mask.labels == comp.class_id
    r = comp.pixels[:, 0] + 1
    c = comp.pixels[:, 1] + 1
    interior = (
        in_class[r - 1, c] & in_class[r + 1, c] & in_class[r, c - 1] & in_class[r, c + 1]
    )
    return comp.pixels[~interior]


def weighted_boundary(boundary: np.ndarray, conf: ConfMap) -> WeightedPoints:
    """Attach confidence weights to boundary pixels, at pixel centers."""
    b = np.asarray(boundary, dtype=np.int64)
    if b.ndim != 2 or b.shape[1] != 2 or b.shape[0] == 0:
        raise InvalidInput(f"boundary must be a nonempty (M, 2) array, got {b.shape}")
    if b.min() < 0 or b[:, 0].max() >= conf.height or b[:, 1].max() >= conf.width:
        raise InvalidInput("boundary pixel outside the confidence map extent")
    points = np.stack([b[:, 1] + 0.5, b[:, 0] + 0.5], axis=1).astype(np.float64)
    weights = conf.values[b[:, 0], b[:, 1]]
    return WeightedPoints(points=points, weights=weights)
