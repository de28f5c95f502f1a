"""Raster types and file formats.

Labels, logits, probabilities and confidence share one pixel grid:
row-major arrays, class channel first where present.  Class ids are
0 = background, 1 = pubic symphysis (PS), 2 = fetal head (FH).

Two byte-level formats are supported:

* binary PGM (P5, maxval 255) for label masks, and
* ``F32R``, a tiny raw-float format: an ASCII header line
  ``F32R <C> <H> <W>\\n`` followed by exactly C*H*W little-endian
  IEEE-754 binary32 values, channel-major then row-major.

Files store binary32; all computation is binary64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InvalidInput

CLASS_BACKGROUND = 0
CLASS_PS = 1
CLASS_FH = 2
NUM_CLASSES = 3

#: confidence values are clamped into [CONF_EPS, 1 - CONF_EPS] on load
CONF_EPS = 1e-6

_PGM_MAXVAL = 255


# ---------------------------------------------------------------------------
# raster types
# ---------------------------------------------------------------------------


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class LabelMask:
    """Per-pixel class labels, shape (H, W), uint8 values in {0, 1, 2}."""

    labels: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.labels)
        if a.ndim != 2 or a.size == 0:
            raise InvalidInput(f"label mask must be a nonempty 2-d array, got shape {a.shape}")
        if a.dtype != np.uint8:
            if not np.issubdtype(a.dtype, np.integer):
                raise InvalidInput(f"label mask must be integer, got dtype {a.dtype}")
            a = a.astype(np.uint8)
        if a.max(initial=0) >= NUM_CLASSES:
            raise InvalidInput("label mask contains values outside {0, 1, 2}")
        object.__setattr__(self, "labels", _freeze(np.ascontiguousarray(a)))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclass(frozen=True)
class LogitMap:
    """Raw class scores, shape (3, H, W), finite float64."""

    values: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.values, dtype=np.float64)
        if a.ndim != 3 or a.shape[0] != NUM_CLASSES or a.shape[1] == 0 or a.shape[2] == 0:
            raise InvalidInput(f"logit map must have shape (3, H, W), got {a.shape}")
        if not np.isfinite(a).all():
            raise InvalidInput("logit map contains non-finite values")
        object.__setattr__(self, "values", _freeze(np.ascontiguousarray(a)))

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class ProbMap:
    """Per-pixel class distribution, shape (3, H, W); each pixel sums to 1."""

    values: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.values, dtype=np.float64)
        if a.ndim != 3 or a.shape[0] != NUM_CLASSES or a.shape[1] == 0 or a.shape[2] == 0:
            raise InvalidInput(f"probability map must have shape (3, H, W), got {a.shape}")
        if a.min(initial=0.0) < 0.0 or a.max(initial=0.0) > 1.0:
            raise InvalidInput("probabilities must lie in [0, 1]")
        if not np.allclose(a.sum(axis=0), 1.0, rtol=0.0, atol=1e-9):
            raise InvalidInput("per-pixel probabilities must sum to 1 within 1e-9")
        object.__setattr__(self, "values", _freeze(np.ascontiguousarray(a)))

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class ConfMap:
    """Per-pixel confidence S, shape (H, W), strictly inside (0, 1)."""

    values: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.values, dtype=np.float64)
        if a.ndim != 2 or a.size == 0:
            raise InvalidInput(f"confidence map must be a nonempty 2-d array, got shape {a.shape}")
        if not np.isfinite(a).all():
            raise InvalidInput("confidence map contains non-finite values")
        if a.min() <= 0.0 or a.max() >= 1.0:
            raise InvalidInput("confidence values must lie strictly inside (0, 1)")
        object.__setattr__(self, "values", _freeze(np.ascontiguousarray(a)))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class PixelSpacing:
    """Physical pixel size in millimetres, by axis."""

    row_mm: float
    col_mm: float

    def __post_init__(self):
        for v in (self.row_mm, self.col_mm):
            if not (np.isfinite(v) and v > 0.0):
                raise InvalidInput(f"pixel spacing must be positive and finite, got {v}")

    @property
    def is_isotropic(self) -> bool:
        return self.row_mm == self.col_mm


def ensure_same_extent(*rasters) -> tuple[int, int]:
    """Check that all rasters share one (H, W) extent and return it."""
    extents = {(r.height, r.width) for r in rasters}
    if len(extents) != 1:
        raise InvalidInput(f"rasters disagree on extent: {sorted(extents)}")
    return next(iter(extents))


# ---------------------------------------------------------------------------
# softmax / argmax
# ---------------------------------------------------------------------------


def softmax(logits: LogitMap) -> ProbMap:
    """Per-pixel stabilized softmax over the class channel."""
    z = logits.values
    shifted = z - z.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return ProbMap(e / e.sum(axis=0, keepdims=True))


def argmax_labels(logits: LogitMap) -> LabelMask:
    """Per-pixel argmax over classes; ties resolve to the lowest class id."""
    return LabelMask(np.argmax(logits.values, axis=0).astype(np.uint8))


# ---------------------------------------------------------------------------
# PGM (P5)
# ---------------------------------------------------------------------------


def write_mask_pgm(mask: LabelMask) -> bytes:
    """Serialize a label mask as binary PGM with maxval 255."""
    header = f"P5\n{mask.width} {mask.height}\n{_PGM_MAXVAL}\n"
    return header.encode("ascii") + mask.labels.tobytes()


class _Scanner:
    """Byte scanner over a PNM header: whitespace and '#' comments skipped."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def skip_separators(self) -> None:
        d = self.data
        while self.pos < len(d):
            b = d[self.pos]
            if b in b" \t\r\n\x0b\x0c":
                self.pos += 1
            elif b == ord("#"):
                while self.pos < len(d) and d[self.pos] not in b"\r\n":
                    self.pos += 1
            else:
                return

    def token(self) -> tuple[bytes, int]:
        self.skip_separators()
        start = self.pos
        d = self.data
        while self.pos < len(d) and d[self.pos] not in b" \t\r\n\x0b\x0c#":
            self.pos += 1
        if self.pos == start:
            raise FormatError("unexpected end of header", offset=start)
        return d[start : self.pos], start

    def int_token(self, what: str) -> tuple[int, int]:
        tok, off = self.token()
        if not tok.isdigit():
            raise FormatError(f"malformed {what} {tok!r}", offset=off)
        return int(tok), off


def read_mask_pgm(data: bytes) -> LabelMask:
    """Parse a binary PGM label mask.

    Accepts standard P5 streams (comments and arbitrary header whitespace
    allowed) but requires maxval 255 and pixel values in {0, 1, 2}.
    Violations raise FormatError carrying the byte offset of the problem.
    """
    sc = _Scanner(data)
    magic, off = sc.token()
    if magic != b"P5":
        raise FormatError(f"bad magic {magic!r}, expected P5", offset=off)
    width, off = sc.int_token("width")
    if width == 0:
        raise FormatError("width must be positive", offset=off)
    height, off = sc.int_token("height")
    if height == 0:
        raise FormatError("height must be positive", offset=off)
    maxval, off = sc.int_token("maxval")
    if maxval != _PGM_MAXVAL:
        raise FormatError(f"maxval must be {_PGM_MAXVAL}, got {maxval}", offset=off)
    # exactly one separator byte between maxval and the raster
    if sc.pos >= len(data) or data[sc.pos] not in b" \t\r\n\x0b\x0c":
        raise FormatError("missing separator after maxval", offset=sc.pos)
    start = sc.pos + 1
    expected = width * height
    payload = data[start:]
    if len(payload) < expected:
        raise FormatError(
            f"truncated raster: expected {expected} bytes, got {len(payload)}",
            offset=len(data),
        )
    if len(payload) > expected:
        raise FormatError("trailing bytes after raster", offset=start + expected)
    a = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    bad = a >= NUM_CLASSES
    if bad.any():
        first = int(np.flatnonzero(bad.ravel())[0])
        raise FormatError(
            f"pixel value {int(a.ravel()[first])} outside {{0, 1, 2}}",
            offset=start + first,
        )
    return LabelMask(a.copy())


# ---------------------------------------------------------------------------
# F32R
# ---------------------------------------------------------------------------


def write_f32r(raster: LogitMap | ConfMap) -> bytes:
    """Serialize a logit map (C=3) or confidence map (C=1) as F32R bytes."""
    if isinstance(raster, LogitMap):
        channels, a = NUM_CLASSES, raster.values
    elif isinstance(raster, ConfMap):
        channels, a = 1, raster.values[np.newaxis]
    else:
        raise InvalidInput(f"cannot serialize {type(raster).__name__} as F32R")
    h, w = a.shape[1], a.shape[2]
    header = f"F32R {channels} {h} {w}\n".encode("ascii")
    return header + a.astype("<f4").tobytes()


def read_f32r(data: bytes) -> LogitMap | ConfMap:
    """Parse F32R bytes into a ConfMap (C=1) or LogitMap (C=3).

    Confidence values are clamped into [1e-6, 1 - 1e-6]; NaN anywhere in
    the payload is a FormatError, as are short or trailing bytes.
    """
    nl = data.find(b"\n")
    if nl < 0:
        raise FormatError("missing header line", offset=len(data))
    parts = data[:nl].split(b" ")
    if len(parts) != 4 or parts[0] != b"F32R":
        raise FormatError(f"bad header {data[:nl]!r}", offset=0)
    dims = []
    off = len(parts[0]) + 1
    for name, tok in zip(("channels", "height", "width"), parts[1:]):
        if not tok.isdigit() or int(tok) == 0:
            raise FormatError(f"malformed {name} {tok!r}", offset=off)
        dims.append(int(tok))
        off += len(tok) + 1
    channels, height, width = dims
    if channels not in (1, NUM_CLASSES):
        raise FormatError(f"channels must be 1 or {NUM_CLASSES}, got {channels}", offset=5)
    start = nl + 1
    expected = 4 * channels * height * width
    payload = data[start:]
    if len(payload) < expected:
        raise FormatError(
            f"truncated payload: expected {expected} bytes, got {len(payload)}",
            offset=len(data),
        )
    if len(payload) > expected:
        raise FormatError("trailing bytes after payload", offset=start + expected)
    a = np.frombuffer(payload, dtype="<f4").reshape(channels, height, width)
    nan = np.isnan(a)
    if nan.any():
        first = int(np.flatnonzero(nan.ravel())[0])
        raise FormatError("NaN in payload", offset=start + 4 * first)
    a64 = a.astype(np.float64)
    if channels == 1:
        return ConfMap(np.clip(a64[0], CONF_EPS, 1.0 - CONF_EPS))
    if not np.isfinite(a64).all():
        first = int(np.flatnonzero(~np.isfinite(a.ravel()))[0])
        raise FormatError("non-finite logit in payload", offset=start + 4 * first)
    return LogitMap(a64)
