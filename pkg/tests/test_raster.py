import math

import numpy as np
import pytest

from aopkit.errors import FormatError, InvalidInput
from aopkit.raster import (
    CONF_EPS,
    ConfMap,
    LabelMask,
    LogitMap,
    PixelSpacing,
    ProbMap,
    argmax_labels,
    ensure_same_extent,
    read_f32r,
    read_mask_pgm,
    softmax,
    write_f32r,
    write_mask_pgm,
)


def one_pixel_logits(a, b, c):
    return LogitMap(np.array([[[a]], [[b]], [[c]]], dtype=np.float64))


# ---------------------------------------------------------------------------
# types
# ---------------------------------------------------------------------------


def test_label_mask_rejects_out_of_range():
    with pytest.raises(InvalidInput):
        LabelMask(np.array([[0, 3]], dtype=np.uint8))
    with pytest.raises(InvalidInput):
        LabelMask(np.zeros((0, 4), dtype=np.uint8))
    with pytest.raises(InvalidInput):
        LabelMask(np.zeros((2, 2), dtype=np.float64))


def test_label_mask_is_immutable():
    m = LabelMask(np.zeros((2, 2), dtype=np.uint8))
    with pytest.raises(ValueError):
        m.labels[0, 0] = 1


def test_logit_map_rejects_bad_shape_and_nonfinite():
    with pytest.raises(InvalidInput):
        LogitMap(np.zeros((2, 4, 4)))
    with pytest.raises(InvalidInput):
        LogitMap(np.full((3, 2, 2), np.inf))


def test_prob_map_requires_unit_sums():
    good = np.full((3, 2, 2), 1.0 / 3.0)
    ProbMap(good)
    bad = good.copy()
    bad[0, 0, 0] += 1e-6
    with pytest.raises(InvalidInput):
        ProbMap(bad)


def test_conf_map_requires_open_interval():
    ConfMap(np.full((2, 2), 0.5))
    with pytest.raises(InvalidInput):
        ConfMap(np.array([[0.0, 0.5], [0.5, 0.5]]))
    with pytest.raises(InvalidInput):
        ConfMap(np.array([[1.0, 0.5], [0.5, 0.5]]))


def test_pixel_spacing_positive():
    s = PixelSpacing(0.5, 0.5)
    assert s.is_isotropic
    assert not PixelSpacing(0.5, 0.6).is_isotropic
    with pytest.raises(InvalidInput):
        PixelSpacing(0.0, 1.0)
    with pytest.raises(InvalidInput):
        PixelSpacing(1.0, -1.0)


def test_ensure_same_extent():
    a = ConfMap(np.full((3, 4), 0.5))
    b = LabelMask(np.zeros((3, 4), dtype=np.uint8))
    assert ensure_same_extent(a, b) == (3, 4)
    c = ConfMap(np.full((4, 3), 0.5))
    with pytest.raises(InvalidInput):
        ensure_same_extent(a, c)


# ---------------------------------------------------------------------------
# softmax / argmax
# ---------------------------------------------------------------------------


def test_softmax_symmetric_pixel():
    p = softmax(one_pixel_logits(0.0, 0.0, 0.0)).values[:, 0, 0]
    assert np.allclose(p, [1.0 / 3.0] * 3, rtol=0.0, atol=1e-15)


def test_softmax_analytic_pixel():
    p = softmax(one_pixel_logits(math.log(2.0), 0.0, 0.0)).values[:, 0, 0]
    assert np.allclose(p, [0.5, 0.25, 0.25], rtol=0.0, atol=1e-15)


def test_softmax_large_logit_no_overflow():
    p = softmax(one_pixel_logits(1000.0, 0.0, 0.0)).values[:, 0, 0]
    assert np.isfinite(p).all()
    assert p[0] == pytest.approx(1.0, abs=1e-12)
    assert p[1] < 1e-300 and p[2] < 1e-300


def test_softmax_sums_to_one_up_to_1e4():
    rng = np.random.default_rng(0)
    for scale in (1.0, 10.0, 100.0, 1e4):
        z = LogitMap(rng.uniform(-scale, scale, size=(3, 6, 7)))
        sums = softmax(z).values.sum(axis=0)
        assert np.abs(sums - 1.0).max() <= 1e-9


def test_softmax_shift_invariance():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(3, 5, 5))
    for shift in (-3.0, 0.25, 40.0):
        a = softmax(LogitMap(z)).values
        b = softmax(LogitMap(z + shift)).values
        assert np.abs(a - b).max() <= 1e-12


def test_argmax_basic_and_tie_break():
    assert argmax_labels(one_pixel_logits(0.1, 0.9, 0.2)).labels[0, 0] == 1
    assert argmax_labels(one_pixel_logits(0.5, 0.5, 0.5)).labels[0, 0] == 0
    assert argmax_labels(one_pixel_logits(0.1, 0.7, 0.7)).labels[0, 0] == 1
    all_equal = LogitMap(np.zeros((3, 4, 4)))
    assert (argmax_labels(all_equal).labels == 0).all()


def test_argmax_invariant_under_softmax():
    rng = np.random.default_rng(2)
    for _ in range(20):
        z = LogitMap(rng.normal(scale=3.0, size=(3, 8, 8)))
        direct = argmax_labels(z).labels
        via_probs = np.argmax(softmax(z).values, axis=0)
        assert (direct == via_probs).all()


# ---------------------------------------------------------------------------
# PGM
# ---------------------------------------------------------------------------


def test_pgm_round_trip_2x2():
    mask = LabelMask(np.array([[0, 1], [2, 0]], dtype=np.uint8))
    data = write_mask_pgm(mask)
    assert data == b"P5\n2 2\n255\n\x00\x01\x02\x00"
    assert len(data) == 15
    back = read_mask_pgm(data)
    assert (back.labels == mask.labels).all()


def test_pgm_read_write_read_identity_seeded():
    rng = np.random.default_rng(3)
    for _ in range(25):
        h, w = int(rng.integers(1, 20)), int(rng.integers(1, 20))
        mask = LabelMask(rng.integers(0, 3, size=(h, w)).astype(np.uint8))
        data = write_mask_pgm(mask)
        assert write_mask_pgm(read_mask_pgm(data)) == data


def test_pgm_accepts_comments_and_whitespace():
    payload = b"\x00\x01\x02\x00"
    data = b"P5 # label mask\n# another comment\n 2\t2\n255\n" + payload
    mask = read_mask_pgm(data)
    assert (mask.labels == [[0, 1], [2, 0]]).all()


def test_pgm_value_out_of_range():
    data = b"P5\n2 2\n255\n\x00\x01\x03\x00"
    with pytest.raises(FormatError) as e:
        read_mask_pgm(data)
    # offset points at the offending payload byte
    assert e.value.offset == len(b"P5\n2 2\n255\n") + 2


def test_pgm_truncated_payload():
    data = b"P5\n2 2\n255\n\x00\x01"
    with pytest.raises(FormatError):
        read_mask_pgm(data)


def test_pgm_header_errors():
    with pytest.raises(FormatError):
        read_mask_pgm(b"P6\n2 2\n255\n\x00\x01\x02\x00")
    with pytest.raises(FormatError):
        read_mask_pgm(b"P5\n2 2\n254\n\x00\x01\x02\x00")
    with pytest.raises(FormatError):
        read_mask_pgm(b"P5\n0 2\n255\n")
    with pytest.raises(FormatError):
        read_mask_pgm(b"P5\n2 2\n255\n\x00\x01\x02\x00\x00")


# ---------------------------------------------------------------------------
# F32R
# ---------------------------------------------------------------------------


def f32(*vals):
    return np.array(vals, dtype="<f4").tobytes()


def test_f32r_conf_round_trip():
    header = b"F32R 1 2 2\n"
    data = header + f32(0.25, 0.5, 0.75, 0.125)
    conf = read_f32r(data)
    assert isinstance(conf, ConfMap)
    assert (conf.values == [[0.25, 0.5], [0.75, 0.125]]).all()
    assert write_f32r(conf) == data


def test_f32r_logit_round_trip():
    vals = np.arange(12, dtype=np.float64).reshape(3, 2, 2) - 5.5
    logits = LogitMap(vals)
    data = write_f32r(logits)
    assert data.startswith(b"F32R 3 2 2\n")
    back = read_f32r(data)
    assert isinstance(back, LogitMap)
    assert (back.values == vals).all()
    assert write_f32r(back) == data


def test_f32r_length_mismatch():
    with pytest.raises(FormatError):
        read_f32r(b"F32R 3 2 2\n" + f32(*range(11)))
    with pytest.raises(FormatError):
        read_f32r(b"F32R 1 2 2\n" + f32(0.5, 0.5, 0.5, 0.5, 0.5))


def test_f32r_clamps_conf_to_open_interval():
    conf = read_f32r(b"F32R 1 1 2\n" + f32(0.0, 1.0))
    assert conf.values[0, 0] == CONF_EPS
    assert conf.values[0, 1] == 1.0 - CONF_EPS


def test_f32r_header_errors():
    with pytest.raises(FormatError):
        read_f32r(b"F32X 1 2 2\n" + f32(0.5, 0.5, 0.5, 0.5))
    with pytest.raises(FormatError):
        read_f32r(b"F32R 2 2 2\n" + f32(*[0.5] * 8))
    with pytest.raises(FormatError):
        read_f32r(b"F32R 1 0 2\n")
    with pytest.raises(FormatError):
        read_f32r(b"no newline at all")


def test_f32r_nan_payload():
    with pytest.raises(FormatError) as e:
        read_f32r(b"F32R 1 1 2\n" + f32(0.5, float("nan")))
    assert e.value.offset == len(b"F32R 1 1 2\n") + 4


def test_f32r_seeded_round_trips():
    rng = np.random.default_rng(4)
    for _ in range(25):
        h, w = int(rng.integers(1, 12)), int(rng.integers(1, 12))
        # binary32 values survive the file round trip bit-exactly
        conf = ConfMap(rng.uniform(0.01, 0.99, size=(h, w)).astype("<f4").astype(np.float64))
        assert write_f32r(read_f32r(write_f32r(conf))) == write_f32r(conf)
        logits = LogitMap(rng.normal(size=(3, h, w)).astype("<f4").astype(np.float64))
        assert write_f32r(read_f32r(write_f32r(logits))) == write_f32r(logits)
