import json
import math

import numpy as np
import pytest

from aopkit.errors import EmptyStructure, InvalidInput
from aopkit.metrics import (
    METRIC_FIELDS,
    aggregate,
    aop_abs_error,
    asd,
    dice,
    evaluate_pair,
    hd_percentile,
    surface_distances,
)
from aopkit.raster import LabelMask, PixelSpacing


def mask_of(a):
    return LabelMask(np.asarray(a, dtype=np.uint8))


def rand_mask(rng, h, w):
    return LabelMask(rng.integers(0, 3, size=(h, w)).astype(np.uint8))


def oracle_boundary(region):
    # literal 4-neighbor rule: a region pixel with any neighbor outside the
    # region (or outside the image) is a boundary pixel, row-major order
    h, w = region.shape
    out = []
    for r in range(h):
        for c in range(w):
            if not region[r, c]:
                continue
            for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                rr, cc = r + dr, c + dc
                if not (0 <= rr < h and 0 <= cc < w) or not region[rr, cc]:
                    out.append((r, c))
                    break
    return out


def oracle_distances(pred, gt, class_set, spacing=(1.0, 1.0)):
    # all-pairs minimum, both directions, pred side first
    a = np.isin(pred.labels, sorted(class_set))
    b = np.isin(gt.labels, sorted(class_set))
    pa = oracle_boundary(a)
    pb = oracle_boundary(b)
    sr, sc = spacing

    def mins(src, dst):
        return [
            min(math.hypot((r1 - r2) * sr, (c1 - c2) * sc) for r2, c2 in dst)
            for r1, c1 in src
        ]

    return np.array(mins(pa, pb) + mins(pb, pa))


# ---------------------------------------------------------------------------
# dice
# ---------------------------------------------------------------------------


def test_dice_identical_nonempty():
    m = np.zeros((8, 8), dtype=np.uint8)
    m[2:5, 2:5] = 1
    assert dice(mask_of(m), mask_of(m), {1}) == 1.0


def test_dice_disjoint_equal_size():
    a = np.zeros((8, 8), dtype=np.uint8)
    b = np.zeros((8, 8), dtype=np.uint8)
    a[0:2, 0:2] = 2
    b[5:7, 5:7] = 2
    assert dice(mask_of(a), mask_of(b), {2}) == 0.0


def test_dice_partial_overlap():
    # |A| = 100, |B| = 100, overlap 80
    a = np.zeros((12, 16), dtype=np.uint8)
    b = np.zeros((12, 16), dtype=np.uint8)
    a[0:10, 0:10] = 1
    b[0:10, 2:12] = 1
    assert dice(mask_of(a), mask_of(b), {1}) == 0.8


def test_dice_empty_conventions():
    empty = mask_of(np.zeros((4, 4)))
    full = np.zeros((4, 4), dtype=np.uint8)
    full[1, 1] = 1
    assert dice(empty, empty, {1}) == 1.0
    assert dice(empty, mask_of(full), {1}) == 0.0
    assert dice(mask_of(full), empty, {1}) == 0.0


def test_dice_merged_region():
    # PSFH treats {1, 2} as one union region
    a = np.zeros((6, 6), dtype=np.uint8)
    b = np.zeros((6, 6), dtype=np.uint8)
    a[0, 0:4] = 1
    b[0, 0:2] = 1
    b[0, 2:4] = 2
    assert dice(mask_of(a), mask_of(b), {1, 2}) == 1.0
    assert dice(mask_of(a), mask_of(b), {1}) == pytest.approx(4.0 / 6.0)


def test_dice_symmetry_and_range():
    rng = np.random.default_rng(5)
    for _ in range(20):
        a = rand_mask(rng, 10, 12)
        b = rand_mask(rng, 10, 12)
        for ids in ({1}, {2}, {1, 2}):
            d = dice(a, b, ids)
            assert d == dice(b, a, ids)
            assert 0.0 <= d <= 1.0


def test_dice_extent_mismatch():
    with pytest.raises(InvalidInput):
        dice(mask_of(np.zeros((4, 4))), mask_of(np.zeros((4, 5))), {1})


def test_dice_bad_class_set():
    m = mask_of(np.zeros((4, 4)))
    with pytest.raises(InvalidInput):
        dice(m, m, set())
    with pytest.raises(InvalidInput):
        dice(m, m, {3})


# ---------------------------------------------------------------------------
# surface distances
# ---------------------------------------------------------------------------


def test_surface_distances_identical_all_zero():
    m = np.zeros((9, 9), dtype=np.uint8)
    m[2:7, 2:7] = 2
    d = surface_distances(mask_of(m), mask_of(m), {2})
    assert d.shape == (2 * len(oracle_boundary(m == 2)),)
    assert (d == 0.0).all()


def test_surface_distances_two_pixels():
    a = np.zeros((10, 10), dtype=np.uint8)
    b = np.zeros((10, 10), dtype=np.uint8)
    a[5, 5] = 1
    b[5, 8] = 1
    d = surface_distances(mask_of(a), mask_of(b), {1})
    assert sorted(d.tolist()) == [3.0, 3.0]


def test_surface_distances_shifted_block_anisotropic_oracle():
    a = np.zeros((24, 24), dtype=np.uint8)
    b = np.zeros((24, 24), dtype=np.uint8)
    a[10:15, 10:15] = 1
    b[10:15, 11:16] = 1
    pa, pb = mask_of(a), mask_of(b)
    d = surface_distances(pa, pb, {1}, PixelSpacing(0.5, 0.5))
    want = oracle_distances(pa, pb, {1}, (0.5, 0.5))
    assert d.shape == want.shape
    assert np.max(np.abs(d - want)) <= 1e-12


def test_surface_distances_anisotropic_rows():
    a = np.zeros((10, 10), dtype=np.uint8)
    b = np.zeros((10, 10), dtype=np.uint8)
    a[2, 5] = 1
    b[5, 5] = 1
    d = surface_distances(mask_of(a), mask_of(b), {1}, PixelSpacing(2.0, 1.0))
    assert sorted(d.tolist()) == [6.0, 6.0]


def test_surface_distances_symmetric_multiset():
    rng = np.random.default_rng(17)
    a = rand_mask(rng, 16, 16)
    b = rand_mask(rng, 16, 16)
    d_ab = surface_distances(a, b, {1, 2})
    d_ba = surface_distances(b, a, {1, 2})
    assert np.allclose(np.sort(d_ab), np.sort(d_ba), rtol=0.0, atol=0.0)


def test_surface_distances_empty_raises():
    empty = mask_of(np.zeros((6, 6)))
    full = np.zeros((6, 6), dtype=np.uint8)
    full[2, 2] = 1
    with pytest.raises(EmptyStructure):
        surface_distances(empty, mask_of(full), {1})
    with pytest.raises(EmptyStructure):
        surface_distances(mask_of(full), empty, {1})
    with pytest.raises(EmptyStructure):
        surface_distances(empty, empty, {1})


def test_surface_distances_seeded_oracle_battery():
    rng = np.random.default_rng(23)
    checked = 0
    for _ in range(30):
        h = int(rng.integers(4, 22))
        w = int(rng.integers(4, 22))
        a = rand_mask(rng, h, w)
        b = rand_mask(rng, h, w)
        for ids in ({1}, {2}, {1, 2}):
            ina = np.isin(a.labels, sorted(ids)).any()
            inb = np.isin(b.labels, sorted(ids)).any()
            if not (ina and inb):
                with pytest.raises(EmptyStructure):
                    surface_distances(a, b, ids)
                continue
            d = surface_distances(a, b, ids)
            want = oracle_distances(a, b, ids)
            assert np.max(np.abs(d - want)) <= 1e-12
            checked += 1
    assert checked >= 30


# ---------------------------------------------------------------------------
# distance summaries
# ---------------------------------------------------------------------------


def test_asd_hd_small_example():
    d = np.array([0.0, 0.0, 4.0])
    assert asd(d) == 4.0 / 3.0
    assert hd_percentile(d, 100.0) == 4.0


def test_all_equal_distances():
    d = np.full(7, 2.5)
    assert asd(d) == 2.5
    assert hd_percentile(d, 100.0) == 2.5
    assert hd_percentile(d, 5.0) == 2.5


def test_hd_percentile_rank_semantics():
    d = np.array([3.0, 1.0, 4.0, 2.0])
    assert hd_percentile(d, 25.0) == 1.0  # rank ceil(1.0) = 1
    assert hd_percentile(d, 26.0) == 2.0  # rank ceil(1.04) = 2
    assert hd_percentile(d, 50.0) == 2.0
    assert hd_percentile(d, 75.0) == 3.0
    assert hd_percentile(d, 100.0) == 4.0


def test_hd_percentile_sort_oracle_seeded():
    rng = np.random.default_rng(31)
    d = rng.uniform(0.0, 50.0, size=1000)
    ordered = np.sort(d)
    assert hd_percentile(d, 95.0) == ordered[math.ceil(0.95 * 1000) - 1]
    for q in (1.0, 10.0, 33.3, 50.0, 77.7, 95.0, 99.9, 100.0):
        assert hd_percentile(d, q) == ordered[math.ceil(q / 100.0 * d.size) - 1]


def test_hd_percentile_max_and_monotone():
    rng = np.random.default_rng(37)
    for seed in range(10):
        d = np.random.default_rng(seed).exponential(2.0, size=int(rng.integers(1, 200)))
        assert hd_percentile(d, 100.0) == d.max()
        qs = np.linspace(1.0, 100.0, 25)
        vals = [hd_percentile(d, q) for q in qs]
        assert all(x <= y for x, y in zip(vals, vals[1:]))
        assert asd(d) <= hd_percentile(d, 100.0)


def test_distance_summary_validation():
    with pytest.raises(InvalidInput):
        asd(np.array([]))
    with pytest.raises(InvalidInput):
        hd_percentile(np.array([]), 50.0)
    with pytest.raises(InvalidInput):
        hd_percentile(np.array([1.0]), 0.0)
    with pytest.raises(InvalidInput):
        hd_percentile(np.array([1.0]), 100.5)


# ---------------------------------------------------------------------------
# angle error
# ---------------------------------------------------------------------------


def test_aop_abs_error_values():
    assert aop_abs_error(105.0, 105.0) == 0.0
    assert aop_abs_error(110.0, 105.0) == 5.0
    assert aop_abs_error(100.0, 106.21) == pytest.approx(6.21, abs=1e-12)
    assert aop_abs_error(106.21, 100.0) == aop_abs_error(100.0, 106.21)


def test_aop_abs_error_validation():
    with pytest.raises(InvalidInput):
        aop_abs_error(float("nan"), 100.0)
    with pytest.raises(InvalidInput):
        aop_abs_error(100.0, float("inf"))


# ---------------------------------------------------------------------------
# per-pair battery
# ---------------------------------------------------------------------------


def test_evaluate_pair_identical():
    m = np.zeros((12, 12), dtype=np.uint8)
    m[2:6, 2:6] = 1
    m[7:11, 7:11] = 2
    row = evaluate_pair(mask_of(m), mask_of(m))
    for name in ("ps", "fh", "psfh"):
        assert row[f"dice_{name}"] == 1.0
        assert row[f"asd_{name}"] == 0.0
        assert row[f"hd100_{name}"] == 0.0
    assert row["aop_abs_err"] is None


def test_evaluate_pair_missing_structure_fields():
    m = np.zeros((8, 8), dtype=np.uint8)
    m[2:5, 2:5] = 2  # FH only, no PS anywhere
    row = evaluate_pair(mask_of(m), mask_of(m))
    assert row["dice_ps"] == 1.0  # empty vs empty
    assert row["asd_ps"] is None
    assert row["hd100_ps"] is None
    assert row["asd_fh"] == 0.0


def test_evaluate_pair_hd100_is_max_distance():
    rng = np.random.default_rng(41)
    a = rand_mask(rng, 20, 20)
    b = rand_mask(rng, 20, 20)
    row = evaluate_pair(a, b)
    d = surface_distances(a, b, {1, 2})
    assert row["hd100_psfh"] == d.max()
    assert row["asd_psfh"] <= row["hd100_psfh"]


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


def base_row(**kw):
    row = {f: None for f in METRIC_FIELDS}
    row.update(kw)
    return row


def test_aggregate_single_case_zero_std():
    report = aggregate(["c0"], [base_row(dice_ps=0.9)])
    assert report.aggregates["dice_ps"] == {"mean": 0.9, "std": 0.0, "n": 1}


def test_aggregate_two_values():
    rows = [base_row(asd_fh=1.0), base_row(asd_fh=3.0)]
    report = aggregate(["a", "b"], rows)
    agg = report.aggregates["asd_fh"]
    assert agg["mean"] == 2.0
    assert agg["std"] == 1.0  # population std, not sample


def test_aggregate_exclusions_and_absent_fields():
    rows = [
        base_row(dice_ps=1.0, asd_ps=0.5),
        base_row(dice_ps=0.8),
        base_row(dice_ps=0.6),
    ]
    report = aggregate(["a", "b", "c"], rows)
    assert report.aggregates["dice_ps"]["n"] == 3
    assert report.aggregates["asd_ps"]["n"] == 1
    assert report.exclusions["asd_ps"] == 2
    assert "dice_ps" not in report.exclusions
    # a field with no valid values is absent, not zero
    assert "hd100_ps" not in report.aggregates
    assert report.exclusions["hd100_ps"] == 3


def test_aggregate_seeded_two_pass_oracle():
    rng = np.random.default_rng(47)
    rows = []
    for _ in range(50):
        row = base_row()
        for f in METRIC_FIELDS:
            if rng.uniform() < 0.8:
                row[f] = float(rng.uniform(0.0, 10.0))
        rows.append(row)
    report = aggregate([f"case_{i:03d}" for i in range(50)], rows)
    for f in METRIC_FIELDS:
        values = [r[f] for r in rows if r[f] is not None]
        if not values:
            assert f not in report.aggregates
            continue
        mean = sum(values) / len(values)
        std = math.sqrt(sum((v - mean) ** 2 for v in values) / len(values))
        assert report.aggregates[f]["mean"] == pytest.approx(mean, abs=1e-12)
        assert report.aggregates[f]["std"] == pytest.approx(std, abs=1e-12)
        assert report.aggregates[f]["n"] == len(values)


def test_aggregate_length_mismatch():
    with pytest.raises(InvalidInput):
        aggregate(["a", "b"], [base_row()])


def test_report_json_and_csv_shape():
    rows = [base_row(dice_ps=1.0, hd100_fh=2.0), base_row(dice_ps=0.5)]
    report = aggregate(["a", "b"], rows)
    payload = json.loads(report.to_json())
    assert [c["case_id"] for c in payload["cases"]] == ["a", "b"]
    assert payload["cases"][0]["dice_ps"] == 1.0
    assert payload["cases"][1]["hd100_fh"] is None
    assert payload["aggregates"]["dice_ps"]["mean"] == 0.75
    lines = report.to_csv().splitlines()
    assert lines[0] == "case_id," + ",".join(METRIC_FIELDS)
    assert len(lines) == 1 + 2 + 2  # header, two cases, mean and std rows
    assert lines[3].startswith("mean,")
    assert lines[4].startswith("std,")
    # repr round trip keeps full precision
    assert float(lines[1].split(",")[1]) == 1.0
