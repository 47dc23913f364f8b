"""Evaluation metrics and cross-method comparison tables."""

import numpy as np
import pytest

from spectroi.metrics import (
    CSV_HEADER,
    compare_methods,
    comparison_table,
    evaluate,
    fp_fn_rates,
    normalized_euclidean,
)
from spectroi.phantom import DensityMaps


def maps_of(arrays, names=("water", "iron")):
    return DensityMaps(np.stack(arrays), names, 0.1)


class TestNormalizedEuclidean:
    def test_equal_maps_zero(self):
        gt = np.random.default_rng(0).random((8, 8)) + 0.1
        assert normalized_euclidean(gt, gt) == 0.0

    def test_zero_estimate_is_one(self):
        gt = np.random.default_rng(1).random((8, 8)) + 0.1
        assert normalized_euclidean(np.zeros_like(gt), gt) == pytest.approx(1.0)

    def test_doubled_estimate_is_one(self):
        gt = np.random.default_rng(2).random((8, 8)) + 0.1
        assert normalized_euclidean(2 * gt, gt) == pytest.approx(1.0)

    def test_scale_behavior(self):
        gt = np.random.default_rng(3).random((8, 8)) + 0.1
        for c in (0.3, 1.7, 5.0):
            assert normalized_euclidean(c * gt, gt) == pytest.approx(abs(c - 1))

    def test_zero_ground_truth_rejected(self):
        with pytest.raises(ValueError):
            normalized_euclidean(np.ones((4, 4)), np.zeros((4, 4)))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            normalized_euclidean(np.ones((4, 4)), np.ones((4, 5)))


class TestFpFnRates:
    def gt(self):
        w = np.zeros((10, 10))
        w[2:8, 2:8] = 1.0          # object region: 36 pixels
        fe = np.zeros((10, 10))
        fe[2:8, 2:5] = 0.01        # iron in half the region (18 pixels)
        return maps_of([w, fe])

    def test_perfect_decomposition(self):
        gt = self.gt()
        rates = fp_fn_rates(gt, gt)
        for fp, fn in rates.values():
            assert fp == 0.0 and fn == 0.0

    def test_material_everywhere_fp_half(self):
        gt = self.gt()
        est = maps_of([gt.maps[0], np.full((10, 10), 0.01)])
        fp, fn = fp_fn_rates(est, gt)["iron"]
        assert fp == pytest.approx(0.5)
        assert fn == 0.0

    def test_all_zero_decomposition_fn(self):
        gt = self.gt()
        est = maps_of([np.zeros((10, 10)), np.zeros((10, 10))])
        fp, fn = fp_fn_rates(est, gt)["iron"]
        assert fp == 0.0
        assert fn == pytest.approx(0.5)
        assert fp_fn_rates(est, gt)["water"][1] == pytest.approx(1.0)

    def test_rescaling_invariance(self):
        gt = self.gt()
        est = maps_of([gt.maps[0] * 3.7, gt.maps[1] * 12.0])
        rates = fp_fn_rates(est, gt)
        for fp, fn in rates.values():
            assert fp == 0.0 and fn == 0.0

    def test_empty_region_rejected(self):
        zero = maps_of([np.zeros((4, 4)), np.zeros((4, 4))])
        with pytest.raises(ValueError):
            fp_fn_rates(zero, zero)


class TestCompareMethods:
    def reports(self):
        gt = np.zeros((6, 6))
        gt[1:5, 1:5] = 1.0
        truth = maps_of([gt, 0.01 * gt])
        r1 = evaluate(truth, truth, "roi",
                      metadata={"phantom": "p", "seed": 1})
        est = maps_of([gt * 1.1, 0.01 * gt])
        r2 = evaluate(est, truth, "coarse",
                      metadata={"phantom": "p", "seed": 1})
        return [r1, r2]

    def test_csv_header_and_rows(self):
        csv = compare_methods(self.reports())
        lines = csv.strip().splitlines()
        assert lines[0] == CSV_HEADER
        assert len(lines) == 1 + 2 * 2  # 2 methods x 2 materials

    def test_csv_stability(self):
        a = compare_methods(self.reports())
        b = compare_methods(self.reports())
        assert a == b

    def test_identical_reports_identical_columns(self):
        r = self.reports()[0]
        csv = compare_methods([r, r])
        lines = csv.strip().splitlines()[1:]
        assert lines[0].split(",")[1:] == lines[2].split(",")[1:]

    def test_mismatched_metadata_rejected(self):
        r1, r2 = self.reports()
        r2.metadata["seed"] = 99
        with pytest.raises(ValueError):
            compare_methods([r1, r2])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            compare_methods([])

    def test_human_table_lists_all_methods(self):
        table = comparison_table(self.reports())
        assert "roi" in table and "coarse" in table
        assert "error_m" in table and "fp" in table and "fn" in table
