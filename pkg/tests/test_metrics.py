"""Metric definitions against loop/brute-force oracles."""

import numpy as np
import pytest

from cpdnet.metrics import (ber, dataset_mae, evaluate_dataset, f_measure_curve,
                            gt_single_class, iou, mae, mean_iou, report_summary,
                            report_to_tsv)

from oracles import ber_reference, fmeasure_reference


def random_dataset(rng, n=3, side=12):
    preds = [rng.random((side, side)).astype(np.float32) for _ in range(n)]
    gts = [(rng.random((side, side)) > 0.6).astype(np.float32) for _ in range(n)]
    # keep at least one positive pixel per map
    for g in gts:
        g[0, 0] = 1.0
    return preds, gts


class TestMae:
    def test_identical(self, rng):
        m = rng.random((6, 6))
        assert mae(m, m) == 0.0

    def test_complement_binary(self, rng):
        g = (rng.random((5, 5)) > 0.5).astype(np.float32)
        assert mae(1.0 - g, g) == 1.0

    def test_matches_loop_oracle(self, rng):
        p = rng.random((4, 4))
        g = (rng.random((4, 4)) > 0.5).astype(float)
        acc = 0.0
        for i in range(4):
            for j in range(4):
                acc += abs(p[i, j] - g[i, j])
        assert abs(mae(p, g) - acc / 16) < 1e-12

    def test_dataset_mae_is_mean_of_image_maes(self, rng):
        preds, gts = random_dataset(rng)
        expected = np.mean([mae(p, g) for p, g in zip(preds, gts)])
        assert abs(dataset_mae(preds, gts) - expected) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mae(np.zeros((2, 2)), np.zeros((3, 3)))


class TestFMeasure:
    def test_perfect_binary_predictions(self, rng):
        gts = [(rng.random((8, 8)) > 0.4).astype(np.float32) for _ in range(3)]
        for g in gts:
            g[0, 0] = 1.0
        res = f_measure_curve(gts, gts)
        assert res.max_f == 1.0
        assert res.avg_f == 1.0

    def test_all_zero_predictions_score_zero(self, rng):
        gts = [(rng.random((8, 8)) > 0.5).astype(np.float32) for _ in range(2)]
        for g in gts:
            g[0, 0] = 1.0
        preds = [np.zeros((8, 8), np.float32) for _ in range(2)]
        res = f_measure_curve(preds, gts)
        assert res.max_f == 0.0
        assert res.avg_f == 0.0

    def test_max_f_matches_brute_force_on_three_images(self, rng):
        preds, gts = random_dataset(rng, n=3)
        res = f_measure_curve(preds, gts)
        assert abs(res.max_f - fmeasure_reference(preds, gts)) < 1e-12

    def test_curve_shape_and_ranges(self, rng):
        preds, gts = random_dataset(rng, n=2)
        res = f_measure_curve(preds, gts)
        assert len(res.curve) == 256
        for pt in res.curve:
            assert 0.0 <= pt.precision <= 1.0
            assert 0.0 <= pt.recall <= 1.0

    def test_max_f_at_least_avg_f_empirically(self, rng):
        for trial in range(20):
            gen = np.random.default_rng(trial)
            preds, gts = random_dataset(gen, n=4)
            res = f_measure_curve(preds, gts)
            assert res.max_f >= res.avg_f - 1e-12

    def test_order_invariance(self, rng):
        preds, gts = random_dataset(rng, n=4)
        a = f_measure_curve(preds, gts)
        b = f_measure_curve(preds[::-1], gts[::-1])
        assert a.max_f == b.max_f and a.avg_f == b.avg_f

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            f_measure_curve([], [])


class TestBer:
    def test_perfect_prediction(self, rng):
        g = (rng.random((6, 6)) > 0.5).astype(np.float32)
        g[0, 0], g[1, 1] = 1.0, 0.0
        assert ber(g, g) == 0.0

    def test_fully_inverted(self, rng):
        g = (rng.random((6, 6)) > 0.5).astype(np.float32)
        g[0, 0], g[1, 1] = 1.0, 0.0
        assert ber(1.0 - g, g) == 100.0

    def test_matches_confusion_oracle(self, rng):
        p = rng.random((7, 7))
        g = (rng.random((7, 7)) > 0.5).astype(np.float32)
        g[0, 0], g[1, 1] = 1.0, 0.0
        assert abs(ber(p, g) - ber_reference(p, g)) < 1e-10

    def test_single_class_gt_averages_present_class(self):
        g = np.ones((4, 4), np.float32)
        p = np.ones((4, 4), np.float32)
        p[0, 0] = 0.0
        assert abs(ber(p, g) - 100.0 * (1 - 15 / 16)) < 1e-10
        assert gt_single_class(g)
        assert not gt_single_class(np.eye(4, dtype=np.float32))


class TestIou:
    def test_perfect(self, rng):
        g = (rng.random((5, 5)) > 0.5).astype(np.float32)
        g[0, 0] = 1.0
        assert iou(g, g) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4), np.float32)
        b = np.zeros((4, 4), np.float32)
        a[:2] = 1.0
        b[2:] = 1.0
        assert iou(a, b) == 0.0

    def test_half_overlap_is_one_third(self):
        pred = np.zeros((8, 8), np.float32)
        gt = np.zeros((8, 8), np.float32)
        pred[0:4, :] = 1.0   # 32 px
        gt[2:6, :] = 1.0     # 32 px, 16 px overlap -> I=16, U=48
        assert abs(iou(pred, gt) - 1 / 3) < 1e-12

    def test_empty_union_is_one(self):
        z = np.zeros((3, 3), np.float32)
        assert iou(z, z) == 1.0

    def test_mean_iou_order_invariant(self, rng):
        preds, gts = random_dataset(rng)
        assert mean_iou(preds, gts) == mean_iou(preds[::-1], gts[::-1])


class TestReport:
    def test_self_prediction_is_perfect(self, rng):
        gts = [(rng.random((6, 6)) > 0.5).astype(np.float32) for _ in range(3)]
        for g in gts:
            g[0, 0], g[1, 1] = 1.0, 0.0
        rep = evaluate_dataset(gts, gts)
        assert rep.mae == 0.0
        assert rep.max_f == 1.0
        assert rep.ber == 0.0
        assert rep.mean_iou == 1.0

    def test_tsv_and_summary_render(self, rng):
        preds, gts = random_dataset(rng)
        rep = evaluate_dataset(preds, gts, ids=["a", "b", "c"])
        tsv = report_to_tsv({"detection": rep}, include_ber=True)
        assert tsv.startswith("branch\tmae\tmaxF\tavgF\tmeanIoU\tBER")
        assert "\ta\t" in tsv
        summary = report_summary({"detection": rep})
        assert "MAE" in summary and "maxF" in summary

    def test_metric_ranges(self, rng):
        preds, gts = random_dataset(rng, n=5)
        rep = evaluate_dataset(preds, gts)
        assert 0.0 <= rep.mae <= 1.0
        assert 0.0 <= rep.max_f <= 1.0 and 0.0 <= rep.avg_f <= 1.0
        assert 0.0 <= rep.ber <= 100.0
        assert 0.0 <= rep.mean_iou <= 1.0
