import itertools

import numpy as np
import pytest

from pointfusion import eval3d, geom3d
from pointfusion.errors import ValidationError
from pointfusion.eval3d import EvalConfig, EvalRecord
from pointfusion.geom3d import Box3D, BoxParam
from pointfusion.kitti_io import Detection2D, Prediction


def box_at(x, z, yaw=0.0, dims=(3.9, 1.6, 1.5), cls="Car", y=0.0):
    b = geom3d.corners_from_param(
        BoxParam(np.array([x, y, z]), np.array(dims, dtype=float), yaw))
    b.class_id = cls
    return b


def pred(frame, box, score, cls="Car"):
    det = Detection2D(cls, (0.0, 0.0, 10.0, 10.0), score)
    return Prediction(frame, det, box, score)


class TestMatching:
    def test_greedy_takes_best_iou_in_score_order(self):
        gt = [box_at(0.0, 10.0)]
        close = box_at(0.2, 10.0)      # high IoU
        far = box_at(1.0, 10.0)        # lower IoU but higher score
        preds = [(0.9, far), (0.8, close)]
        records, unmatched = eval3d.match_detections(
            preds, gt, geom3d.iou3d, threshold=0.25)
        # Higher-scored 'far' claims the single ground truth first.
        assert [r.is_tp for r in records] == [True, False]
        assert unmatched == 0

    def test_each_gt_matched_once(self):
        gt = [box_at(0.0, 10.0)]
        preds = [(0.9, box_at(0.0, 10.0)), (0.8, box_at(0.0, 10.0))]
        records, _ = eval3d.match_detections(preds, gt, geom3d.iou3d, 0.5)
        assert sum(r.is_tp for r in records) == 1

    def test_below_threshold_is_fp(self):
        gt = [box_at(0.0, 10.0)]
        preds = [(0.9, box_at(3.0, 10.0))]
        records, unmatched = eval3d.match_detections(
            preds, gt, geom3d.iou3d, 0.5)
        assert records[0].is_tp is False and unmatched == 1

    def test_degenerate_prediction_is_fp(self):
        # A model can emit corner sets that form no valid box (e.g. negative
        # height); those must count as false positives, not crash matching.
        gt = [box_at(0.0, 10.0)]
        bad = Box3D(np.zeros((8, 3)))
        records, unmatched = eval3d.match_detections(
            [(0.9, bad), (0.8, box_at(0.0, 10.0))], gt, geom3d.iou3d, 0.5)
        assert [r.is_tp for r in records] == [False, True]
        assert unmatched == 0

    def brute_force_best(self, preds, gts, iou_fn, threshold):
        """Exhaustive search over one-to-one assignments respecting the
        greedy rule's constraint set; returns max achievable TP count."""
        best = 0
        for perm in itertools.permutations(range(len(gts))):
            for k in range(len(gts) + 1):
                ok = True
                used = set()
                tp = 0
                for score, box in sorted(preds, key=lambda p: -p[0]):
                    for j in perm:
                        if j in used and iou_fn(box, gts[j]) >= threshold:
                            continue
                        if j not in used and iou_fn(box, gts[j]) >= threshold:
                            used.add(j)
                            tp += 1
                            break
                best = max(best, tp)
        return best

    def test_greedy_agrees_with_brute_force_on_random_scenes(self):
        rng = np.random.default_rng(13)
        for _ in range(20):
            gts = [box_at(rng.uniform(-6, 6), rng.uniform(8, 14),
                          rng.uniform(-0.5, 0.5)) for _ in range(3)]
            preds = [(rng.random(),
                      box_at(rng.uniform(-6, 6), rng.uniform(8, 14),
                             rng.uniform(-0.5, 0.5))) for _ in range(4)]
            records, unmatched = eval3d.match_detections(
                preds, gts, geom3d.iou_bev, 0.3)
            tp = sum(r.is_tp for r in records)
            assert tp + unmatched == len(gts)
            assert tp == self.brute_force_best(preds, gts, geom3d.iou_bev, 0.3)


class TestPRCurve:
    def test_hand_computed_three_detection_case(self):
        # Score-ordered outcomes TP, FP, TP with 2 ground truths:
        # recall    0.5, 0.5, 1.0
        # precision 1.0, 0.5, 2/3
        # envelope  1.0, 2/3, 2/3 -> AP = 0.5*1 + 0*... + 0.5*(2/3) = 5/6.
        records = [EvalRecord(0.9, True), EvalRecord(0.8, False),
                   EvalRecord(0.7, True)]
        curve = eval3d.pr_curve(records, total_gt=2)
        assert np.allclose(curve.recall, [0.5, 0.5, 1.0])
        assert np.allclose(curve.precision, [1.0, 0.5, 2.0 / 3.0])
        assert curve.ap == pytest.approx(5.0 / 6.0)

    def test_eleven_point_mode(self):
        # Envelope is 1.0 up to recall 0.5 and 2/3 after:
        # points 0.0..0.5 give 1.0 (6 of them), 0.6..1.0 give 2/3 (5).
        records = [EvalRecord(0.9, True), EvalRecord(0.8, False),
                   EvalRecord(0.7, True)]
        curve = eval3d.pr_curve(records, 2, interpolation="11point")
        assert curve.ap == pytest.approx((6 * 1.0 + 5 * 2.0 / 3.0) / 11.0)

    def test_perfect_detector(self):
        records = [EvalRecord(0.9, True), EvalRecord(0.8, True)]
        assert eval3d.pr_curve(records, 2).ap == pytest.approx(1.0)

    def test_all_false_positives(self):
        records = [EvalRecord(0.9, False)]
        assert eval3d.pr_curve(records, 2).ap == 0.0

    def test_no_predictions(self):
        assert eval3d.pr_curve([], 2).ap == 0.0

    def test_missed_gt_caps_recall(self):
        # One TP of two ground truths: AP = 0.5 even at precision 1.
        records = [EvalRecord(0.9, True)]
        assert eval3d.pr_curve(records, 2).ap == pytest.approx(0.5)


class TestEvaluate:
    def test_per_class_thresholds(self):
        # A 0.55-IoU prediction passes at 0.5 (Cyclist) but fails at 0.7 (Car).
        gt_car = box_at(0.0, 10.0, cls="Car")
        gt_cyc = box_at(0.0, 20.0, dims=(1.7, 0.6, 1.7), cls="Cyclist")
        p_car = box_at(0.55, 10.0, cls="Car")        # IoU ~ 0.73 at 0.55m? use offset below
        # Shift until IoU lands between 0.5 and 0.7.
        shift = 0.9
        p_car = box_at(shift, 10.0, cls="Car")
        iou = geom3d.iou3d(p_car, gt_car)
        assert 0.5 < iou < 0.7
        p_cyc = box_at(0.45, 20.0, dims=(1.7, 0.6, 1.7), cls="Cyclist")
        assert 0.5 < geom3d.iou3d(p_cyc, gt_cyc) < 0.7

        preds = [pred("f0", p_car, 0.9, "Car"), pred("f0", p_cyc, 0.9,
                                                     "Cyclist")]
        gts = {"f0": [gt_car, gt_cyc]}
        res = eval3d.evaluate(preds, gts, EvalConfig())
        assert res["Car"].ap == 0.0
        assert res["Cyclist"].ap == pytest.approx(1.0)

    def test_indoor_mode_lowers_every_threshold(self):
        gt = box_at(0.0, 10.0)
        p = box_at(1.6, 10.0)
        assert geom3d.iou3d(p, gt) < 0.5
        assert geom3d.iou3d(p, gt) > 0.25
        res_k = eval3d.evaluate([pred("f0", p, 0.9)], {"f0": [gt]},
                                EvalConfig())
        res_s = eval3d.evaluate([pred("f0", p, 0.9)], {"f0": [gt]},
                                EvalConfig(mode="sunrgbd"))
        assert res_k["Car"].ap == 0.0
        assert res_s["Car"].ap == pytest.approx(1.0)

    def test_bev_metric_ignores_vertical_offset(self):
        gt = box_at(0.0, 10.0)
        p = box_at(0.0, 10.0, y=0.9)       # above: low 3D IoU, BEV IoU 1.
        res3d = eval3d.evaluate([pred("f0", p, 0.9)], {"f0": [gt]},
                                EvalConfig())
        resbev = eval3d.evaluate([pred("f0", p, 0.9)], {"f0": [gt]},
                                 EvalConfig(metric="bev"))
        assert res3d["Car"].ap == 0.0
        assert resbev["Car"].ap == pytest.approx(1.0)

    def test_scores_pool_across_frames(self):
        gt0, gt1 = box_at(0.0, 10.0), box_at(0.0, 10.0)
        # Frame f0: good low-score detection. Frame f1: bad high-score one.
        preds = [pred("f0", box_at(0.0, 10.0), 0.4),
                 pred("f1", box_at(5.0, 10.0), 0.9)]
        res = eval3d.evaluate(preds, {"f0": [gt0], "f1": [gt1]},
                              EvalConfig(iou_thresholds={"Car": 0.5}))
        # Sweep sees FP first: precision at full recall is 0.5, envelope
        # gives AP = 0.5 * 0.5 = 0.25.
        assert res["Car"].ap == pytest.approx(0.25)

    def test_difficulty_filter(self):
        lab_easy = _label(bbox_h=60.0, occ=0, trunc=0.0)
        lab_hard = _label(bbox_h=30.0, occ=2, trunc=0.4, z=30.0)
        cfg = EvalConfig(difficulty="easy")
        gts = {"f0": [lab_easy, lab_hard]}
        preds = [pred("f0", lab_easy.to_box3d(), 0.9)]
        res = eval3d.evaluate(preds, gts, cfg)
        # The hard object is excluded from the easy bucket, so recall is 1.
        assert res["Car"].ap == pytest.approx(1.0)

    def test_validation(self):
        with pytest.raises(ValidationError):
            EvalConfig(metric="4d")
        with pytest.raises(ValidationError):
            EvalConfig(default_threshold=0.0)
        with pytest.raises(ValidationError):
            EvalConfig(interpolation="41point")


def _label(bbox_h, occ, trunc, z=10.0):
    from pointfusion.kitti_io import Label3D
    return Label3D("Car", trunc, occ, 0.0, (100.0, 100.0, 200.0,
                                            100.0 + bbox_h),
                   (1.5, 1.6, 3.9), (0.0, 0.75, z), 0.0)


class TestMonteCarloApOracle:
    def test_ap_matches_direct_tp_fp_counting_on_random_problem(self):
        rng = np.random.default_rng(21)
        gts, preds = {}, []
        for f in range(6):
            frame = f"{f:06d}"
            boxes = [box_at(rng.uniform(-8, 8), rng.uniform(8, 20),
                            rng.uniform(-1, 1)) for _ in range(2)]
            gts[frame] = boxes
            for b in boxes:
                if rng.random() < 0.7:
                    noisy = box_at(
                        geom3d.param_from_corners(b).center[0] + rng.normal(0, 0.2),
                        geom3d.param_from_corners(b).center[2] + rng.normal(0, 0.2),
                        geom3d.param_from_corners(b).yaw)
                    preds.append(pred(frame, noisy, rng.random()))
            if rng.random() < 0.5:
                preds.append(pred(frame, box_at(rng.uniform(-8, 8), 35.0),
                                  rng.random()))
        cfg = EvalConfig(iou_thresholds={"Car": 0.5})
        res = eval3d.evaluate(preds, gts, cfg)

        # Independent recomputation: redo matching per frame, then integrate
        # the envelope with plain trapezoid-free summation.
        records = []
        total_gt = sum(len(v) for v in gts.values())
        for frame, boxes in gts.items():
            fp = [(p.score, p.box) for p in preds if p.frame == frame]
            recs, _ = eval3d.match_detections(fp, boxes, geom3d.iou3d, 0.5)
            records.extend(recs)
        records.sort(key=lambda r: -r.score)
        tp = fp_count = 0
        pr = []
        for r in records:
            tp += r.is_tp
            fp_count += not r.is_tp
            pr.append((tp / total_gt, tp / (tp + fp_count)))
        ap = 0.0
        prev_r = 0.0
        for i, (r, _) in enumerate(pr):
            env = max(p for rr, p in pr[i:])
            ap += (r - prev_r) * env
            prev_r = r
        assert res["Car"].ap == pytest.approx(ap, abs=1e-9)


class TestFormatTable:
    def test_contains_class_and_csv_row(self):
        from pointfusion.eval3d import PRCurve
        out = eval3d.format_table(
            {"Car": PRCurve(np.array([1.0]), np.array([1.0]), 0.75)},
            EvalConfig())
        assert "Car" in out
        assert "Car,all,3d,0.750000" in out
