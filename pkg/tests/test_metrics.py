import random

import pytest
from hypothesis import given, settings, strategies as st

from archbench.annot import PixelBox
from archbench.errors import BadFieldCount, EmptyClass, NoGroundTruth, RangeViolation
from archbench.metrics import (
    Confusion,
    DetectionRecord,
    IoUThresholdSet,
    PRCurve,
    average_precision,
    class_scores,
    evaluate,
    format_predictions,
    iou,
    match_detections,
    mean_ap,
    nms,
    occupancy_confusion,
    parse_predictions,
    pr_curve,
    precision_recall,
)
from oracles import brute_force_ap, iou_exact, iou_pixel_grid, random_instance


def det(box, conf, cls=0, image="a"):
    return DetectionRecord(image, PixelBox(*box, cls), cls, conf)


class TestIoU:
    def test_identity(self):
        b = PixelBox(1, 2, 5, 9)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(PixelBox(0, 0, 1, 1), PixelBox(2, 2, 3, 3)) == 0.0

    def test_touching_edges(self):
        assert iou(PixelBox(0, 0, 1, 1), PixelBox(1, 0, 2, 1)) == 0.0

    def test_one_seventh(self):
        assert iou(PixelBox(0, 0, 2, 2), PixelBox(1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-12)

    @given(st.integers(0, 10**6))
    def test_matches_exact_fractions(self, seed):
        rng = random.Random(seed)
        boxes = []
        for _ in range(2):
            x0, x1 = sorted(rng.sample(range(50), 2))
            y0, y1 = sorted(rng.sample(range(50), 2))
            boxes.append(PixelBox(x0, y0, x1, y1))
        a, b = boxes
        assert iou(a, b) == pytest.approx(float(iou_exact(a, b)), abs=1e-12)
        assert iou(a, b) == iou(b, a)
        assert 0.0 <= iou(a, b) <= 1.0

    @given(st.integers(0, 10**6), st.integers(-30, 30), st.integers(-30, 30))
    def test_translation_invariant(self, seed, dx, dy):
        rng = random.Random(seed)
        x0, x1 = sorted(rng.sample(range(20), 2))
        y0, y1 = sorted(rng.sample(range(20), 2))
        a, b = PixelBox(0, 0, 10, 10), PixelBox(x0, y0, x1, y1)
        shift = lambda p: PixelBox(p.x_min + dx, p.y_min + dy, p.x_max + dx, p.y_max + dy)
        assert iou(shift(a), shift(b)) == pytest.approx(iou(a, b), abs=1e-12)

    def test_pixel_grid_oracle_on_grid_aligned_boxes(self):
        rng = random.Random(2024)
        for _ in range(200):
            a, b = [_grid_box(rng) for _ in range(2)]
            assert iou(a, b) == pytest.approx(iou_pixel_grid(a, b), abs=1e-9)

    def test_pixel_grid_oracle_within_discretization_bound(self):
        # Counting cell centres rounds every edge to the grid, so each side moves
        # by at most one cell; bound the IoU change that this can cause.
        res = 1e-3
        rng = random.Random(7)
        for _ in range(300):
            a, b = [_unit_box(rng) for _ in range(2)]
            exact = iou(a, b)
            iw = max(0.0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
            ih = max(0.0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
            side = lambda w, h: res * (w + h) + res * res
            d_inter = side(iw, ih) if iw and ih else 2 * res
            d_union = side(a.x_max - a.x_min, a.y_max - a.y_min) + side(b.x_max - b.x_min, b.y_max - b.y_min) + d_inter
            union = a.area + b.area - iw * ih
            bound = (d_inter + exact * d_union) / (union - d_union)
            assert abs(exact - iou_pixel_grid(a, b, res)) <= bound


def _grid_box(rng, n=1000):
    x0, x1 = sorted(rng.sample(range(n + 1), 2))
    y0, y1 = sorted(rng.sample(range(n + 1), 2))
    return PixelBox(x0 / n, y0 / n, x1 / n, y1 / n)


def _unit_box(rng):
    w, h = rng.uniform(0.05, 0.9), rng.uniform(0.05, 0.9)
    x, y = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
    return PixelBox(x, y, x + w, y + h)


class TestNms:
    def test_duplicate_suppression(self):
        a, b = det((0, 0, 10, 10), 0.8), det((0, 0, 10, 10), 0.9)
        assert nms([a, b], 0.5) == [b]

    def test_disjoint_kept(self):
        a, b = det((0, 0, 10, 10), 0.9), det((20, 20, 30, 30), 0.8)
        assert nms([b, a], 0.5) == [a, b]

    def test_greedy_chain(self):
        # IoU(A,B) = IoU(B,C) = 0.6 and IoU(A,C) = 1/3: B goes, A and C survive
        a = det((0, 0, 10, 10), 0.9)
        b = det((2.5, 0, 12.5, 10), 0.8)
        c = det((5, 0, 15, 10), 0.7)
        assert iou(a.box, b.box) == pytest.approx(0.6)
        assert iou(b.box, c.box) == pytest.approx(0.6)
        assert nms([c, b, a], 0.5) == [a, c]

    def test_other_class_and_image_untouched(self):
        a = det((0, 0, 10, 10), 0.9)
        assert nms([a, det((0, 0, 10, 10), 0.8, cls=1), det((0, 0, 10, 10), 0.7, image="b")], 0.5) == [
            a,
            det((0, 0, 10, 10), 0.8, cls=1),
            det((0, 0, 10, 10), 0.7, image="b"),
        ]

    def test_equal_confidence_keeps_first(self):
        first, second = det((0, 0, 10, 10), 0.5), det((0, 0, 10, 11), 0.5)
        assert nms([first, second], 0.5) == [first]

    def test_threshold_is_strict(self):
        a, b = det((0, 0, 10, 10), 0.9), det((2.5, 0, 12.5, 10), 0.8)
        assert nms([a, b], 0.6) == [a, b]

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            nms([], 0.0)

    @settings(max_examples=200)
    @given(st.integers(0, 10**6), st.sampled_from([0.3, 0.5, 0.7]))
    def test_idempotent(self, seed, thresh):
        dets, _ = random_instance(random.Random(seed), max_det=8, n_classes=2)
        once = nms(dets, thresh)
        assert nms(once, thresh) == once


class TestMatching:
    def test_perfect(self):
        r = match_detections([det((0, 0, 10, 10), 0.9)], [PixelBox(0, 0, 10, 10)])
        assert (r.tp, r.fp, r.fn) == (1, 0, 0)

    def test_iou_point_four_misses(self):
        gt = PixelBox(0, 0, 10, 10)
        d = det((0, 0, 4, 10), 0.9)
        assert iou(d.box, gt) == pytest.approx(0.4)
        r = match_detections([d], [gt], 0.5)
        assert (r.tp, r.fp, r.fn) == (0, 1, 1)

    def test_double_detection(self):
        r = match_detections([det((0, 0, 10, 10), 0.9), det((0, 0, 10, 10), 0.8)], [PixelBox(0, 0, 10, 10)])
        assert (r.tp, r.fp, r.fn) == (1, 1, 0)
        assert r.det_to_gt == (0, None)

    def test_higher_confidence_claims_first(self):
        gts = [PixelBox(0, 0, 10, 10)]
        r = match_detections([det((0, 0, 10, 9), 0.6), det((0, 0, 10, 10), 0.7)], gts)
        assert r.det_to_gt == (None, 0)

    def test_ties_go_to_lower_gt_index(self):
        gts = [PixelBox(0, 0, 10, 10), PixelBox(0, 0, 10, 10)]
        assert match_detections([det((0, 0, 10, 10), 0.9)], gts).det_to_gt == (0,)

    def test_class_must_agree(self):
        r = match_detections([det((0, 0, 10, 10), 0.9, cls=1)], [PixelBox(0, 0, 10, 10, 0)])
        assert r.tp == 0
        r = match_detections([det((0, 0, 10, 10), 0.9, cls=1)], [PixelBox(0, 0, 10, 10, 0)], class_agnostic=True)
        assert r.tp == 1


class TestCurves:
    def test_single_perfect(self):
        curve = pr_curve([(0.9, True)], 1)
        assert curve.points == ((1.0, 1.0),)
        assert average_precision(curve, "allpoint") == average_precision(curve, "interp101") == 1.0

    def test_tp_then_fp(self):
        curve = pr_curve([(0.9, True), (0.8, False)], 2)
        assert curve.points == ((0.5, 1.0), (0.5, 0.5))
        assert average_precision(curve, "allpoint") == 0.5
        # envelope 1.0 at the 51 samples 0.00..0.50, zero beyond
        assert average_precision(curve, "interp101") == pytest.approx(51 / 101)

    def test_no_detections(self):
        curve = pr_curve([], 3)
        assert curve.points == ()
        assert average_precision(curve) == 0.0

    def test_tied_confidences_collapse(self):
        curve = pr_curve([(0.5, True), (0.5, False), (0.9, True)], 2)
        assert curve.points == ((0.5, 1.0), (1.0, 2 / 3))

    def test_empty_class(self):
        with pytest.raises(EmptyClass):
            pr_curve([(0.9, False)], 0)

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            average_precision(PRCurve(((1.0, 1.0),)), "voc11")

    @settings(max_examples=300)
    @given(st.integers(0, 10**9))
    def test_allpoint_matches_brute_force(self, seed):
        rng = random.Random(seed)
        dets, gts = random_instance(rng, n_classes=2)
        for c in {g.class_id for boxes in gts.values() for g in boxes}:
            for thr in (0.5, 0.75):
                scored, n_gt = class_scores(dets, gts, c, thr)
                ap = average_precision(pr_curve(scored, n_gt, c), "allpoint")
                assert ap == pytest.approx(brute_force_ap(dets, gts, c, thr), abs=1e-9)

    @settings(max_examples=200)
    @given(st.integers(0, 10**9), st.sampled_from(["allpoint", "interp101"]))
    def test_low_confidence_fp_never_helps(self, seed, method):
        rng = random.Random(seed)
        dets, gts = random_instance(rng)
        img = next(iter(gts))
        worse = dets + [det((100, 100, 101, 101), 0.01, image=img)]
        before = mean_ap(dets, gts, IoUThresholdSet.map50(), method).map50
        after = mean_ap(worse, gts, IoUThresholdSet.map50(), method).map50
        assert after <= before + 1e-12

    @settings(max_examples=200)
    @given(st.integers(0, 10**9))
    def test_extra_tp_never_lowers_recall(self, seed):
        rng = random.Random(seed)
        dets, gts = random_instance(rng)
        img = next(i for i, boxes in gts.items() if boxes)
        g = gts[img][0]
        more = dets + [DetectionRecord(img, g, g.class_id, rng.choice((0.2, 0.6, 0.95)))]
        for t in {d.confidence for d in more}:
            base = [d for d in dets if d.confidence >= t]
            ext = [d for d in more if d.confidence >= t]
            tp = lambda ds: sum(hit for c in (0,) for hit in (h for _, h in class_scores(ds, gts, c, 0.5)[0]))
            assert tp(ext) >= tp(base)


class TestMeanAP:
    def test_perfect(self):
        gts = {"a": [PixelBox(0, 0, 10, 10, 0), PixelBox(20, 20, 30, 30, 1)]}
        dets = [DetectionRecord("a", b, b.class_id, 1.0) for b in gts["a"]]
        m = mean_ap(dets, gts)
        assert (m.map50, m.map5095) == (1.0, 1.0)

    def test_quarter_shift(self):
        # shift by a quarter width: IoU = 48/80 = 0.6, passing 0.50, 0.55 and 0.60 only
        gts = {"a": [PixelBox(0, 0, 8, 8)]}
        dets = [det((2, 0, 10, 8), 0.9)]
        m = mean_ap(dets, gts)
        assert m.map50 == 1.0
        assert m.map5095 == pytest.approx(0.3)

    def test_half_shift_fails_everywhere(self):
        gts = {"a": [PixelBox(0, 0, 8, 8)]}
        m = mean_ap([det((4, 0, 12, 8), 0.9)], gts)
        assert (m.map50, m.map5095) == (0.0, 0.0)

    def test_empty_detections(self):
        assert mean_ap([], {"a": [PixelBox(0, 0, 1, 1)]}).map50 == 0.0

    def test_class_without_gt_excluded(self):
        gts = {"a": [PixelBox(0, 0, 10, 10, 0)]}
        dets = [det((0, 0, 10, 10), 0.9), det((50, 50, 60, 60), 0.8, cls=1)]
        m = mean_ap(dets, gts)
        assert m.map50 == 1.0
        assert set(m.per_class) == {0}

    def test_no_ground_truth(self):
        with pytest.raises(NoGroundTruth):
            mean_ap([det((0, 0, 1, 1), 0.5)], {"a": []})

    def test_coco_thresholds(self):
        t = IoUThresholdSet.coco().thresholds
        assert len(t) == 10
        assert t[0] == 0.5 and t[-1] == 0.95 and 0.6 in t

    @settings(max_examples=300)
    @given(st.integers(0, 10**9), st.sampled_from(["allpoint", "interp101"]))
    def test_strict_thresholds_never_exceed_loose(self, seed, method):
        dets, gts = random_instance(random.Random(seed), n_classes=2)
        m = mean_ap(dets, gts, method=method)
        assert 0.0 <= m.map5095 <= m.map50 <= 1.0


class TestCounts:
    @pytest.mark.parametrize(
        "counts,expected", [((9, 1, 0), (0.9, 1.0)), ((0, 0, 0), (1.0, 1.0)), ((1, 0, 1), (1.0, 0.5))]
    )
    def test_precision_recall(self, counts, expected):
        assert precision_recall(*counts) == expected

    def test_negative_counts(self):
        with pytest.raises(ValueError):
            precision_recall(-1, 0, 0)

    def test_confusion_perfect(self):
        c = occupancy_confusion([(1, 1), (0, 0), (1, 1)])
        assert (c.FP, c.FN) == (0, 0)

    def test_confusion_single_false_alarm(self):
        assert occupancy_confusion([(0, 1)]) == Confusion(FP=1)

    def test_twenty_eight_slots(self):
        c = occupancy_confusion([(1, 1)] * 20 + [(0, 0)] * 8)
        assert (c.TP, c.TN, c.FP, c.FN, c.undetected) == (20, 8, 0, 0, 0)

    def test_undetected_counted_separately(self):
        c = occupancy_confusion([(1, None), (0, None), (1, 0)])
        assert c == Confusion(FN=1, undetected=2)


def _scene(n=20):
    return {f"img{i}": [PixelBox(40 * j, 10, 40 * j + 30, 60, j % 2) for j in range(4)] for i in range(n)}


class TestEvaluate:
    def test_self_evaluation(self):
        gts = _scene()
        dets = [DetectionRecord(img, b, b.class_id, 1.0) for img, boxes in gts.items() for b in boxes]
        r = evaluate(dets, gts, model="self")
        assert (r.precision, r.recall, r.map50, r.map5095) == (1.0, 1.0, 1.0, 1.0)
        assert r.confusion.TP == 40 and r.confusion.TN == 40
        assert r.unmatched_gt == r.unmatched_detections == 0

    def test_dropping_predictions_lowers_recall_only(self):
        gts = _scene()
        dets = [DetectionRecord(img, b, b.class_id, 1.0) for img, boxes in gts.items() for b in boxes]
        r = evaluate(dets[8:], gts)
        assert r.precision == 1.0
        assert r.recall == pytest.approx(72 / 80)
        assert r.unmatched_gt == 8

    def test_report_keys(self):
        gts = _scene(2)
        dets = [DetectionRecord(img, b, b.class_id, 0.9) for img, boxes in gts.items() for b in boxes]
        doc = evaluate(dets, gts, model="m").to_dict()
        assert list(doc)[:6] == ["schema_version", "model", "Precision", "Recall", "mAP50", "mAP50:95"]
        assert set(doc["operating_points"]) == {"fixed_conf", "max_f1"}

    def test_fixed_point_respects_confidence(self):
        gts = {"a": [PixelBox(0, 0, 10, 10)]}
        r = evaluate([det((0, 0, 10, 10), 0.1)], gts, conf=0.25)
        assert (r.precision, r.recall) == (1.0, 0.0)
        assert r.max_f1_point.recall == 1.0
        assert r.map50 == 1.0


class TestPredictionFile:
    def test_round_trip(self):
        dets = [det((100, 100, 300, 200), 0.875, cls=1, image="x")]
        back = parse_predictions(format_predictions(dets))
        assert back[0].image_id == "x" and back[0].class_id == 1 and back[0].confidence == 0.875
        assert back[0].box.as_tuple() == pytest.approx((100, 100, 300, 200), abs=1e-3)

    def test_field_count(self):
        with pytest.raises(BadFieldCount):
            parse_predictions("x 1 0.9 0.5 0.5 0.1\n")

    def test_confidence_range(self):
        with pytest.raises(RangeViolation):
            parse_predictions("x 1 1.5 0.5 0.5 0.1 0.1\n")
