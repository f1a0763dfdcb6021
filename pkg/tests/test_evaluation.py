import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from arped.evaluation import (AGREE_BG, AGREE_FG, EMERGED, SUPPRESSED, Detections, bilinear_sample,
                              category_rgb, decode_detections, evaluate, foreground_max_map, heat_rgb,
                              match_image, nms, nms_indices, peak_profile, phase_disagreement,
                              read_detections, recall, write_detections)
from arped.targets import apply_transform, iou_matrix, make_anchors
from oracles import brute_nms


def random_boxes(rng, n, extent=100):
    xy = rng.uniform(0, extent, size=(n, 2))
    wh = rng.uniform(2, 30, size=(n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


class TestDecode:
    def setup_method(self):
        self.grid = make_anchors(64, 64)

    def test_zero_regression_returns_anchors(self):
        logits = np.zeros((6, 4, 4))
        d = decode_detections(logits, np.zeros((12, 4, 4)), self.grid, (1000, 1000), keep_small=True)
        np.testing.assert_allclose(d.boxes, np.clip(self.grid.boxes(), 0, 1000), atol=1e-12)
        np.testing.assert_allclose(d.scores, 0.5)

    def test_count_before_filtering(self):
        d = decode_detections(np.zeros((6, 4, 4)), np.zeros((12, 4, 4)), self.grid, (64, 64), keep_small=True)
        assert len(d) == 4 * 4 * 3

    def test_hand_set_transform(self):
        bbox = np.zeros((12, 4, 4))
        t = np.array([0.1, -0.2, 0.3, 0.05])
        bbox[4:8, 2, 1] = t  # anchor 1 at row 2, col 1
        d = decode_detections(np.zeros((6, 4, 4)), bbox, self.grid, (1000, 1000), keep_small=True)
        idx = (2 * 4 + 1) * 3 + 1
        np.testing.assert_allclose(d.boxes[idx], apply_transform(self.grid.boxes()[idx], t), atol=1e-12)

    def test_clipping_and_min_side(self):
        bbox = np.zeros((12, 4, 4))
        bbox[3::4] = -5.0  # collapse every height
        d = decode_detections(np.zeros((6, 4, 4)), bbox, self.grid, (64, 64))
        assert len(d) == 0
        d = decode_detections(np.zeros((6, 4, 4)), np.zeros((12, 4, 4)), self.grid, (64, 64))
        assert d.boxes.min() >= 0 and d.boxes.max() <= 64

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            decode_detections(np.zeros((4, 4, 4)), np.zeros((12, 4, 4)), self.grid, (64, 64))


class TestNMS:
    def test_single(self):
        d = Detections(np.array([[0.0, 0, 5, 5]]), np.array([0.3]))
        assert len(nms(d)) == 1

    def test_identical_pair(self):
        d = Detections(np.array([[0.0, 0, 5, 5], [0, 0, 5, 5]]), np.array([0.8, 0.9]))
        out = nms(d, 0.5)
        assert list(out.scores) == [0.9]

    def test_tie_keeps_earlier_index(self):
        boxes = np.array([[0.0, 0, 5, 5], [0, 0, 5, 5]])
        assert list(nms_indices(boxes, [0.5, 0.5], 0.5)) == [0]

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            boxes = random_boxes(rng, 200)
            scores = np.round(rng.random(200), 2)  # rounding forces ties
            assert list(nms_indices(boxes, scores, 0.5)) == brute_nms(boxes, scores, 0.5)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.1, 0.9))
    def test_output_is_antichain(self, seed, thr):
        rng = np.random.default_rng(seed)
        boxes = random_boxes(rng, 40, 50)
        keep = nms_indices(boxes, rng.random(40), thr)
        ov = iou_matrix(boxes[keep], boxes[keep])
        np.fill_diagonal(ov, 0)
        assert (ov <= thr).all()

    def test_threshold_range(self):
        with pytest.raises(ValueError):
            nms_indices(np.zeros((0, 4)), [], 1.0)


class TestEvaluate:
    def test_perfect_detector(self):
        gts = [np.array([[0.0, 0, 10, 20]]), np.array([[5.0, 5, 15, 30], [40, 40, 50, 60]])]
        dets = [Detections(g, np.ones(len(g))) for g in gts]
        c = evaluate(dets, gts)
        assert c.log_avg == pytest.approx(0.0, abs=1e-9)
        np.testing.assert_array_equal(c.ref_miss, 0.0)

    def test_no_detections(self):
        gts = [np.array([[0.0, 0, 10, 20]])]
        c = evaluate([Detections(np.zeros((0, 4)), np.zeros(0))], gts)
        assert c.log_avg == 1.0 and c.miss_rate_at(1.0) == 1.0

    def test_zero_gts_undefined(self):
        c = evaluate([Detections(np.array([[0.0, 0, 1, 1]]), np.array([0.5]))], [np.zeros((0, 4))])
        assert np.isnan(c.log_avg) and not c.defined

    def test_hand_built_two_images(self):
        # image 0: TP at score 0.9; image 1: FP at score 0.8; two gts in total
        gts = [np.array([[0.0, 0, 10, 10]]), np.array([[50.0, 50, 60, 60]])]
        dets = [Detections(np.array([[0.0, 0, 10, 10]]), np.array([0.9])),
                Detections(np.array([[0.0, 0, 10, 10]]), np.array([0.8]))]
        c = evaluate(dets, gts)
        np.testing.assert_allclose(c.fppi, [0.0, 0.5])
        np.testing.assert_allclose(c.miss_rate, [0.5, 0.5])
        np.testing.assert_allclose(c.scores, [0.9, 0.8])
        assert c.log_avg == pytest.approx(0.5)

    def test_flat_extrapolation_below_lowest_fppi(self):
        # a single FP above the only TP: the lowest achieved FPPI is 1
        gts = [np.array([[0.0, 0, 10, 10]])]
        dets = [Detections(np.array([[50.0, 50, 60, 60], [0, 0, 10, 10]]), np.array([0.9, 0.8]))]
        c = evaluate(dets, gts)
        np.testing.assert_allclose(c.fppi, [1.0, 1.0])
        np.testing.assert_allclose(c.miss_rate, [1.0, 0.0])
        assert c.miss_rate_at(0.01) == 1.0
        assert c.miss_rate_at(1.0) == 0.0

    def test_greedy_matching_in_score_order(self):
        gts = [[0.0, 0, 10, 10]]
        boxes = [[0.0, 0, 10, 9], [0, 0, 10, 10]]
        tp = match_image(boxes, [0.9, 0.5], gts)
        assert list(tp) == [True, False]

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_miss_rate_monotone(self, seed):
        rng = np.random.default_rng(seed)
        gts = [random_boxes(rng, rng.integers(0, 4)) for _ in range(5)]
        dets = []
        for g in gts:
            boxes = np.concatenate([g + rng.normal(0, 2, g.shape), random_boxes(rng, 5)])
            dets.append(Detections(boxes, rng.random(len(boxes))))
        c = evaluate(dets, gts)
        if c.defined:
            assert np.all(np.diff(c.fppi) >= 0)
            assert np.all(np.diff(c.miss_rate) <= 0)
            assert np.all((c.miss_rate >= 0) & (c.miss_rate <= 1))

    def test_recall_and_file_round_trip(self, tmp_path):
        gts = [np.array([[0.0, 0, 10, 10]])]
        dets = [Detections(np.array([[0.0, 0, 10, 10], [30, 30, 40, 40]]), np.array([0.9, 0.2]), 7)]
        assert recall(dets, gts) == 1.0
        path = tmp_path / "dets.txt"
        write_detections(path, dets)
        assert path.read_text().splitlines()[0] == "7 0.9 0 0 10 10"
        back = read_detections(path)[7]
        np.testing.assert_allclose(back.boxes, dets[0].boxes)

    def test_curve_text(self):
        c = evaluate([Detections(np.array([[0.0, 0, 10, 10]]), np.array([1.0]))], [np.array([[0.0, 0, 10, 10]])])
        assert c.to_text().splitlines()[-1].startswith("log_avg ")


class TestMaps:
    def test_foreground_max_single_anchor(self):
        logits = np.random.default_rng(0).normal(size=(2, 3, 3))
        p = np.exp(logits[1]) / np.exp(logits).sum(axis=0)
        np.testing.assert_allclose(foreground_max_map(logits), p)

    def test_foreground_max_matches_loop(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(6, 4, 5))
        expect = np.zeros((4, 5))
        for y in range(4):
            for x in range(5):
                expect[y, x] = max(1 / (1 + np.exp(logits[2 * a, y, x] - logits[2 * a + 1, y, x]))
                                   for a in range(3))
        np.testing.assert_allclose(foreground_max_map(logits), expect)
        perm = logits.reshape(3, 2, 4, 5)[[2, 0, 1]].reshape(6, 4, 5)
        np.testing.assert_allclose(foreground_max_map(perm), expect)

    def test_disagreement_categories(self):
        a = np.array([[0.9, 0.9], [0.1, 0.1]])
        b = np.array([[0.9, 0.1], [0.9, 0.1]])
        assert phase_disagreement(a, b).tolist() == [[AGREE_FG, SUPPRESSED], [EMERGED, AGREE_BG]]
        assert (phase_disagreement(np.ones((3, 3)), np.zeros((3, 3))) == SUPPRESSED).all()
        same = phase_disagreement(a, a)
        assert not np.isin(same, [SUPPRESSED, EMERGED]).any()
        with pytest.raises(ValueError):
            phase_disagreement(a, np.zeros((3, 3)))

    def test_disagreement_counts_match_loop(self):
        rng = np.random.default_rng(2)
        a, b = rng.random((8, 9)), rng.random((8, 9))
        cats = phase_disagreement(a, b)
        counts = {c: 0 for c in (AGREE_BG, AGREE_FG, SUPPRESSED, EMERGED)}
        for x, y in zip(a.ravel(), b.ravel()):
            counts[{(True, True): AGREE_FG, (True, False): SUPPRESSED,
                    (False, True): EMERGED, (False, False): AGREE_BG}[(x >= 0.5, y >= 0.5)]] += 1
        for c, n in counts.items():
            assert (cats == c).sum() == n

    def test_bilinear_sample_closed_form(self):
        rng = np.random.default_rng(3)
        m = rng.random((5, 6))
        for _ in range(50):
            x, y = rng.uniform(0, 5), rng.uniform(0, 4)
            x0, y0 = int(x), int(y)
            fx, fy = x - x0, y - y0
            x1, y1 = min(x0 + 1, 5), min(y0 + 1, 4)
            expect = (m[y0, x0] * (1 - fx) * (1 - fy) + m[y0, x1] * fx * (1 - fy)
                      + m[y1, x0] * (1 - fx) * fy + m[y1, x1] * fx * fy)
            assert bilinear_sample(m, np.array([x]), np.array([y]))[0] == pytest.approx(expect, abs=1e-12)

    def test_profile_of_constant_map_is_flat(self):
        prof = peak_profile([[np.full((10, 10), 0.3)]], [np.array([[20.0, 30, 60, 120]])])
        np.testing.assert_allclose(prof.x, 0.3)
        np.testing.assert_allclose(prof.y, 0.3)
        assert prof.x.shape == (1, 20)
        assert prof.peakedness()[0] == pytest.approx(0.0)

    def test_profile_impulse_peaks_at_centre(self):
        m = np.zeros((10, 10))
        m[4, 5] = 1.0  # cell centre (88, 72) in pixels
        gts = [np.array([[88.0 - 20, 72 - 40, 88 + 20, 72 + 40]])]
        prof = peak_profile([[m]], gts)
        for axis in (prof.x[0], prof.y[0]):
            assert axis.argmax() in (9, 10)
            assert axis[9] == pytest.approx(axis[10])
        assert prof.peakedness()[0] > 0

    def test_profile_needs_gts(self):
        with pytest.raises(ValueError):
            peak_profile([[np.zeros((2, 2))]], [np.zeros((0, 4))])

    def test_palettes(self):
        rgb = heat_rgb(np.array([[0.0, 1.0]]))
        assert rgb[:, 0, 0].tolist() == [0, 0, 255] and rgb[:, 0, 1].tolist() == [255, 255, 0]
        cat = category_rgb(np.array([[SUPPRESSED, AGREE_FG]]))
        assert cat[:, 0, 0].tolist() == [255, 0, 255] and cat[:, 0, 1].tolist() == [0, 200, 0]
