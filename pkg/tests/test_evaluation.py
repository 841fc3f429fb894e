import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import map_oracle
from dpr.data import BoundingBox, SceneConfig, generate_synthetic_scene
from dpr.evaluation import (
    Detection,
    box_iou,
    evaluate_detections,
    flops_report,
    frechet_distance,
    kernel_mmd,
    load_detections,
    pixel_features,
    psnr,
    save_detections,
    ssim,
    toy_detector,
    _match_image,
)
from dpr.organizer import organize, partition


class TestPsnr:
    def test_identical_images(self):
        a = np.random.default_rng(0).random((16, 16, 3))
        assert psnr(a, a) == float("inf")

    def test_uniform_difference(self):
        a = np.full((32, 32), 0.4)
        b = np.full((32, 32), 0.5)
        assert psnr(a, b) == pytest.approx(20.0)

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((8, 8)), rng.random((8, 8))
        assert psnr(a, b) == psnr(b, a)

    def test_monotone_in_noise(self):
        rng = np.random.default_rng(2)
        a = rng.random((64, 64))
        noise = rng.standard_normal((64, 64))
        values = [psnr(a, a + amp * noise) for amp in (0.01, 0.02, 0.05, 0.1, 0.2)]
        assert all(x > y for x, y in zip(values, values[1:]))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((4, 4)), np.zeros((5, 5)))


class TestSsim:
    def test_identical(self):
        a = np.random.default_rng(3).random((32, 32, 3))
        assert ssim(a, a) == pytest.approx(1.0)

    def test_inverted_checkerboard(self):
        yy, xx = np.mgrid[0:32, 0:32]
        a = ((yy + xx) % 2).astype(float)
        assert ssim(a, 1.0 - a) < 0.5

    def test_translation_of_content(self):
        rng = np.random.default_rng(4)
        pattern = rng.random((16, 16))
        noisy = np.clip(pattern + 0.1 * rng.standard_normal((16, 16)), 0, 1)
        for off in ((0, 0), (3, 5)):
            a = np.full((32, 32), 0.5)
            b = np.full((32, 32), 0.5)
            a[off[0]:off[0] + 16, off[1]:off[1] + 16] = pattern
            b[off[0]:off[0] + 16, off[1]:off[1] + 16] = noisy
            crop_a = a[off[0]:off[0] + 16, off[1]:off[1] + 16]
            crop_b = b[off[0]:off[0] + 16, off[1]:off[1] + 16]
            if off == (0, 0):
                base = ssim(crop_a, crop_b)
            else:
                assert ssim(crop_a, crop_b) == pytest.approx(base)

    def test_too_small_image(self):
        with pytest.raises(ValueError, match="window"):
            ssim(np.zeros((4, 4)), np.zeros((4, 4)), window=7)


class TestFrechet:
    def test_self_distance_zero(self):
        fa = np.random.default_rng(5).random((50, 8))
        assert abs(frechet_distance(fa, fa)) <= 1e-6

    def test_one_dimensional_closed_form(self):
        rng = np.random.default_rng(6)
        fa = rng.normal(0.0, 1.0, size=(4000, 1))
        fb = rng.normal(1.0, 1.0, size=(4000, 1))
        # closed form (mu_a - mu_b)^2 + (sigma_a - sigma_b)^2 from the sample stats
        expected = (fa.mean() - fb.mean()) ** 2 + (fa.std(ddof=1) - fb.std(ddof=1)) ** 2
        assert frechet_distance(fa, fb) == pytest.approx(float(expected), rel=1e-6)
        assert frechet_distance(fa, fb) == pytest.approx(1.0, abs=0.15)

    def test_scaling_homogeneity(self):
        rng = np.random.default_rng(7)
        fa, fb = rng.random((60, 5)), rng.random((60, 5)) + 0.3
        base = frechet_distance(fa, fb)
        assert frechet_distance(3.0 * fa, 3.0 * fb) == pytest.approx(9.0 * base, rel=1e-5)

    def test_symmetry(self):
        rng = np.random.default_rng(8)
        fa, fb = rng.random((40, 4)), rng.random((40, 4))
        assert frechet_distance(fa, fb) == pytest.approx(frechet_distance(fb, fa), rel=1e-9)

    def test_singular_regularized_with_warning(self):
        fa = np.zeros((10, 3))
        fb = np.zeros((10, 3))
        fb[:, 0] = 1.0
        with pytest.warns(UserWarning, match="regulariz"):
            d = frechet_distance(fa, fb)
        assert np.isfinite(d)

    def test_too_few_vectors(self):
        with pytest.raises(ValueError):
            frechet_distance(np.zeros((1, 3)), np.zeros((5, 3)))


class TestKernelMmd:
    def test_same_sample_near_zero(self):
        # the unbiased estimator is slightly negative on identical samples (O(1/n) bias)
        fa = np.random.default_rng(9).random((64, 6))
        assert -0.05 < kernel_mmd(fa, fa) <= 1e-12
        fb = np.random.default_rng(9).random((512, 6))
        assert -0.01 < kernel_mmd(fb, fb) <= 1e-12

    def test_split_halves_near_zero(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(400, 5))
        assert abs(kernel_mmd(x[:200], x[200:])) < 0.05

    def test_point_masses_closed_form(self):
        d = 4
        for c in (1.0, 2.0, 3.0):
            fa = np.zeros((8, d))
            fb = np.full((8, d), c / np.sqrt(d))  # squared norm c^2
            expected = (c ** 2 / d + 1) ** 3 - 1
            assert kernel_mmd(fa, fb) == pytest.approx(expected)
        # grows with separation
        vals = []
        for c in (1.0, 2.0, 3.0):
            fb = np.full((8, d), c / np.sqrt(d))
            vals.append(kernel_mmd(np.zeros((8, d)), fb))
        assert vals[0] < vals[1] < vals[2]

    def test_symmetry(self):
        rng = np.random.default_rng(11)
        fa, fb = rng.random((30, 3)), rng.random((25, 3))
        assert kernel_mmd(fa, fb) == pytest.approx(kernel_mmd(fb, fa), rel=1e-9)


def det(x0, y0, x1, y1, conf, cls=0):
    return Detection(BoundingBox(x0, y0, x1, y1, class_id=cls), conf, cls)


class TestEvaluateDetections:
    def test_perfect_predictions(self):
        gt = {"a": [BoundingBox(0, 0, 10, 10), BoundingBox(20, 20, 28, 30)]}
        pred = {"a": [det(0, 0, 10, 10, 1.0), det(20, 20, 28, 30, 1.0)]}
        m = evaluate_detections(pred, gt)
        assert m.map == pytest.approx(1.0)
        assert m.tpr == pytest.approx(1.0)
        assert m.precision == pytest.approx(1.0)

    def test_hand_case_ap_half(self):
        # 1 GT; FP at conf 0.95, TP (IoU 0.8) at conf 0.9 -> AP@0.5 = 0.5
        gt = {"a": [BoundingBox(0, 0, 10, 10)]}
        tp_box = det(0, 0, 10, 8, 0.9)      # IoU 80/100
        fp_box = det(20, 20, 30, 30, 0.95)
        assert box_iou(tp_box.box, gt["a"][0]) == pytest.approx(0.8)
        m = evaluate_detections({"a": [fp_box, tp_box]}, gt, iou_thresholds=(0.5,))
        assert m.map50 == pytest.approx(0.5)

    def test_duplicate_detection_is_fp(self):
        gt = {"a": [BoundingBox(0, 0, 10, 10)]}
        pred = {"a": [det(0, 0, 10, 10, 0.9), det(0, 0, 10, 10, 0.8)]}
        flags = _match_image(sorted(pred["a"], key=lambda d: -d.confidence), gt["a"], 0.5)
        assert flags == [True, False]
        m = evaluate_detections(pred, gt, iou_thresholds=(0.5,))
        assert m.precision == pytest.approx(0.5)
        assert m.tpr == pytest.approx(1.0)

    def test_empty_everything(self):
        m = evaluate_detections({}, {"a": []})
        assert m.map == 1.0

    def test_predictions_without_gt(self):
        m = evaluate_detections({"a": [det(0, 0, 4, 4, 0.9)]}, {"a": []})
        assert m.map == 0.0
        assert m.precision == 0.0

    def test_matcher_equals_enumeration_oracle(self):
        rng = np.random.default_rng(12)
        for case in range(80):
            n_gt = int(rng.integers(0, 5))
            n_det = int(rng.integers(0, 5))
            gts = []
            for _ in range(n_gt):
                x0, y0 = rng.integers(0, 20, size=2)
                w, h = rng.integers(4, 12, size=2)
                gts.append((float(x0), float(y0), float(x0 + w), float(y0 + h)))
            confs = rng.choice(np.linspace(0.05, 0.95, 50), size=n_det, replace=False)
            dets = []
            for di in range(n_det):
                if gts and rng.random() < 0.6:
                    bx = gts[int(rng.integers(0, n_gt))]
                    dx, dy = rng.integers(-3, 4, size=2)
                    cand = (bx[0] + dx, bx[1] + dy, bx[2] + dx, bx[3] + dy)
                else:
                    x0, y0 = rng.integers(0, 20, size=2)
                    w, h = rng.integers(4, 12, size=2)
                    cand = (float(x0), float(y0), float(x0 + w), float(y0 + h))
                dets.append((cand, float(confs[di])))
            for thr in (0.5, 0.75):
                want = map_oracle.match_by_enumeration(dets, gts, thr)
                lib_dets = sorted(
                    (det(*b, conf) for b, conf in dets), key=lambda d: -d.confidence
                )
                got = _match_image(
                    lib_dets, [BoundingBox(*g) for g in gts], thr
                )
                by_conf = sorted(range(len(dets)), key=lambda i: -dets[i][1])
                assert got == [want[i] for i in by_conf], f"case {case} thr {thr}"

    def test_full_protocol_equals_oracle(self):
        rng = np.random.default_rng(13)
        thresholds = tuple(np.round(np.arange(0.5, 0.96, 0.05), 2))
        for case in range(25):
            pred, gt = {}, {}
            opred, ogt = {}, {}
            confs = iter(rng.choice(np.linspace(0.02, 0.98, 200), size=40, replace=False))
            for img in ("a", "b"):
                gt[img], ogt[img] = [], []
                pred[img], opred[img] = [], []
                for _ in range(int(rng.integers(0, 4))):
                    x0, y0 = rng.integers(0, 24, size=2)
                    w, h = rng.integers(4, 10, size=2)
                    cls = int(rng.integers(0, 2))
                    gt[img].append(BoundingBox(x0, y0, x0 + w, y0 + h, class_id=cls))
                    ogt[img].append(((float(x0), float(y0), float(x0 + w), float(y0 + h)), cls))
                for _ in range(int(rng.integers(0, 4))):
                    x0, y0 = rng.integers(0, 24, size=2)
                    w, h = rng.integers(4, 10, size=2)
                    cls = int(rng.integers(0, 2))
                    conf = float(next(confs))
                    pred[img].append(det(x0, y0, x0 + w, y0 + h, conf, cls))
                    opred[img].append(((float(x0), float(y0), float(x0 + w), float(y0 + h)),
                                       conf, cls))
            m = evaluate_detections(pred, gt, iou_thresholds=thresholds)
            omap, omap50 = map_oracle.evaluate(opred, ogt, thresholds)
            assert m.map == pytest.approx(omap, abs=1e-12), f"case {case}"
            assert m.map50 == pytest.approx(omap50, abs=1e-12), f"case {case}"


class TestToyDetector:
    def test_blank_image(self):
        assert toy_detector(np.full((32, 32, 3), 0.2)) == []

    def test_bright_square(self):
        img = np.full((64, 64, 3), 0.2)
        img[10:26, 30:46] = 0.9
        dets = toy_detector(img)
        assert len(dets) == 1
        gt = BoundingBox(30, 10, 46, 26)
        assert box_iou(dets[0].box, gt) >= 0.8
        assert dets[0].class_id == 0
        assert dets[0].confidence == pytest.approx(0.9)

    def test_disc_classified(self):
        scene = generate_synthetic_scene(
            SceneConfig(image_size=64, min_objects=1, max_objects=1,
                        min_object_px=12, max_object_px=14), seed=8,
        )
        dets = toy_detector(scene.pixels)
        assert len(dets) == len(scene.boxes) == 1
        assert dets[0].class_id == scene.boxes[0].class_id
        assert box_iou(dets[0].box, scene.boxes[0]) >= 0.8

    def test_invariant_under_partition_roundtrip(self):
        scene = generate_synthetic_scene(SceneConfig(image_size=64), seed=4)
        rebuilt = organize(partition(scene.pixels, 8))
        a = toy_detector(scene.pixels)
        b = toy_detector(rebuilt)
        assert len(a) == len(b)
        for da, db in zip(a, b):
            assert da.box == db.box and da.confidence == db.confidence


class TestFlopsReport:
    def test_all_selected_no_selector_cost(self):
        acct = flops_report(64, 64, 100.0, 0.0)
        assert acct.flops_ratio == pytest.approx(1.0)

    def test_paper_operating_point(self):
        acct = flops_report(14.59, 64, 1.0, 0.0)
        assert round(acct.selected_fraction * 100, 1) == 22.8
        assert round((1 - acct.flops_ratio) * 100, 1) == 77.2

    @given(st.floats(0, 64), st.floats(0, 64))
    @settings(max_examples=50, deadline=None)
    def test_monotone_in_selected(self, s1, s2):
        lo, hi = sorted((s1, s2))
        a = flops_report(lo, 64, 7.0, 3.0)
        b = flops_report(hi, 64, 7.0, 3.0)
        assert a.flops_ratio <= b.flops_ratio + 1e-12

    def test_zero_total_rejected(self):
        with pytest.raises(ValueError):
            flops_report(1, 0, 1.0)


class TestDetectionsIO:
    def test_jsonl_roundtrip(self, tmp_path):
        dets = {
            "img_b": [det(1, 2, 5, 7, 0.75, 1)],
            "img_a": [det(0, 0, 3, 3, 0.5, 0), det(2, 2, 9, 9, 0.25, 1)],
        }
        path = tmp_path / "dets.jsonl"
        save_detections(dets, path)
        loaded = load_detections(path)
        assert set(loaded) == {"img_a", "img_b"}
        assert loaded["img_a"][0].box == dets["img_a"][0].box
        assert loaded["img_a"][1].confidence == 0.25
        assert loaded["img_b"][0].class_id == 1

    def test_pixel_features_shape(self):
        imgs = [np.random.default_rng(i).random((32, 32, 3)) for i in range(5)]
        feats = pixel_features(imgs, side=8)
        assert feats.shape == (5, 64)
        assert np.all(np.isfinite(feats))
