import os
import threading
import unittest
from unittest.mock import patch

import numpy as np

from bidepth.classifier import (
    ClassifierConfig,
    ConfidenceMap,
    binarize,
    classify_plane,
    oracle_classify,
)
from bidepth.depthops import (
    ConfidenceVolume,
    IntegrationRule,
    VolumeError,
    assemble_volume,
    auc_disparity,
    bin_disparity,
    bin_probabilities,
    build_oracle_volume,
    build_volume,
    crossing_disparity,
    expected_disparity,
    full_disparity,
    quantized_disparity,
    range_labels,
    selective_disparity,
    unit_count,
)
from bidepth.geometry import PlaneSchedule, level_schedule, uniform_schedule
from bidepth.imgio import DisparityMap, Label
from bidepth.metrics import miou
from bidepth.synth import SceneLayer, SceneSpec, random_scene, render_pair


def _volume(planes, curves) -> ConfidenceVolume:
    """Volume whose pixel k follows curves[k] along the planes."""
    curves = np.asarray(curves, dtype=np.float64)
    slices = tuple(
        ConfidenceMap(curves[:, i][None, :], np.ones((1, curves.shape[0]), dtype=bool))
        for i in range(len(planes))
    )
    return ConfidenceVolume(PlaneSchedule(tuple(planes)), slices)


class TestVolume(unittest.TestCase):
    def test_slice_count(self):
        """One slice per plane"""
        c = ConfidenceMap(np.ones((1, 1)), np.ones((1, 1), dtype=bool))
        with self.assertRaises(VolumeError):
            ConfidenceVolume(PlaneSchedule((1.0, 2.0)), (c,))

    def test_slice_shapes(self):
        """Slices share their dimensions"""
        a = ConfidenceMap(np.ones((1, 1)), np.ones((1, 1), dtype=bool))
        b = ConfidenceMap(np.ones((1, 2)), np.ones((1, 2), dtype=bool))
        with self.assertRaises(VolumeError):
            ConfidenceVolume(PlaneSchedule((1.0, 2.0)), (a, b))

    def test_order_independent_of_workers(self):
        """Parallel and sequential builds give identical volumes"""
        gt = DisparityMap(np.arange(12, dtype=float).reshape(3, 4))
        schedule = uniform_schedule(0, 11, 12)
        sequential = build_oracle_volume(gt, schedule, workers=1)
        parallel = build_oracle_volume(gt, schedule, workers=4)
        np.testing.assert_array_equal(sequential.stack(), parallel.stack())

    def test_worker_threads_are_named(self):
        """Pool threads carry the plane index in their name"""
        names = set()

        def classify(d):
            names.add(threading.current_thread().name)
            return ConfidenceMap(np.zeros((1, 1)), np.ones((1, 1), dtype=bool))

        assemble_volume(uniform_schedule(0, 3, 4), classify, workers=2)
        self.assertTrue(names)
        self.assertTrue(all(name.startswith("plane-") for name in names))

    def test_environment_caps_workers(self):
        """BI3D_THREADS=1 keeps the work on the calling thread"""
        names = set()

        def classify(d):
            names.add(threading.current_thread().name)
            return ConfidenceMap(np.zeros((1, 1)), np.ones((1, 1), dtype=bool))

        with patch.dict(os.environ, {"BI3D_THREADS": "1"}):
            assemble_volume(uniform_schedule(0, 3, 4), classify)
        self.assertEqual(names, {threading.current_thread().name})

    def test_oracle_volume_non_increasing(self):
        """Oracle confidences never increase with disparity"""
        _, gt, _ = render_pair(random_scene(3, 96, 48, 30, 3))
        volume = build_oracle_volume(gt, uniform_schedule(0, 30, 31))
        self.assertTrue((np.diff(volume.stack(), axis=0) <= 0).all())

    def test_single_plane_is_binary_depth(self):
        """A one-plane volume binarizes to the binary depth of that plane"""
        pair, _, _ = render_pair(SceneSpec(width=64, height=24, background_disparity=6))
        cfg = ClassifierConfig(search_extent=4)
        volume = build_volume(pair, PlaneSchedule((4.0,)), cfg)
        self.assertEqual(len(volume.slices), 1)
        direct = binarize(classify_plane(pair, 4.0, cfg))
        np.testing.assert_array_equal(binarize(volume.slices[0]).labels, direct.labels)

    def test_smoothing_applied(self):
        """A smoothing radius in the config smooths every slice"""
        pair, _, _ = render_pair(SceneSpec(width=64, height=24, background_disparity=6))
        plain = build_volume(pair, PlaneSchedule((4.0, 8.0)), ClassifierConfig())
        smooth = build_volume(
            pair, PlaneSchedule((4.0, 8.0)), ClassifierConfig(smooth_radius=2)
        )
        np.testing.assert_array_equal(plain.valid, smooth.valid)
        self.assertFalse(np.array_equal(plain.stack(), smooth.stack()))


class TestAuc(unittest.TestCase):
    def test_symmetric_ramp(self):
        """A symmetric ramp integrates to its centre exactly"""
        volume = _volume(range(5), [[1, 0.75, 0.5, 0.25, 0]])
        self.assertEqual(auc_disparity(volume).values[0, 0], 2.0)

    def test_range_ends(self):
        """All ones gives d_N, all zeros d_0"""
        volume = _volume([10, 11, 12, 13], [[1, 1, 1, 1], [0, 0, 0, 0]])
        np.testing.assert_array_equal(auc_disparity(volume).values, [[13.0, 10.0]])

    def test_oracle_step(self):
        """An ideal step lands half a spacing below the true disparity"""
        gt = DisparityMap(np.array([[3.0]]))
        volume = build_oracle_volume(gt, uniform_schedule(0, 4, 5))
        self.assertEqual(auc_disparity(volume).values[0, 0], 2.5)

    def test_rules(self):
        """Left and right rectangles bracket the trapezoid"""
        volume = _volume(range(5), [[1, 1, 1, 0, 0]])
        left = auc_disparity(volume, IntegrationRule.LEFT).values[0, 0]
        right = auc_disparity(volume, IntegrationRule.RIGHT).values[0, 0]
        trapezoid = auc_disparity(volume).values[0, 0]
        self.assertEqual((right, trapezoid, left), (2.0, 2.5, 3.0))

    def test_single_plane(self):
        """Regression needs two planes"""
        with self.assertRaises(VolumeError):
            auc_disparity(_volume([5], [[1]]))

    def test_invalid_slice(self):
        """A pixel invalid in any slice is invalid"""
        slices = (
            ConfidenceMap(np.ones((1, 2)), np.array([[True, True]])),
            ConfidenceMap(np.ones((1, 2)), np.array([[True, False]])),
        )
        volume = ConfidenceVolume(PlaneSchedule((0.0, 1.0)), slices)
        np.testing.assert_array_equal(auc_disparity(volume).valid, [[True, False]])

    def test_bounds_and_monotonicity(self):
        """Estimates stay in [d_0, d_N] and grow with the confidences"""
        rng = np.random.default_rng(4)
        planes = np.sort(rng.choice(np.arange(1, 100), size=12, replace=False))
        lower = rng.random((200, 12))
        upper = np.clip(lower + rng.random((200, 12)) * 0.3, 0, 1)
        a = auc_disparity(_volume(planes, upper)).values
        b = auc_disparity(_volume(planes, lower)).values
        self.assertTrue((a >= b).all())
        for values in (a, b):
            self.assertTrue((values >= planes[0]).all())
            self.assertTrue((values <= planes[-1]).all())

    def test_flip_tolerance(self):
        """Flipping k interior slices moves AUC by at most k spacings"""
        rng = np.random.default_rng(8)
        planes = np.arange(0, 41, 2.0)
        for truth in rng.uniform(4, 36, size=20):
            step = (planes < truth).astype(float)
            base = auc_disparity(_volume(planes, [step])).values[0, 0]
            for k in (1, 2, 3):
                flipped = step.copy()
                index = rng.choice(np.arange(1, len(planes) - 1), k, replace=False)
                flipped[index] = 1 - flipped[index]
                moved = auc_disparity(_volume(planes, [flipped])).values[0, 0]
                self.assertLessEqual(abs(moved - base), k * 2.0 + 1e-12)

    def test_crossing_is_fragile(self):
        """A single flipped slice moves the 0.5 crossing but barely the AUC"""
        planes = range(11)
        step = [1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0]
        flipped = [1, 0, 1, 1, 1, 1, 1, 1, 0, 0, 0]
        volume = _volume(planes, [step, flipped])
        crossing = crossing_disparity(volume).values[0]
        auc = auc_disparity(volume).values[0]
        self.assertEqual(tuple(crossing), (7.5, 0.5))
        self.assertEqual(tuple(auc), (7.5, 6.5))

    def test_crossing_absent(self):
        """Curves that never cross one half have no crossing"""
        volume = _volume(range(3), [[1, 1, 1], [0, 0, 0]])
        self.assertFalse(crossing_disparity(volume).valid.any())

    def test_full_range_oracle(self):
        """Oracle AUC over unit planes is within half a spacing of the truth"""
        for seed in range(20):
            _, gt, _ = render_pair(random_scene(seed, 512, 256, 60))
            volume = build_oracle_volume(gt, uniform_schedule(0, 60, 61))
            estimate = auc_disparity(volume)
            valid = estimate.valid & gt.valid
            self.assertTrue(valid.all())
            error = np.abs(estimate.values[valid] - gt.values[valid])
            self.assertLessEqual(error.max(), 0.5, f"scene {seed}")


class TestQuantized(unittest.TestCase):
    def test_bin_mass(self):
        """Implicit end points route all mass into one bin"""
        volume = _volume([64, 128], [[1, 0], [1, 1]])
        probabilities = bin_probabilities(volume)
        np.testing.assert_array_equal(probabilities[:, 0, 0], [0, 1, 0])
        np.testing.assert_array_equal(probabilities[:, 0, 1], [0, 0, 1])
        depth = quantized_disparity(volume, 192)
        np.testing.assert_array_equal(depth.bins.labels, [[1, 2]])
        np.testing.assert_array_equal(depth.centers.values, [[96.0, 160.0]])
        self.assertEqual(depth.edges, (0.0, 64.0, 128.0, float("inf")))
        self.assertEqual(depth.bins.num_labels, 3)

    def test_telescoping(self):
        """Bin masses sum to one before clamping, even for noisy curves"""
        rng = np.random.default_rng(1)
        volume = _volume(np.arange(1, 16), rng.random((300, 15)))
        total = bin_probabilities(volume).sum(axis=0)
        np.testing.assert_allclose(total, 1.0, atol=1e-12)

    def test_ties_go_farther(self):
        """Equal bin masses pick the lower index"""
        volume = _volume([10, 20], [[0.5, 0.5]])
        self.assertEqual(quantized_disparity(volume, 30).bins.labels[0, 0], 0)

    def test_isotonic(self):
        """The monotone pass removes negative masses"""
        volume = _volume([10, 20, 30], [[0.2, 0.9, 0.0]])
        self.assertLess(bin_probabilities(volume).min(), 0)
        self.assertGreaterEqual(bin_probabilities(volume, isotonic=True).min(), 0)
        depth = quantized_disparity(volume, 40, isotonic=True)
        self.assertEqual(depth.bins.labels[0, 0], 0)

    def test_scene_max(self):
        """scene_max must lie beyond the nearest plane"""
        volume = _volume([10, 20], [[1, 0]])
        with self.assertRaises(VolumeError):
            quantized_disparity(volume, 20)
        with self.assertRaises(VolumeError):
            quantized_disparity(volume, float("inf"))

    def test_expected_disparity(self):
        """The soft estimate of uniform bins is spacing * (1/2 + sum C)"""
        rng = np.random.default_rng(6)
        curves = -np.sort(-rng.random((50, 7)), axis=1)
        volume = _volume(np.arange(1, 8) * 8.0, curves)
        expected = expected_disparity(volume, 64.0).values[0]
        np.testing.assert_allclose(expected, 8.0 * (0.5 + curves.sum(axis=1)))

    def test_oracle_levels_exact(self):
        """Oracle quantization equals direct binning of the truth"""
        for seed in range(20):
            _, gt, _ = render_pair(random_scene(seed, 256, 128, 60))
            for levels in (2, 4, 8, 16):
                schedule = level_schedule(levels, 64)
                depth = quantized_disparity(build_oracle_volume(gt, schedule), 64)
                direct = bin_disparity(gt, schedule.disparities)
                np.testing.assert_array_equal(depth.bins.labels, direct.labels)
                score, _ = miou(depth.bins, direct, levels)
                self.assertEqual(score, 1.0)

    def test_census_levels(self):
        """Census quantization reaches the target mIOU on textured scenes"""
        cfg = ClassifierConfig(desc_radius=2, agg_radius=1, search_extent=64)
        scores = {4: [], 16: []}
        for seed in range(20):
            pair, gt, occlusion = render_pair(random_scene(seed, 384, 128, 60, 3))
            # away from the borders, where the search leaves the frame
            evaluated = occlusion.labels == 0
            evaluated[:, :72] = False
            evaluated[:, -72:] = False
            for levels in scores:
                # half-pixel planes: no integer surface sits exactly on a plane
                planes = [d - 0.5 for d in level_schedule(levels, 64).disparities]
                schedule = PlaneSchedule(tuple(planes))
                depth = quantized_disparity(build_volume(pair, schedule, cfg), 64)
                direct = bin_disparity(gt, planes)
                score, _ = miou(depth.bins, direct, levels, evaluated)
                scores[levels].append(score)
        self.assertGreaterEqual(np.mean(scores[4]), 0.9)
        self.assertGreaterEqual(np.mean(scores[16]), 0.8)

    def test_census_level_schedule(self):
        """Census bins on the plain level schedule with a fitted search extent"""
        spec = SceneSpec(
            width=384,
            height=128,
            background_disparity=5,
            layers=[
                SceneLayer(x=80, y=20, width=70, height=80, disparity=24, seed=1),
                SceneLayer(x=170, y=30, width=70, height=80, disparity=40, seed=2),
                SceneLayer(x=260, y=20, width=60, height=80, disparity=56, seed=3),
            ],
            seed=4,
        )
        pair, gt, occlusion = render_pair(spec)
        evaluated = occlusion.labels == 0
        evaluated[:, :64] = False
        evaluated[:, -64:] = False
        schedule = level_schedule(4, 64)
        cfg = ClassifierConfig(desc_radius=2, agg_radius=1).fitted_to(schedule, 64)
        self.assertEqual(cfg.search_extent, 48)
        depth = quantized_disparity(build_volume(pair, schedule, cfg), 64)
        direct = bin_disparity(gt, schedule.disparities)
        score, per_class = miou(depth.bins, direct, 4, evaluated)
        self.assertNotIn(None, per_class)
        self.assertGreaterEqual(score, 0.8)


class TestSelective(unittest.TestCase):
    def test_oracle_labels(self):
        """Out-of-range pixels are labelled, in-range ones regressed"""
        gt = DisparityMap(np.array([[50.0, 10.0, 18.0, 30.0, 42.0]]))
        volume = build_oracle_volume(gt, uniform_schedule(18, 42, 25))
        depth = selective_disparity(volume)
        np.testing.assert_array_equal(
            depth.labels.labels,
            [[Label.FRONT, Label.BEHIND, Label.BEHIND, Label.IN_RANGE, Label.IN_RANGE]],
        )
        self.assertLessEqual(abs(depth.disparity.values[0, 3] - 30.0), 0.5)
        self.assertFalse(depth.disparity.valid[0, :3].any())
        self.assertEqual((depth.d_lo, depth.d_hi), (18.0, 42.0))

    def test_matches_range_labels(self):
        """Oracle selective labels equal the reference labelling"""
        spec = SceneSpec(
            width=160,
            height=64,
            background_disparity=4,
            layers=[
                SceneLayer(x=10, y=5, width=50, height=40, disparity=25, seed=1),
                SceneLayer(x=90, y=10, width=50, height=40, disparity=55, seed=2),
            ],
        )
        _, gt, _ = render_pair(spec)
        volume = build_oracle_volume(gt, uniform_schedule(18, 42, 25))
        depth = selective_disparity(volume)
        reference = range_labels(gt, 18, 42)
        np.testing.assert_array_equal(depth.labels.labels, reference.labels)
        outside = reference.labels != Label.IN_RANGE
        self.assertGreaterEqual(outside.mean(), 0.2)
        inside = depth.labels.select(Label.IN_RANGE)
        error = np.abs(depth.disparity.values[inside] - gt.values[inside])
        self.assertLessEqual(error.mean(), 0.5)


class TestFull(unittest.TestCase):
    def test_composition(self):
        """full_disparity is the explicit three-call pipeline"""
        pair, _, _ = render_pair(SceneSpec(width=64, height=24, background_disparity=6))
        cfg = ClassifierConfig(search_extent=4)
        full = full_disparity(pair, cfg, d_max=12)
        explicit = auc_disparity(build_volume(pair, uniform_schedule(0, 12, 13), cfg))
        np.testing.assert_array_equal(full.values, explicit.values)

    def test_fitted_extent_by_default(self):
        """Without an explicit extent the search covers [0, d_max]"""
        pair, _, _ = render_pair(SceneSpec(width=64, height=24, background_disparity=6))
        full = full_disparity(pair, d_max=12)
        cfg = ClassifierConfig(search_extent=12)
        explicit = auc_disparity(build_volume(pair, uniform_schedule(0, 12, 13), cfg))
        np.testing.assert_array_equal(full.values, explicit.values)

    def test_sub_pixel_range(self):
        """A range below one pixel still gets two planes"""
        self.assertEqual(unit_count(0.5), 2)
        self.assertEqual(unit_count(16.0), 17)
        pair, _, _ = render_pair(SceneSpec(width=64, height=24))
        estimate = full_disparity(pair, ClassifierConfig(search_extent=2), d_max=0.5)
        self.assertTrue(estimate.valid.any())
        values = estimate.values[estimate.valid]
        self.assertTrue(((values >= 0.0) & (values <= 0.5)).all())

    def test_integration_rule(self):
        """The quadrature rule reaches the full and selective estimates"""
        pair, _, _ = render_pair(SceneSpec(width=64, height=24, background_disparity=6))
        cfg = ClassifierConfig(search_extent=4)
        left = full_disparity(pair, cfg, d_max=12, rule=IntegrationRule.LEFT)
        volume = build_volume(pair, uniform_schedule(0, 12, 13), cfg)
        np.testing.assert_array_equal(
            left.values, auc_disparity(volume, IntegrationRule.LEFT).values
        )
        selective = selective_disparity(volume, IntegrationRule.RIGHT)
        expected = auc_disparity(volume, IntegrationRule.RIGHT).values
        inside = selective.disparity.valid
        np.testing.assert_array_equal(
            selective.disparity.values[inside], expected[inside]
        )

    def test_census_accuracy(self):
        """Census full depth recovers a fronto-parallel surface"""
        pair, gt, occlusion = render_pair(
            SceneSpec(width=128, height=32, background_disparity=6)
        )
        estimate = full_disparity(pair, ClassifierConfig(search_extent=12), d_max=16)
        selected = estimate.valid & (occlusion.labels == 0)
        error = np.abs(estimate.values[selected] - gt.values[selected])
        self.assertLess(np.median(error), 1.0)

    def test_positive_max(self):
        """The range must be positive"""
        pair, _, _ = render_pair(SceneSpec(width=64, height=24))
        with self.assertRaises(VolumeError):
            full_disparity(pair, d_max=0)


class TestReferenceBinning(unittest.TestCase):
    def test_bin_edges(self):
        """Bins are left-open and right-closed"""
        gt = DisparityMap(np.array([[0.0, 64.0, 64.5, 128.0, 200.0, np.nan]]))
        labels = bin_disparity(gt, [64.0, 128.0])
        np.testing.assert_array_equal(labels.labels[0, :5], [0, 0, 1, 1, 2])
        self.assertFalse(labels.valid[0, 5])

    def test_range_labels(self):
        """d_lo itself is BEHIND, d_hi itself IN_RANGE"""
        gt = DisparityMap(np.array([[18.0, 18.5, 42.0, 42.5]]))
        labels = range_labels(gt, 18, 42)
        np.testing.assert_array_equal(
            labels.labels,
            [[Label.BEHIND, Label.IN_RANGE, Label.IN_RANGE, Label.FRONT]],
        )

    def test_oracle_step_matches_binning(self):
        """A plane at the exact disparity counts as in front of the point"""
        gt = DisparityMap(np.array([[5.0, 10.0, 15.0]]))
        c = oracle_classify(gt, 10.0)
        np.testing.assert_array_equal(c.confidences, [[0.0, 0.0, 1.0]])
