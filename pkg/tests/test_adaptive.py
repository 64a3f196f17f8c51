import unittest
from unittest.mock import patch

import numpy as np
from pydantic import ValidationError

from bidepth import adaptive
from bidepth.adaptive import (
    AdaptiveConfig,
    AdaptiveState,
    adaptive_step,
    fence_fraction,
    next_state,
    run_sequence,
)
from bidepth.classifier import ClassifierConfig, oracle_classify
from bidepth.imgio import DisparityMap, Label
from bidepth.synth import SceneLayer, SceneSpec, render_pair


def _frame(disparity: int | None, seed: int = 0):
    """128x128 frame over a background at 2, optionally with a 32x32 object."""
    layers = []
    if disparity is not None:
        layers.append(
            SceneLayer(x=48, y=48, width=32, height=32, disparity=disparity, seed=9)
        )
    spec = SceneSpec(
        width=128, height=128, background_disparity=2, layers=layers, seed=seed
    )
    pair, gt, _ = render_pair(spec)
    return pair, gt


class TestAdaptiveConfig(unittest.TestCase):
    def setUp(self):
        self.cfg = AdaptiveConfig(range_lo=20, range_hi=40, fence=10)

    def test_defaults(self):
        """Default thresholds and hysteresis length"""
        self.assertEqual(self.cfg.trigger, 0.02)
        self.assertEqual(self.cfg.release, 0.005)
        self.assertEqual(self.cfg.release_frames, 5)
        self.assertFalse(self.cfg.fence_band)

    def test_ordering(self):
        """The fence lies behind a non-empty range"""
        with self.assertRaises(ValidationError):
            AdaptiveConfig(range_lo=40, range_hi=20, fence=10)
        with self.assertRaises(ValidationError):
            AdaptiveConfig(range_lo=20, range_hi=40, fence=25)
        with self.assertRaises(ValidationError):
            AdaptiveConfig(range_lo=20, range_hi=40, fence=10, release=0.05)

    def test_roi(self):
        """Regions must be non-empty"""
        with self.assertRaises(ValidationError):
            AdaptiveConfig(range_lo=20, range_hi=40, fence=10, roi=(10, 10, 5, 20))

    def test_base_schedule(self):
        """The base schedule spans exactly the range"""
        schedule = self.cfg.base_schedule()
        self.assertEqual(len(schedule), 8)
        self.assertEqual((schedule.farthest, schedule.nearest), (20.0, 40.0))

    def test_extended_schedule(self):
        """The extension starts at the fence and keeps the base spacing"""
        base = self.cfg.base_schedule()
        extended = self.cfg.extended_schedule()
        self.assertEqual(extended.farthest, 10.0)
        self.assertEqual(extended.disparities[-len(base) :], base.disparities)
        spacing = 20 / 7
        self.assertTrue((np.diff(extended.as_array()) <= spacing + 1e-9).all())
        self.assertEqual(len(extended), len(base) + 4)


class TestHysteresis(unittest.TestCase):
    def setUp(self):
        self.cfg = AdaptiveConfig(range_lo=20, range_hi=40, fence=10)

    def test_trigger(self):
        """The range extends as soon as the fraction reaches the trigger"""
        state = next_state(AdaptiveState(), 0.02, self.cfg)
        self.assertTrue(state.extended)
        self.assertFalse(next_state(AdaptiveState(), 0.019, self.cfg).extended)

    def test_release_after_quiet_frames(self):
        """The fifth consecutive quiet frame returns to the base range"""
        state = AdaptiveState(extended=True)
        for _ in range(4):
            state = next_state(state, 0.0, self.cfg)
            self.assertTrue(state.extended)
        self.assertFalse(next_state(state, 0.0, self.cfg).extended)

    def test_noise_between_thresholds_resets(self):
        """A fraction above the release level restarts the quiet count"""
        state = AdaptiveState(extended=True, quiet_frames=3)
        state = next_state(state, 0.01, self.cfg)
        self.assertEqual(state, AdaptiveState(extended=True, quiet_frames=0))


class TestFenceFraction(unittest.TestCase):
    def setUp(self):
        self.gt = DisparityMap(np.array([[2.0, 15.0, 15.0, 30.0]]))

    def test_front_at_fence(self):
        """Every valid pixel in front of the fence counts"""
        self.assertEqual(fence_fraction(oracle_classify(self.gt, 10.0)), 0.75)

    def test_band_between_fence_and_range(self):
        """With the far plane only pixels still behind the range count"""
        fraction = fence_fraction(
            oracle_classify(self.gt, 10.0), far=oracle_classify(self.gt, 20.0)
        )
        self.assertEqual(fraction, 0.5)

    def test_roi(self):
        """Only the watched region counts"""
        fraction = fence_fraction(oracle_classify(self.gt, 10.0), roi=(0, 0, 1, 1))
        self.assertEqual(fraction, 0.0)
        fraction = fence_fraction(oracle_classify(self.gt, 10.0), roi=(1, 0, 3, 1))
        self.assertEqual(fraction, 1.0)

    def test_no_valid_pixels(self):
        """An all-invalid region has fraction 0"""
        gt = DisparityMap(np.full((2, 2), np.nan))
        self.assertEqual(fence_fraction(oracle_classify(gt, 10.0)), 0.0)
        self.assertEqual(
            fence_fraction(oracle_classify(gt, 10.0), far=oracle_classify(gt, 20.0)),
            0.0,
        )


class TestAdaptiveStep(unittest.TestCase):
    def setUp(self):
        self.cfg = AdaptiveConfig(range_lo=20, range_hi=40, fence=10)

    def test_empty_scene(self):
        """Nothing crosses the fence in a plain background"""
        pair, gt = _frame(None)
        frame = adaptive_step(AdaptiveState(), pair, self.cfg, gt=gt)
        self.assertEqual(frame.fence_fraction, 0.0)
        self.assertFalse(frame.state.extended)
        self.assertEqual(frame.active_range, (20.0, 40.0))
        self.assertFalse(frame.fence.select(Label.FRONT).any())

    def test_extension_takes_effect_immediately(self):
        """The frame that trips the trigger is already processed extended"""
        pair, gt = _frame(15)
        frame = adaptive_step(AdaptiveState(), pair, self.cfg, gt=gt)
        self.assertAlmostEqual(frame.fence_fraction, 1024 / (128 * 128))
        self.assertTrue(frame.state.extended)
        self.assertEqual(frame.active_range, (10.0, 40.0))
        labels = frame.selective.labels
        self.assertTrue((labels.labels[48:80, 48:80] == Label.IN_RANGE).all())
        self.assertEqual(labels.labels[0, 0], Label.BEHIND)
        np.testing.assert_array_equal(frame.fence.select(Label.FRONT), gt.values > 10)

    def test_object_inside_range_extends(self):
        """An object already inside the range is in front of the fence too"""
        pair, gt = _frame(30)
        frame = adaptive_step(AdaptiveState(), pair, self.cfg, gt=gt)
        self.assertAlmostEqual(frame.fence_fraction, 1024 / (128 * 128))
        self.assertTrue(frame.state.extended)
        self.assertEqual(frame.active_range, (10.0, 40.0))

    def test_fence_band_ignores_object_inside_range(self):
        """Counting only the band between fence and range skips that object"""
        cfg = AdaptiveConfig(range_lo=20, range_hi=40, fence=10, fence_band=True)
        pair, gt = _frame(30)
        frame = adaptive_step(AdaptiveState(), pair, cfg, gt=gt)
        self.assertEqual(frame.fence_fraction, 0.0)
        self.assertFalse(frame.state.extended)
        pair, gt = _frame(15)
        crossing = adaptive_step(AdaptiveState(), pair, cfg, gt=gt)
        self.assertTrue(crossing.state.extended)

    def test_slices_reused(self):
        """Every plane is classified once per frame"""
        pair, gt = _frame(15)
        calls = []

        def counting(gt):
            def classify(d):
                calls.append(d)
                return oracle_classify(gt, d)

            return classify

        with patch.object(adaptive, "oracle_classifier", side_effect=counting):
            frame = adaptive_step(AdaptiveState(), pair, self.cfg, gt=gt, workers=1)
        self.assertEqual(sorted(calls), list(self.cfg.extended_schedule().disparities))
        self.assertTrue(frame.state.extended)

    def test_census_detects_crossing(self):
        """The matching classifier trips the fence for an object just past it"""
        spec = SceneSpec(
            width=96,
            height=64,
            background_disparity=2,
            layers=[SceneLayer(x=30, y=16, width=32, height=32, disparity=6, seed=4)],
        )
        pair, _, _ = render_pair(spec)
        cfg_a = AdaptiveConfig(range_lo=8, range_hi=16, fence=4, planes_per_range=5)
        cfg_c = ClassifierConfig(search_extent=16)
        first = adaptive_step(AdaptiveState(), pair, cfg_a, cfg_c)
        second = adaptive_step(AdaptiveState(), pair, cfg_a, cfg_c)
        self.assertGreaterEqual(first.fence_fraction, cfg_a.trigger)
        self.assertTrue(first.state.extended)
        self.assertEqual(first.fence_fraction, second.fence_fraction)
        np.testing.assert_array_equal(
            first.selective.disparity.values, second.selective.disparity.values
        )


class TestRunSequence(unittest.TestCase):
    def test_scripted_sequence(self):
        """Extend when the object passes the fence, revert on the 5th quiet frame"""
        cfg = AdaptiveConfig(range_lo=20, range_hi=40, fence=10)
        script = [5, 15, 5, 5, 5, 5, 5]
        frames = [_frame(d, seed=i) for i, d in enumerate(script)]
        results = list(run_sequence(frames, cfg))
        self.assertEqual(
            [r.state.extended for r in results],
            [False, True, True, True, True, True, False],
        )
        self.assertEqual(results[1].active_range, (10.0, 40.0))
        self.assertEqual(results[-1].active_range, (20.0, 40.0))
        self.assertEqual(results[0].fence_fraction, 0.0)

    def test_initial_state(self):
        """A sequence can resume from an extended state"""
        cfg = AdaptiveConfig(range_lo=20, range_hi=40, fence=10, release_frames=1)
        frames = [_frame(5)]
        [result] = run_sequence(frames, cfg, state=AdaptiveState(extended=True))
        self.assertFalse(result.state.extended)
