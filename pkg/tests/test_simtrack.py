import math
import os
import shutil
import tempfile
import unittest

import numpy as np

from steerkit import simtrack
from steerkit.data import DrivingDataset, load_image, parse_driving_log
from steerkit.defs import CAMERA_OFFSETS, SteerCommand
from steerkit.errors import (
    ConfigurationError,
    EpisodeError,
    LabelingError,
)


FREE_ROLLING = simtrack.VehicleParams(drag=0.0)


def _rolled(state, steering, throttle, seconds, dt=0.01, params=None):
    for _ in range(int(round(seconds / dt))):
        state = simtrack.step(state, steering, throttle, dt, params)
    return state


class TestVehicle(unittest.TestCase):

    def test_straight_line(self):
        state = simtrack.CarState(0.0, 0.0, 0.0, 5.0)

        end = _rolled(state, 0.0, 0.0, 1.0, params=FREE_ROLLING)

        self.assertAlmostEqual(5.0, end.x, places=6)
        self.assertEqual(0.0, end.y)
        self.assertEqual(0.0, end.heading)
        self.assertAlmostEqual(5.0, end.speed)

    def test_constant_steering_traces_a_circle(self):
        """Verify a held steering input drives a circle of L / tan(delta)"""
        # Setup
        steering = 0.5
        radius = 2.5 / math.tan(math.radians(25.0) * steering)
        period = 2 * math.pi * radius / 5.0
        state = simtrack.CarState(0.0, 0.0, 0.0, 5.0)

        # Run test
        trace = []
        for _ in range(int(period / 0.01)):
            state = simtrack.step(state, steering, 0.0, 0.01, FREE_ROLLING)
            trace.append((state.x, state.y))

        # Assertions
        points = np.array(trace)
        center = points.mean(axis=0)
        spread = np.hypot(*(points - center).T)
        self.assertLess(abs(spread.mean() - radius) / radius, 0.01)
        self.assertLess((spread.max() - spread.min()) / radius, 0.01)
        # A positive input turns right, towards +y.
        self.assertGreater(center[1], 0.0)

    def test_drag_decay(self):
        state = simtrack.CarState(0.0, 0.0, 0.0, 10.0)

        end = _rolled(state, 0.0, 0.0, 1.0)

        self.assertAlmostEqual(10.0 * math.exp(-0.5), end.speed, delta=0.05)

    def test_inputs_are_clamped(self):
        state = simtrack.CarState(0.0, 0.0, 0.0, 1.0)

        over = simtrack.step(state, 7.0, 3.0)
        full = simtrack.step(state, 1.0, 1.0)

        self.assertEqual(full.heading, over.heading)
        self.assertEqual(full.speed, over.speed)

    def test_speed_never_negative(self):
        state = simtrack.CarState(0.0, 0.0, 0.0, 0.0)

        end = _rolled(state, 0.0, 0.0, 0.5)

        self.assertEqual(0.0, end.speed)

    def test_invalid_dt(self):
        state = simtrack.CarState(0.0, 0.0, 0.0, 1.0)

        for dt in (0.0, -0.01, 0.2):
            with self.assertRaises(ConfigurationError):
                simtrack.step(state, 0.0, 0.0, dt)

    def test_wrap_angle(self):
        self.assertAlmostEqual(math.pi, simtrack.wrap_angle(-math.pi))
        self.assertAlmostEqual(-math.pi / 2,
                               simtrack.wrap_angle(3 * math.pi / 2))


class TestTracks(unittest.TestCase):

    def setUp(self):
        self.oval = simtrack.stadium_track()

    def test_oval_geometry(self):
        self.assertAlmostEqual(2 * 60 + 2 * math.pi * 20, self.oval.length,
                               delta=0.5)
        self.assertEqual(0.0, self.oval.heading_at(0))
        np.testing.assert_allclose([30.0, 0.0], self.oval.point_at(30.0))
        np.testing.assert_allclose(self.oval.point_at(10.0),
                                   self.oval.point_at(10.0 +
                                                      self.oval.length))

    def test_offset_sign(self):
        left = simtrack.CarState(30.0, -1.5, 0.0, 0.0)
        right = simtrack.CarState(30.0, 2.0, 0.0, 0.0)

        self.assertAlmostEqual(-1.5, simtrack.lateral_offset(left,
                                                             self.oval))
        self.assertAlmostEqual(2.0, simtrack.lateral_offset(right,
                                                            self.oval))
        self.assertEqual(0.0, simtrack.lateral_offset(
            simtrack.start_state(self.oval, 10), self.oval))

    def test_offset_matches_brute_force(self):
        """Verify |offset| against the nearest of densely sampled points"""
        rng = np.random.default_rng(0)
        dense = np.array([self.oval.point_at(s) for s in
                          np.linspace(0, self.oval.length, 40000,
                                      endpoint=False)])
        for _ in range(50):
            x, y = rng.uniform([-25, -8], [85, 48])
            state = simtrack.CarState(float(x), float(y), 0.0, 0.0)

            nearest = np.min(np.hypot(*(dense - [x, y]).T))

            self.assertAlmostEqual(nearest,
                                   abs(simtrack.lateral_offset(state,
                                                               self.oval)),
                                   delta=0.01)

    def test_off_track(self):
        self.assertFalse(simtrack.is_off_track(
            simtrack.CarState(30.0, 3.9, 0.0, 0.0), self.oval))
        self.assertTrue(simtrack.is_off_track(
            simtrack.CarState(30.0, -4.5, 0.0, 0.0), self.oval))

    def test_reversed(self):
        backwards = self.oval.reversed()

        state = simtrack.CarState(30.0, -1.5, math.pi, 0.0)

        self.assertEqual("oval-reverse", backwards.name)
        self.assertAlmostEqual(1.5, simtrack.lateral_offset(state,
                                                            backwards))

    def test_s_curve_turns_both_ways(self):
        track = simtrack.s_curve_track()
        headings = np.unwrap([track.heading_at(i)
                              for i in range(len(track.centerline))])
        turns = np.diff(headings)

        self.assertTrue((turns > 0).any())
        self.assertTrue((turns < 0).any())

    def test_invalid_centerlines(self):
        square = [(0, 0), (1, 0), (2, 0), (2, 1), (2, 2), (1, 2), (0, 2),
                  (0, 1)]
        figure_eight = [(0, 0), (1, 1), (2, 2), (3, 3), (3, 0), (2, 1),
                        (1, 2), (0, 3)]

        simtrack.TrackDefinition("square", square)
        with self.assertRaises(ConfigurationError):
            simtrack.TrackDefinition("short", square[:7])
        with self.assertRaises(ConfigurationError):
            simtrack.TrackDefinition("repeat", square[:4] + square[3:7])
        with self.assertRaises(ConfigurationError):
            simtrack.TrackDefinition("eight", figure_eight)
        with self.assertRaises(ConfigurationError):
            simtrack.TrackDefinition("flat", square, half_width=0.0)

    def test_save_and_resolve(self):
        tmp = tempfile.mkdtemp()
        try:
            path = os.path.join(tmp, "oval.json")
            simtrack.save_track(self.oval, path)

            loaded = simtrack.resolve_track(path)

            np.testing.assert_array_equal(self.oval.centerline,
                                          loaded.centerline)
            self.assertEqual(self.oval.half_width, loaded.half_width)
        finally:
            shutil.rmtree(tmp)

        self.assertEqual("s_curve", simtrack.resolve_track("s_curve").name)
        with self.assertRaises(ConfigurationError):
            simtrack.resolve_track("monaco")


class TestOracle(unittest.TestCase):

    def setUp(self):
        self.oval = simtrack.stadium_track()

    def test_centered_is_straight(self):
        state = simtrack.start_state(self.oval, 10, speed=4.0)

        self.assertAlmostEqual(0.0, simtrack.oracle_steering(state,
                                                             self.oval))

    def test_displaced_left_steers_right(self):
        state = simtrack.CarState(30.0, -1.5, 0.0, 4.0)

        self.assertGreater(simtrack.oracle_steering(state, self.oval), 0.0)

    def test_side_cameras_label_with_the_right_sign(self):
        """
        A view from the left camera is a view from a car displaced to the
        left, which the oracle answers with more right steering.
        """
        for x in (15.0, 30.0, 45.0):
            labels = {}
            for which, offset in CAMERA_OFFSETS.items():
                state = simtrack.CarState(x, offset, 0.0, 4.0)
                labels[which] = simtrack.oracle_steering(state, self.oval)

            self.assertGreater(labels["left"], labels["center"])
            self.assertLess(labels["right"], labels["center"])

    def test_lost_car(self):
        with self.assertRaises(LabelingError):
            simtrack.oracle_steering(simtrack.CarState(30.0, -9.0, 0.0, 1.0),
                                     self.oval)


class _FailingPolicy(simtrack.Policy):

    def act(self, observation):
        if observation.time >= 0.195:
            raise ValueError("camera unplugged")
        return 0.0


class TestEpisodes(unittest.TestCase):

    def test_short_cap(self):
        result = simtrack.run_episode(simtrack.OraclePolicy(),
                                      simtrack.stadium_track(),
                                      cap_seconds=0.5, dt=0.01)

        self.assertEqual(50, len(result.trace))
        self.assertAlmostEqual(0.5, result.survived_seconds)
        self.assertFalse(result.off_track)
        self.assertEqual(50, result.as_dict()["steps"])

    def test_oracle_outlasts_zero_steering(self):
        """Verify the oracle reaches the cap where straight driving fails"""
        track = simtrack.s_curve_track()

        oracle = simtrack.run_episode(simtrack.OraclePolicy(), track,
                                      cap_seconds=30.0)
        zero = simtrack.run_episode(simtrack.ConstantPolicy(0.0), track,
                                    cap_seconds=30.0)

        self.assertAlmostEqual(30.0, oracle.survived_seconds)
        self.assertFalse(oracle.off_track)
        self.assertTrue(zero.off_track)
        self.assertLess(zero.survived_seconds, oracle.survived_seconds)
        self.assertGreater(oracle.mean_speed, 3.0)

    def test_wider_road_survives_longer(self):
        survived = [simtrack.run_episode(
                        simtrack.ConstantPolicy(0.0),
                        simtrack.s_curve_track(half_width=width),
                        cap_seconds=30.0).survived_seconds
                    for width in (2.0, 4.0, 6.0)]

        self.assertEqual(sorted(survived), survived)

    def test_steer_command_sets_throttle(self):
        class Coasting(simtrack.Policy):
            def act(self, observation):
                return SteerCommand(0.0, 0.0)

        result = simtrack.run_episode(Coasting(), simtrack.stadium_track(),
                                      cap_seconds=1.0)

        self.assertEqual(0.0, result.mean_speed)

    def test_control_period_holds_command(self):
        calls = []

        class Counting(simtrack.Policy):
            def act(self, observation):
                calls.append(observation.time)
                return 0.0

        simtrack.run_episode(Counting(), simtrack.stadium_track(),
                             cap_seconds=1.0, control_period=0.1)

        self.assertEqual(10, len(calls))

    def test_policy_failure_carries_time(self):
        with self.assertRaises(EpisodeError) as ctx:
            simtrack.run_episode(_FailingPolicy(), simtrack.stadium_track(),
                                 cap_seconds=1.0)
        self.assertAlmostEqual(0.2, ctx.exception.sim_time, delta=1e-9)
        self.assertIsInstance(ctx.exception.__cause__, ValueError)

    def test_invalid_cap(self):
        with self.assertRaises(ConfigurationError):
            simtrack.run_episode(simtrack.OraclePolicy(),
                                 simtrack.stadium_track(), cap_seconds=0.0)


class TestSynth(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def _synth(self, name, **kwargs):
        return simtrack.synth_dataset(simtrack.stadium_track(), 12, 3,
                                      os.path.join(self.tmp, name), **kwargs)

    def test_log_parses(self):
        log = self._synth("run")

        records = parse_driving_log(log)

        self.assertEqual(12, len(records))
        self.assertEqual((70, 320, 3), load_image(records[5].left_path).shape)
        self.assertTrue(all(-1.0 <= r.steering <= 1.0 for r in records))
        self.assertEqual(0.0, records[0].speed)
        self.assertGreater(records[-1].speed, 0.0)
        self.assertEqual(36, len(DrivingDataset(
            log, cameras=("center", "left", "right"))))

    def test_deterministic(self):
        """Verify one seed gives byte-identical logs and frames"""
        first = self._synth("a")
        second = self._synth("b")

        with open(first, "rb") as f:
            first_log = f.read()
        with open(second, "rb") as f:
            second_log = f.read()
        self.assertEqual(first_log, second_log)
        image_dir = os.path.join(self.tmp, "a", "IMG")
        names = sorted(os.listdir(image_dir))
        self.assertEqual(36, len(names))
        for name in names:
            with open(os.path.join(image_dir, name), "rb") as f:
                a = f.read()
            with open(os.path.join(self.tmp, "b", "IMG", name), "rb") as f:
                b = f.read()
            self.assertEqual(a, b, name)

    def test_reverse(self):
        log = self._synth("reverse", reverse=True, noise=0.0)

        self.assertEqual(12, len(parse_driving_log(log)))

    def test_no_frames(self):
        with self.assertRaises(ConfigurationError):
            simtrack.synth_dataset(simtrack.stadium_track(), 0, 0, self.tmp)
