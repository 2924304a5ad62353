import unittest

import numpy as np

from steerkit import simtrack
from steerkit.render import SKY, CameraParams, render
from steerkit.errors import ConfigurationError


def _road_center(image, row=-1):
    pixels = image[row].astype(int)
    grey = (np.abs(pixels[:, 0] - pixels[:, 1]) < 12) & (pixels[:, 0] < 180)
    return np.flatnonzero(grey).mean()


class TestRender(unittest.TestCase):

    def setUp(self):
        self.track = simtrack.stadium_track(straight=400.0, radius=100.0)
        self.state = simtrack.CarState(100.0, 0.0, 0.0, 0.0)

    def test_shape_and_sky(self):
        image = render(self.state, self.track)

        self.assertEqual((70, 320, 3), image.shape)
        self.assertEqual(np.uint8, image.dtype)
        np.testing.assert_array_equal(np.broadcast_to(SKY, (320, 3)),
                                      image[0])

    def test_deterministic(self):
        first = render(self.state, self.track, seed=[4, 2])
        second = render(self.state, self.track, seed=[4, 2])
        other = render(self.state, self.track, seed=[4, 3])

        np.testing.assert_array_equal(first, second)
        self.assertFalse(np.array_equal(first, other))

    def test_centered_on_straight_is_symmetric(self):
        """A car on the centerline of a straight sees a mirrored road"""
        image = render(self.state, self.track)

        np.testing.assert_array_equal(image, image[:, ::-1])

    def test_left_camera_sees_road_further_right(self):
        center = render(self.state, self.track,
                        camera=CameraParams.for_camera("center"))
        left = render(self.state, self.track,
                      camera=CameraParams.for_camera("left"))
        right = render(self.state, self.track,
                       camera=CameraParams.for_camera("right"))

        self.assertAlmostEqual(159.5, _road_center(center), delta=1.0)
        self.assertGreater(_road_center(left), _road_center(center))
        self.assertLess(_road_center(right), _road_center(center))

    def test_off_road_is_grass(self):
        state = simtrack.CarState(100.0, -30.0, 0.0, 0.0)

        image = render(state, self.track).astype(int)

        bottom = image[-1]
        self.assertTrue(np.all(bottom[:, 1] > bottom[:, 0]))

    def test_camera_validation(self):
        with self.assertRaises(ConfigurationError):
            CameraParams(horizon=80.0)
        with self.assertRaises(ConfigurationError):
            CameraParams.for_camera("roof")
