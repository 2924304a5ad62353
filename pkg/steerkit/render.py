"""
Schematic camera renderer for the synthetic tracks.

Each pixel below the horizon is cast onto a flat ground plane and coloured
by its distance to the track centerline: road, edge stripe or grass. Rows
above the horizon are sky and ground points beyond the view distance fade
into haze.
"""
import math

import numpy as np

from steerkit.defs import CAMERA_OFFSETS, RAW_HEIGHT, RAW_WIDTH
from steerkit.errors import ConfigurationError


SKY = np.array([120, 170, 225], dtype=np.float64)
HAZE = np.array([175, 190, 200], dtype=np.float64)
ROAD = np.array([105, 105, 110], dtype=np.float64)
STRIPE = np.array([235, 235, 235], dtype=np.float64)
GRASS = np.array([70, 125, 55], dtype=np.float64)


class CameraParams:

    def __init__(self,
                 lateral_offset=0.0,
                 height=RAW_HEIGHT,
                 width=RAW_WIDTH,
                 focal=160.0,
                 horizon=14.0,
                 mount_height=1.6,
                 forward_offset=1.0,
                 max_distance=60.0,
                 stripe_width=0.3):
        """
        :param lateral_offset: float, meters right of the car axis
        :param height: int, image rows
        :param width: int, image columns
        :param focal: float, focal length in pixels
        :param horizon: float, image row of the horizon
        :param mount_height: float, meters above ground
        :param forward_offset: float, meters ahead of the rear axle
        :param max_distance: float, view distance in meters
        :param stripe_width: float, width of the edge stripes in meters
        """
        if height < 1 or width < 1 or focal <= 0 or mount_height <= 0:
            raise ConfigurationError("camera geometry must be positive")
        if not 0 <= horizon < height:
            raise ConfigurationError(f"horizon row {horizon} outside the "
                                     f"image")
        self.lateral_offset = lateral_offset
        self.height = height
        self.width = width
        self.focal = focal
        self.horizon = horizon
        self.mount_height = mount_height
        self.forward_offset = forward_offset
        self.max_distance = max_distance
        self.stripe_width = stripe_width

    @classmethod
    def for_camera(cls, which, **kwargs):
        """
        :param which: str, center | left | right
        :return: CameraParams
        """
        if which not in CAMERA_OFFSETS:
            raise ConfigurationError(f"unknown camera: {which}")
        return cls(lateral_offset=CAMERA_OFFSETS[which], **kwargs)


def render(state, track, seed=None, camera=None):
    """
    :param state: CarState
    :param track: TrackDefinition
    :param seed: int | list of int, drives a global brightness jitter; None
                 renders without jitter
    :param camera: CameraParams, defaults to the center camera
    :return: numpy.ndarray, (height, width, 3) uint8
    """
    camera = camera or CameraParams()
    forward = np.array([math.cos(state.heading), math.sin(state.heading)])
    right = np.array([-forward[1], forward[0]])
    origin = np.array([state.x, state.y]) + \
        camera.forward_offset * forward + camera.lateral_offset * right

    image = np.empty((camera.height, camera.width, 3), dtype=np.float64)
    image[:] = SKY

    rows = np.arange(camera.height) + 0.5 - camera.horizon
    ground = rows > 0
    depth = np.full(camera.height, np.inf)
    depth[ground] = camera.focal * camera.mount_height / rows[ground]
    visible = depth <= camera.max_distance

    image[ground & ~visible] = HAZE

    if visible.any():
        columns = np.arange(camera.width) + 0.5 - camera.width / 2.0
        d = depth[visible][:, None]
        lateral = columns[None, :] * d / camera.focal
        points = origin + d[..., None] * forward + lateral[..., None] * right

        distance = track.distances(
            points.reshape(-1, 2), near=origin,
            radius=camera.max_distance * 1.5 + track.half_width) \
            .reshape(lateral.shape)

        inner = track.half_width - camera.stripe_width
        colors = np.where((distance <= inner)[..., None], ROAD,
                          np.where((distance <= track.half_width)[..., None],
                                   STRIPE, GRASS))
        shade = 1.0 - 0.3 * d / camera.max_distance
        image[visible] = colors * shade[..., None]

    if seed is not None:
        image *= np.random.default_rng(seed).uniform(0.9, 1.1)

    return np.clip(np.rint(image), 0, 255).astype(np.uint8)
