"""
Desk-scale stand-in for the driving simulator: closed tracks, a kinematic
bicycle car, a pure-pursuit labeller and the closed-loop episode runner.

World coordinates are meters with x pointing east and y pointing south, so
a positive heading change is a right turn, matching the steering sign.
"""
import json
import logging
import math
import os

from abc import ABC, abstractmethod

import numpy as np

from steerkit.control import clamp, proportional_throttle
from steerkit.data import IMAGE_DIR, encode_jpeg, write_driving_log
from steerkit.defs import (
    DEFAULT_DT,
    DEFAULT_EPISODE_CAP,
    DEFAULT_HALF_WIDTH,
    DEFAULT_KP,
    DEFAULT_LOOKAHEAD,
    DEFAULT_TARGET_SPEED,
    DRAG,
    MAX_ACCELERATION,
    MAX_STEER_DEGREES,
    WHEELBASE,
    DrivingLogRecord,
    SteerCommand,
)
from steerkit.errors import (
    ConfigurationError,
    EpisodeError,
    LabelingError,
)
from steerkit.render import CameraParams, render


LOGGER = logging.getLogger(__name__)

_BLOCK = 2048


#
# TRACKS
#
class TrackDefinition:

    def __init__(self, name, centerline, half_width=DEFAULT_HALF_WIDTH):
        """
        :param name: str
        :param centerline: array-like, (N, 2) closed loop of points in
                           meters, the last point joins the first
        :param half_width: float, meters from centerline to edge
        """
        points = np.asarray(centerline, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 2:
            raise ConfigurationError(f"centerline must be (N, 2), got "
                                     f"{points.shape}")
        if len(points) < 8:
            raise ConfigurationError(f"centerline needs at least 8 points, "
                                     f"got {len(points)}")
        if half_width <= 0:
            raise ConfigurationError(f"half width must be > 0, got "
                                     f"{half_width}")

        self.name = name
        self.half_width = float(half_width)
        self.centerline = points

        self._a = points
        self._d = np.roll(points, -1, axis=0) - points
        self._len = np.hypot(self._d[:, 0], self._d[:, 1])
        if np.any(self._len == 0):
            raise ConfigurationError(
                f"centerline repeats point {int(np.argmin(self._len))}")
        self._cum = np.concatenate([[0.0], np.cumsum(self._len)])
        self.length = float(self._cum[-1])

        crossing = self._first_crossing()
        if crossing is not None:
            raise ConfigurationError(
                f"centerline segments {crossing[0]} and {crossing[1]} "
                f"intersect")

    def _first_crossing(self):
        a, b = self._a, self._a + self._d
        n = len(a)

        def orient(p, q, r):
            return (q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1]) - \
                (q[..., 1] - p[..., 1]) * (r[..., 0] - p[..., 0])

        for start in range(0, n, 256):
            i = np.arange(start, min(start + 256, n))[:, None]
            j = np.arange(n)[None, :]
            ai, bi, aj, bj = a[i], b[i], a[j], b[j]
            o1, o2 = orient(ai, bi, aj), orient(ai, bi, bj)
            o3, o4 = orient(aj, bj, ai), orient(aj, bj, bi)
            hit = (o1 * o2 < 0) & (o3 * o4 < 0)
            gap = np.abs(i - j)
            hit &= (gap > 1) & (gap < n - 1)
            if hit.any():
                row, col = np.argwhere(hit)[0]
                return int(i[row, 0]), int(col)
        return None

    def reversed(self):
        return TrackDefinition(f"{self.name}-reverse", self.centerline[::-1],
                               self.half_width)

    def as_dict(self):
        return {"name": self.name,
                "half_width": self.half_width,
                "centerline": self.centerline.tolist()}

    def heading_at(self, index):
        dx, dy = self._d[index % len(self._d)]
        return math.atan2(dy, dx)

    def point_at(self, distance):
        """
        :param distance: float, arc length from the first point, wraps
        :return: numpy.ndarray, (2,)
        """
        s = distance % self.length
        k = min(int(np.searchsorted(self._cum, s, side="right")) - 1,
                len(self._len) - 1)
        return self._a[k] + (s - self._cum[k]) / self._len[k] * self._d[k]

    def project(self, x, y):
        """
        :return: tuple, (segment index, arc length of the foot point, signed
                 offset, positive right of the travel direction)
        """
        p = np.array([x, y])
        diff = p - self._a
        t = np.clip(np.einsum("ij,ij->i", diff, self._d) / self._len ** 2,
                    0.0, 1.0)
        rel = diff - t[:, None] * self._d
        dist = np.hypot(rel[:, 0], rel[:, 1])
        k = int(np.argmin(dist))
        cross = self._d[k, 0] * diff[k, 1] - self._d[k, 1] * diff[k, 0]
        sign = 1.0 if cross > 0 else -1.0 if cross < 0 else 0.0
        return k, float(self._cum[k] + t[k] * self._len[k]), \
            sign * float(dist[k])

    def distances(self, points, near=None, radius=None):
        """
        Unsigned distance from each point to the centerline.

        :param points: numpy.ndarray, (M, 2)
        :param near: array-like, (2,), only segments within radius of this
                     point are considered
        :param radius: float
        :return: numpy.ndarray, (M,), inf where no segment is considered
        """
        a, d, len2 = self._a, self._d, self._len ** 2
        if near is not None and radius is not None:
            keep = self._segment_distances(np.asarray(near)[None], a, d,
                                           len2)[0] <= radius
            a, d, len2 = a[keep], d[keep], len2[keep]
        out = np.full(len(points), np.inf)
        if len(a) == 0:
            return out
        for start in range(0, len(points), _BLOCK):
            block = points[start:start + _BLOCK]
            out[start:start + _BLOCK] = \
                self._segment_distances(block, a, d, len2).min(axis=1)
        return out

    @staticmethod
    def _segment_distances(points, a, d, len2):
        diff = points[:, None, :] - a[None, :, :]
        t = np.clip(np.einsum("mkj,kj->mk", diff, d) / len2, 0.0, 1.0)
        rel = diff - t[..., None] * d
        return np.hypot(rel[..., 0], rel[..., 1])


def stadium_track(straight=60.0,
                  radius=20.0,
                  half_width=DEFAULT_HALF_WIDTH,
                  spacing=1.0,
                  name="oval"):
    """
    Two straights joined by half circles, driven clockwise on the map so
    every bend is a right turn.
    """
    n_straight = max(int(math.ceil(straight / spacing)), 1)
    n_arc = max(int(math.ceil(math.pi * radius / spacing)), 4)
    along = np.arange(n_straight) / n_straight * straight
    angles = np.arange(n_arc) / n_arc * math.pi

    bottom = np.stack([along, np.zeros(n_straight)], axis=1)
    east = np.stack([straight + radius * np.sin(angles),
                     radius - radius * np.cos(angles)], axis=1)
    top = np.stack([straight - along, np.full(n_straight, 2 * radius)],
                   axis=1)
    west = np.stack([-radius * np.sin(angles),
                     radius + radius * np.cos(angles)], axis=1)
    return TrackDefinition(name, np.concatenate([bottom, east, top, west]),
                           half_width)


def s_curve_track(radius=30.0,
                  amplitude=0.35,
                  half_width=DEFAULT_HALF_WIDTH,
                  spacing=1.0,
                  name="s_curve"):
    """
    The closed polar curve r = radius (1 + amplitude cos 2phi). Above an
    amplitude of 0.2 it has two concave bays, so right bends alternate with
    left ones.
    """
    dense = np.linspace(0.0, 2 * math.pi, 4096, endpoint=False)
    r = radius * (1 + amplitude * np.cos(2 * dense))
    loop = np.stack([r * np.cos(dense), r * np.sin(dense)], axis=1)
    perimeter = np.sum(np.hypot(*(np.roll(loop, -1, axis=0) - loop).T))

    phi = np.linspace(0.0, 2 * math.pi,
                      max(int(math.ceil(perimeter / spacing)), 8),
                      endpoint=False)
    r = radius * (1 + amplitude * np.cos(2 * phi))
    return TrackDefinition(name, np.stack([r * np.cos(phi), r * np.sin(phi)],
                                          axis=1), half_width)


TRACKS = {"oval": stadium_track,
          "s_curve": s_curve_track}


def load_track(path):
    """
    :param path: str, JSON with name, half_width and centerline
    :return: TrackDefinition
    """
    with open(path, encoding="utf-8") as f:
        try:
            document = json.load(f)
        except ValueError as e:
            raise ConfigurationError(f"{path} is not a JSON track: {e}")
    try:
        return TrackDefinition(document["name"], document["centerline"],
                               document["half_width"])
    except (KeyError, TypeError) as e:
        raise ConfigurationError(f"{path} misses track field {e}")


def save_track(track, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(track.as_dict(), f)


def resolve_track(name_or_path):
    """
    :param name_or_path: str, a bundled track name or a track file
    :return: TrackDefinition
    """
    if name_or_path in TRACKS:
        return TRACKS[name_or_path]()
    if not os.path.exists(name_or_path):
        raise ConfigurationError(
            f"unknown track {name_or_path!r}, expected a file or one of "
            f"{', '.join(sorted(TRACKS))}")
    return load_track(name_or_path)


#
# VEHICLE
#
class VehicleParams:

    def __init__(self,
                 max_steer_deg=MAX_STEER_DEGREES,
                 max_acceleration=MAX_ACCELERATION,
                 drag=DRAG):
        """
        :param max_steer_deg: float, wheel angle at full steering
        :param max_acceleration: float, m/s^2 at full throttle
        :param drag: float, 1/s linear drag
        """
        if not 0 < max_steer_deg < 90:
            raise ConfigurationError(f"max steer must be in (0, 90) degrees, "
                                     f"got {max_steer_deg}")
        if max_acceleration < 0 or drag < 0:
            raise ConfigurationError("acceleration and drag must be >= 0")
        self.max_steer = math.radians(max_steer_deg)
        self.max_acceleration = max_acceleration
        self.drag = drag


class CarState:

    def __init__(self, x, y, heading, speed, wheelbase=WHEELBASE):
        """
        :param x: float, meters east
        :param y: float, meters south
        :param heading: float, radians, 0 faces east
        :param speed: float, m/s
        :param wheelbase: float, meters
        """
        self.x = x
        self.y = y
        self.heading = heading
        self.speed = speed
        self.wheelbase = wheelbase

    def __repr__(self):
        return (f"CarState(x={self.x:.3f}, y={self.y:.3f}, "
                f"heading={self.heading:.4f}, speed={self.speed:.3f})")


def wrap_angle(angle):
    """Wraps to (-pi, pi]."""
    return math.pi - (math.pi - angle) % (2 * math.pi)


def start_state(track, index=0, speed=0.0):
    x, y = track.centerline[index % len(track.centerline)]
    return CarState(float(x), float(y), track.heading_at(index), speed)


def step(state, steering, throttle, dt=DEFAULT_DT, params=None):
    """
    Kinematic bicycle update with explicit Euler integration.

    :param state: CarState
    :param steering: float, clamped to [-1, 1], positive turns right
    :param throttle: float, clamped to [0, 1]
    :param dt: float, in (0, 0.1]
    :param params: VehicleParams
    :return: CarState
    """
    if not 0 < dt <= 0.1:
        raise ConfigurationError(f"dt must be in (0, 0.1], got {dt}")
    params = params or VehicleParams()
    delta = params.max_steer * clamp(steering, -1.0, 1.0)
    throttle = clamp(throttle, 0.0, 1.0)

    v = state.speed
    x = state.x + v * math.cos(state.heading) * dt
    y = state.y + v * math.sin(state.heading) * dt
    heading = wrap_angle(state.heading +
                         v / state.wheelbase * math.tan(delta) * dt)
    speed = max(v + (params.max_acceleration * throttle -
                     params.drag * v) * dt, 0.0)
    return CarState(x, y, heading, speed, state.wheelbase)


def lateral_offset(state, track):
    """
    :return: float, signed meters from the centerline, positive to the
             right of the travel direction
    """
    return track.project(state.x, state.y)[2]


def is_off_track(state, track):
    return abs(lateral_offset(state, track)) > track.half_width


def oracle_steering(state,
                    track,
                    lookahead=DEFAULT_LOOKAHEAD,
                    params=None):
    """
    Pure pursuit towards the centerline point one lookahead ahead of the
    car's foot point.

    :param state: CarState
    :param track: TrackDefinition
    :param lookahead: float, meters along the centerline
    :param params: VehicleParams
    :return: float, steering in [-1, 1]
    """
    params = params or VehicleParams()
    _, s, offset = track.project(state.x, state.y)
    if abs(offset) > 2 * track.half_width:
        raise LabelingError(f"car is {offset:.2f} m off the centerline of "
                            f"{track.name}")

    tx, ty = track.point_at(s + lookahead)
    dx, dy = tx - state.x, ty - state.y
    distance = math.hypot(dx, dy)
    alpha = wrap_angle(math.atan2(dy, dx) - state.heading)
    delta = math.atan2(2.0 * state.wheelbase * math.sin(alpha), distance)
    return clamp(delta / params.max_steer, -1.0, 1.0)


#
# POLICIES
#
class Observation:
    """
    What a policy sees at one control tick. The camera frame is rendered
    only when asked for.
    """

    def __init__(self, state, time, track, seed=None, camera=None):
        """
        :param state: CarState
        :param time: float, simulated seconds since the episode started
        :param track: TrackDefinition
        :param seed: render seed
        :param camera: CameraParams
        """
        self.state = state
        self.time = time
        self.track = track
        self._seed = seed
        self._camera = camera
        self._frame = None
        self._jpeg = None

    @property
    def frame(self):
        if self._frame is None:
            self._frame = render(self.state, self.track, self._seed,
                                 self._camera)
        return self._frame

    @property
    def jpeg(self):
        if self._jpeg is None:
            self._jpeg = encode_jpeg(self.frame)
        return self._jpeg


class Policy(ABC):

    @abstractmethod
    def act(self, observation):
        """
        :param observation: Observation
        :return: float steering, or a SteerCommand to also set the throttle
        """
        pass

    def close(self):
        pass


class OraclePolicy(Policy):

    def __init__(self, lookahead=DEFAULT_LOOKAHEAD, params=None):
        self.lookahead = lookahead
        self.params = params

    def act(self, observation):
        return oracle_steering(observation.state, observation.track,
                               self.lookahead, self.params)


class ConstantPolicy(Policy):

    def __init__(self, steering=0.0):
        self.steering = steering

    def act(self, observation):
        return self.steering


class NetworkPolicy(Policy):
    """
    Drives from the JPEG-encoded center frame, the same bytes the drive
    server receives from a simulator.
    """

    def __init__(self,
                 predictor,
                 target_speed=DEFAULT_TARGET_SPEED,
                 kp=DEFAULT_KP):
        """
        :param predictor: control.SteeringPredictor
        :param target_speed: float
        :param kp: float
        """
        self.predictor = predictor
        self.target_speed = target_speed
        self.kp = kp

    def act(self, observation):
        return self.predictor.command(observation.jpeg,
                                      observation.state.speed,
                                      self.target_speed, self.kp)


#
# EPISODES
#
class EpisodeResult:

    def __init__(self, survived_seconds, mean_speed, off_track, trace):
        """
        :param survived_seconds: float
        :param mean_speed: float, m/s
        :param off_track: bool
        :param trace: list of CarState, one per simulated step
        """
        self.survived_seconds = survived_seconds
        self.mean_speed = mean_speed
        self.off_track = off_track
        self.trace = trace

    def as_dict(self):
        return {"survived_seconds": self.survived_seconds,
                "mean_speed": self.mean_speed,
                "off_track": self.off_track,
                "steps": len(self.trace)}


def run_episode(policy,
                track,
                cap_seconds=DEFAULT_EPISODE_CAP,
                dt=DEFAULT_DT,
                target_speed=DEFAULT_TARGET_SPEED,
                kp=DEFAULT_KP,
                params=None,
                start_index=0,
                seed=None,
                control_period=None):
    """
    Closed loop of observe, act and step until the car leaves the track or
    the cap is reached.

    :param policy: Policy
    :param track: TrackDefinition
    :param cap_seconds: float, > 0
    :param dt: float, integration step
    :param target_speed: float, for the proportional throttle
    :param kp: float
    :param params: VehicleParams
    :param start_index: int, centerline point the car starts on at rest
    :param seed: render seed for the observations
    :param control_period: float, seconds between policy queries, the
                           command is held in between; defaults to dt
    :return: EpisodeResult
    """
    if not cap_seconds > 0:
        raise ConfigurationError(f"episode cap must be > 0, got "
                                 f"{cap_seconds}")
    n_steps = int(round(cap_seconds / dt))
    every = 1 if control_period is None else \
        max(int(round(control_period / dt)), 1)

    state = start_state(track, start_index)
    trace = []
    command = None
    off_track = False
    for k in range(n_steps):
        sim_time = k * dt
        if k % every == 0:
            try:
                command = policy.act(Observation(state, sim_time, track,
                                                 seed))
            except Exception as e:
                raise EpisodeError(
                    f"policy failed at t={sim_time:.2f}s: {e}",
                    sim_time=sim_time) from e

        if isinstance(command, SteerCommand):
            steering, throttle = command.steering_angle, command.throttle
        else:
            steering = float(command)
            throttle = proportional_throttle(state.speed, target_speed, kp)

        state = step(state, steering, throttle, dt, params)
        trace.append(state)
        if is_off_track(state, track):
            off_track = True
            break

    survived = min(len(trace) * dt, cap_seconds)
    mean_speed = float(np.mean([s.speed for s in trace])) if trace else 0.0
    LOGGER.info(f"episode on {track.name} ended after {survived:.2f}s, "
                f"{'off track' if off_track else 'cap reached'}")
    return EpisodeResult(survived, mean_speed, off_track, trace)


#
# DATASET SYNTHESIS
#
def synth_dataset(track,
                  frames,
                  seed,
                  out_dir,
                  noise=0.1,
                  reverse=False,
                  frame_dt=0.1,
                  dt=DEFAULT_DT,
                  target_speed=DEFAULT_TARGET_SPEED,
                  kp=DEFAULT_KP,
                  params=None,
                  lookahead=DEFAULT_LOOKAHEAD):
    """
    Drives the oracle with Gaussian steering noise and records the three
    cameras at every frame, labelled with the clean oracle steering. Writes
    out_dir/IMG/*.jpg and out_dir/driving_log.csv.

    :param track: TrackDefinition
    :param frames: int, >= 1
    :param seed: int
    :param out_dir: str
    :param noise: float, standard deviation of the executed steering noise
    :param reverse: bool, drive the track backwards
    :param frame_dt: float, simulated seconds between recorded frames
    :return: str, path of the driving log
    """
    if frames < 1:
        raise ConfigurationError(f"frames must be >= 1, got {frames}")
    if reverse:
        track = track.reversed()

    image_dir = os.path.join(out_dir, IMAGE_DIR)
    os.makedirs(image_dir, exist_ok=True)

    rng = np.random.default_rng(seed)
    cameras = {which: CameraParams.for_camera(which)
               for which in ("center", "left", "right")}
    substeps = max(int(round(frame_dt / dt)), 1)
    state = start_state(track, 0)
    records = []

    for tick in range(frames):
        try:
            label = oracle_steering(state, track, lookahead, params)
        except LabelingError:
            restart = int(rng.integers(len(track.centerline)))
            LOGGER.debug(f"frame {tick}: car lost, restarting at point "
                         f"{restart}")
            state = start_state(track, restart, state.speed)
            label = oracle_steering(state, track, lookahead, params)

        paths = []
        for which, camera in cameras.items():
            name = f"{which}_{tick:06d}.jpg"
            frame = render(state, track, [seed, tick], camera)
            with open(os.path.join(image_dir, name), "wb") as f:
                f.write(encode_jpeg(frame))
            paths.append(f"{IMAGE_DIR}/{name}")

        throttle = proportional_throttle(state.speed, target_speed, kp)
        records.append(DrivingLogRecord(*paths, label, throttle, 0.0,
                                        state.speed))

        executed = clamp(label + noise * rng.standard_normal(), -1.0, 1.0)
        for _ in range(substeps):
            state = step(state, executed, throttle, dt, params)

    log_path = os.path.join(out_dir, "driving_log.csv")
    write_driving_log(records, log_path)
    LOGGER.info(f"synthesized {frames} frames on {track.name} into "
                f"{out_dir}")
    return log_path
