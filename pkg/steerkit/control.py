import logging
import threading

import numpy as np

from steerkit.data import decode_jpeg, preprocess
from steerkit.defs import DEFAULT_KP, DEFAULT_TARGET_SPEED, SteerCommand


LOGGER = logging.getLogger(__name__)


def clamp(value, low, high):
    return min(max(value, low), high)


def proportional_throttle(speed,
                          target_speed=DEFAULT_TARGET_SPEED,
                          kp=DEFAULT_KP):
    """
    :param speed: float, current speed in m/s
    :param target_speed: float
    :param kp: float, proportional gain
    :return: float, throttle in [0, 1]
    """
    return clamp(kp * (target_speed - speed), 0.0, 1.0)


class SteeringPredictor:
    """
    Runs a network on raw camera frames. Forward passes are serialized since
    layers keep per-call caches.
    """

    def __init__(self, net, crop_top=0, crop_bottom=0):
        """
        :param net: Network
        :param crop_top: int
        :param crop_bottom: int
        """
        self.net = net
        self.crop_top = crop_top
        self.crop_bottom = crop_bottom
        self._lock = threading.Lock()

    def predict_frame(self, raw_image):
        """
        :param raw_image: numpy.ndarray, (H, W, 3) uint8
        :return: float, unclamped network output
        """
        batch = preprocess(raw_image, self.crop_top, self.crop_bottom)[None]
        with self._lock:
            return float(self.net.predict(batch.astype(np.float32))[0])

    def predict_jpeg(self, payload):
        return self.predict_frame(decode_jpeg(payload))

    def command(self, payload, speed, target_speed=DEFAULT_TARGET_SPEED,
                kp=DEFAULT_KP):
        """
        :param payload: bytes, JPEG frame
        :param speed: float
        :return: SteerCommand, clamped
        """
        return SteerCommand(self.predict_jpeg(payload),
                            proportional_throttle(speed, target_speed, kp))
