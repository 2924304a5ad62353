import math


#
# DEFS
#
TRAIN = "train"
EVAL = "eval"
MODES = (TRAIN, EVAL)

INPUT_SHAPE = (3, 66, 200)
RAW_HEIGHT = 70
RAW_WIDTH = 320

DEFAULT_EPOCHS = 50
DEFAULT_BATCH_SIZE = 32
DEFAULT_LEARNING_RATE = 1e-3
DEFAULT_VALIDATION_FRACTION = 0.2

PUBLISHED_EPOCHS = 50
PUBLISHED_BATCH_SIZE = 32
PUBLISHED_LEARNING_RATE = 0.1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8

LAKSNET_PARAMETERS = 274017
PILOTNET_PARAMETERS = 252219
PILOTNET_REPORTED_PARAMETERS = 559419

DEFAULT_CORRECTION = 0.2
MAX_ROTATION_DEGREES = 15.0
DEFAULT_ROTATION_DEGREES = 5.0
DEFAULT_CROP_JITTER = 4
JPEG_QUALITY = 95

WHEELBASE = 2.5
MAX_STEER_DEGREES = 25.0
MAX_ACCELERATION = 4.0
DRAG = 0.5
DEFAULT_DT = 0.01
DEFAULT_LOOKAHEAD = 5.0
DEFAULT_EPISODE_CAP = 300.0
DEFAULT_HALF_WIDTH = 4.0
CAMERA_OFFSETS = {"center": 0.0, "left": -1.0, "right": 1.0}

DEFAULT_PORT = 4567
DEFAULT_TARGET_SPEED = 4.47  # m/s, about 10 mph
DEFAULT_KP = 0.5
PING_INTERVAL_MS = 25000
PING_TIMEOUT_MS = 60000

CAMERAS = ("center", "left", "right")

THREADS_ENV = "STEERKIT_THREADS"
SLOW_TESTS_ENV = "STEERKIT_SLOW_TESTS"


#
# STRUCTS
#
class ConvSpec:

    def __init__(self,
                 in_channels,
                 out_channels,
                 kernel_h,
                 kernel_w=None,
                 stride=1):
        """
        Valid (unpadded) cross-correlation geometry.

        :param in_channels: int
        :param out_channels: int
        :param kernel_h: int
        :param kernel_w: int, defaults to kernel_h
        :param stride: int
        """
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_h = kernel_h
        self.kernel_w = kernel_h if kernel_w is None else kernel_w
        self.stride = stride

    def output_extent(self, height, width):
        """
        :param height: int
        :param width: int
        :return: tuple, (out_height, out_width), may contain values < 1
        """
        return ((height - self.kernel_h) // self.stride + 1,
                (width - self.kernel_w) // self.stride + 1)

    def __repr__(self):
        return (f"ConvSpec({self.in_channels}->{self.out_channels}, "
                f"{self.kernel_h}x{self.kernel_w}, stride={self.stride})")


class DrivingLogRecord:

    def __init__(self,
                 center_path,
                 left_path,
                 right_path,
                 steering,
                 throttle,
                 brake,
                 speed):
        """
        One row of a driving log. Steering is positive for a right turn.

        :param center_path: str
        :param left_path: str
        :param right_path: str
        :param steering: float
        :param throttle: float
        :param brake: float
        :param speed: float
        """
        self.center_path = center_path
        self.left_path = left_path
        self.right_path = right_path
        self.steering = steering
        self.throttle = throttle
        self.brake = brake
        self.speed = speed

    def path_for(self, camera):
        """
        :param camera: str, one of CAMERAS
        :return: str
        """
        return {"center": self.center_path,
                "left": self.left_path,
                "right": self.right_path}[camera]

    def __repr__(self):
        return (f"DrivingLogRecord({self.center_path!r}, "
                f"steering={self.steering}, speed={self.speed})")


class Sample:

    def __init__(self, image, label, raw=None, crop=(0, 0)):
        """
        :param image: numpy.ndarray, (3, 66, 200) in [-1, 1]
        :param label: float
        :param raw: numpy.ndarray, optional (H, W, 3) uint8 source frame,
                    needed for rotation and crop jitter
        :param crop: tuple, (crop_top, crop_bottom) used to derive image
        """
        self.image = image
        self.label = label
        self.raw = raw
        self.crop = crop


class EvalReport:

    def __init__(self, actual, predicted):
        """
        :param actual: list of float
        :param predicted: list of float
        """
        if len(actual) != len(predicted):
            raise ValueError("actual and predicted differ in length")

        self.actual = [float(a) for a in actual]
        self.predicted = [float(p) for p in predicted]
        self.n = len(self.actual)
        self.mse = (math.fsum((a - p) ** 2
                              for a, p in zip(self.actual, self.predicted))
                    / self.n) if self.n else 0.0

    def table(self):
        """
        :return: str, one "actual predicted" row per sample and an MSE row
        """
        lines = [f"{'actual':>10} {'predicted':>10}"]
        lines.extend(f"{a:>10.3f} {p:>10.3f}"
                     for a, p in zip(self.actual, self.predicted))
        lines.append(f"{'MSE':>10} {self.mse:>10.3f}")
        return "\n".join(lines)


class EpochMetrics:

    def __init__(self, epoch, train_mse, val_mse, seconds, learning_rate):
        """
        :param epoch: int, 1-based
        :param train_mse: float
        :param val_mse: float
        :param seconds: float
        :param learning_rate: float
        """
        self.epoch = epoch
        self.train_mse = train_mse
        self.val_mse = val_mse
        self.seconds = seconds
        self.learning_rate = learning_rate

    def as_dict(self):
        return {"epoch": self.epoch,
                "train_mse": self.train_mse,
                "val_mse": self.val_mse,
                "lr": self.learning_rate,
                "seconds": self.seconds}

    def __eq__(self, other):
        return (isinstance(other, EpochMetrics) and
                self.as_dict() == other.as_dict())

    def __repr__(self):
        return f"EpochMetrics({self.as_dict()})"


class TelemetryMessage:

    def __init__(self, steering_angle, throttle, speed, image):
        """
        :param steering_angle: float
        :param throttle: float
        :param speed: float
        :param image: str, base64 encoded JPEG center-camera frame
        """
        self.steering_angle = steering_angle
        self.throttle = throttle
        self.speed = speed
        self.image = image

    @classmethod
    def from_payload(cls, payload):
        """
        :param payload: dict, decoded "telemetry" event data
        :return: TelemetryMessage
        """
        return cls(float(payload.get("steering_angle", 0.0)),
                   float(payload.get("throttle", 0.0)),
                   max(float(payload["speed"]), 0.0),
                   payload["image"])

    def as_payload(self):
        return {"steering_angle": repr(float(self.steering_angle)),
                "throttle": repr(float(self.throttle)),
                "speed": repr(float(self.speed)),
                "image": self.image}


def _bounded(value, low, high):
    value = float(value)
    if not math.isfinite(value):
        return 0.0
    return min(max(value, low), high)


class SteerCommand:

    def __init__(self, steering_angle, throttle):
        """
        Values are clamped on construction, steering to [-1, 1] and
        throttle to [0, 1]. Non-finite values become 0.

        :param steering_angle: float
        :param throttle: float
        """
        self.steering_angle = _bounded(steering_angle, -1.0, 1.0)
        self.throttle = _bounded(throttle, 0.0, 1.0)

    def as_payload(self):
        return {"steering_angle": repr(self.steering_angle),
                "throttle": repr(self.throttle)}

    @classmethod
    def from_payload(cls, payload):
        return cls(float(payload["steering_angle"]),
                   float(payload["throttle"]))
