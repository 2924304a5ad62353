import csv
import io
import logging
import math
import os

from collections import deque
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from PIL import Image

from steerkit.defs import (
    CAMERAS,
    DEFAULT_CORRECTION,
    DEFAULT_CROP_JITTER,
    DEFAULT_ROTATION_DEGREES,
    INPUT_SHAPE,
    JPEG_QUALITY,
    MAX_ROTATION_DEGREES,
    THREADS_ENV,
    DrivingLogRecord,
    Sample,
)
from steerkit.errors import ConfigurationError, ParseError


LOGGER = logging.getLogger(__name__)

LOG_COLUMNS = 7
IMAGE_DIR = "IMG"


#
# DRIVING LOG
#
def _image_path(recorded, base_dir):
    # Recorded paths are often absolute and from another machine, possibly
    # a Windows one.
    name = recorded.replace("\\", "/").rsplit("/", 1)[-1]
    return os.path.join(base_dir, name)


def parse_driving_log(path):
    """
    Parses a 7-column driving log (center, left, right, steering, throttle,
    brake, speed) without a header row. Image paths are resolved by basename
    against the IMG directory next to the log, or the log's own directory
    when there is none.

    :param path: str
    :return: list of DrivingLogRecord
    """
    log_dir = os.path.dirname(os.path.abspath(path))
    image_dir = os.path.join(log_dir, IMAGE_DIR)
    if not os.path.isdir(image_dir):
        image_dir = log_dir

    records = []
    with open(path, newline="", encoding="utf-8") as f:
        for row_number, row in enumerate(csv.reader(f), start=1):
            if not row:
                continue
            if len(row) != LOG_COLUMNS:
                raise ParseError(
                    f"row {row_number}: expected {LOG_COLUMNS} columns, "
                    f"found {len(row)}", row=row_number)

            paths = []
            for column, value in enumerate(row[:3], start=1):
                if not value.strip():
                    raise ParseError(f"row {row_number}: empty image path",
                                     row=row_number, column=column)
                paths.append(_image_path(value.strip(), image_dir))

            numbers = []
            for column, value in enumerate(row[3:], start=4):
                try:
                    number = float(value)
                except ValueError:
                    raise ParseError(
                        f"row {row_number}, column {column}: not a number: "
                        f"{value!r}", row=row_number, column=column)
                if not math.isfinite(number):
                    raise ParseError(
                        f"row {row_number}, column {column}: not finite",
                        row=row_number, column=column)
                numbers.append(number)

            records.append(DrivingLogRecord(*paths, *numbers))

    LOGGER.debug(f"parsed {len(records)} records from {path}")
    return records


def write_driving_log(records, path):
    """
    Writes records in the parse_driving_log layout with four decimals.

    :param records: iterable of DrivingLogRecord
    :param path: str
    """
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        for r in records:
            writer.writerow([r.center_path, r.left_path, r.right_path] +
                            [f"{value:.4f}" for value in
                             (r.steering, r.throttle, r.brake, r.speed)])


def select_camera(record, which, correction=DEFAULT_CORRECTION):
    """
    Left-camera frames look like a car displaced to the left, so they are
    labelled with extra right steering, and the right camera mirrors that.

    :param record: DrivingLogRecord
    :param which: str, center | left | right
    :param correction: float, >= 0
    :return: tuple, (image path, label)
    """
    if which not in CAMERAS:
        raise ConfigurationError(f"unknown camera: {which}")
    if correction < 0:
        raise ConfigurationError(f"camera correction must be >= 0, got "
                                 f"{correction}")

    label = record.steering
    if which == "left":
        label += correction
    elif which == "right":
        label -= correction
    return record.path_for(which), label


#
# IMAGES
#
def _as_rgb(image):
    if image.mode != "RGB":
        image = image.convert("RGB")
    return np.asarray(image, dtype=np.uint8)


def load_image(path):
    """
    :param path: str
    :return: numpy.ndarray, (H, W, 3) uint8
    """
    with Image.open(path) as image:
        return _as_rgb(image)


def decode_jpeg(payload):
    """
    :param payload: bytes
    :return: numpy.ndarray, (H, W, 3) uint8
    """
    with Image.open(io.BytesIO(payload)) as image:
        return _as_rgb(image)


def encode_jpeg(frame, quality=JPEG_QUALITY):
    buffer = io.BytesIO()
    Image.fromarray(frame).save(buffer, format="JPEG", quality=quality)
    return buffer.getvalue()


def preprocess(raw_image,
               crop_top=0,
               crop_bottom=0,
               crop_left=0,
               crop_right=0):
    """
    Crops, resizes bilinearly to 66x200, moves channels first and scales
    pixels to [-1, 1].

    :param raw_image: numpy.ndarray, (H, W, 3) uint8
    :param crop_top: int, rows removed at the top
    :param crop_bottom: int, rows removed at the bottom
    :param crop_left: int
    :param crop_right: int
    :return: numpy.ndarray, (3, 66, 200) float32
    """
    raw_image = np.asarray(raw_image)
    if raw_image.ndim != 3 or raw_image.shape[2] != 3:
        raise ConfigurationError(f"expected an (H, W, 3) image, got "
                                 f"{raw_image.shape}")
    height, width = raw_image.shape[:2]
    if min(crop_top, crop_bottom, crop_left, crop_right) < 0:
        raise ConfigurationError("crop margins must be >= 0")
    if height < crop_top + crop_bottom + 1 or \
            width < crop_left + crop_right + 1:
        raise ConfigurationError(
            f"crop ({crop_top}, {crop_bottom}, {crop_left}, {crop_right}) "
            f"leaves nothing of a {height}x{width} image")

    cropped = raw_image[crop_top:height - crop_bottom,
                        crop_left:width - crop_right]
    _, out_h, out_w = INPUT_SHAPE
    cropped = np.ascontiguousarray(cropped, dtype=np.uint8)
    resized = Image.fromarray(cropped).resize((out_w, out_h),
                                              Image.Resampling.BILINEAR)
    pixels = np.asarray(resized, dtype=np.float32)
    return np.ascontiguousarray((pixels / 127.5 - 1.0).transpose(2, 0, 1))


def rotate_frame(raw_image, degrees):
    """
    Rotates about the image center with bilinear sampling, filling the
    uncovered corners with black.

    :param raw_image: numpy.ndarray, (H, W, 3) uint8
    :param degrees: float, counter-clockwise
    :return: numpy.ndarray
    """
    if degrees == 0:
        return raw_image.copy()
    rotated = Image.fromarray(raw_image) \
        .rotate(degrees, resample=Image.Resampling.BILINEAR)
    return np.asarray(rotated, dtype=np.uint8)


#
# AUGMENTATION
#
class AugmentConfig:

    def __init__(self,
                 flip_probability=0.5,
                 max_rotation_deg=DEFAULT_ROTATION_DEGREES,
                 max_crop_jitter=DEFAULT_CROP_JITTER):
        """
        :param flip_probability: float, in [0, 1]
        :param max_rotation_deg: float, in [0, 15]
        :param max_crop_jitter: int, pixels per side, in [0, 4]
        """
        if not 0.0 <= flip_probability <= 1.0:
            raise ConfigurationError(f"flip probability must be in [0, 1], "
                                     f"got {flip_probability}")
        if not 0.0 <= max_rotation_deg <= MAX_ROTATION_DEGREES:
            raise ConfigurationError(
                f"rotation bound must be in [0, {MAX_ROTATION_DEGREES}], "
                f"got {max_rotation_deg}")
        if not 0 <= max_crop_jitter <= DEFAULT_CROP_JITTER:
            raise ConfigurationError(
                f"crop jitter must be in [0, {DEFAULT_CROP_JITTER}], got "
                f"{max_crop_jitter}")

        self.flip_probability = flip_probability
        self.max_rotation_deg = max_rotation_deg
        self.max_crop_jitter = max_crop_jitter

    def as_dict(self):
        return {"flip_probability": self.flip_probability,
                "max_rotation_deg": self.max_rotation_deg,
                "max_crop_jitter": self.max_crop_jitter}


def flip_sample(sample):
    """Mirrors the frame left to right and negates the steering label."""
    raw = None if sample.raw is None else \
        np.ascontiguousarray(sample.raw[:, ::-1])
    return Sample(np.ascontiguousarray(sample.image[:, :, ::-1]),
                  -sample.label, raw=raw, crop=sample.crop)


def augment(sample, rng, config):
    """
    :param sample: Sample
    :param rng: numpy.random.Generator
    :param config: AugmentConfig
    :return: Sample
    """
    # Draw every variate up front so the stream does not depend on which
    # transforms end up applied.
    flip = rng.random() < config.flip_probability
    degrees = float(rng.uniform(-config.max_rotation_deg,
                                config.max_rotation_deg))
    jitter = rng.integers(0, config.max_crop_jitter, size=4, endpoint=True)

    if flip:
        sample = flip_sample(sample)
    if sample.raw is None or (degrees == 0 and not jitter.any()):
        return sample

    raw = rotate_frame(sample.raw, degrees)
    top, bottom = sample.crop
    height = raw.shape[0]
    top_j, bottom_j, left_j, right_j = (int(j) for j in jitter)
    if height < top + top_j + bottom + bottom_j + 1:
        top_j = bottom_j = 0
    image = preprocess(raw, top + top_j, bottom + bottom_j, left_j, right_j)
    return Sample(image, sample.label, raw=sample.raw, crop=sample.crop)


#
# DATASET
#
class DrivingDataset:
    """
    A lazy sequence of Samples over one or more driving logs. Each record
    expands into one sample per selected camera; frames are read from disk
    on access.
    """

    def __init__(self,
                 logs,
                 cameras=("center",),
                 correction=DEFAULT_CORRECTION,
                 crop=(0, 0)):
        """
        :param logs: str | list of str, driving log paths
        :param cameras: tuple of str
        :param correction: float, side-camera label correction
        :param crop: tuple, (crop_top, crop_bottom)
        """
        if isinstance(logs, str):
            logs = [logs]
        for camera in cameras:
            if camera not in CAMERAS:
                raise ConfigurationError(f"unknown camera: {camera}")

        self.cameras = tuple(cameras)
        self.correction = correction
        self.crop = tuple(crop)
        self.entries = []
        for log in logs:
            for record in parse_driving_log(log):
                for camera in self.cameras:
                    self.entries.append(select_camera(record, camera,
                                                      correction))

        LOGGER.info(f"dataset of {len(self.entries)} samples from "
                    f"{len(logs)} log(s), cameras {','.join(self.cameras)}")

    @property
    def labels(self):
        return [label for _, label in self.entries]

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, index):
        path, label = self.entries[index]
        raw = load_image(path)
        return Sample(preprocess(raw, *self.crop), label, raw=raw,
                      crop=self.crop)


def resolve_workers(requested=None):
    """
    :param requested: int, optional explicit worker count
    :return: int, capped by the STEERKIT_THREADS environment variable
    """
    workers = 1 if requested is None else requested
    cap = os.environ.get(THREADS_ENV)
    if cap:
        try:
            workers = min(workers, max(int(cap), 1))
        except ValueError:
            raise ConfigurationError(f"{THREADS_ENV} must be an integer, got "
                                     f"{cap!r}")
    if workers < 1:
        raise ConfigurationError(f"worker count must be >= 1, got {workers}")
    return workers


def epoch_permutation(count, seed, epoch=0):
    return np.random.default_rng([seed, epoch]).permutation(count)


def _assemble(samples, indices, transform):
    images = []
    labels = []
    for index in indices:
        sample = samples[int(index)]
        if transform is not None:
            sample = transform(sample, int(index))
        images.append(sample.image)
        labels.append(sample.label)
    return (np.stack(images).astype(np.float32, copy=False),
            np.asarray(labels, dtype=np.float32))


def make_batches(samples,
                 batch_size,
                 seed,
                 epoch=0,
                 indices=None,
                 transform=None,
                 workers=1):
    """
    Yields (images, labels) batches in the order of a per-epoch permutation;
    the last batch may be partial.

    :param samples: sequence of Sample
    :param batch_size: int
    :param seed: int
    :param epoch: int, mixed into the permutation seed
    :param indices: sequence of int, subset to draw from, defaults to all
    :param transform: callable(sample, index) -> Sample, e.g. augmentation
    :param workers: int, threads assembling batches ahead of the consumer
    """
    if batch_size < 1:
        raise ConfigurationError(f"batch size must be >= 1, got "
                                 f"{batch_size}")
    pool = np.arange(len(samples)) if indices is None else \
        np.asarray(indices)
    if len(pool) == 0:
        raise ConfigurationError("cannot batch an empty dataset")

    order = pool[epoch_permutation(len(pool), seed, epoch)]
    chunks = [order[i:i + batch_size]
              for i in range(0, len(order), batch_size)]

    if workers <= 1:
        for chunk in chunks:
            yield _assemble(samples, chunk, transform)
        return

    with ThreadPoolExecutor(max_workers=workers) as executor:
        pending = deque()
        chunk_iter = iter(chunks)
        for chunk in chunk_iter:
            pending.append(executor.submit(_assemble, samples, chunk,
                                           transform))
            if len(pending) >= 2 * workers:
                break
        while pending:
            batch = pending.popleft().result()
            chunk = next(chunk_iter, None)
            if chunk is not None:
                pending.append(executor.submit(_assemble, samples, chunk,
                                               transform))
            yield batch
