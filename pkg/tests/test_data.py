import os
import shutil
import tempfile
import unittest

from unittest import mock

import numpy as np

from steerkit import data
from steerkit.defs import THREADS_ENV, DrivingLogRecord, Sample
from steerkit.errors import ConfigurationError, ParseError

from tests.defs import (
    DRIVING_LOG_ROWS,
    gradient_image,
    label_only_samples,
    write_log,
)


class TestDrivingLog(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.mkdtemp()
        self.log = os.path.join(self.tmp, "driving_log.csv")

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_parse_recorded_rows(self):
        """Verify the six recorded rows parse to their exact values"""
        # Setup
        write_log(self.log, DRIVING_LOG_ROWS)

        # Run test
        records = data.parse_driving_log(self.log)

        # Assertions
        self.assertEqual(6, len(records))
        self.assertEqual([0.0, 0.0, -0.1215, -0.4860, -0.1827, 0.0],
                         [r.steering for r in records])
        self.assertEqual([0.3325, 0.6327, 0.9266, 1.0, 1.0, 1.0],
                         [r.throttle for r in records])
        self.assertEqual([0.2858, 0.8770, 1.8474, 3.2320, 4.4072, 5.5639],
                         [r.speed for r in records])
        self.assertTrue(all(r.brake == 0.0 for r in records))
        self.assertEqual(os.path.join(self.tmp, "left_535.jpg"),
                         records[3].left_path)

    def test_paths_resolve_against_image_dir(self):
        os.mkdir(os.path.join(self.tmp, "IMG"))
        write_log(self.log, [(r"C:\sim\IMG\center_1.jpg",
                              "/home/u/IMG/left_1.jpg", "IMG/right_1.jpg",
                              "0.1", "0.5", "0", "2.0")])

        record = data.parse_driving_log(self.log)[0]

        image_dir = os.path.join(self.tmp, "IMG")
        self.assertEqual(os.path.join(image_dir, "center_1.jpg"),
                         record.center_path)
        self.assertEqual(os.path.join(image_dir, "left_1.jpg"),
                         record.left_path)
        self.assertEqual(os.path.join(image_dir, "right_1.jpg"),
                         record.right_path)

    def test_wrong_column_count(self):
        rows = list(DRIVING_LOG_ROWS)
        rows[2] = rows[2][:6]
        write_log(self.log, rows)

        with self.assertRaises(ParseError) as ctx:
            data.parse_driving_log(self.log)
        self.assertEqual(3, ctx.exception.row)

    def test_bad_number(self):
        rows = list(DRIVING_LOG_ROWS)
        rows[4] = rows[4][:6] + ("fast",)
        write_log(self.log, rows)

        with self.assertRaises(ParseError) as ctx:
            data.parse_driving_log(self.log)
        self.assertEqual(5, ctx.exception.row)
        self.assertEqual(7, ctx.exception.column)

    def test_non_finite_number(self):
        write_log(self.log, [("c.jpg", "l.jpg", "r.jpg",
                              "nan", "0", "0", "1")])

        with self.assertRaises(ParseError) as ctx:
            data.parse_driving_log(self.log)
        self.assertEqual(4, ctx.exception.column)

    def test_empty_path(self):
        write_log(self.log, [("c.jpg", " ", "r.jpg", "0", "0", "0", "1")])

        with self.assertRaises(ParseError) as ctx:
            data.parse_driving_log(self.log)
        self.assertEqual(2, ctx.exception.column)

    def test_write_then_parse(self):
        write_log(self.log, DRIVING_LOG_ROWS)
        records = data.parse_driving_log(self.log)
        copy = os.path.join(self.tmp, "copy.csv")

        data.write_driving_log(records, copy)
        reparsed = data.parse_driving_log(copy)

        for original, again in zip(records, reparsed):
            self.assertEqual(original.center_path, again.center_path)
            self.assertEqual(original.steering, again.steering)
            self.assertEqual(original.speed, again.speed)
        with open(copy) as f:
            self.assertIn(",-0.4860,1.0000,0.0000,3.2320",
                          f.read().splitlines()[3])

    def test_select_camera(self):
        record = DrivingLogRecord("c", "l", "r", -0.1, 0.5, 0.0, 3.0)

        self.assertEqual(("c", -0.1), data.select_camera(record, "center"))
        path, label = data.select_camera(record, "left", 0.2)
        self.assertEqual("l", path)
        self.assertAlmostEqual(0.1, label)
        path, label = data.select_camera(record, "right", 0.2)
        self.assertEqual("r", path)
        self.assertAlmostEqual(-0.3, label)

    def test_select_camera_invalid(self):
        record = DrivingLogRecord("c", "l", "r", 0.0, 0.0, 0.0, 0.0)

        with self.assertRaises(ConfigurationError):
            data.select_camera(record, "rear")
        with self.assertRaises(ConfigurationError):
            data.select_camera(record, "left", -0.1)


class TestImages(unittest.TestCase):

    def test_preprocess_scaling(self):
        grey = np.full((70, 320, 3), 128, dtype=np.uint8)
        white = np.full((70, 320, 3), 255, dtype=np.uint8)

        out = data.preprocess(grey)

        self.assertEqual((3, 66, 200), out.shape)
        self.assertEqual(np.float32, out.dtype)
        np.testing.assert_allclose(out, 128 / 127.5 - 1, atol=1e-6)
        np.testing.assert_allclose(data.preprocess(white), 1.0, atol=1e-6)

    def test_preprocess_crop(self):
        frame = np.zeros((70, 320, 3), dtype=np.uint8)
        frame[:20] = 255

        out = data.preprocess(frame, crop_top=20)

        np.testing.assert_allclose(out, -1.0, atol=1e-6)

    def test_preprocess_rejects_bad_crop(self):
        frame = np.zeros((70, 320, 3), dtype=np.uint8)

        with self.assertRaises(ConfigurationError):
            data.preprocess(frame, crop_top=40, crop_bottom=30)
        with self.assertRaises(ConfigurationError):
            data.preprocess(frame[:, :, 0])

    def test_jpeg_round_trip_is_close(self):
        frame = gradient_image()

        decoded = data.decode_jpeg(data.encode_jpeg(frame))

        self.assertEqual(frame.shape, decoded.shape)
        self.assertLess(np.abs(decoded.astype(int) - frame).mean(), 6.0)

    def test_rotate_by_zero(self):
        frame = gradient_image()

        rotated = data.rotate_frame(frame, 0.0)

        np.testing.assert_array_equal(frame, rotated)
        self.assertIsNot(frame, rotated)


class TestAugmentation(unittest.TestCase):

    def _sample(self, label=-0.341):
        raw = gradient_image(seed=3)
        return Sample(data.preprocess(raw), label, raw=raw)

    def test_flip_negates_label(self):
        flipped = data.flip_sample(self._sample())

        self.assertAlmostEqual(0.341, flipped.label)

    def test_flip_twice_is_identity(self):
        sample = self._sample()

        twice = data.flip_sample(data.flip_sample(sample))

        np.testing.assert_array_equal(sample.image, twice.image)
        np.testing.assert_array_equal(sample.raw, twice.raw)
        self.assertEqual(sample.label, twice.label)

    def test_flipped_dataset_negates_mean_label(self):
        labels = np.random.default_rng(8).uniform(-1.0, 1.0, 1000)
        samples = [Sample(np.zeros((3, 2, 2), dtype=np.float32), float(v))
                   for v in labels]

        flipped = [data.flip_sample(s) for s in samples]

        self.assertEqual(-np.mean([s.label for s in samples]),
                         np.mean([s.label for s in flipped]))

    def test_flip_only_config(self):
        config = data.AugmentConfig(flip_probability=1.0,
                                    max_rotation_deg=0.0, max_crop_jitter=0)
        sample = self._sample()

        out = data.augment(sample, np.random.default_rng(0), config)

        np.testing.assert_array_equal(sample.image[:, :, ::-1], out.image)
        self.assertAlmostEqual(0.341, out.label)

    def test_augment_is_deterministic(self):
        config = data.AugmentConfig()
        sample = self._sample()

        first = data.augment(sample, np.random.default_rng([4, 1, 9]),
                             config)
        second = data.augment(sample, np.random.default_rng([4, 1, 9]),
                              config)

        np.testing.assert_array_equal(first.image, second.image)
        self.assertEqual(first.label, second.label)
        self.assertEqual((3, 66, 200), first.image.shape)

    def test_config_bounds(self):
        with self.assertRaises(ConfigurationError):
            data.AugmentConfig(max_rotation_deg=20.0)
        with self.assertRaises(ConfigurationError):
            data.AugmentConfig(flip_probability=1.5)
        with self.assertRaises(ConfigurationError):
            data.AugmentConfig(max_crop_jitter=5)


class TestDataset(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.mkdtemp()
        image_dir = os.path.join(self.tmp, "IMG")
        os.mkdir(image_dir)
        for i, (center, left, right, *_) in enumerate(DRIVING_LOG_ROWS):
            for name in (center, left, right):
                with open(os.path.join(image_dir, name), "wb") as f:
                    f.write(data.encode_jpeg(gradient_image(seed=i)))
        self.log = os.path.join(self.tmp, "driving_log.csv")
        write_log(self.log, DRIVING_LOG_ROWS)

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_center_only(self):
        dataset = data.DrivingDataset(self.log)

        sample = dataset[3]

        self.assertEqual(6, len(dataset))
        self.assertEqual((3, 66, 200), sample.image.shape)
        self.assertEqual(-0.4860, sample.label)
        self.assertEqual((70, 320, 3), sample.raw.shape)

    def test_three_cameras(self):
        dataset = data.DrivingDataset([self.log, self.log],
                                      cameras=("center", "left", "right"),
                                      correction=0.25)

        self.assertEqual(36, len(dataset))
        np.testing.assert_allclose([-0.4860, -0.2360, -0.7360],
                                   dataset.labels[9:12])

    def test_unknown_camera(self):
        with self.assertRaises(ConfigurationError):
            data.DrivingDataset(self.log, cameras=("top",))


class TestBatching(unittest.TestCase):

    def test_partial_last_batch(self):
        samples = label_only_samples(range(100))

        sizes = [len(labels) for _, labels in
                 data.make_batches(samples, 32, seed=0)]

        self.assertEqual([32, 32, 32, 4], sizes)

    def test_epoch_covers_every_sample_once(self):
        samples = label_only_samples(range(100))

        seen = np.concatenate([labels for _, labels in
                               data.make_batches(samples, 32, seed=5,
                                                 epoch=2)])

        self.assertEqual(list(range(100)), sorted(seen.astype(int)))

    def test_same_seed_same_order(self):
        samples = label_only_samples(range(50))

        first = [labels for _, labels in data.make_batches(samples, 8, 1)]
        second = [labels for _, labels in data.make_batches(samples, 8, 1)]
        other_epoch = [labels for _, labels in
                       data.make_batches(samples, 8, 1, epoch=1)]

        for a, b in zip(first, second):
            np.testing.assert_array_equal(a, b)
        self.assertFalse(all(np.array_equal(a, b)
                             for a, b in zip(first, other_epoch)))

    def test_subset(self):
        samples = label_only_samples(range(20))

        seen = np.concatenate([labels for _, labels in
                               data.make_batches(samples, 4, 0,
                                                 indices=[2, 3, 5, 7, 11])])

        self.assertEqual([2, 3, 5, 7, 11], sorted(seen.astype(int)))

    def test_prefetch_keeps_order(self):
        samples = label_only_samples(range(97))

        serial = list(data.make_batches(samples, 5, 3))
        threaded = list(data.make_batches(samples, 5, 3, workers=4))

        self.assertEqual(len(serial), len(threaded))
        for (_, a), (_, b) in zip(serial, threaded):
            np.testing.assert_array_equal(a, b)

    def test_transform_sees_index(self):
        samples = label_only_samples([0.0] * 10)

        def transform(sample, index):
            return Sample(sample.image, float(index))

        seen = np.concatenate([labels for _, labels in
                               data.make_batches(samples, 3, 0,
                                                 transform=transform)])

        self.assertEqual(list(range(10)), sorted(seen.astype(int)))

    def test_invalid(self):
        with self.assertRaises(ConfigurationError):
            list(data.make_batches([], 4, 0))
        with self.assertRaises(ConfigurationError):
            list(data.make_batches(label_only_samples([1.0]), 0, 0))

    def test_resolve_workers(self):
        with mock.patch.dict(os.environ, {THREADS_ENV: "2"}):
            self.assertEqual(2, data.resolve_workers(8))
            self.assertEqual(1, data.resolve_workers())
        with mock.patch.dict(os.environ, {THREADS_ENV: "many"}):
            with self.assertRaises(ConfigurationError):
                data.resolve_workers(2)
