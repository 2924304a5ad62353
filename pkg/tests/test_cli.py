import contextlib
import io
import json
import os
import shutil
import tempfile
import unittest

from unittest import mock

from steerkit import cli
from steerkit.nn import build_laksnet
from steerkit.weights import save_weights


def _run(*argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = cli.main(list(argv))
    return code, out.getvalue(), err.getvalue()


class TestCli(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_inspect_laksnet(self):
        code, out, _ = _run("inspect", "--model", "laksnet")

        self.assertEqual(cli.EXIT_OK, code)
        echoed = json.loads(out.splitlines()[0])
        self.assertEqual({"command": "inspect", "model": "laksnet",
                          "weights": None}, echoed)
        self.assertIn("total parameters: 274017", out)

    def test_inspect_pilotnet_reports_both_counts(self):
        code, out, _ = _run("inspect", "--model", "pilotnet")

        self.assertEqual(cli.EXIT_OK, code)
        self.assertIn("reported for NVIDIA: 559419 (computed 252219)", out)

    def test_missing_required_flag(self):
        code, out, err = _run("train", "--out", "model.lnw")

        self.assertEqual(cli.EXIT_USAGE, code)
        self.assertEqual("", out)
        self.assertIn("--data", err)

    def test_no_command(self):
        code, _, _ = _run()

        self.assertEqual(cli.EXIT_USAGE, code)

    @mock.patch("steerkit.cli.save_weights")
    @mock.patch("steerkit.cli.train")
    @mock.patch("steerkit.cli.DrivingDataset")
    def test_published_hyperparameters(self, dataset, train, save):
        """Verify the published settings resolve and echo before training"""
        # Setup
        train.return_value = (mock.sentinel.net, [])

        # Run test
        code, out, _ = _run("train", "--data", "a.csv", "--data", "b.csv",
                            "--out", "model.lnw", "--paper-hparams",
                            "--epochs", "3")

        # Assertions
        self.assertEqual(cli.EXIT_OK, code)
        echoed = json.loads(out.splitlines()[0])
        self.assertEqual(3, echoed["epochs"])
        self.assertEqual(32, echoed["batch_size"])
        self.assertEqual(0.1, echoed["learning_rate"])
        self.assertEqual("adam", echoed["optimizer"])
        self.assertEqual(["a.csv", "b.csv"], echoed["data"])
        config = train.call_args[0][0]
        self.assertEqual(3, config.epochs)
        self.assertEqual(0.1, config.learning_rate)
        dataset.assert_called_once_with(["a.csv", "b.csv"],
                                        cameras=["center"], correction=0.2,
                                        crop=[0, 0])
        save.assert_called_once_with(mock.sentinel.net, "model.lnw")

    @mock.patch("steerkit.cli.save_weights")
    @mock.patch("steerkit.cli.train")
    @mock.patch("steerkit.cli.DrivingDataset")
    def test_default_hyperparameters(self, dataset, train, save):
        train.return_value = (mock.sentinel.net, [])

        _, out, _ = _run("train", "--data", "a.csv", "--out", "m.lnw")

        echoed = json.loads(out.splitlines()[0])
        self.assertEqual(50, echoed["epochs"])
        self.assertEqual(1e-3, echoed["learning_rate"])

    @mock.patch("steerkit.cli.save_weights")
    @mock.patch("steerkit.cli.train")
    @mock.patch("steerkit.cli.DrivingDataset")
    def test_no_timing_freezes_the_clock(self, dataset, train, save):
        train.return_value = (mock.sentinel.net, [])

        _, out, _ = _run("train", "--data", "a.csv", "--out", "m.lnw",
                         "--no-timing")

        self.assertFalse(json.loads(out.splitlines()[0])["timing"])
        clock = train.call_args[1]["clock"]
        self.assertEqual(0.0, clock())
        self.assertEqual(0.0, clock())

    def test_untimed_runs_write_identical_metrics(self):
        """Verify two identical untimed runs produce byte-equal metrics"""
        # Setup
        _, out, _ = _run("synth", "--frames", "4", "--out",
                         os.path.join(self.tmp, "synth"))
        log = out.splitlines()[-1]
        contents = []

        # Run test
        for run in ("first", "second"):
            metrics = os.path.join(self.tmp, f"{run}.jsonl")
            code, _, _ = _run("train", "--data", log, "--out",
                              os.path.join(self.tmp, f"{run}.lnw"),
                              "--metrics", metrics, "--epochs", "1",
                              "--batch-size", "2", "--no-augment",
                              "--no-timing")
            self.assertEqual(cli.EXIT_OK, code)
            with open(metrics) as f:
                contents.append(f.read())

        # Assertions
        self.assertEqual(contents[0], contents[1])
        self.assertEqual(0, json.loads(contents[0].splitlines()[0])
                         ["seconds"])

    def test_missing_weights_is_a_runtime_error(self):
        code, _, err = _run("eval", "--weights",
                            os.path.join(self.tmp, "absent.lnw"),
                            "--data", os.path.join(self.tmp, "log.csv"))

        self.assertEqual(cli.EXIT_RUNTIME, code)
        self.assertIn("steerkit eval:", err)

    def test_malformed_custom_model_is_a_runtime_error(self):
        path = os.path.join(self.tmp, "layers.json")
        with open(path, "w") as f:
            json.dump([{"kind": "conv", "out_channels": 4, "kernel": 3,
                        "stride": 0},
                       {"kind": "flatten"},
                       {"kind": "linear", "out_features": 1}], f)

        code, _, err = _run("inspect", "--model", f"custom:{path}")

        self.assertEqual(cli.EXIT_RUNTIME, code)
        self.assertIn("stride must be a positive integer", err)
        self.assertNotIn("Traceback", err)

    def test_drive_startup_error(self):
        path = os.path.join(self.tmp, "broken.lnw")
        with open(path, "wb") as f:
            f.write(b"LNW1")

        code, _, err = _run("drive", "--weights", path, "--port", "0")

        self.assertEqual(cli.EXIT_RUNTIME, code)
        self.assertIn("cannot load", err)

    def test_simulate_baseline(self):
        code, out, _ = _run("simulate", "--baseline", "oracle", "--track",
                            "oval", "--cap", "0.5")

        self.assertEqual(cli.EXIT_OK, code)
        result = json.loads(out.splitlines()[-1])
        self.assertAlmostEqual(0.5, result["survived_seconds"])
        self.assertFalse(result["off_track"])

    def test_simulate_weights(self):
        path = os.path.join(self.tmp, "laksnet.lnw")
        save_weights(build_laksnet(seed=0), path)

        code, out, _ = _run("simulate", "--weights", path, "--cap", "0.05",
                            "--seed", "1")

        self.assertEqual(cli.EXIT_OK, code)
        self.assertEqual(5, json.loads(out.splitlines()[-1])["steps"])

    def test_synth_then_eval(self):
        out_dir = os.path.join(self.tmp, "synth")
        weights = os.path.join(self.tmp, "laksnet.lnw")

        code, out, _ = _run("synth", "--frames", "4", "--out", out_dir)
        log = out.splitlines()[-1]
        save_weights(build_laksnet(seed=0), weights)
        eval_code, report, _ = _run("eval", "--weights", weights,
                                    "--data", log)

        self.assertEqual(cli.EXIT_OK, code)
        self.assertEqual(os.path.join(out_dir, "driving_log.csv"), log)
        self.assertEqual(cli.EXIT_OK, eval_code)
        self.assertEqual("MSE", report.splitlines()[-1].split()[0])
        self.assertEqual(1 + 1 + 4 + 1, len(report.splitlines()))
