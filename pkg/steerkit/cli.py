import argparse
import json
import logging
import sys
import time

from steerkit import simtrack
from steerkit.control import SteeringPredictor
from steerkit.data import AugmentConfig, DrivingDataset
from steerkit.defs import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_CORRECTION,
    DEFAULT_DT,
    DEFAULT_EPISODE_CAP,
    DEFAULT_EPOCHS,
    DEFAULT_KP,
    DEFAULT_LEARNING_RATE,
    DEFAULT_PORT,
    DEFAULT_TARGET_SPEED,
    DEFAULT_VALIDATION_FRACTION,
    PUBLISHED_BATCH_SIZE,
    PUBLISHED_EPOCHS,
    PUBLISHED_LEARNING_RATE,
    PILOTNET_REPORTED_PARAMETERS,
)
from steerkit.driveserver import DriveServer
from steerkit.errors import StartupError, SteerkitError
from steerkit.nn import build_model, count_parameters
from steerkit.simclient import RemotePolicy, SimulatorClient
from steerkit.trainer import TrainConfig, evaluate, train
from steerkit.weights import load_weights, save_weights


LOGGER = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):

    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: "
                         f"{message}")


def _crop_flags(parser):
    parser.add_argument("--crop-top", type=int, default=0)
    parser.add_argument("--crop-bottom", type=int, default=0)


def build_parser():
    parser = _Parser(prog="steerkit",
                     description="Behavioral cloning of steering angles.")
    parser.add_argument("--verbose", action="store_true",
                        help="log at DEBUG level")
    commands = parser.add_subparsers(dest="command", metavar="COMMAND",
                                     parser_class=_Parser)
    commands.required = True

    train = commands.add_parser("train", help="train a network")
    train.add_argument("--data", action="append", required=True,
                       help="driving log, may repeat")
    train.add_argument("--model", default="laksnet",
                       help="laksnet | pilotnet | custom:FILE | preset:NAME")
    train.add_argument("--epochs", type=int)
    train.add_argument("--batch-size", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--paper-hparams", action="store_true",
                       help="50 epochs, batch 32, learning rate 0.1")
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--out", required=True, help="weights file")
    train.add_argument("--metrics", help="JSON-lines metrics file")
    train.add_argument("--no-timing", action="store_true",
                       help="record 0 as the epoch seconds so identical "
                            "runs write identical metrics files")
    train.add_argument("--val-fraction", type=float,
                       default=DEFAULT_VALIDATION_FRACTION)
    train.add_argument("--checkpoint")
    train.add_argument("--checkpoint-every", type=int, default=0)
    train.add_argument("--resume", help="checkpoint to continue from")
    train.add_argument("--cameras", default="center",
                       help="comma separated subset of center,left,right")
    train.add_argument("--correction", type=float,
                       default=DEFAULT_CORRECTION)
    train.add_argument("--no-augment", action="store_true")
    train.add_argument("--workers", type=int, default=1)
    _crop_flags(train)

    evaluate = commands.add_parser("eval", help="evaluate weights on a log")
    evaluate.add_argument("--weights", required=True)
    evaluate.add_argument("--data", action="append", required=True)
    _crop_flags(evaluate)

    drive = commands.add_parser("drive", help="serve the simulator")
    drive.add_argument("--weights", required=True)
    drive.add_argument("--host", default="")
    drive.add_argument("--port", type=int, default=DEFAULT_PORT)
    drive.add_argument("--target-speed", type=float,
                       default=DEFAULT_TARGET_SPEED)
    drive.add_argument("--kp", type=float, default=DEFAULT_KP)
    _crop_flags(drive)

    simulate = commands.add_parser("simulate",
                                   help="closed-loop run on a synthetic track")
    driver = simulate.add_mutually_exclusive_group(required=True)
    driver.add_argument("--weights")
    driver.add_argument("--baseline", choices=("oracle", "zero"))
    driver.add_argument("--remote", help="drive server URL")
    simulate.add_argument("--track", default="s_curve",
                          help="bundled track name or track JSON file")
    simulate.add_argument("--cap", type=float, default=DEFAULT_EPISODE_CAP)
    simulate.add_argument("--dt", type=float, default=DEFAULT_DT)
    simulate.add_argument("--target-speed", type=float,
                          default=DEFAULT_TARGET_SPEED)
    simulate.add_argument("--kp", type=float, default=DEFAULT_KP)
    simulate.add_argument("--seed", type=int)
    _crop_flags(simulate)

    synth = commands.add_parser("synth", help="synthesize a driving log")
    synth.add_argument("--track", default="oval")
    synth.add_argument("--frames", type=int, required=True)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--out", required=True, help="output directory")
    synth.add_argument("--noise", type=float, default=0.1)
    synth.add_argument("--reverse", action="store_true")

    inspect = commands.add_parser("inspect", help="print the layer table")
    source = inspect.add_mutually_exclusive_group(required=True)
    source.add_argument("--weights")
    source.add_argument("--model")

    return parser


def _echo(config):
    print(json.dumps(config, sort_keys=True), flush=True)


def _resolve_train(args):
    published = args.paper_hparams

    def pick(value, published_value, default):
        if value is not None:
            return value
        return published_value if published else default

    return {"command": "train",
            "data": args.data,
            "model": args.model,
            "epochs": pick(args.epochs, PUBLISHED_EPOCHS, DEFAULT_EPOCHS),
            "batch_size": pick(args.batch_size, PUBLISHED_BATCH_SIZE,
                               DEFAULT_BATCH_SIZE),
            "learning_rate": pick(args.lr, PUBLISHED_LEARNING_RATE,
                                  DEFAULT_LEARNING_RATE),
            "optimizer": "adam",
            "seed": args.seed,
            "out": args.out,
            "metrics": args.metrics,
            "timing": not args.no_timing,
            "validation_fraction": args.val_fraction,
            "checkpoint": args.checkpoint,
            "checkpoint_every": args.checkpoint_every,
            "resume": args.resume,
            "cameras": args.cameras.split(","),
            "correction": args.correction,
            "augment": not args.no_augment,
            "workers": args.workers,
            "crop": [args.crop_top, args.crop_bottom]}


def _no_clock():
    return 0.0


def run_train(args):
    resolved = _resolve_train(args)
    _echo(resolved)

    config = TrainConfig(
        epochs=resolved["epochs"],
        batch_size=resolved["batch_size"],
        learning_rate=resolved["learning_rate"],
        seed=args.seed,
        validation_fraction=args.val_fraction,
        model=args.model,
        checkpoint_path=args.checkpoint,
        checkpoint_every=args.checkpoint_every,
        augment=None if args.no_augment else AugmentConfig(),
        workers=args.workers)
    dataset = DrivingDataset(args.data, cameras=resolved["cameras"],
                             correction=args.correction,
                             crop=resolved["crop"])
    net, metrics = train(config, dataset, resume_from=args.resume,
                         metrics_path=args.metrics,
                         clock=_no_clock if args.no_timing else time.monotonic)
    save_weights(net, args.out)
    if metrics:
        last = metrics[-1]
        print(f"epoch {last.epoch}: train_mse {last.train_mse:.6f} "
              f"val_mse {last.val_mse:.6f}")
    return EXIT_OK


def run_eval(args):
    _echo({"command": "eval",
           "weights": args.weights,
           "data": args.data,
           "crop": [args.crop_top, args.crop_bottom]})
    net = load_weights(args.weights)
    dataset = DrivingDataset(args.data,
                             crop=(args.crop_top, args.crop_bottom))
    print(evaluate(net, dataset).table())
    return EXIT_OK


def run_drive(args):
    _echo({"command": "drive",
           "weights": args.weights,
           "host": args.host,
           "port": args.port,
           "target_speed": args.target_speed,
           "kp": args.kp,
           "crop": [args.crop_top, args.crop_bottom]})
    try:
        net = load_weights(args.weights)
    except (SteerkitError, OSError) as e:
        raise StartupError(f"cannot load {args.weights}: {e}")
    predictor = SteeringPredictor(net, args.crop_top, args.crop_bottom)
    DriveServer(predictor, args.host, args.port, args.target_speed,
                args.kp).run()
    return EXIT_OK


def run_simulate(args):
    _echo({"command": "simulate",
           "weights": args.weights,
           "baseline": args.baseline,
           "remote": args.remote,
           "track": args.track,
           "cap": args.cap,
           "dt": args.dt,
           "target_speed": args.target_speed,
           "kp": args.kp,
           "seed": args.seed,
           "crop": [args.crop_top, args.crop_bottom]})
    track = simtrack.resolve_track(args.track)

    if args.baseline == "oracle":
        policy = simtrack.OraclePolicy()
    elif args.baseline == "zero":
        policy = simtrack.ConstantPolicy(0.0)
    elif args.remote:
        policy = RemotePolicy(SimulatorClient(args.remote).connect())
    else:
        predictor = SteeringPredictor(load_weights(args.weights),
                                      args.crop_top, args.crop_bottom)
        policy = simtrack.NetworkPolicy(predictor, args.target_speed,
                                        args.kp)

    try:
        result = simtrack.run_episode(policy, track, args.cap, args.dt,
                                      args.target_speed, args.kp,
                                      seed=args.seed)
    finally:
        policy.close()
    print(json.dumps(result.as_dict(), sort_keys=True))
    return EXIT_OK


def run_synth(args):
    _echo({"command": "synth",
           "track": args.track,
           "frames": args.frames,
           "seed": args.seed,
           "out": args.out,
           "noise": args.noise,
           "reverse": args.reverse})
    track = simtrack.resolve_track(args.track)
    print(simtrack.synth_dataset(track, args.frames, args.seed, args.out,
                                 noise=args.noise, reverse=args.reverse))
    return EXIT_OK


def run_inspect(args):
    _echo({"command": "inspect",
           "weights": args.weights,
           "model": args.model})
    net = load_weights(args.weights) if args.weights else \
        build_model(args.model)
    print(net.summary())
    if net.name == "pilotnet":
        print(f"reported for NVIDIA: {PILOTNET_REPORTED_PARAMETERS} "
              f"(computed {count_parameters(net)})")
    return EXIT_OK


COMMANDS = {"train": run_train,
            "eval": run_eval,
            "drive": run_drive,
            "simulate": run_simulate,
            "synth": run_synth,
            "inspect": run_inspect}


def _configure_logging(verbose):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(
        "%(asctime)s %(levelname)s %(name)s: %(message)s",
        datefmt="%Y-%m-%dT%H:%M:%S"))
    package_logger = logging.getLogger("steerkit")
    package_logger.addHandler(handler)
    package_logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    return handler


def main(argv=None):
    """
    :param argv: list of str, defaults to sys.argv[1:]
    :return: int, 0 on success, 1 on usage errors, 2 on runtime errors
    """
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE

    handler = _configure_logging(args.verbose)
    try:
        return COMMANDS[args.command](args)
    except (SteerkitError, OSError) as e:
        LOGGER.debug(f"{args.command} failed", exc_info=True)
        print(f"steerkit {args.command}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        logging.getLogger("steerkit").removeHandler(handler)
