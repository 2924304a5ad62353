import json
import logging
import math
import time
import zlib

import numpy as np

from steerkit.data import augment, make_batches, resolve_workers
from steerkit.defs import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_EPOCHS,
    DEFAULT_LEARNING_RATE,
    DEFAULT_VALIDATION_FRACTION,
    PUBLISHED_BATCH_SIZE,
    PUBLISHED_EPOCHS,
    PUBLISHED_LEARNING_RATE,
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPSILON,
    EVAL,
    TRAIN,
    EpochMetrics,
    EvalReport,
)
from steerkit.errors import ConfigurationError, DivergedTrainingError
from steerkit.nn import AdamState, adam_step, build_model, mse_loss
from steerkit.weights import load_checkpoint, save_checkpoint


LOGGER = logging.getLogger(__name__)


class TrainConfig:

    def __init__(self,
                 epochs=DEFAULT_EPOCHS,
                 batch_size=DEFAULT_BATCH_SIZE,
                 learning_rate=DEFAULT_LEARNING_RATE,
                 seed=0,
                 validation_fraction=DEFAULT_VALIDATION_FRACTION,
                 model="laksnet",
                 checkpoint_path=None,
                 checkpoint_every=0,
                 augment=None,
                 workers=1,
                 beta1=ADAM_BETA1,
                 beta2=ADAM_BETA2,
                 epsilon=ADAM_EPSILON):
        """
        :param epochs: int, >= 1
        :param batch_size: int, >= 1
        :param learning_rate: float, >= 0
        :param seed: int, drives initialization, shuffling, dropout and
                     augmentation
        :param validation_fraction: float, in (0, 1)
        :param model: str, see nn.build_model
        :param checkpoint_path: str, optional
        :param checkpoint_every: int, epochs between checkpoints, 0 writes
                                 only after the last epoch
        :param augment: AugmentConfig, None disables augmentation
        :param workers: int, batch prefetch threads
        """
        if epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {epochs}")
        if batch_size < 1:
            raise ConfigurationError(f"batch size must be >= 1, got "
                                     f"{batch_size}")
        if not learning_rate >= 0:
            raise ConfigurationError(f"learning rate must be >= 0, got "
                                     f"{learning_rate}")
        if not 0.0 < validation_fraction < 1.0:
            raise ConfigurationError(
                f"validation fraction must be in (0, 1), got "
                f"{validation_fraction}")
        if checkpoint_every < 0:
            raise ConfigurationError("checkpoint cadence must be >= 0")

        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed
        self.validation_fraction = validation_fraction
        self.model = model
        self.checkpoint_path = checkpoint_path
        self.checkpoint_every = checkpoint_every
        self.augment = augment
        self.workers = workers
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon

    @classmethod
    def published(cls, **overrides):
        """50 epochs, batch 32 and Adam at learning rate 0.1."""
        settings = dict(epochs=PUBLISHED_EPOCHS,
                        batch_size=PUBLISHED_BATCH_SIZE,
                        learning_rate=PUBLISHED_LEARNING_RATE)
        settings.update(overrides)
        return cls(**settings)

    def as_dict(self):
        return {"epochs": self.epochs,
                "batch_size": self.batch_size,
                "learning_rate": self.learning_rate,
                "optimizer": "adam",
                "beta1": self.beta1,
                "beta2": self.beta2,
                "epsilon": self.epsilon,
                "seed": self.seed,
                "validation_fraction": self.validation_fraction,
                "model": self.model,
                "checkpoint_path": self.checkpoint_path,
                "checkpoint_every": self.checkpoint_every,
                "augment": None if self.augment is None
                else self.augment.as_dict(),
                "workers": self.workers}


def split_indices(count, fraction):
    """
    Deterministic split on a CRC32 hash of each index, so the same record
    lands on the same side in every run.

    :param count: int, dataset size
    :param fraction: float, share of samples for validation
    :return: tuple, (train indices, validation indices)
    """
    if count < 2:
        raise ConfigurationError(f"need at least 2 samples to split, got "
                                 f"{count}")

    threshold = fraction * 2 ** 32
    train, val = [], []
    for index in range(count):
        bucket = zlib.crc32(str(index).encode("ascii"))
        (val if bucket < threshold else train).append(index)

    if not val:
        val.append(train.pop())
    if not train:
        raise ConfigurationError(f"validation fraction {fraction} leaves no "
                                 f"training samples")
    return train, val


def _predict(net, samples, indices, batch_size):
    predictions = []
    for start in range(0, len(indices), batch_size):
        chunk = indices[start:start + batch_size]
        batch = np.stack([samples[i].image for i in chunk])
        predictions.extend(float(p) for p in net.predict(batch))
    return predictions


def evaluate(net, dataset, batch_size=DEFAULT_BATCH_SIZE):
    """
    Eval-mode predictions over the whole dataset, in dataset order.

    :param net: Network, or anything with predict(batch) -> (N,)
    :param dataset: sequence of Sample
    :param batch_size: int
    :return: EvalReport
    """
    if len(dataset) == 0:
        raise ConfigurationError("cannot evaluate an empty dataset")
    indices = list(range(len(dataset)))
    predicted = _predict(net, dataset, indices, batch_size)
    return EvalReport([dataset[i].label for i in indices], predicted)


def _split_mse(net, dataset, indices, batch_size):
    actual = [dataset[i].label for i in indices]
    return EvalReport(actual, _predict(net, dataset, indices,
                                       batch_size)).mse


def _augmenter(config, epoch):
    if config.augment is None:
        return None

    def transform(sample, index):
        rng = np.random.default_rng([config.seed, epoch, index])
        return augment(sample, rng, config.augment)

    return transform


def train(config,
          dataset,
          network=None,
          resume_from=None,
          metrics_path=None,
          clock=time.monotonic):
    """
    :param config: TrainConfig
    :param dataset: sequence of Sample
    :param network: Network, optional, built from config.model otherwise
    :param resume_from: str, optional checkpoint to continue from
    :param metrics_path: str, optional JSON-lines metrics file, appended to
                         when resuming
    :param clock: callable returning seconds
    :return: tuple, (Network, list of EpochMetrics)
    """
    if len(dataset) == 0:
        raise ConfigurationError("cannot train on an empty dataset")
    train_idx, val_idx = split_indices(len(dataset),
                                       config.validation_fraction)
    workers = resolve_workers(config.workers)

    first_epoch = 1
    if resume_from is not None:
        net, state, done = load_checkpoint(resume_from, like=network)
        state.learning_rate = config.learning_rate
        state.beta1, state.beta2 = config.beta1, config.beta2
        state.epsilon = config.epsilon
        first_epoch = done + 1
        LOGGER.info(f"resuming {net.name} from {resume_from} after epoch "
                    f"{done}")
    else:
        net = network if network is not None else \
            build_model(config.model, seed=config.seed)
        state = AdamState(config.learning_rate, config.beta1, config.beta2,
                          config.epsilon)

    LOGGER.info(f"training {net.name} on {len(train_idx)} samples, "
                f"validating on {len(val_idx)}")

    metrics = []
    metrics_file = None
    if metrics_path is not None:
        metrics_file = open(metrics_path, "a" if resume_from else "w",
                            encoding="utf-8")
    try:
        for epoch in range(first_epoch, config.epochs + 1):
            started = clock()
            batches = make_batches(dataset, config.batch_size, config.seed,
                                   epoch=epoch, indices=train_idx,
                                   transform=_augmenter(config, epoch),
                                   workers=workers)
            for number, (images, labels) in enumerate(batches):
                rng = np.random.default_rng([config.seed, epoch, number])
                predictions = net.forward(images, TRAIN, rng)
                loss, grad = mse_loss(labels, predictions)
                if not math.isfinite(loss):
                    raise DivergedTrainingError(
                        f"loss became {loss} in epoch {epoch}, batch "
                        f"{number}", epoch=epoch, batch=number)
                adam_step(net.parameters(), net.backward(grad), state)
                LOGGER.debug(f"epoch {epoch} batch {number} loss {loss:.6f}")

            result = EpochMetrics(
                epoch,
                _split_mse(net, dataset, train_idx, config.batch_size),
                _split_mse(net, dataset, val_idx, config.batch_size),
                clock() - started,
                config.learning_rate)
            if not (math.isfinite(result.train_mse) and
                    math.isfinite(result.val_mse)):
                raise DivergedTrainingError(
                    f"non-finite {EVAL} loss after epoch {epoch}",
                    epoch=epoch)
            metrics.append(result)
            LOGGER.info(f"epoch {epoch}/{config.epochs} train_mse "
                        f"{result.train_mse:.6f} val_mse "
                        f"{result.val_mse:.6f}")

            if metrics_file is not None:
                metrics_file.write(json.dumps(result.as_dict()) + "\n")
                metrics_file.flush()

            if config.checkpoint_path and (
                    epoch == config.epochs or
                    (config.checkpoint_every and
                     epoch % config.checkpoint_every == 0)):
                save_checkpoint(config.checkpoint_path, net, state, epoch)
    finally:
        if metrics_file is not None:
            metrics_file.close()

    return net, metrics
