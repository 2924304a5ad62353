import json
import logging
import math

from abc import ABC, abstractmethod

import numpy as np

from steerkit import tensor
from steerkit.defs import (
    TRAIN,
    EVAL,
    MODES,
    INPUT_SHAPE,
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPSILON,
    DEFAULT_LEARNING_RATE,
    ConvSpec,
)
from steerkit.errors import (
    ConfigurationError,
    DimensionError,
    TrainingError,
)


LOGGER = logging.getLogger(__name__)

LAYER_KINDS = ("conv", "maxpool", "avgpool", "relu", "elu", "dropout",
               "flatten", "linear")

LAKSNET_FLATTEN = 576


#
# LAYER SPECS
#
class LayerSpec:

    def __init__(self, kind, **params):
        """
        Kind-specific parameters:

        * conv: out_channels, kernel (int or [h, w]), stride=1,
          in_channels (optional, inferred when absent)
        * dropout: rate
        * linear: out_features, in_features (optional)
        * elu: alpha=1.0

        :param kind: str, one of LAYER_KINDS
        """
        if kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown layer kind: {kind}")
        self.kind = kind
        self.params = params

    def as_dict(self):
        return dict(kind=self.kind, **self.params)

    @classmethod
    def from_dict(cls, entry):
        """
        :param entry: dict
        :return: LayerSpec
        """
        if not isinstance(entry, dict) or "kind" not in entry:
            raise ConfigurationError(f"layer entry needs a kind: {entry!r}")
        params = {k: v for k, v in entry.items() if k != "kind"}
        return cls(entry["kind"], **params)

    def __eq__(self, other):
        return isinstance(other, LayerSpec) and \
            self.as_dict() == other.as_dict()

    def __repr__(self):
        return f"LayerSpec({self.as_dict()})"


def specs_to_json(specs):
    return json.dumps([s.as_dict() for s in specs], sort_keys=True)


def specs_from_json(text):
    try:
        entries = json.loads(text)
    except ValueError as e:
        raise ConfigurationError(f"layer spec list is not JSON: {e}")
    if not isinstance(entries, list):
        raise ConfigurationError("layer spec list must be a JSON array")
    return [LayerSpec.from_dict(e) for e in entries]


#
# LAYERS
#
def _positive_int(name, key, value):
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ConfigurationError(
            f"{name}: {key} must be a positive integer, got {value!r}")
    return value


def _kernel_extent(name, kernel):
    """:return: tuple, (kh, kw) from an int or an [h, w] pair"""
    if isinstance(kernel, (list, tuple)):
        if len(kernel) != 2:
            raise ConfigurationError(
                f"{name}: kernel must be an int or an [h, w] pair, got "
                f"{kernel!r}")
        return (_positive_int(name, "kernel", kernel[0]),
                _positive_int(name, "kernel", kernel[1]))
    size = _positive_int(name, "kernel", kernel)
    return size, size


def _real(name, key, value):
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ConfigurationError(
            f"{name}: {key} must be a number, got {value!r}")


class Layer(ABC):
    """
    One stage of a sequential network. Layers own their parameters and the
    gradients of the latest backward pass, plus whatever the forward pass
    cached for it.
    """

    def __init__(self, name, spec, input_shape):
        """
        :param name: str, unique within the network, e.g. "conv1"
        :param spec: LayerSpec
        :param input_shape: tuple, per-sample input shape
        """
        self.name = name
        self.spec = spec
        self.input_shape = tuple(input_shape)
        self.params = {}
        self.grads = {}
        self._cache = None

    @property
    @abstractmethod
    def output_shape(self):
        """Per-sample output shape."""
        pass

    @abstractmethod
    def forward(self, inputs, mode, rng=None):
        pass

    @abstractmethod
    def backward(self, grad_out):
        pass

    def describe(self):
        return ""

    def _require_cache(self):
        if self._cache is None:
            raise DimensionError(f"{self.name}: backward before forward",
                                 axis="cache")
        return self._cache


class Conv2D(Layer):

    def __init__(self, name, spec, input_shape, rng):
        super().__init__(name, spec, input_shape)

        if len(self.input_shape) != 3:
            raise ConfigurationError(
                f"{name}: conv needs a (C, H, W) input, got "
                f"{self.input_shape}")
        kernel = spec.params.get("kernel")
        if kernel is None or "out_channels" not in spec.params:
            raise ConfigurationError(f"{name}: conv needs out_channels and "
                                     f"kernel")
        kh, kw = _kernel_extent(name, kernel)
        out_channels = _positive_int(name, "out_channels",
                                     spec.params["out_channels"])
        stride = _positive_int(name, "stride", spec.params.get("stride", 1))
        channels = self.input_shape[0]
        declared = spec.params.get("in_channels")
        if declared is not None and declared != channels:
            raise ConfigurationError(
                f"{name}: declares {declared} input channels but receives "
                f"{channels}")

        self.conv = ConvSpec(channels, out_channels, kh, kw, stride=stride)
        out_h, out_w = self.conv.output_extent(*self.input_shape[1:])
        if out_h < 1 or out_w < 1:
            raise ConfigurationError(
                f"{name}: kernel {kh}x{kw} does not fit input "
                f"{self.input_shape}")
        self._output_shape = (self.conv.out_channels, out_h, out_w)

        fan_in = channels * kh * kw
        self.params["weight"] = (
            rng.standard_normal((self.conv.out_channels, channels, kh, kw))
            * math.sqrt(2.0 / fan_in)
        ).astype(np.float32)
        self.params["bias"] = np.zeros(self.conv.out_channels,
                                       dtype=np.float32)

    @property
    def output_shape(self):
        return self._output_shape

    def forward(self, inputs, mode, rng=None):
        self._cache = inputs
        return tensor.conv2d_forward(inputs, self.params["weight"],
                                     self.params["bias"], self.conv)

    def backward(self, grad_out):
        grad_in, self.grads["weight"], self.grads["bias"] = \
            tensor.conv2d_backward(grad_out, self._require_cache(),
                                   self.params["weight"], self.conv)
        return grad_in

    def describe(self):
        return (f"{self.conv.in_channels}->{self.conv.out_channels} "
                f"{self.conv.kernel_h}x{self.conv.kernel_w} "
                f"s{self.conv.stride}")


class _Pool(Layer):

    def __init__(self, name, spec, input_shape):
        super().__init__(name, spec, input_shape)
        if len(self.input_shape) != 3:
            raise ConfigurationError(f"{name}: pooling needs a (C, H, W) "
                                     f"input")
        c, h, w = self.input_shape
        if h < 2 or w < 2:
            raise ConfigurationError(
                f"{name}: cannot pool spatial extent {h}x{w}")
        self._output_shape = (c, h // 2, w // 2)

    @property
    def output_shape(self):
        return self._output_shape

    def describe(self):
        return "2x2 s2"


class MaxPool2D(_Pool):

    def forward(self, inputs, mode, rng=None):
        output, argmax = tensor.maxpool2x2_forward(inputs)
        self._cache = (argmax, inputs.shape)
        return output

    def backward(self, grad_out):
        argmax, shape = self._require_cache()
        return tensor.maxpool2x2_backward(grad_out, argmax, shape)


class AvgPool2D(_Pool):

    def forward(self, inputs, mode, rng=None):
        self._cache = inputs.shape
        return tensor.avgpool2x2_forward(inputs)

    def backward(self, grad_out):
        return tensor.avgpool2x2_backward(grad_out, self._require_cache())


class ReLU(Layer):

    @property
    def output_shape(self):
        return self.input_shape

    def forward(self, inputs, mode, rng=None):
        self._cache = inputs
        return tensor.relu_forward(inputs)

    def backward(self, grad_out):
        return tensor.relu_backward(grad_out, self._require_cache())


class ELU(Layer):

    def __init__(self, name, spec, input_shape):
        super().__init__(name, spec, input_shape)
        self.alpha = _real(name, "alpha", spec.params.get("alpha", 1.0))

    @property
    def output_shape(self):
        return self.input_shape

    def forward(self, inputs, mode, rng=None):
        self._cache = inputs
        return tensor.elu_forward(inputs, self.alpha)

    def backward(self, grad_out):
        return tensor.elu_backward(grad_out, self._require_cache(),
                                   self.alpha)


class Dropout(Layer):

    def __init__(self, name, spec, input_shape):
        super().__init__(name, spec, input_shape)
        self.rate = _real(name, "rate", spec.params.get("rate", 0.5))
        if not 0.0 <= self.rate < 1.0:
            raise ConfigurationError(
                f"{name}: dropout rate must be in [0, 1), got {self.rate}")

    @property
    def output_shape(self):
        return self.input_shape

    def forward(self, inputs, mode, rng=None):
        output, mask = tensor.dropout(inputs, self.rate, mode, rng)
        self._cache = mask
        return output

    def backward(self, grad_out):
        return tensor.dropout_backward(grad_out, self._require_cache(),
                                       self.rate)

    def describe(self):
        return f"rate {self.rate}"


class Flatten(Layer):

    @property
    def output_shape(self):
        return (int(np.prod(self.input_shape)),)

    def forward(self, inputs, mode, rng=None):
        self._cache = inputs.shape
        return inputs.reshape(inputs.shape[0], -1)

    def backward(self, grad_out):
        return grad_out.reshape(self._require_cache())

    def describe(self):
        return f"{'x'.join(str(d) for d in self.input_shape)} -> " \
               f"{self.output_shape[0]}"


class Linear(Layer):

    def __init__(self, name, spec, input_shape, rng):
        super().__init__(name, spec, input_shape)

        if len(self.input_shape) != 1:
            raise ConfigurationError(
                f"{name}: linear needs a flat input, got {self.input_shape}; "
                f"add a flatten layer")
        if "out_features" not in spec.params:
            raise ConfigurationError(f"{name}: linear needs out_features")
        features = self.input_shape[0]
        declared = spec.params.get("in_features")
        if declared is not None and declared != features:
            raise ConfigurationError(
                f"{name}: declares {declared} input features but receives "
                f"{features}")

        out_features = _positive_int(name, "out_features",
                                     spec.params["out_features"])
        self.params["weight"] = (
            rng.standard_normal((features, out_features))
            * math.sqrt(2.0 / features)
        ).astype(np.float32)
        self.params["bias"] = np.zeros(out_features, dtype=np.float32)

    @property
    def output_shape(self):
        return (self.params["weight"].shape[1],)

    def forward(self, inputs, mode, rng=None):
        self._cache = inputs
        return tensor.linear_forward(inputs, self.params["weight"],
                                     self.params["bias"])

    def backward(self, grad_out):
        grad_in, self.grads["weight"], self.grads["bias"] = \
            tensor.linear_backward(grad_out, self._require_cache(),
                                   self.params["weight"])
        return grad_in

    def describe(self):
        w = self.params["weight"]
        return f"{w.shape[0]} -> {w.shape[1]}"


def _make_layer(name, spec, input_shape, rng):
    if spec.kind == "conv":
        return Conv2D(name, spec, input_shape, rng)
    if spec.kind == "linear":
        return Linear(name, spec, input_shape, rng)
    return {"maxpool": MaxPool2D,
            "avgpool": AvgPool2D,
            "relu": ReLU,
            "elu": ELU,
            "dropout": Dropout,
            "flatten": Flatten}[spec.kind](name, spec, input_shape)


#
# NETWORK
#
class Network:
    """
    A fixed sequential chain of layers mapping (N, C, H, W) images to
    (N, 1) steering predictions.
    """

    def __init__(self, layers, input_shape, name="custom"):
        """
        :param layers: list of Layer
        :param input_shape: tuple, (C, H, W)
        :param name: str
        """
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.name = name

    @property
    def specs(self):
        return [layer.spec for layer in self.layers]

    @property
    def output_shape(self):
        return self.layers[-1].output_shape

    def parameters(self):
        """
        :return: dict, "<layer>.<param>" -> numpy.ndarray (live references)
        """
        return {f"{layer.name}.{key}": value
                for layer in self.layers
                for key, value in layer.params.items()}

    def gradients(self):
        return {f"{layer.name}.{key}": value
                for layer in self.layers
                for key, value in layer.grads.items()}

    def set_parameter(self, key, value):
        layer_name, param = key.rsplit(".", 1)
        for layer in self.layers:
            if layer.name == layer_name and param in layer.params:
                layer.params[param] = value
                return
        raise KeyError(key)

    def astype(self, dtype):
        """Casts every parameter in place, e.g. to float64 for checks."""
        for layer in self.layers:
            for key in layer.params:
                layer.params[key] = layer.params[key].astype(dtype)
        return self

    def forward(self, batch, mode=EVAL, rng=None):
        """
        :param batch: numpy.ndarray, (N,) + input_shape
        :param mode: str, "train" or "eval"
        :param rng: numpy.random.Generator, drives dropout in train mode
        :return: numpy.ndarray, (N, 1)
        """
        if mode not in MODES:
            raise ConfigurationError(f"unknown mode: {mode}")
        if batch.ndim != len(self.input_shape) + 1:
            raise DimensionError(
                f"batch must have rank {len(self.input_shape) + 1}, got "
                f"shape {batch.shape}", axis="rank")
        if tuple(batch.shape[1:]) != self.input_shape:
            raise DimensionError(
                f"batch sample shape {batch.shape[1:]} does not match "
                f"{self.input_shape}", axis="sample")
        if mode == TRAIN and rng is None:
            rng = np.random.default_rng(0)

        out = batch
        for layer in self.layers:
            out = layer.forward(out, mode, rng)
        return out

    def backward(self, loss_grad):
        """
        :param loss_grad: numpy.ndarray, gradient of the loss w.r.t. the
                          forward output
        :return: dict, parameter gradients keyed like parameters()
        """
        grad = loss_grad
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return self.gradients()

    def predict(self, batch):
        return self.forward(batch, EVAL)[:, 0]

    def summary(self):
        """
        :return: str, layer table with per-layer and total parameter counts
        """
        rows = [f"{'layer':<10} {'kind':<8} {'output':<16} {'params':>9}  "
                f"detail"]
        for layer in self.layers:
            count = sum(p.size for p in layer.params.values())
            shape = "x".join(str(d) for d in layer.output_shape)
            rows.append(f"{layer.name:<10} {layer.spec.kind:<8} "
                        f"{shape:<16} {count:>9}  {layer.describe()}")
        rows.append(f"total parameters: {count_parameters(self)}")
        return "\n".join(rows)


def count_parameters(net):
    """
    :param net: Network
    :return: int
    """
    return int(sum(p.size for p in net.parameters().values()))


#
# BUILDERS
#
def build_custom(specs, input_shape=INPUT_SHAPE, seed=0, name="custom"):
    """
    Realizes a layer spec list, inferring channel and feature counts from
    the chain.

    :param specs: list of LayerSpec | dict
    :param input_shape: tuple, (C, H, W)
    :param seed: int, weight initialization seed
    :param name: str
    :return: Network
    """
    if not specs:
        raise ConfigurationError("layer spec list is empty")

    rng = np.random.default_rng(seed)
    counters = {}
    layers = []
    shape = tuple(input_shape)
    for position, spec in enumerate(specs):
        if isinstance(spec, dict):
            spec = LayerSpec.from_dict(spec)
        counters[spec.kind] = counters.get(spec.kind, 0) + 1
        layer_name = (spec.kind if spec.kind == "flatten"
                      else f"{spec.kind}{counters[spec.kind]}")
        try:
            layer = _make_layer(layer_name, spec, shape, rng)
        except ConfigurationError as e:
            raise ConfigurationError(f"layer {position} ({spec.kind}): {e}")
        layers.append(layer)
        shape = layer.output_shape

    if shape != (1,):
        raise ConfigurationError(
            f"network must end in a single output, ends in {shape}")

    net = Network(layers, input_shape, name=name)
    LOGGER.debug(f"built {name} network with {count_parameters(net)} "
                 f"parameters")
    return net


def laksnet_specs(dropout_rates=(0.25, 0.5)):
    """
    Four 3x3/3x3/3x3/5x5 convolutions each followed by ReLU and 2x2 max
    pooling, then dropout, flatten (64x1x9 = 576), linear 576 -> 256, ReLU,
    dropout and the 256 -> 1 output.
    """
    specs = []
    for channels, kernel in ((16, 3), (32, 3), (64, 3), (64, 5)):
        specs += [LayerSpec("conv", out_channels=channels, kernel=kernel),
                  LayerSpec("relu"),
                  LayerSpec("maxpool")]
    specs += [LayerSpec("dropout", rate=dropout_rates[0]),
              LayerSpec("flatten"),
              LayerSpec("linear", out_features=256),
              LayerSpec("relu"),
              LayerSpec("dropout", rate=dropout_rates[1]),
              LayerSpec("linear", out_features=1)]
    return specs


def build_laksnet(seed=0, input_shape=INPUT_SHAPE, dropout_rates=(0.25, 0.5)):
    """
    :param seed: int
    :param input_shape: tuple, must yield a 576-wide flatten
    :param dropout_rates: tuple, (post-conv, pre-output)
    :return: Network
    """
    net = build_custom(laksnet_specs(dropout_rates), input_shape, seed,
                       name="laksnet")
    flatten = next(layer for layer in net.layers if layer.spec.kind ==
                   "flatten")
    if flatten.output_shape != (LAKSNET_FLATTEN,):
        raise ConfigurationError(
            f"input shape {tuple(input_shape)} gives a flatten extent of "
            f"{flatten.output_shape[0]}, LaksNet needs {LAKSNET_FLATTEN}")
    return net


def pilotnet_specs(dropout_rate=0.5):
    specs = []
    for channels, kernel, stride in ((24, 5, 2), (36, 5, 2), (48, 5, 2),
                                     (64, 3, 1), (64, 3, 1)):
        specs += [LayerSpec("conv", out_channels=channels, kernel=kernel,
                            stride=stride),
                  LayerSpec("relu")]
    specs += [LayerSpec("flatten"),
              LayerSpec("dropout", rate=dropout_rate)]
    for features in (100, 50, 10):
        specs += [LayerSpec("linear", out_features=features),
                  LayerSpec("relu")]
    specs.append(LayerSpec("linear", out_features=1))
    return specs


def build_pilotnet(seed=0, input_shape=INPUT_SHAPE, dropout_rate=0.5):
    return build_custom(pilotnet_specs(dropout_rate), input_shape, seed,
                        name="pilotnet")


def conv_stack_spec(kernel_sizes,
                    channels=None,
                    input_shape=INPUT_SHAPE,
                    pooling="max",
                    activation="relu",
                    dropout_rates=(0.25, 0.5),
                    hidden=256):
    """
    A conv stack in the LaksNet mould for the kernel ablations. A pooling
    layer follows a convolution whenever the kernels still to come fit the
    pooled extent.

    :param kernel_sizes: sequence of int
    :param channels: sequence of int, defaults to 16, 32, then 64
    :param input_shape: tuple, (C, H, W)
    :param pooling: str, "max" or "avg"
    :param activation: str, "relu" or "elu"
    :param dropout_rates: tuple
    :param hidden: int, width of the hidden linear layer
    :return: list of LayerSpec
    """
    if pooling not in ("max", "avg"):
        raise ConfigurationError(f"unknown pooling: {pooling}")
    if activation not in ("relu", "elu"):
        raise ConfigurationError(f"unknown activation: {activation}")
    if channels is None:
        channels = [(16, 32)[i] if i < 2 else 64
                    for i in range(len(kernel_sizes))]

    pool_kind = "maxpool" if pooling == "max" else "avgpool"
    _, h, w = input_shape
    specs = []
    for i, (kernel, width) in enumerate(zip(kernel_sizes, channels)):
        specs += [LayerSpec("conv", out_channels=width, kernel=kernel),
                  LayerSpec(activation)]
        h, w = h - kernel + 1, w - kernel + 1
        shrink = sum(k - 1 for k in kernel_sizes[i + 1:])
        if h >= 2 and w >= 2 and h // 2 - shrink >= 1 and \
                w // 2 - shrink >= 1:
            specs.append(LayerSpec(pool_kind))
            h, w = h // 2, w // 2

    specs += [LayerSpec("dropout", rate=dropout_rates[0]),
              LayerSpec("flatten"),
              LayerSpec("linear", out_features=hidden),
              LayerSpec(activation),
              LayerSpec("dropout", rate=dropout_rates[1]),
              LayerSpec("linear", out_features=1)]
    return specs


# Kernel ablations of the architecture search.
PRESETS = {
    "seven-3x3": (3, 3, 3, 3, 3, 3, 3),
    "five-5x5": (5, 5, 5, 5, 5),
    "five-7x7-5x5": (7, 7, 7, 5, 5),
    "three-7x7": (7, 7, 7),
    "three-3x3": (3, 3, 3),
}


def build_model(choice, seed=0, input_shape=INPUT_SHAPE):
    """
    :param choice: str, laksnet | pilotnet | custom:FILE | preset:NAME
    :param seed: int
    :param input_shape: tuple
    :return: Network
    """
    if choice == "laksnet":
        return build_laksnet(seed, input_shape)
    if choice == "pilotnet":
        return build_pilotnet(seed, input_shape)
    if choice.startswith("custom:"):
        path = choice[len("custom:"):]
        with open(path, encoding="utf-8") as f:
            specs = specs_from_json(f.read())
        return build_custom(specs, input_shape, seed)
    if choice.startswith("preset:"):
        preset = choice[len("preset:"):]
        if preset not in PRESETS:
            raise ConfigurationError(
                f"unknown preset {preset!r}, expected one of "
                f"{', '.join(sorted(PRESETS))}")
        return build_custom(conv_stack_spec(PRESETS[preset],
                                            input_shape=input_shape),
                            input_shape, seed, name=preset)
    raise ConfigurationError(f"unknown model: {choice}")


#
# LOSS
#
def mse_loss(actual, predicted):
    """
    (1/n) sum (y_i - yhat_i)^2 and its gradient w.r.t. the predictions.

    :param actual: array-like, (n,)
    :param predicted: numpy.ndarray, (n,) or (n, 1)
    :return: tuple, (loss, gradient shaped like predicted)
    """
    predicted = np.asarray(predicted)
    y = np.asarray(actual, dtype=predicted.dtype if
                   np.issubdtype(predicted.dtype, np.floating)
                   else np.float64).reshape(-1)
    y_hat = predicted.reshape(-1)
    if y.size == 0:
        raise ConfigurationError("mse_loss needs at least one sample")
    if y.size != y_hat.size:
        raise DimensionError(
            f"{y.size} labels against {y_hat.size} predictions",
            axis="samples")

    diff = y - y_hat
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    grad = (-2.0 / y.size) * diff
    return loss, grad.reshape(predicted.shape).astype(y_hat.dtype)


#
# OPTIMIZER
#
class AdamState:

    def __init__(self,
                 learning_rate=DEFAULT_LEARNING_RATE,
                 beta1=ADAM_BETA1,
                 beta2=ADAM_BETA2,
                 epsilon=ADAM_EPSILON):
        """
        :param learning_rate: float
        :param beta1: float
        :param beta2: float
        :param epsilon: float
        """
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.m = {}
        self.v = {}


def adam_step(params, grads, state):
    """
    One bias-corrected Adam update, applied in place.

    :param params: dict, name -> numpy.ndarray
    :param grads: dict, name -> numpy.ndarray
    :param state: AdamState
    :return: tuple, (params, state)
    """
    for key, grad in grads.items():
        if key not in params:
            raise TrainingError(f"gradient for unknown parameter {key}",
                                layer=key.rsplit(".", 1)[0])
        if grad.shape != params[key].shape:
            raise DimensionError(
                f"{key}: gradient shape {grad.shape} does not match "
                f"{params[key].shape}", axis=key)
        if not np.all(np.isfinite(grad)):
            layer = key.rsplit(".", 1)[0]
            raise TrainingError(f"non-finite gradient in {key}", layer=layer)

    state.step_count += 1
    t = state.step_count
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t

    for key, grad in grads.items():
        param = params[key]
        if key not in state.m:
            state.m[key] = np.zeros_like(param)
            state.v[key] = np.zeros_like(param)

        m, v = state.m[key], state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * (grad * grad)

        m_hat = m / correction1
        v_hat = v / correction2
        update = state.learning_rate * m_hat / (np.sqrt(v_hat) +
                                                state.epsilon)
        param -= update.astype(param.dtype, copy=False)

    return params, state
