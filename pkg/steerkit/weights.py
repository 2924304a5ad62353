"""
Binary weights and checkpoint files.

A section is a 4-byte tag, a u16 format version, a u32 record count, the
records and a CRC32 over every preceding byte of the section. A record is a
u16 name length, the UTF-8 name, a u8 rank, one u32 per extent and the
float32 data, all little-endian. Weights files hold one "LNW1" section whose
first record, "spec", carries the network description as JSON bytes;
checkpoints append an "ADAM" section with the optimizer state.
"""
import json
import logging
import os
import struct
import zlib

import numpy as np

from steerkit.errors import (
    ConfigurationError,
    CorruptWeightsError,
    IncompatibleWeightsError,
)
from steerkit.nn import AdamState, LayerSpec, build_custom


LOGGER = logging.getLogger(__name__)

WEIGHTS_MAGIC = b"LNW1"
ADAM_MAGIC = b"ADAM"
FORMAT_VERSION = 1
SPEC_RECORD = "spec"

_HEADER = struct.Struct("<4sHI")
_U16 = struct.Struct("<H")
_U8 = struct.Struct("<B")
_U32 = struct.Struct("<I")


#
# SECTIONS
#
def encode_section(magic, records):
    """
    :param magic: bytes, 4-byte section tag
    :param records: list of (str, numpy.ndarray)
    :return: bytes
    """
    chunks = [_HEADER.pack(magic, FORMAT_VERSION, len(records))]
    for name, array in records:
        encoded = name.encode("utf-8")
        data = np.ascontiguousarray(array, dtype="<f4")
        chunks.append(_U16.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(_U8.pack(data.ndim))
        chunks.extend(_U32.pack(extent) for extent in data.shape)
        chunks.append(data.tobytes())

    body = b"".join(chunks)
    return body + _U32.pack(zlib.crc32(body))


class _Reader:

    def __init__(self, buffer, offset):
        self.buffer = buffer
        self.offset = offset

    def take(self, size):
        if self.offset + size > len(self.buffer):
            raise CorruptWeightsError(
                f"truncated file: wanted {size} bytes at offset "
                f"{self.offset}, {len(self.buffer) - self.offset} left")
        chunk = self.buffer[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt):
        return fmt.unpack(self.take(fmt.size))


def decode_section(buffer, offset, magic):
    """
    :param buffer: bytes
    :param offset: int, where the section starts
    :param magic: bytes, expected section tag
    :return: tuple, (list of (str, numpy.ndarray), offset after the section)
    """
    reader = _Reader(buffer, offset)
    found, version, count = reader.unpack(_HEADER)
    if found != magic:
        raise CorruptWeightsError(f"expected section {magic!r}, found "
                                  f"{found!r}")
    if version != FORMAT_VERSION:
        raise CorruptWeightsError(f"unsupported format version {version}")

    records = []
    for _ in range(count):
        (name_length,) = reader.unpack(_U16)
        try:
            name = reader.take(name_length).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CorruptWeightsError(f"record name is not UTF-8: {e}")
        (rank,) = reader.unpack(_U8)
        shape = tuple(reader.unpack(_U32)[0] for _ in range(rank))
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = np.frombuffer(reader.take(4 * size), dtype="<f4")
        records.append((name, data.reshape(shape).astype(np.float32)))

    end = reader.offset
    (checksum,) = reader.unpack(_U32)
    if checksum != zlib.crc32(buffer[offset:end]):
        raise CorruptWeightsError(f"checksum mismatch in section {magic!r}")

    return records, reader.offset


#
# NETWORK RECORDS
#
def _text_record(name, text):
    return name, np.frombuffer(text.encode("utf-8"), dtype=np.uint8) \
        .astype(np.float32)


def _record_text(array):
    try:
        return array.astype(np.uint8).tobytes().decode("utf-8")
    except UnicodeDecodeError as e:
        raise CorruptWeightsError(f"spec record is not UTF-8: {e}")


def network_records(net):
    description = json.dumps({"name": net.name,
                              "input_shape": list(net.input_shape),
                              "layers": [s.as_dict() for s in net.specs]},
                             sort_keys=True)
    return [_text_record(SPEC_RECORD, description)] + \
        list(net.parameters().items())


def network_from_records(records):
    """
    :param records: list of (str, numpy.ndarray), spec record first
    :return: Network
    """
    if not records or records[0][0] != SPEC_RECORD:
        raise CorruptWeightsError("missing leading spec record")

    try:
        description = json.loads(_record_text(records[0][1]))
        specs = [LayerSpec.from_dict(e) for e in description["layers"]]
        input_shape = tuple(description["input_shape"])
        name = description["name"]
    except (ValueError, KeyError, TypeError) as e:
        raise CorruptWeightsError(f"unreadable spec record: {e}")

    try:
        net = build_custom(specs, input_shape, seed=0, name=name)
    except ConfigurationError as e:
        raise IncompatibleWeightsError(f"stored layer specs do not build: "
                                       f"{e}")

    expected = net.parameters()
    stored = dict(records[1:])
    if set(stored) != set(expected):
        missing = sorted(set(expected) - set(stored))
        extra = sorted(set(stored) - set(expected))
        raise IncompatibleWeightsError(
            f"parameter sets differ, missing {missing}, unexpected {extra}")
    for key, value in stored.items():
        if value.shape != expected[key].shape:
            raise IncompatibleWeightsError(
                f"{key}: stored shape {value.shape} does not match "
                f"{expected[key].shape}")
        net.set_parameter(key, value)

    return net


#
# FILES
#
def _write(path, payload):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def _read(path):
    with open(path, "rb") as f:
        return f.read()


def save_weights(net, path):
    """
    :param net: Network
    :param path: str
    """
    _write(path, encode_section(WEIGHTS_MAGIC, network_records(net)))
    LOGGER.info(f"saved {net.name} weights to {path}")


def load_weights(path, like=None):
    """
    :param path: str
    :param like: Network, optional; the loaded network must share its
                 layer specs and input shape
    :return: Network
    """
    buffer = _read(path)
    records, _ = decode_section(buffer, 0, WEIGHTS_MAGIC)
    net = network_from_records(records)
    _check_like(net, like)
    return net


def _check_like(net, like):
    if like is None:
        return
    if net.input_shape != like.input_shape or net.specs != like.specs:
        raise IncompatibleWeightsError(
            f"stored {net.name} network does not match the expected "
            f"{like.name} layout")


def save_checkpoint(path, net, state, epochs_done):
    """
    :param path: str
    :param net: Network
    :param state: AdamState
    :param epochs_done: int, completed epochs
    """
    records = []
    for key in sorted(state.m):
        records.append((f"m.{key}", state.m[key]))
        records.append((f"v.{key}", state.v[key]))
    records.append(("step_count", np.array([state.step_count])))
    records.append(("epochs_done", np.array([epochs_done])))
    records.append(("hyper", np.array([state.learning_rate, state.beta1,
                                       state.beta2, state.epsilon])))

    _write(path, encode_section(WEIGHTS_MAGIC, network_records(net)) +
           encode_section(ADAM_MAGIC, records))
    LOGGER.info(f"checkpoint after epoch {epochs_done} written to {path}")


def load_checkpoint(path, like=None):
    """
    :param path: str
    :param like: Network, optional layout to check against
    :return: tuple, (Network, AdamState, completed epochs)
    """
    buffer = _read(path)
    records, offset = decode_section(buffer, 0, WEIGHTS_MAGIC)
    net = network_from_records(records)
    _check_like(net, like)

    adam, _ = decode_section(buffer, offset, ADAM_MAGIC)
    adam = dict(adam)
    try:
        lr, beta1, beta2, epsilon = (float(x) for x in adam.pop("hyper"))
        state = AdamState(lr, beta1, beta2, epsilon)
        state.step_count = int(adam.pop("step_count")[0])
        epochs_done = int(adam.pop("epochs_done")[0])
    except (KeyError, ValueError) as e:
        raise CorruptWeightsError(f"incomplete optimizer section: {e}")

    params = net.parameters()
    for key, value in adam.items():
        kind, _, name = key.partition(".")
        if kind not in ("m", "v") or name not in params:
            raise IncompatibleWeightsError(f"unexpected optimizer record "
                                           f"{key}")
        if value.shape != params[name].shape:
            raise IncompatibleWeightsError(
                f"{key}: moment shape {value.shape} does not match "
                f"{params[name].shape}")
        getattr(state, kind)[name] = value

    return net, state, epochs_done
