import base64
import json
import logging

from urllib.parse import urlparse

import websocket

from steerkit.defs import SteerCommand, TelemetryMessage
from steerkit.driveserver import (
    MESSAGE,
    NOOP,
    OPEN,
    PING,
    PONG,
    SIO_CONNECT,
    event_frame,
    parse_event,
)
from steerkit.errors import ProtocolError
from steerkit.simtrack import Policy


LOGGER = logging.getLogger(__name__)


def websocket_url(url):
    """
    :param url: str, e.g. "http://127.0.0.1:4567" or "ws://host:port"
    :return: str, the Engine.IO websocket endpoint
    """
    parsed = urlparse(url if "//" in url else f"ws://{url}")
    scheme = {"http": "ws", "https": "wss"}.get(parsed.scheme, parsed.scheme)
    return f"{scheme}://{parsed.netloc}/socket.io/?EIO=3&transport=websocket"


class SimulatorClient:
    """
    Speaks the simulator side of the drive protocol over a websocket:
    telemetry out, steer back.
    """

    def __init__(self, url, timeout=10.0):
        """
        :param url: str, server address
        :param timeout: float, seconds to wait for any frame
        """
        self.url = websocket_url(url)
        self.timeout = timeout
        self.handshake = None
        self._ws = None

    def connect(self):
        self._ws = websocket.create_connection(self.url, timeout=self.timeout)
        opened = self._recv()
        if not opened.startswith(OPEN):
            raise ProtocolError(f"expected an open packet, got "
                                f"{opened[:16]!r}")
        self.handshake = json.loads(opened[1:])
        connected = self._recv()
        if connected != MESSAGE + SIO_CONNECT:
            raise ProtocolError(f"expected namespace connect, got "
                                f"{connected[:16]!r}")
        LOGGER.info(f"connected to {self.url} as {self.handshake['sid']}")
        return self

    def _recv(self):
        try:
            frame = self._ws.recv()
        except websocket.WebSocketConnectionClosedException:
            raise ProtocolError("server closed the connection")
        if not frame:
            raise ProtocolError("server closed the connection")
        return frame

    def send_raw(self, frame):
        self._ws.send(frame)

    def ping(self):
        self._ws.send(PING)
        reply = self._recv()
        if reply != PONG:
            raise ProtocolError(f"expected pong, got {reply[:16]!r}")

    def _next_event(self):
        while True:
            frame = self._recv()
            if frame in (NOOP, PONG, MESSAGE + SIO_CONNECT):
                continue
            return frame

    def send_telemetry(self, message):
        """
        :param message: TelemetryMessage
        :return: SteerCommand, None when the server answers "manual"
        """
        self._ws.send(event_frame("telemetry", message.as_payload()))
        name, payload = parse_event(self._next_event())
        if name == "manual":
            return None
        if name != "steer":
            raise ProtocolError(f"unexpected reply event {name!r}")
        return SteerCommand.from_payload(payload)

    def send_manual(self):
        self._ws.send(event_frame("manual", {}))
        return parse_event(self._next_event())

    def close(self):
        if self._ws is not None:
            self._ws.close()
            self._ws = None

    def __enter__(self):
        return self.connect()

    def __exit__(self, exc_type, exc_value, traceback):
        self.close()


class RemotePolicy(Policy):
    """Asks a drive server for every command, as the simulator would."""

    def __init__(self, client):
        """
        :param client: SimulatorClient, connected
        """
        self.client = client
        self._last = SteerCommand(0.0, 0.0)

    def act(self, observation):
        image = base64.b64encode(observation.jpeg).decode("ascii")
        message = TelemetryMessage(self._last.steering_angle,
                                   self._last.throttle,
                                   observation.state.speed,
                                   image)
        command = self.client.send_telemetry(message)
        if command is None:
            raise ProtocolError("server switched to manual mode")
        self._last = command
        return command

    def close(self):
        self.client.close()
