"""
Drive server for the driving simulator.

The simulator speaks Socket.IO over Engine.IO protocol 3: it opens a session
with an HTTP long-polling handshake or directly over a websocket, sends
"telemetry" events carrying its speed and a base64 JPEG center frame, and
expects one "steer" event back per telemetry event.
"""
import base64
import json
import logging
import signal
import time
import uuid

from abc import ABC, abstractmethod
from threading import Event, Thread
from urllib.parse import parse_qs

import eventlet
import eventlet.queue
import eventlet.semaphore
import eventlet.websocket
import eventlet.wsgi

from steerkit.defs import (
    DEFAULT_KP,
    DEFAULT_PORT,
    DEFAULT_TARGET_SPEED,
    PING_INTERVAL_MS,
    PING_TIMEOUT_MS,
    SteerCommand,
    TelemetryMessage,
)
from steerkit.errors import ProtocolError, StartupError


LOGGER = logging.getLogger(__name__)

# Engine.IO packet types
OPEN = "0"
CLOSE = "1"
PING = "2"
PONG = "3"
MESSAGE = "4"
UPGRADE = "5"
NOOP = "6"

# Socket.IO packet types, carried inside MESSAGE packets
SIO_CONNECT = "0"
SIO_EVENT = "2"

PROBE = "probe"
MANUAL_FRAME = '42["manual",{}]'


#
# FRAMING
#
def _dumps(document):
    return json.dumps(document, separators=(",", ":"))


def open_packet(sid, upgrades):
    """
    :param sid: str
    :param upgrades: list of str, transports the client may upgrade to
    :return: str
    """
    return OPEN + _dumps({"sid": sid,
                          "upgrades": upgrades,
                          "pingInterval": PING_INTERVAL_MS,
                          "pingTimeout": PING_TIMEOUT_MS})


def event_frame(name, payload):
    return MESSAGE + SIO_EVENT + _dumps([name, payload])


def parse_event(frame):
    """
    :param frame: str, e.g. '42["telemetry",{...}]'
    :return: tuple, (event name, payload or None)
    """
    if not frame.startswith(MESSAGE + SIO_EVENT):
        raise ProtocolError(f"not an event packet: {frame[:16]!r}")
    try:
        event = json.loads(frame[2:])
    except ValueError as e:
        raise ProtocolError(f"event body is not JSON: {e}")
    if not isinstance(event, list) or not event or \
            not isinstance(event[0], str):
        raise ProtocolError("event body must be [name, payload?]")
    return event[0], event[1] if len(event) > 1 else None


def encode_payload(packets):
    """Polling payload framing: <length>:<packet> for every packet."""
    return "".join(f"{len(packet)}:{packet}" for packet in packets)


def decode_payload(body):
    """
    :param body: str
    :return: list of str
    """
    packets = []
    position = 0
    while position < len(body):
        colon = body.find(":", position)
        if colon < 0:
            raise ProtocolError(f"missing length separator at {position}")
        try:
            length = int(body[position:colon])
        except ValueError:
            raise ProtocolError(f"bad packet length "
                                f"{body[position:colon]!r}")
        end = colon + 1 + length
        if length < 1 or end > len(body):
            raise ProtocolError(f"packet length {length} overruns payload")
        packets.append(body[colon + 1:end])
        position = end
    return packets


#
# SESSIONS
#
class EngineIOSession(ABC):
    """
    One Engine.IO session. Outbound packets are queued and delivered in
    order by whichever transport currently owns the session: the polling
    GET requests, or a websocket writer once upgraded.
    """

    def __init__(self, sid, clock=time.monotonic):
        """
        :param sid: str
        :param clock: callable returning seconds, stamps client activity
        """
        self.sid = sid
        self.outbound = eventlet.queue.Queue()
        self.upgraded = False
        self.closed = False
        self._clock = clock
        self.last_seen = clock()

    def touch(self):
        self.last_seen = self._clock()

    def idle_for(self):
        """:return: float, seconds since the client was last heard from"""
        return self._clock() - self.last_seen

    @abstractmethod
    def on_ready(self):
        """Called once the open packet is queued."""
        pass

    @abstractmethod
    def on_message(self, data):
        """
        :param data: str, MESSAGE packet body without the type prefix
        """
        pass

    @abstractmethod
    def on_close(self, permanent=False):
        pass

    def send(self, packet):
        if not self.closed:
            self.outbound.put(packet)

    def receive(self, packet):
        """
        :param packet: str, one inbound Engine.IO packet
        """
        self.touch()
        kind, data = packet[:1], packet[1:]
        if kind == PING:
            self.send(PONG + data)
        elif kind == MESSAGE:
            self.on_message(data)
        elif kind == CLOSE:
            self.close()
        elif kind in (NOOP, UPGRADE, PONG):
            pass
        else:
            raise ProtocolError(f"unexpected packet type {kind!r}")

    def poll(self, timeout):
        """
        Waits up to timeout for outbound packets and drains the queue.

        :param timeout: float, seconds
        :return: list of str, a CLOSE packet ends the list once closed
        """
        self.touch()
        packets = []
        try:
            packets.append(self.outbound.get(timeout=timeout))
            while not self.outbound.empty():
                packets.append(self.outbound.get_nowait())
        except eventlet.queue.Empty:
            pass
        self.touch()
        if None in packets:
            packets = packets[:packets.index(None)] + [CLOSE]
        return packets

    def close(self):
        if not self.closed:
            self.closed = True
            self.outbound.put(None)
            self.on_close(permanent=True)


class TelemetrySession(EngineIOSession):

    def __init__(self,
                 sid,
                 predictor,
                 target_speed=DEFAULT_TARGET_SPEED,
                 kp=DEFAULT_KP,
                 clock=time.monotonic):
        """
        :param sid: str
        :param predictor: control.SteeringPredictor
        :param target_speed: float, m/s
        :param kp: float, throttle gain
        :param clock: callable returning seconds
        """
        super().__init__(sid, clock)
        self.predictor = predictor
        self.target_speed = target_speed
        self.kp = kp
        self._inference = eventlet.semaphore.Semaphore(1)

    def on_ready(self):
        self.send(MESSAGE + SIO_CONNECT)

    def on_message(self, data):
        if data.startswith(SIO_CONNECT):
            self.send(MESSAGE + SIO_CONNECT)
            return
        reply = self.handle_telemetry(MESSAGE + data)
        if reply is not None:
            self.send(reply)

    def on_close(self, permanent=False):
        LOGGER.info(f"session {self.sid} closed")

    def handle_telemetry(self, frame):
        """
        :param frame: str, '42["telemetry",{...}]' or '42["manual",...]'
        :return: str, the reply frame, None for events needing no reply
        """
        try:
            name, payload = parse_event(frame)
        except ProtocolError as e:
            LOGGER.warning(f"session {self.sid}: dropping bad frame, "
                           f"steering straight: {e}")
            return event_frame("steer", SteerCommand(0.0, 0.0).as_payload())

        if name == "manual" or (name == "telemetry" and not payload):
            return MANUAL_FRAME
        if name != "telemetry":
            LOGGER.debug(f"session {self.sid}: ignoring event {name!r}")
            return None

        try:
            message = TelemetryMessage.from_payload(payload)
            image = base64.b64decode(message.image)
            with self._inference:
                command = self.predictor.command(image, message.speed,
                                                 self.target_speed, self.kp)
        except Exception as e:
            # Covers Pillow's DecompressionBombError as well: no frame,
            # however malformed, ends the session.
            LOGGER.warning(f"session {self.sid}: frame error, steering "
                           f"straight without throttle: "
                           f"{type(e).__name__}: {e}")
            command = SteerCommand(0.0, 0.0)
        else:
            LOGGER.info(f"steering {command.steering_angle:+.4f} throttle "
                        f"{command.throttle:.4f} speed {message.speed:.4f}")

        return event_frame("steer", command.as_payload())


#
# SERVER
#
def _first(query, key):
    values = query.get(key)
    return values[0] if values else None


def _respond(start_response, status, body):
    payload = body.encode("utf-8")
    start_response(status, [("Content-Type", "text/plain; charset=UTF-8"),
                            ("Content-Length", str(len(payload)))])
    return [payload]


class DriveServer:
    """
    WSGI application serving TelemetrySessions on an eventlet hub. start()
    runs the hub on a daemon thread, run() blocks until interrupted.
    """

    def __init__(self,
                 predictor,
                 host="",
                 port=DEFAULT_PORT,
                 target_speed=DEFAULT_TARGET_SPEED,
                 kp=DEFAULT_KP,
                 clock=time.monotonic):
        """
        :param predictor: control.SteeringPredictor
        :param host: str, interface to bind, "" for all
        :param port: int, 0 picks a free port
        :param target_speed: float
        :param kp: float
        :param clock: callable returning seconds, for session timeouts
        """
        self.predictor = predictor
        self.host = host
        self.port = port
        self.target_speed = target_speed
        self.kp = kp
        self.clock = clock
        self.sessions = {}

        self._websocket_app = eventlet.websocket.WebSocketWSGI(
            self._handle_websocket)
        self._serve_thread = Thread(target=self._serve, daemon=True)
        self._bound = Event()
        self._stopping = Event()
        self._startup_error = None

    def handshake(self, upgrades):
        """
        Opens a session and queues its open and namespace connect packets.

        :param upgrades: list of str
        :return: TelemetrySession
        """
        sid = uuid.uuid4().hex
        session = TelemetrySession(sid, self.predictor, self.target_speed,
                                   self.kp, self.clock)
        self.sessions[sid] = session
        session.send(open_packet(sid, upgrades))
        session.on_ready()
        LOGGER.info(f"session {sid} opened")
        return session

    def reap_idle(self):
        """
        Closes sessions not heard from within the advertised ping interval
        plus ping timeout.

        :return: list of str, the sids closed
        """
        limit = (PING_INTERVAL_MS + PING_TIMEOUT_MS) / 1000.0
        reaped = [sid for sid, session in list(self.sessions.items())
                  if session.idle_for() > limit]
        for sid in reaped:
            session = self.sessions.pop(sid, None)
            if session is not None:
                LOGGER.info(f"session {sid} timed out")
                session.close()
        return reaped

    def __call__(self, environ, start_response):
        if environ.get("PATH_INFO", "").rstrip("/") != "/socket.io":
            return _respond(start_response, "400 BAD REQUEST",
                            "unknown path")
        query = parse_qs(environ.get("QUERY_STRING", ""))
        if _first(query, "EIO") != "3":
            return _respond(start_response, "400 BAD REQUEST",
                            "unsupported protocol version")

        sid = _first(query, "sid")
        if sid is not None and sid not in self.sessions:
            return _respond(start_response, "400 BAD REQUEST",
                            "unknown session")

        transport = _first(query, "transport")
        if transport == "websocket" and \
                environ.get("HTTP_UPGRADE", "").lower() == "websocket":
            return self._websocket_app(environ, start_response)
        if transport == "polling":
            return self._handle_polling(environ, start_response, sid)
        return _respond(start_response, "400 BAD REQUEST", "bad transport")

    def _handle_polling(self, environ, start_response, sid):
        method = environ.get("REQUEST_METHOD", "GET")
        if sid is None:
            if method != "GET":
                return _respond(start_response, "400 BAD REQUEST",
                                "handshake must be a GET")
            session = self.handshake(["websocket"])
            return _respond(start_response, "200 OK",
                            encode_payload(session.poll(timeout=0)))

        session = self.sessions[sid]
        if method == "GET":
            if session.upgraded:
                return _respond(start_response, "200 OK",
                                encode_payload([NOOP]))
            packets = session.poll(timeout=PING_INTERVAL_MS / 1000.0)
            return _respond(start_response, "200 OK",
                            encode_payload(packets or [NOOP]))

        if method == "POST":
            length = int(environ.get("CONTENT_LENGTH") or 0)
            body = environ["wsgi.input"].read(length).decode("utf-8")
            try:
                for packet in decode_payload(body):
                    session.receive(packet)
            except ProtocolError as e:
                LOGGER.warning(f"session {sid}: {e}")
                return _respond(start_response, "400 BAD REQUEST", str(e))
            if session.closed:
                self.sessions.pop(sid, None)
            return _respond(start_response, "200 OK", "ok")

        return _respond(start_response, "400 BAD REQUEST", "bad method")

    def _handle_websocket(self, ws):
        sid = _first(parse_qs(ws.environ.get("QUERY_STRING", "")), "sid")
        if sid is None:
            session = self.handshake([])
        else:
            session = self.sessions[sid]
            if ws.wait() != PING + PROBE:
                LOGGER.warning(f"session {sid}: upgrade without probe")
                ws.close()
                return
            ws.send(PONG + PROBE)
            if ws.wait() != UPGRADE:
                LOGGER.warning(f"session {sid}: upgrade not completed")
                ws.close()
                return
            # Releases a GET still waiting on the polling transport.
            session.send(NOOP)
            session.upgraded = True
            LOGGER.info(f"session {sid} upgraded to websocket")

        writer = eventlet.spawn(self._write, session, ws)
        try:
            while True:
                message = ws.wait()
                if message is None:
                    break
                try:
                    session.receive(message)
                except ProtocolError as e:
                    LOGGER.warning(f"session {session.sid}: {e}")
        except OSError as e:
            LOGGER.info(f"session {session.sid}: connection lost: {e}")
        finally:
            session.close()
            self.sessions.pop(session.sid, None)
            writer.wait()

    @staticmethod
    def _write(session, ws):
        try:
            while True:
                packet = session.outbound.get()
                if packet is None:
                    break
                ws.send(packet)
        except OSError as e:
            LOGGER.debug(f"session {session.sid}: write failed: {e}")
        finally:
            try:
                ws.close()
            except OSError:
                pass

    def _serve(self):
        try:
            listener = eventlet.listen((self.host, self.port),
                                       reuse_port=False)
        except OSError as e:
            self._startup_error = e
            self._bound.set()
            return

        self.port = listener.getsockname()[1]
        self._bound.set()
        LOGGER.info(f"drive server listening on port {self.port}")

        server = eventlet.spawn(eventlet.wsgi.server, listener, self,
                                log_output=False)
        while not self._stopping.is_set():
            self.reap_idle()
            eventlet.sleep(0.05)

        for session in list(self.sessions.values()):
            session.close()
        # Lets the websocket writers flush and close.
        eventlet.sleep(0.2)
        server.kill()
        listener.close()
        self.sessions.clear()
        LOGGER.info("drive server stopped")

    def start(self):
        """
        Binds the port and serves on a background thread.

        :raises StartupError: if the port cannot be bound
        """
        self._serve_thread.start()
        self._bound.wait()
        if self._startup_error is not None:
            raise StartupError(f"cannot listen on port {self.port}: "
                               f"{self._startup_error}")

    def stop(self):
        """Closes every session and joins the serving thread."""
        self._stopping.set()
        if self._serve_thread.is_alive():
            self._serve_thread.join()

    def run(self):
        """Serves until SIGINT."""
        self.start()
        previous = signal.signal(signal.SIGINT,
                                 lambda signum, frame: self._stopping.set())
        try:
            while self._serve_thread.is_alive():
                self._serve_thread.join(0.5)
        finally:
            signal.signal(signal.SIGINT, previous)
