"""Newline-delimited envelope protocol shared by all facility services.

Every message is one canonical JSON document followed by a single LF.  The
same :class:`Connection` runs over a TCP socket or an in-process duplex
channel, and either end of a connection may issue requests: the scheduler,
for example, pushes tasks down the connection a worker dialed in on.
"""

import itertools
import json
import logging
import queue
import re
import socket
import threading
from concurrent.futures import Future
from dataclasses import dataclass, field

from .errors import BadRequest, CasaError, Internal, TooLarge, Unavailable, from_payload

log = logging.getLogger(__name__)

VERSION = 1
MAX_FRAME = 16 * 2**20
LF = b"\n"

_TYPE_RE = re.compile(r"^[a-z0-9_]+(\.[a-z0-9_]+)*$")


@dataclass
class Envelope:
    type: str
    id: str
    payload: dict = field(default_factory=dict)
    v: int = VERSION

    @property
    def is_response(self):
        return self.type.endswith(".ok") or self.type.endswith(".err")

    def reply(self, payload=None):
        return Envelope(self.type + ".ok", self.id, payload or {})

    def fail(self, exc):
        return Envelope(self.type + ".err", self.id, exc.to_payload())


def canonical_dumps(obj):
    """Serialize with sorted keys and no insignificant whitespace.

    Raises ``BadRequest`` for values JSON cannot carry (NaN, inf, bytes...).
    """
    try:
        text = json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)
    except (TypeError, ValueError) as exc:
        raise BadRequest(f"payload not serializable: {exc}") from None
    return text.encode("utf-8")


def _check(env):
    if type(env.v) is not int or env.v != VERSION:
        raise BadRequest(f"unsupported protocol version {env.v!r}")
    if not isinstance(env.type, str) or not _TYPE_RE.match(env.type):
        raise BadRequest(f"invalid message type {env.type!r}")
    if not isinstance(env.id, str):
        raise BadRequest("id must be a string")
    if not isinstance(env.payload, dict):
        raise BadRequest("payload must be an object")


def encode_frame(env):
    _check(env)
    data = canonical_dumps({"id": env.id, "payload": env.payload, "type": env.type, "v": env.v}) + LF
    if len(data) > MAX_FRAME:
        raise TooLarge(f"frame of {len(data)} bytes exceeds {MAX_FRAME}")
    return data


def decode_frame(data):
    if data.endswith(LF):
        data = data[:-1]
    if len(data) + 1 > MAX_FRAME:
        raise TooLarge(f"frame of {len(data) + 1} bytes exceeds {MAX_FRAME}")
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise BadRequest(f"malformed frame: {exc}") from None
    if not isinstance(doc, dict):
        raise BadRequest("frame is not an object")
    missing = {"v", "type", "id", "payload"} - doc.keys()
    if missing:
        raise BadRequest(f"frame missing fields: {sorted(missing)}")
    env = Envelope(type=doc["type"], id=doc["id"], payload=doc["payload"], v=doc["v"])
    _check(env)
    return env


class FrameBuffer:
    """Accumulates stream chunks and yields complete lines."""

    def __init__(self, limit=MAX_FRAME):
        self._buf = bytearray()
        self.limit = limit

    def feed(self, chunk):
        self._buf += chunk
        lines = []
        start = 0
        while True:
            end = self._buf.find(LF, start)
            if end < 0:
                break
            lines.append(bytes(self._buf[start:end]))
            start = end + 1
        del self._buf[:start]
        if len(self._buf) >= self.limit:
            raise TooLarge("unterminated frame exceeds size limit")
        return lines


class Router:
    """Maps message types to handlers.

    A handler is called as ``handler(payload, conn)`` and returns the response
    payload (or None for an empty one).  ``CasaError`` becomes a typed ``.err``
    response; anything else becomes ``internal``.
    """

    def __init__(self):
        self.handlers = {"ping": lambda payload, conn: {}}

    def register(self, type_, handler):
        if type_.endswith(".ok") or type_.endswith(".err"):
            raise ValueError(f"reserved suffix in message type {type_!r}")
        self.handlers[type_] = handler

    def update(self, handlers):
        for type_, handler in handlers.items():
            self.register(type_, handler)

    def dispatch(self, conn, env):
        handler = self.handlers.get(env.type)
        if handler is None:
            return env.fail(BadRequest(f"unknown message type {env.type!r}"))
        try:
            result = handler(env.payload, conn)
        except CasaError as exc:
            return env.fail(exc)
        except Exception as exc:  # noqa: BLE001 - handler bugs must not kill the connection
            log.exception("handler for %s failed", env.type)
            return env.fail(Internal(f"{type(exc).__name__}: {exc}"))
        return env.reply(result)


class _SocketStream:
    def __init__(self, sock):
        self.sock = sock
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def send(self, data):
        self.sock.sendall(data)

    def recv(self):
        try:
            return self.sock.recv(1 << 20)
        except OSError:
            return b""

    def close(self):
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class _PipeStream:
    """One end of an in-process duplex byte channel."""

    def __init__(self, inbox, outbox, chunk=None):
        self.inbox = inbox
        self.outbox = outbox
        self.chunk = chunk
        self.closed = False

    def send(self, data):
        if self.closed:
            raise OSError("channel closed")
        if self.chunk:
            for i in range(0, len(data), self.chunk):
                self.outbox.put(data[i:i + self.chunk])
        else:
            self.outbox.put(data)

    def recv(self):
        if self.closed:
            return b""
        data = self.inbox.get()
        return data if data is not None else b""

    def close(self):
        if not self.closed:
            self.closed = True
            self.outbox.put(None)
            self.inbox.put(None)


def pipe_pair(chunk=None):
    a, b = queue.SimpleQueue(), queue.SimpleQueue()
    return _PipeStream(a, b, chunk), _PipeStream(b, a, chunk)


class Connection:
    """A symmetric message connection with one reader loop and one writer queue."""

    _ids = itertools.count(1)

    def __init__(self, stream, router=None, name=""):
        self.stream = stream
        self.router = router or Router()
        self.name = name or f"conn-{next(self._ids)}"
        self.closed = threading.Event()
        self.context = {}
        self._pending = {}
        self._pending_lock = threading.Lock()
        self._next_id = itertools.count(1)
        self._outq = queue.SimpleQueue()
        self._close_callbacks = []
        self._reader = threading.Thread(target=self._read_loop, name=f"{self.name}-reader", daemon=True)
        self._writer = threading.Thread(target=self._write_loop, name=f"{self.name}-writer", daemon=True)

    def start(self):
        self._writer.start()
        self._reader.start()
        return self

    def on_close(self, callback):
        self._close_callbacks.append(callback)

    def send(self, env):
        data = encode_frame(env)
        if self.closed.is_set():
            raise Unavailable(f"{self.name} is closed")
        self._outq.put(data)

    def request_async(self, type_, payload=None):
        future = Future()
        req_id = str(next(self._next_id))
        env = Envelope(type_, req_id, payload or {})
        with self._pending_lock:
            if self.closed.is_set():
                raise Unavailable(f"{self.name} is closed")
            self._pending[req_id] = (type_, future)
        try:
            self.send(env)
        except CasaError:
            with self._pending_lock:
                self._pending.pop(req_id, None)
            raise
        return future

    def request(self, type_, payload=None, timeout=60.0):
        future = self.request_async(type_, payload)
        try:
            return future.result(timeout)
        except TimeoutError:
            raise Unavailable(f"{type_} timed out after {timeout}s") from None

    call = request

    def close(self):
        if self.closed.is_set():
            return
        self.closed.set()
        self._outq.put(None)
        self.stream.close()
        with self._pending_lock:
            pending, self._pending = self._pending, {}
        for type_, future in pending.values():
            if not future.done():
                future.set_exception(Unavailable(f"connection closed during {type_}"))
        for callback in self._close_callbacks:
            try:
                callback(self)
            except Exception:  # noqa: BLE001
                log.exception("close callback failed")

    def _write_loop(self):
        while True:
            data = self._outq.get()
            if data is None:
                return
            try:
                self.stream.send(data)
            except OSError:
                self.close()
                return

    def _read_loop(self):
        frames = FrameBuffer()
        try:
            while not self.closed.is_set():
                chunk = self.stream.recv()
                if not chunk:
                    break
                for line in frames.feed(chunk):
                    self._handle_line(line)
        except TooLarge:
            log.warning("%s: oversized frame, closing", self.name)
        finally:
            self.close()

    def _handle_line(self, line):
        try:
            env = decode_frame(line)
        except CasaError as exc:
            self._reject(line, exc)
            return
        if env.is_response:
            base, _, outcome = env.type.rpartition(".")
            with self._pending_lock:
                entry = self._pending.get(env.id)
                if entry is not None and entry[0] == base:
                    del self._pending[env.id]
                else:
                    entry = None
            if entry is None:
                log.debug("%s: dropping unsolicited %s", self.name, env.type)
                return
            future = entry[1]
            if outcome == "ok":
                future.set_result(env.payload)
            else:
                future.set_exception(from_payload(env.payload))
            return
        threading.Thread(target=self._serve, args=(env,), daemon=True).start()

    def _serve(self, env):
        response = self.router.dispatch(self, env)
        try:
            self.send(response)
        except TooLarge as exc:
            self.send(env.fail(exc))
        except CasaError as exc:
            if not self.closed.is_set():
                self.send(env.fail(Internal(str(exc))))

    def _reject(self, line, exc):
        # Best effort: echo id/type when the document is at least an object.
        type_, req_id = "error", ""
        try:
            doc = json.loads(line.decode("utf-8"))
            if isinstance(doc, dict):
                if isinstance(doc.get("type"), str) and _TYPE_RE.match(doc["type"]):
                    type_ = doc["type"]
                if isinstance(doc.get("id"), str):
                    req_id = doc["id"]
        except (UnicodeDecodeError, ValueError):
            pass
        try:
            self.send(Envelope(type_ + ".err", req_id, exc.to_payload()))
        except CasaError:
            pass


# -- servers and addresses ---------------------------------------------------

_inproc_lock = threading.Lock()
_inproc = {}


class TcpServer:
    def __init__(self, router, host="127.0.0.1", port=0, name="server"):
        self.router = router
        self.name = name
        self.connections = set()
        try:
            self.sock = socket.create_server((host, port), reuse_port=False)
        except OSError as exc:
            raise Unavailable(f"{name}: cannot listen on {host}:{port}: {exc}") from None
        self.host, self.port = self.sock.getsockname()[:2]
        self._thread = threading.Thread(target=self._accept_loop, name=f"{name}-accept", daemon=True)
        self._thread.start()

    @property
    def address(self):
        return f"tcp://{self.host}:{self.port}"

    def _accept_loop(self):
        while True:
            try:
                sock, _ = self.sock.accept()
            except OSError:
                return
            conn = Connection(_SocketStream(sock), self.router, name=f"{self.name}-peer")
            self.connections.add(conn)
            conn.on_close(self.connections.discard)
            conn.start()

    def close(self):
        self.sock.close()
        for conn in list(self.connections):
            conn.close()


class InprocServer:
    """Registers a router under ``inproc://name``; connecting creates a pipe pair."""

    def __init__(self, router, name, chunk=None):
        self.router = router
        self.name = name
        self.chunk = chunk
        self.connections = set()
        with _inproc_lock:
            if name in _inproc:
                raise Unavailable(f"inproc address {name!r} already in use")
            _inproc[name] = self

    @property
    def address(self):
        return f"inproc://{self.name}"

    def accept(self, client_router, client_name):
        near, far = pipe_pair(self.chunk)
        server_conn = Connection(far, self.router, name=f"{self.name}-peer")
        self.connections.add(server_conn)
        server_conn.on_close(self.connections.discard)
        client_conn = Connection(near, client_router, name=client_name)
        server_conn.start()
        return client_conn.start()

    def close(self):
        with _inproc_lock:
            if _inproc.get(self.name) is self:
                del _inproc[self.name]
        for conn in list(self.connections):
            conn.close()


def serve(router, address, name="server"):
    """Start a server for ``tcp://host:port`` or ``inproc://name``."""
    if address.startswith("inproc://"):
        return InprocServer(router, address[len("inproc://"):])
    if address.startswith("tcp://"):
        host, _, port = address[len("tcp://"):].rpartition(":")
        return TcpServer(router, host or "127.0.0.1", int(port), name=name)
    raise BadRequest(f"unsupported address {address!r}")


def connect(address, router=None, name=None, timeout=5.0):
    name = name or f"client:{address}"
    if address.startswith("inproc://"):
        with _inproc_lock:
            server = _inproc.get(address[len("inproc://"):])
        if server is None:
            raise Unavailable(f"nothing listening at {address}")
        return server.accept(router or Router(), name)
    if address.startswith("tcp://"):
        host, _, port = address[len("tcp://"):].rpartition(":")
        try:
            sock = socket.create_connection((host, int(port)), timeout=timeout)
        except OSError as exc:
            raise Unavailable(f"cannot connect to {address}: {exc}") from None
        sock.settimeout(None)
        return Connection(_SocketStream(sock), router or Router(), name=name).start()
    raise BadRequest(f"unsupported address {address!r}")
