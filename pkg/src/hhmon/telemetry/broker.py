"""In-process MQTT 3.1.1 test double and a fault-injecting TCP proxy.

The broker implements the subset the publisher and the ingest subscriber
use: CONNECT, PUBLISH at QoS 0/1 (with retain), SUBSCRIBE/UNSUBSCRIBE with
``+``/``#`` wildcards, PINGREQ and DISCONNECT. It has no sessions and no
authentication; it is meant for tests and local demos only.

:class:`FaultProxy` sits between a client and the broker. It can cut every
connection on demand, refuse new ones, and forward selected client PUBLISH
packets twice, which is how QoS 1 duplicate delivery is provoked.
"""

from __future__ import annotations

import itertools
import logging
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass

log = logging.getLogger(__name__)

CONNECT, CONNACK, PUBLISH, PUBACK = 1, 2, 3, 4
SUBSCRIBE, SUBACK, UNSUBSCRIBE, UNSUBACK = 8, 9, 10, 11
PINGREQ, PINGRESP, DISCONNECT = 12, 13, 14


class ConnectionClosed(Exception):
    pass


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionClosed()
        buf += chunk
    return bytes(buf)


def read_packet(sock: socket.socket) -> tuple[int, bytes]:
    """Read one control packet; returns (first header byte, remaining bytes)."""
    first = _recv_exact(sock, 1)[0]
    mult, length = 1, 0
    for _ in range(4):
        b = _recv_exact(sock, 1)[0]
        length += (b & 0x7F) * mult
        if not b & 0x80:
            break
        mult *= 128
    else:
        raise ConnectionClosed()
    return first, _recv_exact(sock, length)


def encode_packet(first: int, body: bytes) -> bytes:
    n = len(body)
    out = bytearray([first])
    while True:
        b = n % 128
        n //= 128
        out.append(b | 0x80 if n else b)
        if not n:
            break
    return bytes(out) + body


def _str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack(">H", len(raw)) + raw


def _read_str(body: bytes, pos: int) -> tuple[str, int]:
    (n,) = struct.unpack_from(">H", body, pos)
    return body[pos + 2:pos + 2 + n].decode("utf-8"), pos + 2 + n


def topic_matches(pattern: str, topic: str) -> bool:
    p, t = pattern.split("/"), topic.split("/")
    for i, part in enumerate(p):
        if part == "#":
            return True
        if i >= len(t):
            return False
        if part != "+" and part != t[i]:
            return False
    return len(p) == len(t)


@dataclass(frozen=True)
class Message:
    topic: str
    payload: bytes
    qos: int
    retain: bool


def parse_publish(first: int, body: bytes) -> tuple[Message, int | None]:
    qos = (first >> 1) & 0x03
    topic, pos = _read_str(body, 0)
    pid = None
    if qos:
        (pid,) = struct.unpack_from(">H", body, pos)
        pos += 2
    return Message(topic, body[pos:], qos, bool(first & 0x01)), pid


class _Session:
    def __init__(self, sock: socket.socket) -> None:
        self.sock = sock
        self.subs: list[tuple[str, int]] = []
        self.lock = threading.Lock()
        self._pids = itertools.cycle(range(1, 65536))

    def send(self, data: bytes) -> None:
        with self.lock:
            self.sock.sendall(data)

    def deliver(self, msg: Message, qos: int, retain: bool = False) -> None:
        q = min(qos, msg.qos)
        body = _str(msg.topic)
        if q:
            body += struct.pack(">H", next(self._pids))
        first = (PUBLISH << 4) | (q << 1) | (1 if retain else 0)
        self.send(encode_packet(first, body + msg.payload))


class MiniBroker:
    """Threaded MQTT broker bound to ``host:port`` (port 0 picks a free one)."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0) -> None:
        broker = self

        class Handler(socketserver.BaseRequestHandler):
            def handle(self) -> None:
                broker._serve(self.request)

        class Server(socketserver.ThreadingTCPServer):
            daemon_threads = True
            allow_reuse_address = True

        self._server = Server((host, port), Handler)
        self.host, self.port = self._server.server_address[:2]
        self._lock = threading.Lock()
        self._sessions: set[_Session] = set()
        self.retained: dict[str, Message] = {}
        self.received: list[Message] = []
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        return f"mqtt://{self.host}:{self.port}"

    def start(self) -> "MiniBroker":
        self._thread = threading.Thread(target=self._server.serve_forever, name="mini-broker", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        with self._lock:
            sessions = list(self._sessions)
        for s in sessions:
            try:
                s.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass

    def __enter__(self) -> "MiniBroker":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def _route(self, msg: Message) -> None:
        with self._lock:
            self.received.append(msg)
            if msg.retain:
                if msg.payload:
                    self.retained[msg.topic] = msg
                else:
                    self.retained.pop(msg.topic, None)
            targets = [(s, q) for s in self._sessions for f, q in s.subs if topic_matches(f, msg.topic)]
        for session, qos in targets:
            try:
                session.deliver(msg, qos)
            except OSError:
                pass

    def _serve(self, sock: socket.socket) -> None:
        session = _Session(sock)
        try:
            first, _ = read_packet(sock)
            if first >> 4 != CONNECT:
                return
            session.send(encode_packet(CONNACK << 4, b"\x00\x00"))
            with self._lock:
                self._sessions.add(session)
            while True:
                first, body = read_packet(sock)
                kind = first >> 4
                if kind == PUBLISH:
                    msg, pid = parse_publish(first, body)
                    if msg.qos == 1:
                        session.send(encode_packet(PUBACK << 4, struct.pack(">H", pid)))
                    self._route(msg)
                elif kind == SUBSCRIBE:
                    (pid,) = struct.unpack_from(">H", body, 0)
                    pos, granted, filters = 2, [], []
                    while pos < len(body):
                        topic, pos = _read_str(body, pos)
                        qos = min(body[pos], 1)
                        pos += 1
                        filters.append((topic, qos))
                        granted.append(qos)
                    with self._lock:
                        session.subs.extend(filters)
                        retained = [m for m in self.retained.values()
                                    if any(topic_matches(f, m.topic) for f, _ in filters)]
                    session.send(encode_packet(SUBACK << 4, struct.pack(">H", pid) + bytes(granted)))
                    for m in retained:
                        session.deliver(m, 1, retain=True)
                elif kind == UNSUBSCRIBE:
                    (pid,) = struct.unpack_from(">H", body, 0)
                    pos, drop = 2, set()
                    while pos < len(body):
                        topic, pos = _read_str(body, pos)
                        drop.add(topic)
                    with self._lock:
                        session.subs = [s for s in session.subs if s[0] not in drop]
                    session.send(encode_packet(UNSUBACK << 4, struct.pack(">H", pid)))
                elif kind == PINGREQ:
                    session.send(encode_packet(PINGRESP << 4, b""))
                elif kind == DISCONNECT:
                    return
                # PUBACK from subscribers: delivery is fire-and-forget here
        except (ConnectionClosed, OSError):
            pass
        finally:
            with self._lock:
                self._sessions.discard(session)
            try:
                sock.close()
            except OSError:
                pass


class FaultProxy:
    """TCP proxy in front of an MQTT broker with fault injection."""

    def __init__(self, upstream: tuple[str, int], host: str = "127.0.0.1", port: int = 0) -> None:
        self.upstream = upstream
        self._listener = socket.create_server((host, port))
        self.host, self.port = self._listener.getsockname()[:2]
        self._lock = threading.Lock()
        self._pairs: list[tuple[socket.socket, socket.socket]] = []
        self._dup_budget = 0
        self.refusing = False
        self.disconnects = 0
        self.duplicated = 0
        self._stopped = False
        self._thread = threading.Thread(target=self._accept_loop, name="fault-proxy", daemon=True)

    @property
    def url(self) -> str:
        return f"mqtt://{self.host}:{self.port}"

    def start(self) -> "FaultProxy":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stopped = True
        self._listener.close()
        self.drop_connections(count=False)

    def __enter__(self) -> "FaultProxy":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def duplicate_next(self, n: int) -> None:
        """Forward each of the next ``n`` client PUBLISH packets twice."""
        with self._lock:
            self._dup_budget += n

    def drop_connections(self, count: bool = True) -> int:
        with self._lock:
            pairs, self._pairs = self._pairs, []
        for a, b in pairs:
            for s in (a, b):
                try:
                    s.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass
                s.close()
        if count and pairs:
            self.disconnects += 1
        return len(pairs)

    @property
    def active_connections(self) -> int:
        with self._lock:
            return len(self._pairs)

    def _accept_loop(self) -> None:
        while not self._stopped:
            try:
                client, _ = self._listener.accept()
            except OSError:
                return
            if self.refusing:
                client.close()
                continue
            try:
                upstream = socket.create_connection(self.upstream, timeout=5)
                upstream.settimeout(None)
            except OSError:
                client.close()
                continue
            with self._lock:
                self._pairs.append((client, upstream))
            threading.Thread(target=self._pump_client, args=(client, upstream), daemon=True).start()
            threading.Thread(target=self._pump_raw, args=(upstream, client), daemon=True).start()

    def _take_dup(self) -> bool:
        with self._lock:
            if self._dup_budget > 0:
                self._dup_budget -= 1
                self.duplicated += 1
                return True
            return False

    def _pump_client(self, src: socket.socket, dst: socket.socket) -> None:
        try:
            while True:
                first, body = read_packet(src)
                packet = encode_packet(first, body)
                dst.sendall(packet)
                if first >> 4 == PUBLISH and self._take_dup():
                    dst.sendall(encode_packet(first | 0x08, body))
        except (ConnectionClosed, OSError):
            pass
        finally:
            self._close_pair(src, dst)

    def _pump_raw(self, src: socket.socket, dst: socket.socket) -> None:
        try:
            while True:
                data = src.recv(65536)
                if not data:
                    break
                dst.sendall(data)
        except OSError:
            pass
        finally:
            self._close_pair(src, dst)

    def _close_pair(self, a: socket.socket, b: socket.socket) -> None:
        with self._lock:
            self._pairs = [p for p in self._pairs if a not in p]
        for s in (a, b):
            try:
                s.close()
            except OSError:
                pass
