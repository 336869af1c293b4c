"""Parameter machine: serves store lookups and window writes over TCP."""
from __future__ import annotations

import socket
import socketserver
import threading
from typing import Sequence

import numpy as np

from . import protocol as P
from .store import EmbeddingStore, LookupResult
from .window import WindowBuffer


class _Handler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        srv: ParameterServer = self.server.owner
        sock = self.request
        while True:
            try:
                opcode, payload = P.read_frame(sock)
            except ConnectionError:
                return
            except P.ProtocolError as e:
                # framing is lost, report and drop the connection
                self._send(P.ERR, P.encode_err(e.code, e.message))
                return
            try:
                op, body = srv.dispatch(opcode, payload)
            except P.ProtocolError as e:
                op, body = P.ERR, P.encode_err(e.code, e.message)
            if not self._send(op, body):
                return

    def _send(self, op: int, body: bytes) -> bool:
        try:
            self.request.sendall(P.frame(op, body))
            return True
        except OSError:
            return False


class _TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class ParameterServer:
    def __init__(self, store: EmbeddingStore, window: WindowBuffer, bind: tuple[str, int] = ("127.0.0.1", 0)) -> None:
        self.store = store
        self.window = window
        self.gets = 0
        self.puts = 0
        self._count_lock = threading.Lock()
        self._tcp = _TCPServer(bind, _Handler)
        self._tcp.owner = self
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    @property
    def address(self) -> tuple[str, int]:
        return self._tcp.server_address[:2]

    def dispatch(self, opcode: int, payload: bytes) -> tuple[int, bytes]:
        if opcode == P.GET:
            keys = P.decode_get(payload)
            res = self.store.lookup(keys.tolist())
            with self._count_lock:
                self.gets += 1
            return P.GET_RESP, P.encode_get_resp(res.version, res.vectors, res.hit)
        if opcode == P.PUT:
            key, vec = P.decode_put(payload)
            if vec.size != self.store.dim:
                raise P.ProtocolError(P.E_VECTOR, f"PUT dim {vec.size} != store dim {self.store.dim}")
            if not np.all(np.isfinite(vec)):
                raise P.ProtocolError(P.E_VECTOR, "PUT vector is not finite")
            ack = self.window.submit_vector(key, vec)
            with self._count_lock:
                self.puts += 1
            return P.PUT_ACK, P.PUT_ACK_BODY.pack(ack.version, ack.pending)
        if opcode == P.STATS:
            return P.STATS_RESP, P.STATS_BODY.pack(self.store.version, len(self.store), len(self.window),
                                                   self.gets, self.puts)
        raise P.ProtocolError(P.E_OPCODE, f"unknown opcode 0x{opcode:02x}")

    def _tick(self) -> None:
        period = self.window.max_age / 4
        while not self._stop.wait(period):
            self.window.poll()

    def start(self) -> "ParameterServer":
        for target in (self._tcp.serve_forever, self._tick):
            t = threading.Thread(target=target, daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def close(self) -> None:
        self._stop.set()
        self._tcp.shutdown()
        self._tcp.server_close()
        for t in self._threads:
            t.join(timeout=2)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve_parameters(store: EmbeddingStore, window: WindowBuffer | None = None,
                     bind: tuple[str, int] = ("127.0.0.1", 0)) -> ParameterServer:
    """Start a server in background threads; ``bind`` port 0 picks a free port."""
    return ParameterServer(store, WindowBuffer(store) if window is None else window, bind).start()


def parse_bind(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"bind address must be host:port, got {text!r}")
    return host, int(port)


class ParameterClient:
    """Computation-machine side of the connection; one request in flight at a time."""

    def __init__(self, address: tuple[str, int], timeout: float = 10.0) -> None:
        self.sock = socket.create_connection(address, timeout=timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._lock = threading.Lock()

    def request(self, opcode: int, payload: bytes) -> tuple[int, bytes]:
        with self._lock:
            self.sock.sendall(P.frame(opcode, payload))
            op, body = P.read_frame(self.sock)
        if op == P.ERR:
            raise P.decode_err(body)
        return op, body

    def lookup(self, keys: Sequence[int]) -> LookupResult:
        op, body = self.request(P.GET, P.encode_get(keys))
        if op != P.GET_RESP:
            raise P.ProtocolError(P.E_OPCODE, f"expected GET_RESP, got 0x{op:02x}")
        r = P.decode_get_resp(body)
        return LookupResult(r.vectors, r.hit, r.version)

    def __call__(self, keys: Sequence[int]) -> LookupResult:
        return self.lookup(keys)

    def put(self, key: int, vector) -> tuple[int, int]:
        """Returns (store version, pending count) as acknowledged by the server."""
        op, body = self.request(P.PUT, P.encode_put(key, vector))
        if op != P.PUT_ACK:
            raise P.ProtocolError(P.E_OPCODE, f"expected PUT_ACK, got 0x{op:02x}")
        return P.PUT_ACK_BODY.unpack(body)

    def stats(self) -> dict:
        _, body = self.request(P.STATS, b"")
        version, entries, pending, gets, puts = P.STATS_BODY.unpack(body)
        return {"version": version, "entries": entries, "pending": pending, "gets": gets, "puts": puts}

    def close(self) -> None:
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def remote_lookup(conn: ParameterClient, keys: Sequence[int]) -> LookupResult:
    return conn.lookup(keys)


def remote_put(conn: ParameterClient, key: int, vector) -> tuple[int, int]:
    return conn.put(key, vector)
