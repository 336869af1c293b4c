"""Framed binary protocol between computation and parameter machines.

Frame: b"MM" | u8 opcode | u32 payload length | payload, all little-endian.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

MAGIC = b"MM"
HEADER = struct.Struct("<2sBI")

GET, PUT, STATS = 0x01, 0x02, 0x03
GET_RESP, PUT_ACK, STATS_RESP = 0x81, 0x82, 0x83
ERR = 0xFF

# error codes carried in ERR payloads
E_LENGTH, E_MAGIC, E_OPCODE, E_VECTOR, E_TOO_LARGE = 1, 2, 3, 4, 5

MAX_PAYLOAD = 64 << 20

_U16, _U32, _U64 = struct.Struct("<H"), struct.Struct("<I"), struct.Struct("<Q")
_PUT_HEAD = struct.Struct("<QH")
_RESP_HEAD = struct.Struct("<QI")
_ENTRY_HEAD = struct.Struct("<BH")
PUT_ACK_BODY = struct.Struct("<QI")
STATS_BODY = struct.Struct("<QQIQQ")


class ProtocolError(Exception):
    def __init__(self, code: int, message: str) -> None:
        super().__init__(f"[{code}] {message}")
        self.code = code
        self.message = message


class RemoteError(Exception):
    """The peer answered with an ERR frame."""

    def __init__(self, code: int, message: str) -> None:
        super().__init__(f"remote error {code}: {message}")
        self.code = code
        self.message = message


def frame(opcode: int, payload: bytes = b"") -> bytes:
    return HEADER.pack(MAGIC, opcode, len(payload)) + payload


def _recv_exact(sock, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        c = sock.recv(n - got)
        if not c:
            raise ConnectionError(f"connection closed after {got}/{n} bytes")
        chunks.append(c)
        got += len(c)
    return b"".join(chunks)


def read_frame(sock) -> tuple[int, bytes]:
    """Read one frame. Bad magic and oversized payloads raise ProtocolError before the payload is read."""
    magic, opcode, length = HEADER.unpack(_recv_exact(sock, HEADER.size))
    if magic != MAGIC:
        raise ProtocolError(E_MAGIC, f"bad magic {magic!r}")
    if length > MAX_PAYLOAD:
        raise ProtocolError(E_TOO_LARGE, f"payload of {length} bytes exceeds limit")
    return opcode, _recv_exact(sock, length)


# -- GET

def encode_get(keys: Sequence[int]) -> bytes:
    return _U32.pack(len(keys)) + np.asarray(keys, dtype="<u8").tobytes()


def decode_get(payload: bytes) -> np.ndarray:
    if len(payload) < 4:
        raise ProtocolError(E_LENGTH, "GET payload shorter than its count field")
    (n,) = _U32.unpack_from(payload)
    if len(payload) != 4 + 8 * n:
        raise ProtocolError(E_LENGTH, f"GET declares {n} keys but carries {len(payload) - 4} key bytes")
    return np.frombuffer(payload, dtype="<u8", count=n, offset=4)


def encode_get_resp(version: int, vectors: np.ndarray, hit: np.ndarray) -> bytes:
    n, dim = vectors.shape if vectors.ndim == 2 else (0, 0)
    entry = np.dtype([("hit", "u1"), ("dim", "<u2"), ("vec", "<f4", (dim,))])
    rec = np.zeros(n, dtype=entry)
    if n:
        rec["hit"] = hit
        rec["dim"] = dim
        rec["vec"] = vectors
    return _RESP_HEAD.pack(version, n) + rec.tobytes()


@dataclass
class GetResponse:
    version: int
    vectors: np.ndarray   # float64, exact widening of the f32 wire values
    hit: np.ndarray


def decode_get_resp(payload: bytes) -> GetResponse:
    version, n = _RESP_HEAD.unpack_from(payload)
    off = _RESP_HEAD.size
    if n == 0:
        return GetResponse(version, np.zeros((0, 0)), np.zeros(0, dtype=bool))
    _, dim = _ENTRY_HEAD.unpack_from(payload, off)
    entry = np.dtype([("hit", "u1"), ("dim", "<u2"), ("vec", "<f4", (dim,))])
    if len(payload) != off + n * entry.itemsize:
        raise ProtocolError(E_LENGTH, "GET_RESP length does not match its entries")
    rec = np.frombuffer(payload, dtype=entry, count=n, offset=off)
    if np.any(rec["dim"] != dim):
        raise ProtocolError(E_VECTOR, "GET_RESP entries disagree on dim")
    return GetResponse(version, rec["vec"].astype(np.float64), rec["hit"].astype(bool))


# -- PUT

def encode_put(key: int, vector) -> bytes:
    v = np.asarray(vector, dtype="<f4").ravel()
    return _PUT_HEAD.pack(int(key), v.size) + v.tobytes()


def decode_put(payload: bytes) -> tuple[int, np.ndarray]:
    if len(payload) < _PUT_HEAD.size:
        raise ProtocolError(E_LENGTH, "PUT payload shorter than its header")
    key, dim = _PUT_HEAD.unpack_from(payload)
    if len(payload) != _PUT_HEAD.size + 4 * dim:
        raise ProtocolError(E_LENGTH, f"PUT declares dim {dim} but carries {len(payload) - _PUT_HEAD.size} value bytes")
    return key, np.frombuffer(payload, dtype="<f4", count=dim, offset=_PUT_HEAD.size)


# -- ERR

def encode_err(code: int, message: str) -> bytes:
    return _U16.pack(code) + message.encode("utf-8")


def decode_err(payload: bytes) -> RemoteError:
    if len(payload) < 2:
        return RemoteError(0, "truncated ERR frame")
    (code,) = _U16.unpack_from(payload)
    return RemoteError(code, payload[2:].decode("utf-8", "replace"))
