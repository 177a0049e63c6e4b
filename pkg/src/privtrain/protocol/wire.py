"""Bit-exact message framing, the authenticated channel, and chunk payloads.

Every message on the wire is::

    msg_type (u8) | iteration (u64 LE) | payload_len (u32 LE) | payload | tag (16 octets)

Once a session key exists the payload is ChaCha20-Poly1305 ciphertext of
the same length, the header is associated data, and the 16-octet tag is the
AEAD tag.  Nonces are a 4-octet direction label followed by a u64 LE message
counter, so a replayed or reordered message fails authentication.
"""
from __future__ import annotations

import enum
import hashlib
import hmac
import json
import math
import struct
from dataclasses import dataclass

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

HEADER = struct.Struct("<BQI")
HEADER_LEN = HEADER.size  # 13
TAG_LEN = 16
MEASUREMENT_LEN = 32
PAD_QUANTUM = 1024
CODE_VERSION = "privtrain-0.1"


class MsgType(enum.IntEnum):
    ATTEST = 1
    ATTEST_OK = 2
    CHUNK_REQ = 3
    CHUNK_RESP = 4
    DONE = 5


class DoneReason(enum.IntEnum):
    FINISHED = 0
    NOT_WHITELISTED = 1
    BAD_MESSAGE = 2
    OUT_OF_ORDER = 3


# control payload sizes are fixed
CONTROL_PAYLOAD = {
    MsgType.ATTEST: MEASUREMENT_LEN + 32,
    MsgType.ATTEST_OK: 32,
    MsgType.CHUNK_REQ: 0,
    MsgType.DONE: 1,
}


class ProtocolError(Exception):
    pass


class AuthError(ProtocolError):
    pass


@dataclass(frozen=True)
class Message:
    msg_type: MsgType
    iteration: int
    payload: bytes
    tag: bytes

    def header(self) -> bytes:
        return HEADER.pack(int(self.msg_type), self.iteration, len(self.payload))

    def to_bytes(self) -> bytes:
        return self.header() + self.payload + self.tag


def parse(raw: bytes) -> Message:
    if len(raw) < HEADER_LEN + TAG_LEN:
        raise ProtocolError(f"message of {len(raw)} octets is shorter than header + tag")
    t, iteration, plen = HEADER.unpack_from(raw)
    if len(raw) != HEADER_LEN + plen + TAG_LEN:
        raise ProtocolError(f"payload_len {plen} disagrees with message length {len(raw)}")
    try:
        mt = MsgType(t)
    except ValueError:
        raise ProtocolError(f"unknown message type {t}") from None
    fixed = CONTROL_PAYLOAD.get(mt)
    if fixed is not None and plen != fixed:
        raise ProtocolError(f"{mt.name} payload must be {fixed} octets, got {plen}")
    return Message(mt, iteration, raw[HEADER_LEN : HEADER_LEN + plen], raw[HEADER_LEN + plen :])


def checksum_tag(header: bytes, payload: bytes) -> bytes:
    """Keyless integrity tag for pre-key handshake messages."""
    return hashlib.sha256(b"privtrain/plain" + header + payload).digest()[:TAG_LEN]


def plain_message(msg_type: MsgType, iteration: int, payload: bytes) -> bytes:
    header = HEADER.pack(int(msg_type), iteration, len(payload))
    return header + payload + checksum_tag(header, payload)


def open_plain(raw: bytes) -> Message:
    msg = parse(raw)
    if not hmac.compare_digest(msg.tag, checksum_tag(msg.header(), msg.payload)):
        raise AuthError(f"{msg.msg_type.name}: integrity tag mismatch")
    return msg


class SecureChannel:
    """One direction-aware endpoint of an established session."""

    def __init__(self, key: bytes, role: str):
        if role not in ("consumer", "provider"):
            raise ValueError("role must be 'consumer' or 'provider'")
        self._aead = ChaCha20Poly1305(key)
        self._send_label = b"C2P\0" if role == "consumer" else b"P2C\0"
        self._recv_label = b"P2C\0" if role == "consumer" else b"C2P\0"
        self._send_ctr = 0
        self._recv_ctr = 0

    def seal(self, msg_type: MsgType, iteration: int, payload: bytes) -> bytes:
        header = HEADER.pack(int(msg_type), iteration, len(payload))
        nonce = self._send_label + struct.pack("<Q", self._send_ctr)
        self._send_ctr += 1
        return header + self._aead.encrypt(nonce, payload, header)

    def open(self, raw: bytes) -> Message:
        msg = parse(raw)
        nonce = self._recv_label + struct.pack("<Q", self._recv_ctr)
        try:
            plain = self._aead.decrypt(nonce, msg.payload + msg.tag, msg.header())
        except InvalidTag:
            raise AuthError(f"{msg.msg_type.name} (iteration {msg.iteration}) failed authentication") from None
        self._recv_ctr += 1
        return Message(msg.msg_type, msg.iteration, plain, msg.tag)


# --------------------------------------------------------------------------
# measurement


def measurement(model_spec: dict, privacy: dict, code_version: str = CODE_VERSION) -> bytes:
    """32-octet digest binding the training program's configuration."""
    blob = json.dumps(
        {"code_version": code_version, "model": model_spec, "privacy": privacy},
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    return hashlib.sha256(blob).digest()


# --------------------------------------------------------------------------
# chunk payloads


def example_bytes(feature_dim: int) -> int:
    return 4 * feature_dim + 4


def chunk_bytes(chunk_examples: int, feature_dim: int) -> int:
    """Padded CHUNK_RESP payload size: count field plus examples, rounded up to 1024 octets."""
    raw = 4 + chunk_examples * example_bytes(feature_dim)
    return PAD_QUANTUM * math.ceil(raw / PAD_QUANTUM)


_EXAMPLE_DTYPE_CACHE: dict = {}


def _example_dtype(feature_dim: int) -> np.dtype:
    dt = _EXAMPLE_DTYPE_CACHE.get(feature_dim)
    if dt is None:
        dt = np.dtype([("x", "<f4", (feature_dim,)), ("y", "<u4")])
        _EXAMPLE_DTYPE_CACHE[feature_dim] = dt
    return dt


def pack_examples(features: np.ndarray, labels: np.ndarray, capacity: int) -> bytes:
    n = features.shape[0]
    flat = np.asarray(features, dtype=np.float32).reshape(n, -1)
    rec = np.empty(n, dtype=_example_dtype(flat.shape[1]))
    rec["x"] = flat
    rec["y"] = labels
    body = struct.pack("<I", n) + rec.tobytes()
    if len(body) > capacity:
        raise ProtocolError(f"{n} examples need {len(body)} octets, capacity is {capacity}")
    return body + bytes(capacity - len(body))


def unpack_examples(payload: bytes, feature_dim: int) -> tuple[np.ndarray, np.ndarray]:
    (n,) = struct.unpack_from("<I", payload)
    dt = _example_dtype(feature_dim)
    if 4 + n * dt.itemsize > len(payload):
        raise ProtocolError(f"payload too short for {n} examples")
    rec = np.frombuffer(payload, dtype=dt, count=n, offset=4)
    return rec["x"].astype(np.float32), rec["y"].astype(np.uint32)
