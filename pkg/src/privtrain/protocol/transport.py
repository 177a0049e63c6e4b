"""Message transports: in-process loopback, TCP, and a capturing tap."""
from __future__ import annotations

import queue
import socket
import threading
from dataclasses import dataclass

from .wire import HEADER, HEADER_LEN, TAG_LEN, MsgType


class ConnectionClosed(ConnectionError):
    pass


class LoopbackTransport:
    """One end of an in-memory duplex pipe; create both ends with :func:`loopback_pair`."""

    _CLOSED = object()

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self._inbox = inbox
        self._outbox = outbox

    def send(self, raw: bytes) -> None:
        self._outbox.put(bytes(raw))

    def recv(self, timeout: float | None = None) -> bytes:
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError(f"no message within {timeout} s") from None
        if item is self._CLOSED:
            self._inbox.put(item)
            raise ConnectionClosed("peer closed the loopback pipe")
        return item

    def close(self) -> None:
        self._outbox.put(self._CLOSED)


def loopback_pair() -> tuple[LoopbackTransport, LoopbackTransport]:
    a, b = queue.Queue(), queue.Queue()
    return LoopbackTransport(a, b), LoopbackTransport(b, a)


class TCPTransport:
    """Self-delimiting messages over a stream socket (the header carries the length)."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._send_lock = threading.Lock()

    @classmethod
    def connect(cls, host: str, port: int, timeout: float = 30.0) -> "TCPTransport":
        sock = socket.create_connection((host, port), timeout=timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return cls(sock)

    def _read_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            try:
                part = self._sock.recv(n - len(buf))
            except socket.timeout:
                raise TimeoutError("socket receive timed out") from None
            if not part:
                raise ConnectionClosed("peer closed the TCP connection")
            buf += part
        return bytes(buf)

    def send(self, raw: bytes) -> None:
        with self._send_lock:
            self._sock.sendall(raw)

    def recv(self, timeout: float | None = None) -> bytes:
        self._sock.settimeout(timeout)
        header = self._read_exact(HEADER_LEN)
        _, _, plen = HEADER.unpack(header)
        return header + self._read_exact(plen + TAG_LEN)

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


@dataclass(frozen=True)
class WireRecord:
    peer: str
    direction: str  # "c2p" or "p2c"
    msg_type: MsgType
    iteration: int
    length: int
    raw: bytes

    def shape(self) -> tuple:
        """The externally observable part: everything but the bytes themselves."""
        return (self.peer, self.direction, self.msg_type, self.iteration, self.length)


class WireTap:
    """Wraps a consumer-side transport and records every message crossing it."""

    def __init__(self, inner, peer: str, log: list):
        self._inner = inner
        self._peer = peer
        self._log = log

    def _record(self, direction: str, raw: bytes) -> None:
        t, iteration, _ = HEADER.unpack_from(raw)
        try:
            mt = MsgType(t)
        except ValueError:
            mt = t
        self._log.append(WireRecord(self._peer, direction, mt, iteration, len(raw), bytes(raw)))

    def send(self, raw: bytes) -> None:
        self._record("c2p", raw)
        self._inner.send(raw)

    def recv(self, timeout: float | None = None) -> bytes:
        raw = self._inner.recv(timeout)
        self._record("p2c", raw)
        return raw

    def close(self) -> None:
        self._inner.close()
