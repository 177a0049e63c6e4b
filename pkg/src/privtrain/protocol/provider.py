"""Data-provider side: attest the consumer, then serve fixed-size encrypted chunks."""
from __future__ import annotations

import logging
import socket
import threading
import zlib
from dataclasses import dataclass, field

import numpy as np

from ..data import Dataset
from .attest import provider_answer
from .transport import ConnectionClosed, TCPTransport
from .wire import (
    AuthError,
    DoneReason,
    MsgType,
    ProtocolError,
    SecureChannel,
    chunk_bytes,
    pack_examples,
)

log = logging.getLogger(__name__)


def provider_seed(run_seed: int, provider_id: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([run_seed, zlib.crc32(provider_id.encode())])


class ChunkStream:
    """Endless stream of examples: one random permutation of the shard per epoch."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self._perm = rng.permutation(n)
        self._pos = 0
        self.epoch = 0

    def take(self, k: int) -> np.ndarray:
        out = []
        while k:
            if self._pos == self.n:
                self._perm = self.rng.permutation(self.n)
                self._pos = 0
                self.epoch += 1
            step = min(k, self.n - self._pos)
            out.append(self._perm[self._pos : self._pos + step])
            self._pos += step
            k -= step
        return np.concatenate(out)


@dataclass
class ProviderConfig:
    provider_id: str
    shard: Dataset
    whitelist: list = field(default_factory=list)
    seed: int = 0


class Provider:
    """Serves one consumer session, sequentially, over any transport."""

    def __init__(self, cfg: ProviderConfig, chunk_examples: int):
        if chunk_examples < 1:
            raise ValueError("chunk_examples must be positive")
        if not cfg.whitelist:
            raise ValueError(f"provider {cfg.provider_id} has an empty whitelist")
        self.cfg = cfg
        self.chunk_examples = chunk_examples
        self.feature_dim = int(np.prod(cfg.shard.feature_shape))
        self.chunk_bytes = chunk_bytes(chunk_examples, self.feature_dim)
        self.stream = ChunkStream(len(cfg.shard), np.random.Generator(np.random.Philox(provider_seed(cfg.seed, cfg.provider_id))))
        self.served: list[int] = []
        self.sent_types: list[MsgType] = []
        self.status = "idle"

    def _send(self, transport, raw: bytes, mt: MsgType) -> None:
        self.sent_types.append(mt)
        transport.send(raw)

    def serve(self, transport) -> str:
        """Run the session to completion and return a final status string."""
        try:
            self.status = self._serve(transport)
        except ConnectionClosed:
            self.status = "closed"
        except TimeoutError:
            self.status = "timeout"
        finally:
            transport.close()
        return self.status

    def _serve(self, transport) -> str:
        reply, key = provider_answer(transport.recv(), self.cfg.whitelist)
        if key is None:
            self._send(transport, reply, MsgType.DONE)
            return "rejected"
        self._send(transport, reply, MsgType.ATTEST_OK)
        chan = SecureChannel(key, "provider")
        last = 0
        while True:
            raw = transport.recv()
            try:
                msg = chan.open(raw)
            except (AuthError, ProtocolError) as exc:
                log.warning("provider %s: %s; aborting", self.cfg.provider_id, exc)
                self._send(transport, chan.seal(MsgType.DONE, last, bytes([DoneReason.BAD_MESSAGE])), MsgType.DONE)
                return "aborted"
            if msg.msg_type == MsgType.DONE:
                return "finished"
            if msg.msg_type != MsgType.CHUNK_REQ:
                self._send(transport, chan.seal(MsgType.DONE, last, bytes([DoneReason.BAD_MESSAGE])), MsgType.DONE)
                return "aborted"
            if msg.iteration <= last:
                self._send(transport, chan.seal(MsgType.DONE, last, bytes([DoneReason.OUT_OF_ORDER])), MsgType.DONE)
                return "aborted"
            last = msg.iteration
            idx = self.stream.take(self.chunk_examples)
            shard = self.cfg.shard
            payload = pack_examples(shard.features[idx], shard.labels[idx], self.chunk_bytes)
            self.served.append(msg.iteration)
            self._send(transport, chan.seal(MsgType.CHUNK_RESP, msg.iteration, payload), MsgType.CHUNK_RESP)


def serve_in_thread(provider: Provider, transport) -> threading.Thread:
    t = threading.Thread(target=provider.serve, args=(transport,), name=f"provider-{provider.cfg.provider_id}", daemon=True)
    t.start()
    return t


def listen_tcp(host: str = "127.0.0.1", port: int = 0) -> socket.socket:
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen(1)
    return srv


def serve_tcp_once(provider: Provider, srv: socket.socket, accept_timeout: float = 30.0) -> str:
    """Accept one consumer on ``srv`` and serve it (blocking)."""
    srv.settimeout(accept_timeout)
    try:
        conn, _ = srv.accept()
    finally:
        srv.close()
    conn.settimeout(None)
    conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return provider.serve(TCPTransport(conn))
