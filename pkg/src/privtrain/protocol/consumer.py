"""Consumer side of the protocol: attest to each provider, then fetch lots in lockstep."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .attest import consumer_finish, consumer_hello
from .wire import DoneReason, MsgType, ProtocolError, SecureChannel, unpack_examples


class RoundTimeout(TimeoutError):
    pass


class ProviderAborted(ProtocolError):
    pass


@dataclass
class ProviderLink:
    provider_id: str
    transport: object
    channel: SecureChannel


def attest(transport, provider_id: str, measurement: bytes, timeout: float = 30.0) -> ProviderLink:
    hello = consumer_hello(measurement)
    transport.send(hello.attest_raw)
    key = consumer_finish(hello, transport.recv(timeout))
    return ProviderLink(provider_id, transport, SecureChannel(key, "consumer"))


def fetch_round(
    links: list[ProviderLink],
    iteration: int,
    feature_dim: int,
    rng: np.random.Generator,
    timeout: float = 30.0,
    events: list | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Request one chunk from every provider and block until all have answered.

    Chunks are concatenated in provider-id order (not connection order) and
    then shuffled with ``rng``, so the lot does not depend on how providers
    were listed.
    """
    links = sorted(links, key=lambda l: l.provider_id)
    for link in links:
        link.transport.send(link.channel.seal(MsgType.CHUNK_REQ, iteration, b""))
        if events is not None:
            events.append(("request", iteration, link.provider_id))
    deadline = time.monotonic() + timeout
    xs, ys = [], []
    for link in links:
        remaining = max(0.0, deadline - time.monotonic())
        try:
            raw = link.transport.recv(remaining)
        except TimeoutError:
            if events is not None:
                events.append(("timeout", iteration, link.provider_id))
            raise RoundTimeout(f"provider {link.provider_id} did not answer iteration {iteration} within {timeout} s") from None
        msg = link.channel.open(raw)
        if msg.msg_type == MsgType.DONE:
            raise ProviderAborted(f"provider {link.provider_id} aborted: {DoneReason(msg.payload[0]).name}")
        if msg.msg_type != MsgType.CHUNK_RESP or msg.iteration != iteration:
            raise ProtocolError(f"provider {link.provider_id}: unexpected {msg.msg_type.name} for iteration {msg.iteration}")
        x, y = unpack_examples(msg.payload, feature_dim)
        xs.append(x)
        ys.append(y)
        if events is not None:
            events.append(("response", iteration, link.provider_id))
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    perm = rng.permutation(len(y))
    return x[perm], y[perm]


def finish(links: list[ProviderLink]) -> None:
    for link in links:
        try:
            link.transport.send(link.channel.seal(MsgType.DONE, 0, bytes([DoneReason.FINISHED])))
        except OSError:
            pass
        link.transport.close()
