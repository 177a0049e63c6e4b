"""Mock remote attestation: measurement whitelist plus ephemeral X25519 key agreement.

Consumer -> provider  ATTEST     measurement || consumer public key, keyless integrity tag
Provider -> consumer  ATTEST_OK  provider public key, tag = HMAC(confirm key, transcript)
                   or DONE       reason code (measurement not on the whitelist / bad message)

Both keys come from HKDF over the shared secret, salted with the measurement,
so a session is bound to the exact training configuration the provider
approved.  The ATTEST_OK tag covers the whole transcript, so tampering with
either message makes the consumer's check fail.
"""
from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass

from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .wire import (
    HEADER,
    MEASUREMENT_LEN,
    TAG_LEN,
    AuthError,
    DoneReason,
    MsgType,
    ProtocolError,
    open_plain,
    parse,
    plain_message,
)


class AttestationRejected(ProtocolError):
    def __init__(self, reason: DoneReason):
        super().__init__(f"provider refused attestation: {reason.name}")
        self.reason = reason


def _raw_public(key) -> bytes:
    return key.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)


def _derive(shared: bytes, measurement: bytes, consumer_pub: bytes, provider_pub: bytes) -> tuple[bytes, bytes]:
    okm = HKDF(
        algorithm=hashes.SHA256(),
        length=64,
        salt=measurement,
        info=b"privtrain session v1" + consumer_pub + provider_pub,
    ).derive(shared)
    return okm[:32], okm[32:]


def _confirm_tag(confirm_key: bytes, attest_raw: bytes, header: bytes, payload: bytes) -> bytes:
    return hmac.new(confirm_key, attest_raw + header + payload, hashlib.sha256).digest()[:TAG_LEN]


@dataclass
class ConsumerHello:
    measurement: bytes
    private_key: X25519PrivateKey
    attest_raw: bytes


def consumer_hello(measurement: bytes) -> ConsumerHello:
    if len(measurement) != MEASUREMENT_LEN:
        raise ValueError("measurement must be 32 octets")
    priv = X25519PrivateKey.generate()
    raw = plain_message(MsgType.ATTEST, 0, measurement + _raw_public(priv))
    return ConsumerHello(measurement, priv, raw)


def provider_answer(attest_raw: bytes, whitelist) -> tuple[bytes, bytes | None]:
    """Return ``(reply, session_key)``; ``session_key`` is None when the provider refuses."""
    if not whitelist:
        raise ValueError("provider whitelist is empty")
    try:
        msg = open_plain(attest_raw)
        if msg.msg_type != MsgType.ATTEST:
            raise ProtocolError("expected ATTEST")
    except ProtocolError:
        return plain_message(MsgType.DONE, 0, bytes([DoneReason.BAD_MESSAGE])), None
    meas, consumer_pub = msg.payload[:MEASUREMENT_LEN], msg.payload[MEASUREMENT_LEN:]
    if meas not in set(whitelist):
        return plain_message(MsgType.DONE, 0, bytes([DoneReason.NOT_WHITELISTED])), None
    priv = X25519PrivateKey.generate()
    provider_pub = _raw_public(priv)
    try:
        shared = priv.exchange(X25519PublicKey.from_public_bytes(consumer_pub))
    except ValueError:
        return plain_message(MsgType.DONE, 0, bytes([DoneReason.BAD_MESSAGE])), None
    session_key, confirm_key = _derive(shared, meas, consumer_pub, provider_pub)
    header = HEADER.pack(int(MsgType.ATTEST_OK), 0, len(provider_pub))
    reply = header + provider_pub + _confirm_tag(confirm_key, attest_raw, header, provider_pub)
    return reply, session_key


def consumer_finish(hello: ConsumerHello, reply_raw: bytes) -> bytes:
    """Check the provider's reply and return the session key."""
    msg = parse(reply_raw)
    if msg.msg_type == MsgType.DONE:
        open_plain(reply_raw)
        raise AttestationRejected(DoneReason(msg.payload[0]))
    if msg.msg_type != MsgType.ATTEST_OK:
        raise ProtocolError(f"expected ATTEST_OK, got {msg.msg_type.name}")
    provider_pub = msg.payload
    consumer_pub = _raw_public(hello.private_key)
    try:
        shared = hello.private_key.exchange(X25519PublicKey.from_public_bytes(provider_pub))
    except ValueError:
        raise AuthError("invalid provider public key") from None
    session_key, confirm_key = _derive(shared, hello.measurement, consumer_pub, provider_pub)
    expected = _confirm_tag(confirm_key, hello.attest_raw, msg.header(), provider_pub)
    if not hmac.compare_digest(expected, msg.tag):
        raise AuthError("handshake transcript verification failed")
    return session_key
