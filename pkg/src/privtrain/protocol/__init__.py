"""Attested, encrypted, fixed-size message exchange between consumer and providers."""
from .consumer import ProviderAborted, ProviderLink, RoundTimeout, attest, fetch_round, finish
from .provider import Provider, ProviderConfig, serve_in_thread
from .transport import LoopbackTransport, TCPTransport, WireTap, loopback_pair
from .wire import AuthError, MsgType, ProtocolError, SecureChannel, measurement
