"""Wire codec, durable outbound buffer and MQTT store-and-forward publisher."""

from .buffer import OutboundBuffer, SeqRegressionError
from .publisher import Backoff, BrokerEndpoint, Publisher, last_topic, publish_loop, state_topic
from .wire import DecodeError, decode, encode, encode_text

__all__ = [
    "Backoff",
    "BrokerEndpoint",
    "DecodeError",
    "OutboundBuffer",
    "Publisher",
    "SeqRegressionError",
    "decode",
    "encode",
    "encode_text",
    "last_topic",
    "publish_loop",
    "state_topic",
]
