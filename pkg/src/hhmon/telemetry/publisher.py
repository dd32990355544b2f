"""Store-and-forward sender: drains an :class:`OutboundBuffer` to an MQTT broker.

Records go out in seq order at QoS 1 on ``hh/v1/<device_id>/state``; the
watermark advances only over a contiguous prefix of acknowledged records.
The newest record is also published retained on ``hh/v1/<device_id>/last``.
Every connection starts from a fresh clean-session client, so after a drop
the sender simply re-sends everything above the watermark; consumers
dedupe by ``(device_id, seq)``.
"""

from __future__ import annotations

import collections
import logging
import random
import threading
import time
import uuid
from dataclasses import dataclass
from typing import Optional
from urllib.parse import urlparse

import paho.mqtt.client as mqtt

from .buffer import OutboundBuffer

log = logging.getLogger(__name__)


def state_topic(device_id: str) -> str:
    return f"hh/v1/{device_id}/state"


def last_topic(device_id: str) -> str:
    return f"hh/v1/{device_id}/last"


@dataclass(frozen=True)
class BrokerEndpoint:
    host: str
    port: int = 1883
    username: Optional[str] = None
    password: Optional[str] = None

    @classmethod
    def parse(cls, url: str) -> "BrokerEndpoint":
        u = urlparse(url if "://" in url else f"mqtt://{url}")
        if u.scheme not in ("mqtt", "tcp"):
            raise ValueError(f"unsupported broker scheme {u.scheme!r} (use mqtt://host:port)")
        if not u.hostname:
            raise ValueError(f"broker URL {url!r} has no host")
        return cls(u.hostname, u.port or 1883, u.username, u.password)


class Backoff:
    """Exponential backoff with full jitter: uniform(0, min(cap, base * 2**n))."""

    def __init__(self, base: float = 0.5, cap: float = 30.0, rng: Optional[random.Random] = None) -> None:
        self.base = base
        self.cap = cap
        self.rng = rng or random.Random()
        self.attempt = 0

    def ceiling(self) -> float:
        return min(self.cap, self.base * 2 ** self.attempt)

    def next(self) -> float:
        delay = self.rng.uniform(0, self.ceiling())
        self.attempt += 1
        return delay

    def reset(self) -> None:
        self.attempt = 0


class _Link:
    """One broker connection and its in-flight bookkeeping."""

    def __init__(self, client: mqtt.Client) -> None:
        self.client = client
        self.connected = False
        self.lost = False
        self.inflight: dict[int, int] = {}  # mid -> seq
        self.order: collections.deque[int] = collections.deque()
        self.acked: set[int] = set()
        self.sent_upto = 0


class Publisher:
    def __init__(self, buffer: OutboundBuffer, broker_url: str, device_id: str, *,
                 backoff: Optional[Backoff] = None, max_inflight: int = 20,
                 keepalive: int = 30, connect_timeout: float = 5.0) -> None:
        self.buffer = buffer
        self.endpoint = BrokerEndpoint.parse(broker_url)
        self.device_id = device_id
        self.backoff = backoff or Backoff()
        self.max_inflight = max_inflight
        self.keepalive = keepalive
        self.connect_timeout = connect_timeout
        self.connects = 0
        self.published = 0
        self._link: Optional[_Link] = None

    # -- connection ----------------------------------------------------------

    def _open(self) -> _Link:
        client = mqtt.Client(
            mqtt.CallbackAPIVersion.VERSION2,
            client_id=f"hh-pub-{self.device_id}-{uuid.uuid4().hex[:8]}",
            clean_session=True,
            protocol=mqtt.MQTTv311,
        )
        client.max_inflight_messages_set(self.max_inflight + 1)
        client.max_queued_messages_set(0)
        if self.endpoint.username:
            client.username_pw_set(self.endpoint.username, self.endpoint.password)
        link = _Link(client)

        def on_connect(c, userdata, flags, reason_code, properties):
            if not reason_code.is_failure:
                link.connected = True
            else:
                link.lost = True

        def on_disconnect(c, userdata, flags, reason_code, properties):
            link.lost = True

        def on_publish(c, userdata, mid, reason_code, properties):
            seq = link.inflight.pop(mid, None)
            if seq is not None:
                link.acked.add(seq)

        client.on_connect = on_connect
        client.on_disconnect = on_disconnect
        client.on_publish = on_publish
        client.connect(self.endpoint.host, self.endpoint.port, self.keepalive)
        deadline = time.monotonic() + self.connect_timeout
        while not link.connected:
            if link.lost or time.monotonic() > deadline:
                try:
                    client.disconnect()
                except OSError:
                    pass
                raise ConnectionError("broker did not accept the connection")
            if client.loop(0.05) != mqtt.MQTT_ERR_SUCCESS:
                raise ConnectionError("connection lost during handshake")
        link.sent_upto = self.buffer.watermark
        return link

    def _close(self) -> None:
        link, self._link = self._link, None
        if link is not None:
            try:
                link.client.disconnect()
                link.client.loop(0.01)
            except Exception:  # socket may already be gone
                pass

    # -- sending -------------------------------------------------------------

    def _settle_acks(self, link: _Link) -> None:
        top = None
        while link.order and link.order[0] in link.acked:
            top = link.order.popleft()
            link.acked.discard(top)
        if top is not None:
            self.buffer.ack(top)

    def _fill(self, link: _Link) -> bool:
        room = self.max_inflight - len(link.inflight)
        if room <= 0:
            return True
        batch = self.buffer.pending(after=link.sent_upto, limit=room)
        for seq, payload in batch:
            info = link.client.publish(state_topic(self.device_id), payload, qos=1)
            if info.rc != mqtt.MQTT_ERR_SUCCESS:
                return False
            link.inflight[info.mid] = seq
            link.order.append(seq)
            link.sent_upto = seq
            self.published += 1
        if batch and batch[-1][0] == self.buffer.last_seq:
            info = link.client.publish(last_topic(self.device_id), batch[-1][1], qos=1, retain=True)
            if info.rc != mqtt.MQTT_ERR_SUCCESS:
                return False
        return True

    def step(self, poll: float = 0.02) -> bool:
        """One iteration of the loop; returns False while disconnected."""
        if self._link is None:
            try:
                self._link = self._open()
            except (OSError, ConnectionError) as exc:
                log.debug("broker connect failed: %s", exc)
                return False
            self.connects += 1
            self.backoff.reset()
            log.info("connected to %s:%d", self.endpoint.host, self.endpoint.port)
        link = self._link
        ok = self._fill(link) and link.client.loop(poll) == mqtt.MQTT_ERR_SUCCESS
        self._settle_acks(link)
        if not ok or link.lost:
            log.warning("broker connection lost; %d records pending", len(self.buffer))
            self._close()
            return False
        return True

    @property
    def idle(self) -> bool:
        link = self._link
        return len(self.buffer) == 0 and (link is None or not link.inflight)

    def run(self, stop: Optional[threading.Event] = None, *, until_drained: bool = False,
            timeout: Optional[float] = None) -> bool:
        """Loop until ``stop`` is set (or the buffer drains); True if drained."""
        stop = stop or threading.Event()
        deadline = None if timeout is None else time.monotonic() + timeout
        try:
            while not stop.is_set():
                if until_drained and self.idle:
                    return True
                if deadline is not None and time.monotonic() > deadline:
                    return self.idle
                if not self.step():
                    stop.wait(self.backoff.next())
            return self.idle
        finally:
            self._close()


def publish_loop(buffer: OutboundBuffer, broker_url: str, device_id: str,
                 stop: Optional[threading.Event] = None, **kwargs) -> Publisher:
    """Run the store-and-forward loop until ``stop`` is set."""
    pub = Publisher(buffer, broker_url, device_id, **kwargs)
    pub.run(stop)
    return pub
