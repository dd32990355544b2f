"""MQTT intake: subscribes to every device's state topic and ingests payloads."""

from __future__ import annotations

import collections
import logging
import threading
import uuid

import paho.mqtt.client as mqtt

from ..telemetry.publisher import BrokerEndpoint
from .store import IngestService

log = logging.getLogger(__name__)

STATE_FILTER = "hh/v1/+/state"


class IngestSubscriber:
    def __init__(self, service: IngestService, broker_url: str) -> None:
        self.service = service
        self.endpoint = BrokerEndpoint.parse(broker_url)
        self.counts: collections.Counter[str] = collections.Counter()
        self.subscribed = threading.Event()
        self._client = mqtt.Client(
            mqtt.CallbackAPIVersion.VERSION2,
            client_id=f"hh-ingest-{uuid.uuid4().hex[:8]}",
            clean_session=True,
            protocol=mqtt.MQTTv311,
        )
        if self.endpoint.username:
            self._client.username_pw_set(self.endpoint.username, self.endpoint.password)
        self._client.reconnect_delay_set(min_delay=1, max_delay=30)
        self._client.on_connect = self._on_connect
        self._client.on_subscribe = self._on_subscribe
        self._client.on_message = self._on_message

    def _on_connect(self, client, userdata, flags, reason_code, properties) -> None:
        if reason_code.is_failure:
            log.warning("broker refused ingest subscriber: %s", reason_code)
            return
        client.subscribe(STATE_FILTER, qos=1)

    def _on_subscribe(self, client, userdata, mid, reason_codes, properties) -> None:
        self.subscribed.set()

    def _on_message(self, client, userdata, msg) -> None:
        result = self.service.ingest_bytes(msg.payload)
        self.counts[result.status.value] += 1
        if not result:
            log.warning("rejected record on %s: %s", msg.topic, result.reason)

    def start(self, wait: float | None = 5.0) -> "IngestSubscriber":
        self._client.connect_async(self.endpoint.host, self.endpoint.port, keepalive=30)
        self._client.loop_start()
        if wait is not None and not self.subscribed.wait(wait):
            log.warning("ingest subscriber not yet subscribed to %s", STATE_FILTER)
        return self

    def stop(self) -> None:
        self._client.disconnect()
        self._client.loop_stop()

    def __enter__(self) -> "IngestSubscriber":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
