"""JSON-over-HTTP front end for :class:`IngestService`.

Routes::

    GET  /healthz
    GET  /api/v1/devices
    GET  /api/v1/devices/{id}/summary
    GET  /api/v1/devices/{id}/rate-series?from=&to=&bucket_ms=
    GET  /api/v1/devices/{id}/events?limit=&before_seq=
    POST /api/v1/ingest              (one wire record as the body)
"""

from __future__ import annotations

import json
import logging
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, unquote, urlparse

from ..telemetry.wire import encode_text
from .store import IngestService, Status, UnknownDevice

log = logging.getLogger(__name__)

_DEVICE_ROUTE = re.compile(r"^/api/v1/devices/([^/]+)/(summary|rate-series|events)$")
MAX_BODY = 64 * 1024


class _BadRequest(Exception):
    pass


def _int_param(qs: dict, name: str, default=None):
    vals = qs.get(name)
    if not vals:
        if default is None:
            raise _BadRequest(f"missing query parameter {name!r}")
        return default
    try:
        return int(vals[0])
    except ValueError:
        raise _BadRequest(f"query parameter {name!r} must be an integer") from None


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    disable_nagle_algorithm = True
    server: "_Server"

    def log_message(self, fmt, *args) -> None:
        log.debug("%s - %s", self.address_string(), fmt % args)

    def _send(self, status: int, body: str | dict) -> None:
        text = body if isinstance(body, str) else json.dumps(body)
        raw = text.encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(raw)))
        self.end_headers()
        self.wfile.write(raw)

    def do_GET(self) -> None:
        svc = self.server.service
        url = urlparse(self.path)
        qs = parse_qs(url.query)
        try:
            if url.path == "/healthz":
                return self._send(200, {"status": "ok"})
            if url.path == "/api/v1/devices":
                return self._send(200, {"devices": svc.devices()})
            m = _DEVICE_ROUTE.match(url.path)
            if not m:
                return self._send(404, {"error": "no such route"})
            device_id, what = unquote(m.group(1)), m.group(2)
            if what == "summary":
                return self._send(200, svc.summary(device_id).to_json())
            if what == "events":
                limit = _int_param(qs, "limit", 100)
                before = _int_param(qs, "before_seq", -1)
                page = svc.events(device_id, limit, None if before < 0 else before)
                lines = [encode_text(dp) for dp in page]
                nxt = page[-1].seq if page and page[-1].seq > 1 else None
                body = ('{"device_id":' + json.dumps(device_id) + ',"records":[' + ",".join(lines)
                        + '],"next_before_seq":' + json.dumps(nxt) + "}")
                return self._send(200, body)
            records = svc.all_records(device_id)
            first = records[0].ts if records else 0
            last = records[-1].ts + 1 if records else 1
            bucket = _int_param(qs, "bucket_ms", 60_000)
            series = svc.rate_series(device_id, _int_param(qs, "from", first), _int_param(qs, "to", last), bucket)
            return self._send(200, {
                "device_id": device_id,
                "bucket_ms": bucket,
                "series": [{"bucket_start": s, "rate_percent": None if r is None else float(r)}
                           for s, r in series],
            })
        except UnknownDevice:
            return self._send(404, {"error": "unknown device"})
        except (_BadRequest, ValueError) as exc:
            return self._send(400, {"error": str(exc)})

    def do_POST(self) -> None:
        if urlparse(self.path).path != "/api/v1/ingest":
            return self._send(404, {"error": "no such route"})
        try:
            length = int(self.headers.get("Content-Length", "0"))
        except ValueError:
            length = -1
        if not 0 < length <= MAX_BODY:
            return self._send(400, {"status": "rejected", "reason": "missing or oversized body"})
        result = self.server.service.ingest_bytes(self.rfile.read(length))
        if result.status is not Status.REJECTED:
            return self._send(200, {"status": result.status.value})
        if result.reason.startswith("decode"):
            code = 400
        elif result.reason.startswith("storage"):
            code = 503
        else:
            code = 409
        return self._send(code, {"status": "rejected", "reason": result.reason})


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    service: IngestService


class IngestHttpServer:
    def __init__(self, service: IngestService, host: str = "127.0.0.1", port: int = 0) -> None:
        self.service = service
        self._server = _Server((host, port), _Handler)
        self._server.service = service
        self.host, self.port = self._server.server_address[:2]
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def serve_forever(self) -> None:
        self._server.serve_forever()

    def start(self) -> "IngestHttpServer":
        self._thread = threading.Thread(target=self._server.serve_forever, name="ingest-http", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self) -> "IngestHttpServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def parse_listen(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not port.isdigit():
        raise ValueError(f"listen address {addr!r} must look like HOST:PORT")
    return host or "127.0.0.1", int(port)

