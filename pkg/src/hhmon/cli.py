"""Command line entry point: ``hh simulate | serve | replay | report``.

Exit codes: 0 success, 1 runtime failure (bind, unreachable target),
2 bad input (scenario, trace), 3 unknown device.
"""

from __future__ import annotations

import http.client
import json
import logging
import signal
import sys
import tempfile
import threading
import time
from pathlib import Path
from typing import Optional
from urllib.parse import urlparse

import click

from . import data as bundled
from .report import SourceError, collect, render_json, render_table
from .sim import ScenarioError, load_scenario, run
from .telemetry.buffer import OutboundBuffer
from .telemetry.publisher import Publisher
from .telemetry.wire import DecodeError, decode, encode, encode_text
from .ingest.store import CorruptLogError, IngestService, UnknownDevice

log = logging.getLogger("hhmon")


@click.group()
@click.option("-v", "--verbose", count=True, help="Increase log verbosity.")
def main(verbose: int) -> None:
    """Hand-hygiene monitoring: simulate, serve, replay and report."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _scenario_text(path: str) -> str:
    p = Path(path)
    if p.exists():
        return p.read_text(encoding="utf-8")
    if bundled.has(path):
        return bundled.read_text(path)
    raise FileNotFoundError(path)


@main.command()
@click.option("--scenario", "scenario_path", required=True, help="Scenario file (or a bundled name, e.g. table2.scn).")
@click.option("--seed", default=0, show_default=True, type=int, help="Seed for sensor jitter.")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False), help="Emission output (JSON lines).")
@click.option("--publish", "publish_url", default=None, help="Also publish emissions to this MQTT broker.")
@click.option("--data-dir", envvar="HH_DATA_DIR", default=None, type=click.Path(file_okay=False),
              help="Directory for the durable outbound buffer (with --publish).")
@click.option("--publish-timeout", default=60.0, show_default=True, type=float,
              help="Seconds to wait for the broker to acknowledge everything.")
@click.option("--device-id", envvar="HH_DEVICE_ID", default=None, help="Override the scenario's device id.")
def simulate(scenario_path: str, seed: int, out_path: str, publish_url: Optional[str],
             data_dir: Optional[str], publish_timeout: float, device_id: Optional[str]) -> None:
    """Run a scenario through the detector and controller."""
    try:
        scenario = load_scenario(_scenario_text(scenario_path))
    except FileNotFoundError:
        click.echo(f"error: scenario {scenario_path} not found", err=True)
        sys.exit(2)
    except ScenarioError as exc:
        for path, msg in exc.errors:
            click.echo(f"error: {path or '<root>'}: {msg}", err=True)
        sys.exit(2)
    if device_id:
        scenario = scenario.model_copy(update={"config": scenario.config.model_copy(update={"device_id": device_id})})

    result = run(scenario, seed)
    with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
        for dp in result.emissions:
            fh.write(encode_text(dp) + "\n")
    click.echo(f"{len(result.emissions)} data points written to {out_path}", err=True)

    if publish_url:
        device_id = scenario.config.device_id
        bufdir = Path(data_dir) / "outbox" / device_id if data_dir else Path(tempfile.mkdtemp(prefix="hh-outbox-"))
        buf = OutboundBuffer(bufdir)
        for dp in result.emissions:
            if dp.seq > buf.last_seq:
                buf.enqueue(dp)
        drained = Publisher(buf, publish_url, device_id).run(until_drained=True, timeout=publish_timeout)
        buf.close()
        if not drained:
            click.echo(f"error: {len(buf)} records still unacknowledged by {publish_url}", err=True)
            sys.exit(1)


@main.command()
@click.option("--data-dir", envvar="HH_DATA_DIR", required=True, type=click.Path(file_okay=False))
@click.option("--http", "listen", envvar="HH_HTTP_LISTEN", default="127.0.0.1:8080", show_default=True,
              help="HOST:PORT for the HTTP API.")
@click.option("--mqtt", "mqtt_url", envvar="HH_MQTT_URL", default=None, help="Broker to subscribe to.")
def serve(data_dir: str, listen: str, mqtt_url: Optional[str]) -> None:
    """Run the ingest service until interrupted."""
    from .ingest.http import IngestHttpServer, parse_listen
    from .ingest.mqtt import IngestSubscriber

    try:
        service = IngestService(data_dir)
    except CorruptLogError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    try:
        host, port = parse_listen(listen)
        server = IngestHttpServer(service, host, port)
    except (OSError, ValueError) as exc:
        click.echo(f"error: cannot listen on {listen}: {exc}", err=True)
        sys.exit(1)

    subscriber = IngestSubscriber(service, mqtt_url).start(wait=None) if mqtt_url else None
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    server.start()
    click.echo(f"listening on {server.url}", err=True)
    stop.wait()
    if subscriber is not None:
        subscriber.stop()
    server.stop()
    click.echo("stopped", err=True)


def _post_all(target: str, payloads: list[bytes], rate: Optional[float]) -> dict[str, int]:
    u = urlparse(target)
    conn_cls = http.client.HTTPSConnection if u.scheme == "https" else http.client.HTTPConnection
    conn = conn_cls(u.hostname, u.port, timeout=30)
    path = (u.path.rstrip("/") or "") + "/api/v1/ingest"
    counts = {"accepted": 0, "duplicate": 0, "rejected": 0}
    interval = 1.0 / rate if rate else 0.0
    start = time.monotonic()
    for i, body in enumerate(payloads):
        if interval:
            delay = start + i * interval - time.monotonic()
            if delay > 0:
                time.sleep(delay)
        conn.request("POST", path, body=body, headers={"Content-Type": "application/json"})
        resp = conn.getresponse()
        reply = json.loads(resp.read() or b"{}")
        status = reply.get("status", "rejected") if resp.status == 200 else "rejected"
        if status == "rejected":
            log.warning("record %d rejected: %s", i + 1, reply.get("reason", resp.status))
        counts[status] += 1
    conn.close()
    return counts


@main.command()
@click.option("--trace", "trace_path", required=True, type=click.Path(dir_okay=False), help="JSON-lines emission file.")
@click.option("--target", required=True, help="Ingest base URL (http://...) or broker URL (mqtt://...).")
@click.option("--rate", type=float, default=None, help="Records per second (default: as fast as possible).")
def replay(trace_path: str, target: str, rate: Optional[float]) -> None:
    """Send a recorded trace to a live ingest service or broker, in order."""
    try:
        raw_lines = Path(trace_path).read_bytes().splitlines()
    except OSError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    records = []
    for lineno, raw in enumerate(raw_lines, 1):
        if not raw.strip():
            continue
        try:
            records.append(decode(raw))
        except DecodeError as exc:
            click.echo(f"error: {trace_path}:{lineno}: {exc}", err=True)
            sys.exit(2)
    if not records:
        return

    if target.startswith(("mqtt://", "tcp://")):
        by_device: dict[str, list] = {}
        for dp in records:
            by_device.setdefault(dp.device_id, []).append(dp)
        for device_id, dps in by_device.items():
            with tempfile.TemporaryDirectory(prefix="hh-replay-") as tmp:
                buf = OutboundBuffer(tmp, fsync=False)
                for dp in dps:
                    buf.enqueue(dp)
                ok = Publisher(buf, target, device_id).run(until_drained=True, timeout=60)
                buf.close()
            if not ok:
                click.echo(f"error: broker {target} did not acknowledge every record", err=True)
                sys.exit(1)
        click.echo(f"published {len(records)} records", err=True)
        return

    try:
        counts = _post_all(target, [encode(dp) for dp in records], rate)
    except OSError as exc:
        click.echo(f"error: cannot reach {target}: {exc}", err=True)
        sys.exit(1)
    click.echo(" ".join(f"{k}={v}" for k, v in counts.items()), err=True)
    if counts["rejected"]:
        sys.exit(1)


@main.command()
@click.option("--source", required=True, help="Emission file, ingest data dir, or ingest base URL.")
@click.option("--device", "device_id", default=None, help="Device to report (optional if the source has one).")
@click.option("--format", "fmt", type=click.Choice(["table", "json"]), default="table", show_default=True)
@click.option("--locale", type=click.Choice(["en", "br"]), default="en", show_default=True,
              help="Decimal separator for rates in table format.")
def report(source: str, device_id: Optional[str], fmt: str, locale: str) -> None:
    """Render the eight-block summary and the records table."""
    try:
        data = collect(source, device_id)
    except UnknownDevice:
        click.echo(f"error: unknown device {device_id or ''}".rstrip(), err=True)
        sys.exit(3)
    except (SourceError, CorruptLogError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    click.echo(render_json(data) if fmt == "json" else render_table(data, locale), nl=fmt == "json")


if __name__ == "__main__":
    main()
