"""Eight-block dashboard and records table rendering."""

from __future__ import annotations

import json
import urllib.error
import urllib.request
from dataclasses import dataclass
from datetime import datetime, timezone
from decimal import Decimal
from pathlib import Path
from typing import Optional
from urllib.parse import quote

from .core import DataPoint
from .ingest.store import EightBlockSummary, IngestService, UnknownDevice
from .telemetry.wire import DecodeError, decode, from_mapping

TIMESTAMP_FORMAT = "%d/%m/%Y %H:%M:%S"


class SourceError(RuntimeError):
    pass


@dataclass
class ReportData:
    summary: EightBlockSummary
    records: list[DataPoint]


def format_timestamp(ts_ms: int) -> str:
    return datetime.fromtimestamp(ts_ms / 1000, tz=timezone.utc).strftime(TIMESTAMP_FORMAT)


def format_rate(percent: Optional[Decimal], locale: str = "en") -> str:
    if percent is None:
        return "-"
    text = f"{percent:.2f}"
    if locale == "br":
        text = text.replace(".", ",")
    return text + "%"


def load_emissions(path: str | Path) -> IngestService:
    """Memory-only service holding a canonical-JSON-lines emission file."""
    svc = IngestService(None)
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, 1):
            if not raw.strip():
                continue
            try:
                dp = decode(raw.rstrip(b"\r\n"))
            except DecodeError as exc:
                raise SourceError(f"{path}:{lineno}: {exc}") from None
            svc.ingest(dp)
    return svc


def _get_json(url: str):
    try:
        with urllib.request.urlopen(url, timeout=10) as resp:
            return json.load(resp)
    except urllib.error.HTTPError as exc:
        if exc.code == 404:
            raise UnknownDevice(url) from None
        raise SourceError(f"{url}: HTTP {exc.code}") from None
    except urllib.error.URLError as exc:
        raise SourceError(f"{url}: {exc.reason}") from None


def _collect_remote(base: str, device_id: Optional[str]) -> ReportData:
    base = base.rstrip("/")
    if device_id is None:
        devices = _get_json(f"{base}/api/v1/devices")["devices"]
        if len(devices) != 1:
            raise SourceError(f"source holds {len(devices)} devices; pass --device")
        device_id = devices[0]
    dev = f"{base}/api/v1/devices/{quote(device_id, safe='')}"
    summary = EightBlockSummary.from_json(_get_json(f"{dev}/summary"))
    records: list[DataPoint] = []
    before = None
    while True:
        url = f"{dev}/events?limit=1000" + (f"&before_seq={before}" if before else "")
        page = _get_json(url)
        records.extend(from_mapping(r) for r in page["records"])
        before = page["next_before_seq"]
        if not page["records"] or before is None:
            break
    records.reverse()
    return ReportData(summary, records)


def collect(source: str, device_id: Optional[str] = None) -> ReportData:
    """Gather a device's summary and records from a URL, data dir or emission file."""
    if source.startswith(("http://", "https://")):
        return _collect_remote(source, device_id)
    path = Path(source)
    if not path.exists():
        raise SourceError(f"{source}: no such file or directory")
    svc = IngestService(path) if path.is_dir() else load_emissions(path)
    if device_id is None:
        devices = svc.devices()
        if len(devices) > 1:
            raise SourceError(f"source holds {len(devices)} devices; pass --device")
        if not devices:
            raise UnknownDevice("<none>")
        device_id = devices[0]
    return ReportData(svc.summary(device_id), svc.all_records(device_id))


def render_table(data: ReportData, locale: str = "en") -> str:
    s = data.summary
    blocks = [
        ("Accesses", str(s.accesses)),
        ("Exits", str(s.exits)),
        ("HH opportunities", str(s.opportunities)),
        ("Complete HH", str(s.sanitizations)),
        ("HH rate over time", s.rate_series_ref),
        ("Occupants", str(s.occupancy)),
        ("Current HH rate", format_rate(s.current_rate_percent, locale)),
        ("Records", f"{len(data.records)} (below)"),
    ]
    lines = [f"Hand hygiene monitor: {s.device_id}", ""]
    for i, (label, value) in enumerate(blocks, 1):
        lines.append(f"  [{i}] {label:<18} {value}")
    lines.append("")
    header = ("Timestamp", "TX Hyg", "NO", "NS", "NAc", "NE", "NOc", "Event", "RFID")
    rows = [header]
    for dp in data.records:
        c = dp.counters
        rows.append((
            format_timestamp(dp.ts),
            format_rate(dp.rate.percent_2dp, locale),
            str(c.opportunities),
            str(c.sanitizations),
            str(c.accesses),
            str(c.exits),
            str(c.occupancy),
            dp.event_kind.value,
            dp.rfid_uid or "-",
        ))
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    for r in rows:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip())
    return "\n".join(lines) + "\n"


def render_json(data: ReportData) -> str:
    return json.dumps(data.summary.to_json())
