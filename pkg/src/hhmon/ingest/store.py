"""Event-sourced store of device data points.

Each device owns one append-only JSON-lines log per generation::

    <data_dir>/devices/<device_id>/gen-0001.jsonl

A generation ends when the device restarts its sequence at 1 (a controller
reset); older generations stay on disk and the newest one is served.
Aggregates live in memory only and are rebuilt by folding the logs on
startup, truncating a torn trailing line if the last write was cut short.
"""

from __future__ import annotations

import bisect
import enum
import logging
import os
import re
import threading
from dataclasses import asdict, dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Iterable, Optional

from ..core import CounterState, DataPoint, compute_rate
from ..telemetry.wire import DecodeError, decode, encode_text

log = logging.getLogger(__name__)

_DEVICE_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]{0,63}$")
_GEN_RE = re.compile(r"^gen-(\d{4,})\.jsonl$")
MAX_BUCKETS = 100_000


class Status(str, enum.Enum):
    ACCEPTED = "accepted"
    DUPLICATE = "duplicate"
    REJECTED = "rejected"


@dataclass(frozen=True)
class IngestResult:
    status: Status
    reason: str = ""

    def __bool__(self) -> bool:
        return self.status is not Status.REJECTED


class UnknownDevice(KeyError):
    pass


class CorruptLogError(RuntimeError):
    def __init__(self, path: Path, offset: int, detail: str) -> None:
        self.path = path
        self.offset = offset
        super().__init__(f"{path}: corrupt record at byte offset {offset}: {detail}")


@dataclass(frozen=True)
class EightBlockSummary:
    """The dashboard, one field per block in screen order (plus the device id)."""

    device_id: str
    accesses: int
    exits: int
    opportunities: int
    sanitizations: int
    rate_series_ref: str
    occupancy: int
    current_rate_percent: Optional[Decimal]
    records_ref: str

    def to_json(self) -> dict:
        d = asdict(self)
        p = self.current_rate_percent
        d["current_rate_percent"] = None if p is None else float(p)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "EightBlockSummary":
        obj = dict(obj)
        p = obj.get("current_rate_percent")
        obj["current_rate_percent"] = None if p is None else Decimal(str(p)).quantize(Decimal("0.01"))
        return cls(**obj)

    @classmethod
    def build(cls, device_id: str, counters: CounterState) -> "EightBlockSummary":
        base = f"/api/v1/devices/{device_id}"
        return cls(
            device_id=device_id,
            accesses=counters.accesses,
            exits=counters.exits,
            opportunities=counters.opportunities,
            sanitizations=counters.sanitizations,
            rate_series_ref=f"{base}/rate-series",
            occupancy=counters.occupancy,
            current_rate_percent=compute_rate(counters).percent_2dp,
            records_ref=f"{base}/events",
        )


def _regression(prev: CounterState, cur: CounterState) -> Optional[str]:
    for name in ("accesses", "exits", "opportunities", "sanitizations", "ignored_exits"):
        if getattr(cur, name) < getattr(prev, name):
            return f"{name} decreased from {getattr(prev, name)} to {getattr(cur, name)}"
    return None


@dataclass
class DeviceLog:
    """In-memory view of one device's current generation."""

    device_id: str
    generation: int = 1
    records: list[DataPoint] = field(default_factory=list)
    lines: list[str] = field(default_factory=list)
    stamps: list[int] = field(default_factory=list)
    path: Optional[Path] = None
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def first_seq(self) -> int:
        return self.records[0].seq if self.records else 0

    @property
    def last_seq(self) -> int:
        return self.records[-1].seq if self.records else 0

    @property
    def counters(self) -> CounterState:
        return self.records[-1].counters if self.records else CounterState()

    @property
    def visible(self) -> bool:
        """Known to readers: something was stored, now or in an earlier run."""
        return bool(self.records) or self.generation > 1 or (self.path is not None and self.path.exists())

    def check(self, dp: DataPoint, line: str) -> IngestResult | None:
        """None when ``dp`` may be appended, otherwise the verdict."""
        if not self.records:
            return None
        if dp.seq <= self.last_seq:
            if dp.seq >= self.first_seq:
                stored = self.lines[dp.seq - self.first_seq]
                if stored == line:
                    return IngestResult(Status.DUPLICATE)
                return IngestResult(Status.REJECTED, f"conflicting record for seq {dp.seq}")
            return IngestResult(Status.REJECTED, f"seq {dp.seq} predates this log")
        if dp.seq != self.last_seq + 1:
            return IngestResult(Status.REJECTED, f"gap: expected seq {self.last_seq + 1}, got {dp.seq}")
        if dp.ts < self.records[-1].ts:
            return IngestResult(Status.REJECTED, "timestamp regression")
        reason = _regression(self.counters, dp.counters)
        if reason:
            return IngestResult(Status.REJECTED, reason)
        return None

    def apply(self, dp: DataPoint, line: str) -> None:
        self.records.append(dp)
        self.lines.append(line)
        self.stamps.append(dp.ts)


class IngestService:
    """Thread-safe ingest and query API over the per-device logs.

    With ``data_dir=None`` the service is memory-only (used for reports over
    emission files).
    """

    def __init__(self, data_dir: str | os.PathLike | None = None, *, fsync: bool = True) -> None:
        self.data_dir = Path(data_dir) if data_dir is not None else None
        self.fsync = fsync
        self._devices: dict[str, DeviceLog] = {}
        self._lock = threading.Lock()
        if self.data_dir is not None:
            (self.data_dir / "devices").mkdir(parents=True, exist_ok=True)
            self._rebuild()

    # -- recovery ------------------------------------------------------------

    def _gen_path(self, device_id: str, gen: int) -> Path:
        assert self.data_dir is not None
        return self.data_dir / "devices" / device_id / f"gen-{gen:04d}.jsonl"

    def _rebuild(self) -> None:
        root = self.data_dir / "devices"
        for ddir in sorted(p for p in root.iterdir() if p.is_dir()):
            gens = sorted(int(m.group(1)) for f in ddir.iterdir() if (m := _GEN_RE.match(f.name)))
            if not gens:
                continue
            dev = DeviceLog(ddir.name, generation=gens[-1], path=self._gen_path(ddir.name, gens[-1]))
            for offset, dp, line in _read_log(dev.path):
                verdict = dev.check(dp, line)
                if verdict is not None:
                    raise CorruptLogError(dev.path, offset, f"seq {dp.seq}: {verdict.reason or verdict.status.value}")
                dev.apply(dp, line)
            self._devices[dev.device_id] = dev
            log.info("rebuilt %s generation %d: %d records", dev.device_id, dev.generation, len(dev.records))

    # -- writes --------------------------------------------------------------

    def _device(self, device_id: str) -> DeviceLog:
        with self._lock:
            dev = self._devices.get(device_id)
            if dev is None:
                dev = DeviceLog(device_id)
                if self.data_dir is not None:
                    dev.path = self._gen_path(device_id, 1)
                    dev.path.parent.mkdir(parents=True, exist_ok=True)
                self._devices[device_id] = dev
            return dev

    def _append(self, dev: DeviceLog, line: str) -> None:
        if dev.path is None:
            return
        with open(dev.path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")
            fh.flush()
            if self.fsync:
                os.fsync(fh.fileno())

    def ingest(self, dp: DataPoint) -> IngestResult:
        if not _DEVICE_RE.match(dp.device_id):
            return IngestResult(Status.REJECTED, f"invalid device_id {dp.device_id!r}")
        c = dp.counters
        if c.opportunities != 2 * c.accesses:
            return IngestResult(Status.REJECTED, "opportunities != 2 * accesses")
        line = encode_text(dp)
        dev = self._device(dp.device_id)
        with dev.lock:
            verdict = dev.check(dp, line)
            if verdict is not None and dp.seq == 1 and verdict.status is Status.REJECTED:
                # controller restarted: open a new generation
                self._new_generation(dev)
                verdict = None
            if verdict is not None:
                return verdict
            try:
                self._append(dev, line)
            except OSError as exc:
                return IngestResult(Status.REJECTED, f"storage: {exc}")
            dev.apply(dp, line)
        return IngestResult(Status.ACCEPTED)

    def ingest_bytes(self, payload: bytes | str) -> IngestResult:
        try:
            dp = decode(payload)
        except DecodeError as exc:
            return IngestResult(Status.REJECTED, f"decode: {exc}")
        return self.ingest(dp)

    def _new_generation(self, dev: DeviceLog) -> None:
        dev.generation += 1
        dev.records, dev.lines, dev.stamps = [], [], []
        if self.data_dir is not None:
            dev.path = self._gen_path(dev.device_id, dev.generation)
        log.warning("%s restarted its sequence; opened generation %d", dev.device_id, dev.generation)

    # -- reads ---------------------------------------------------------------

    def devices(self) -> list[str]:
        with self._lock:
            return sorted(d for d, dev in self._devices.items() if dev.visible)

    def _get(self, device_id: str) -> DeviceLog:
        with self._lock:
            dev = self._devices.get(device_id)
        if dev is None or not dev.visible:
            raise UnknownDevice(device_id)
        return dev

    def summary(self, device_id: str) -> EightBlockSummary:
        dev = self._get(device_id)
        with dev.lock:
            counters = dev.counters
        return EightBlockSummary.build(device_id, counters)

    def generation(self, device_id: str) -> int:
        return self._get(device_id).generation

    def all_records(self, device_id: str) -> list[DataPoint]:
        dev = self._get(device_id)
        with dev.lock:
            return list(dev.records)

    def events(self, device_id: str, limit: int = 100, before_seq: Optional[int] = None) -> list[DataPoint]:
        """Newest-first page of records with seq < ``before_seq``."""
        if not 1 <= limit <= 1000:
            raise ValueError("limit must lie in [1, 1000]")
        dev = self._get(device_id)
        with dev.lock:
            recs = dev.records
            end = len(recs)
            if before_seq is not None:
                end = max(0, min(end, before_seq - dev.first_seq)) if recs else 0
            start = max(0, end - limit)
            return list(reversed(recs[start:end]))

    def rate_series(self, device_id: str, from_ts: int, to_ts: int,
                    bucket_ms: int) -> list[tuple[int, Optional[Decimal]]]:
        """Per bucket, the rate of the last record at or before the bucket end."""
        if from_ts >= to_ts:
            raise ValueError("from_ts must be before to_ts")
        if bucket_ms < 1000:
            raise ValueError("bucket_ms must be at least 1000")
        n = -(-(to_ts - from_ts) // bucket_ms)
        if n > MAX_BUCKETS:
            raise ValueError(f"range spans {n} buckets; at most {MAX_BUCKETS} allowed")
        dev = self._get(device_id)
        with dev.lock:
            stamps, recs = list(dev.stamps), list(dev.records)
        out = []
        for k in range(n):
            start = from_ts + k * bucket_ms
            i = bisect.bisect_right(stamps, start + bucket_ms)
            out.append((start, recs[i - 1].rate.percent_2dp if i else None))
        return out

    def ingest_many(self, dps: Iterable[DataPoint]) -> list[IngestResult]:
        return [self.ingest(dp) for dp in dps]


def _read_log(path: Path) -> list[tuple[int, DataPoint, str]]:
    """Decode a log file, truncating a torn final line in place."""
    data = path.read_bytes()
    pos = 0
    out = []
    while pos < len(data):
        nl = data.find(b"\n", pos)
        if nl == -1:
            log.warning("%s: truncating torn trailing record at offset %d", path, pos)
            _truncate(path, pos)
            break
        raw = data[pos:nl]
        try:
            dp = decode(raw)
        except DecodeError as exc:
            if nl + 1 == len(data):
                log.warning("%s: truncating undecodable trailing record at offset %d", path, pos)
                _truncate(path, pos)
                break
            raise CorruptLogError(path, pos, str(exc)) from None
        out.append((pos, dp, raw.decode("utf-8")))
        pos = nl + 1
    return out


def _truncate(path: Path, size: int) -> None:
    with open(path, "r+b") as fh:
        fh.truncate(size)
        os.fsync(fh.fileno())


def rebuild(data_dir: str | os.PathLike) -> IngestService:
    return IngestService(data_dir)
