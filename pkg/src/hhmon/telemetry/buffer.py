"""Durable outbound queue for data points awaiting broker acknowledgement.

Layout inside the buffer directory::

    outbox.log   append-only frames: u32 length | u64 seq | u32 crc32 | payload
    outbox.ack   highest seq acknowledged by the broker (decimal text)

Every append is fsync'ed before :meth:`OutboundBuffer.enqueue` returns. On
open, a torn trailing frame is truncated away. When every record has been
acknowledged the log is truncated to zero so it does not grow forever.
"""

from __future__ import annotations

import logging
import os
import struct
import threading
import zlib
from pathlib import Path
from typing import Optional

from ..core import DataPoint
from .wire import encode

log = logging.getLogger(__name__)

_HEADER = struct.Struct(">IQI")
LOG_NAME = "outbox.log"
ACK_NAME = "outbox.ack"
DEFAULT_HIGH_WATER = 10_000


class SeqRegressionError(ValueError):
    """A record's seq does not exceed the last one enqueued."""


class CorruptBufferError(RuntimeError):
    pass


class OutboundBuffer:
    def __init__(self, directory: str | os.PathLike, *, high_water: int = DEFAULT_HIGH_WATER,
                 fsync: bool = True) -> None:
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.log_path = self.dir / LOG_NAME
        self.ack_path = self.dir / ACK_NAME
        self.high_water = high_water
        self.fsync = fsync
        self._lock = threading.Lock()
        self._records: list[tuple[int, bytes]] = []  # unacknowledged, seq order
        self._overflow: list[tuple[int, bytes]] = []  # not yet on disk
        self.watermark = self._read_watermark()
        self.last_seq = self.watermark
        self.storage_error: Optional[OSError] = None
        self._warned = False
        self._load()
        self._fh = open(self.log_path, "ab")

    # -- persistence ---------------------------------------------------------

    def _read_watermark(self) -> int:
        try:
            return int(self.ack_path.read_text().strip() or 0)
        except FileNotFoundError:
            return 0

    def _load(self) -> None:
        if not self.log_path.exists():
            return
        data = self.log_path.read_bytes()
        pos = 0
        while pos < len(data):
            if pos + _HEADER.size > len(data):
                break
            length, seq, crc = _HEADER.unpack_from(data, pos)
            end = pos + _HEADER.size + length
            if end > len(data):
                break
            payload = data[pos + _HEADER.size:end]
            if zlib.crc32(payload) != crc:
                if end == len(data):
                    break
                raise CorruptBufferError(f"{self.log_path}: bad checksum at offset {pos}")
            self.last_seq = max(self.last_seq, seq)
            if seq > self.watermark:
                self._records.append((seq, payload))
            pos = end
        if pos < len(data):
            log.warning("%s: truncating torn record at offset %d", self.log_path, pos)
            with open(self.log_path, "r+b") as fh:
                fh.truncate(pos)
                os.fsync(fh.fileno())

    def _append_frame(self, seq: int, payload: bytes) -> None:
        self._fh.write(_HEADER.pack(len(payload), seq, zlib.crc32(payload)) + payload)
        self._fh.flush()
        if self.fsync:
            os.fsync(self._fh.fileno())

    def _drain_overflow(self) -> None:
        while self._overflow:
            seq, payload = self._overflow[0]
            self._append_frame(seq, payload)
            self._overflow.pop(0)

    # -- producer side -------------------------------------------------------

    def enqueue(self, dp: DataPoint) -> int:
        return self.enqueue_raw(dp.seq, encode(dp))

    def enqueue_raw(self, seq: int, payload: bytes) -> int:
        with self._lock:
            if seq <= self.last_seq:
                raise SeqRegressionError(f"seq {seq} does not exceed last enqueued seq {self.last_seq}")
            self.last_seq = seq
            self._records.append((seq, payload))
            try:
                self._drain_overflow()
                self._append_frame(seq, payload)
                self.storage_error = None
            except OSError as exc:
                # keep the controller running; frames are written once storage recovers
                self._overflow.append((seq, payload))
                if self.storage_error is None:
                    log.error("outbound buffer storage failure, holding records in memory: %s", exc)
                self.storage_error = exc
            self._check_high_water()
            return seq

    def _check_high_water(self) -> None:
        n = len(self._records)
        if n >= self.high_water and not self._warned:
            log.warning("outbound buffer holds %d unacknowledged records", n)
            self._warned = True
        elif n < self.high_water:
            self._warned = False

    # -- sender side ---------------------------------------------------------

    def __len__(self) -> int:
        with self._lock:
            return len(self._records)

    @property
    def high_water_exceeded(self) -> bool:
        return self._warned

    def pending(self, after: Optional[int] = None, limit: Optional[int] = None) -> list[tuple[int, bytes]]:
        """Unacknowledged records with seq > ``after`` (default: the watermark)."""
        with self._lock:
            floor = self.watermark if after is None else max(after, self.watermark)
            out = [r for r in self._records if r[0] > floor]
        return out if limit is None else out[:limit]

    def ack(self, seq: int) -> None:
        """Advance the watermark to ``seq``; records at or below it are never re-sent."""
        with self._lock:
            if seq <= self.watermark:
                return
            self.watermark = seq
            self._records = [r for r in self._records if r[0] > seq]
            tmp = self.ack_path.with_suffix(".tmp")
            with open(tmp, "w") as fh:
                fh.write(str(seq))
                fh.flush()
                if self.fsync:
                    os.fsync(fh.fileno())
            os.replace(tmp, self.ack_path)
            if not self._records and not self._overflow:
                self._fh.truncate(0)
            self._check_high_water()

    def close(self) -> None:
        with self._lock:
            self._fh.close()

    def __enter__(self) -> "OutboundBuffer":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
