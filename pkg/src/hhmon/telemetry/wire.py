"""Canonical JSON encoding of data points.

One UTF-8 JSON object per record, keys in a fixed order, no whitespace,
``rate_percent`` written with exactly two decimals. Identical data points
therefore always encode to identical bytes.
"""

from __future__ import annotations

import json
from decimal import Decimal
from typing import Any

from ..core import CounterState, DataPoint, EventKind, compute_rate, is_valid_uid

WIRE_KEYS = (
    "seq",
    "device_id",
    "ts",
    "event",
    "accesses",
    "exits",
    "occupancy",
    "opportunities",
    "sanitizations",
    "rate_percent",
    "rfid_uid",
)
_COUNTER_KEYS = ("accesses", "exits", "occupancy", "opportunities", "sanitizations")


class DecodeError(ValueError):
    """A payload is not a well-formed wire record; ``key`` names the culprit when known."""

    def __init__(self, message: str, key: str | None = None) -> None:
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


def _rate_text(percent: Decimal | None) -> str:
    return "null" if percent is None else f"{percent:.2f}"


def encode_text(dp: DataPoint) -> str:
    c = dp.counters
    values = (
        json.dumps(dp.seq),
        json.dumps(dp.device_id, ensure_ascii=False),
        json.dumps(dp.ts),
        json.dumps(EventKind(dp.event_kind).value),
        json.dumps(c.accesses),
        json.dumps(c.exits),
        json.dumps(c.occupancy),
        json.dumps(c.opportunities),
        json.dumps(c.sanitizations),
        _rate_text(dp.rate.percent_2dp),
        json.dumps(dp.rfid_uid),
    )
    return "{" + ",".join(f'"{k}":{v}' for k, v in zip(WIRE_KEYS, values)) + "}"


def encode(dp: DataPoint) -> bytes:
    return encode_text(dp).encode("utf-8")


def _int(obj: dict, key: str, minimum: int = 0) -> int:
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise DecodeError("expected an integer", key)
    if v < minimum:
        raise DecodeError(f"must be >= {minimum}", key)
    return v


def from_mapping(obj: Any) -> DataPoint:
    if not isinstance(obj, dict):
        raise DecodeError("payload must be a JSON object")
    for key in WIRE_KEYS:
        if key not in obj:
            raise DecodeError("missing key", key)
    for key in obj:
        if key not in WIRE_KEYS:
            raise DecodeError("unknown key", key)

    seq = _int(obj, "seq", 1)
    ts = _int(obj, "ts")
    device_id = obj["device_id"]
    if not isinstance(device_id, str) or not device_id:
        raise DecodeError("expected a non-empty string", "device_id")
    try:
        kind = EventKind(obj["event"])
    except ValueError:
        raise DecodeError(f"unknown event {obj['event']!r}", "event") from None
    n = {k: _int(obj, k) for k in _COUNTER_KEYS}
    if n["exits"] > n["accesses"]:
        raise DecodeError("exceeds accesses", "exits")
    if n["occupancy"] != n["accesses"] - n["exits"]:
        raise DecodeError("must equal accesses - exits", "occupancy")
    if n["opportunities"] != 2 * n["accesses"]:
        raise DecodeError("must equal twice accesses", "opportunities")
    # ignored exits are device-local diagnostics and not carried on the wire
    counters = CounterState(**n)
    rate = compute_rate(counters)

    raw_rate = obj["rate_percent"]
    if raw_rate is None:
        if rate.percent_2dp is not None:
            raise DecodeError("null but opportunities > 0", "rate_percent")
    else:
        if isinstance(raw_rate, bool) or not isinstance(raw_rate, (int, float, Decimal)):
            raise DecodeError("expected a number or null", "rate_percent")
        if rate.percent_2dp is None or Decimal(str(raw_rate)) != rate.percent_2dp:
            raise DecodeError(f"{raw_rate} disagrees with the counters ({rate.percent_2dp})", "rate_percent")

    uid = obj["rfid_uid"]
    if uid is not None and not is_valid_uid(uid):
        raise DecodeError("expected 8 or 14 uppercase hex characters or null", "rfid_uid")
    return DataPoint(seq=seq, device_id=device_id, ts=ts, event_kind=kind,
                     counters=counters, rate=rate, rfid_uid=uid)


def decode(data: bytes | str) -> DataPoint:
    try:
        text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
        obj = json.loads(text, parse_float=Decimal)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DecodeError(f"malformed JSON: {exc}") from None
    return from_mapping(obj)


def to_mapping(dp: DataPoint) -> dict:
    """Plain-dict view of the wire record (rate as float), for JSON APIs."""
    return json.loads(encode_text(dp))
