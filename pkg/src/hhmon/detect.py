"""Doorway direction detection from two infrared distance sensors.

Sensor A sits on the corridor side and sensor B on the bed side. Each
sensor's distance stream is edge-triggered into beam trips (with a
debounce), and trips of opposite sensors are paired when their time gap
corresponds to a walking speed inside the configured envelope. A before B
is an entry, B before A an exit.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional

from .core import ConfigError

# absorbs float error in spacing / speed at the window edges
_WINDOW_EPS_MS = 1e-6


class Sensor(str, enum.Enum):
    A = "A"
    B = "B"


class Direction(str, enum.Enum):
    ENTER = "enter"
    EXIT = "exit"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class DetectorConfig:
    beam_trip_mm: int = 800
    beam_spacing_m: float = 0.30
    v_min_mps: float = 1.0
    v_max_mps: float = 3.0
    debounce_ms: int = 50

    def validate(self) -> "DetectorConfig":
        if self.beam_spacing_m <= 0:
            raise ConfigError("beam_spacing_m must be positive")
        if not 0 < self.v_min_mps < self.v_max_mps:
            raise ConfigError(
                f"speed envelope must satisfy 0 < v_min_mps < v_max_mps, "
                f"got [{self.v_min_mps}, {self.v_max_mps}]"
            )
        if self.debounce_ms < 0:
            raise ConfigError("debounce_ms must be non-negative")
        if self.beam_trip_mm <= 0:
            raise ConfigError("beam_trip_mm must be positive")
        return self

    @property
    def window_ms(self) -> tuple[float, float]:
        """Admissible A-to-B gap, from the fastest to the slowest walker."""
        return (
            self.beam_spacing_m / self.v_max_mps * 1000.0,
            self.beam_spacing_m / self.v_min_mps * 1000.0,
        )


@dataclass(frozen=True)
class BeamTrip:
    sensor: Sensor
    ts: int


@dataclass(frozen=True)
class Crossing:
    """A classified pair of trips; ``ts`` is the later trip's timestamp."""

    direction: Direction
    ts: int
    first: BeamTrip
    second: BeamTrip


def _in_window(gap: float, cfg: DetectorConfig) -> bool:
    lo, hi = cfg.window_ms
    return lo - _WINDOW_EPS_MS <= gap <= hi + _WINDOW_EPS_MS


def classify(trip_x: BeamTrip, trip_y: BeamTrip, cfg: DetectorConfig) -> Direction:
    if trip_x.sensor == trip_y.sensor:
        return Direction.UNKNOWN
    a, b = (trip_x, trip_y) if trip_x.sensor is Sensor.A else (trip_y, trip_x)
    dt = b.ts - a.ts
    if dt > 0 and _in_window(dt, cfg):
        return Direction.ENTER
    if dt < 0 and _in_window(-dt, cfg):
        return Direction.EXIT
    return Direction.UNKNOWN


class BeamSensor:
    """Falling-edge trip detector for one infrared sensor."""

    def __init__(self, sensor: Sensor, cfg: DetectorConfig) -> None:
        self.sensor = sensor
        self.cfg = cfg
        self.armed = True
        self.last_trip_ts: Optional[int] = None
        self.last_ts: Optional[int] = None

    def feed_sample(self, distance_mm: float, ts: int) -> Optional[BeamTrip]:
        if self.last_ts is not None and ts < self.last_ts:
            raise ValueError(f"sensor {self.sensor.value}: sample at {ts} precedes {self.last_ts}")
        self.last_ts = ts
        threshold = self.cfg.beam_trip_mm
        if distance_mm > threshold:
            self.armed = True
            return None
        if distance_mm < threshold and self.armed:
            self.armed = False
            if self.last_trip_ts is not None and ts - self.last_trip_ts < self.cfg.debounce_ms:
                return None
            self.last_trip_ts = ts
            return BeamTrip(self.sensor, ts)
        return None


class TripPairer:
    """Greedy online pairing of beam trips into crossings.

    A new trip is paired with the nearest earlier pending trip of the other
    sensor whose gap lies inside the speed window. Trips left unpaired for
    longer than the slowest admissible gap are dropped and counted.
    """

    def __init__(self, cfg: DetectorConfig) -> None:
        self.cfg = cfg
        self.pending: list[BeamTrip] = []
        self.dropped = 0

    def expire(self, now: int) -> None:
        hi = self.cfg.window_ms[1]
        keep = [t for t in self.pending if now - t.ts <= hi + _WINDOW_EPS_MS]
        self.dropped += len(self.pending) - len(keep)
        self.pending = keep

    def push(self, trip: BeamTrip) -> Optional[Crossing]:
        self.expire(trip.ts)
        best = None
        for cand in self.pending:
            if cand.sensor == trip.sensor or cand.ts == trip.ts:
                continue
            if classify(cand, trip, self.cfg) is Direction.UNKNOWN:
                continue
            if best is None or cand.ts > best.ts:
                best = cand
        if best is None:
            self.pending.append(trip)
            return None
        self.pending.remove(best)
        return Crossing(classify(best, trip, self.cfg), trip.ts, best, trip)

    def flush(self) -> None:
        self.dropped += len(self.pending)
        self.pending = []


def pair_trips(trips: Iterable[BeamTrip], cfg: DetectorConfig) -> Iterator[Crossing]:
    pairer = TripPairer(cfg)
    for trip in trips:
        crossing = pairer.push(trip)
        if crossing is not None:
            yield crossing


class DoorDetector:
    """Both sensors plus the pairer: distance samples in, crossings out."""

    def __init__(self, cfg: DetectorConfig | None = None) -> None:
        self.cfg = (cfg or DetectorConfig()).validate()
        self.sensors = {s: BeamSensor(s, self.cfg) for s in Sensor}
        self.pairer = TripPairer(self.cfg)

    @property
    def unknown(self) -> int:
        return self.pairer.dropped

    def feed(self, sensor: Sensor, distance_mm: float, ts: int) -> Optional[Crossing]:
        self.pairer.expire(ts)
        trip = self.sensors[sensor].feed_sample(distance_mm, ts)
        if trip is None:
            return None
        return self.pairer.push(trip)

    def flush(self) -> None:
        self.pairer.flush()
