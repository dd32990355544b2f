"""Discrete-event simulation of a bed entrance with a hand-hygiene station.

A scenario scripts people walking through the doorway and washing their
hands. :func:`generate_trace` turns the script into raw sensor samples,
:func:`run` pushes those samples through the door detector and the
controller, and :func:`oracle_counters` computes the expected counters
straight from the script so the two paths can be compared.

Scenario documents are YAML (JSON is accepted too)::

    duration_ms: 120000
    epoch_ms: 1700559600000
    config: {step_duration_ms: 5000}
    geometry: {beam_spacing_m: 0.3}
    persons:
      - person_id: nurse-1
        enter_ts: 1000
        speed_mps: 1.4
        washes:
          - {start_ts: 5000, behavior: complete, badge_uid: 04A1B2C3}
          - {start_ts: 70000, behavior: {abort_at_step: 6}}
        exit_ts: 110000
"""

from __future__ import annotations

import bisect
import enum
from dataclasses import dataclass, field
from typing import Annotated, Literal, Optional, Union

import numpy as np
import yaml
from pydantic import (
    BaseModel,
    ConfigDict,
    Discriminator,
    Field,
    Tag,
    ValidationError,
    field_validator,
    model_validator,
)

from .core import (
    STEP_COUNT,
    ConfigError,
    Controller,
    ControllerConfig,
    CounterState,
    DataPoint,
    EntryDetected,
    ExitDetected,
    RfidRead,
    TapDistance,
    Tick,
    is_valid_uid,
)
from .detect import DetectorConfig, Direction, DoorDetector, Sensor

SAMPLE_PERIOD_MS = 250
BODY_DEPTH_M = 0.25
BLOCKED_MM = 400
CLEAR_MM = 1500
AT_TAP_MM = 250
AWAY_MM = 1000
JITTER_SIGMA_MM = 10.0
# samples the controller gets after a nominal completion, before the person leaves
_LINGER_MS = 2 * SAMPLE_PERIOD_MS


class ScenarioError(ValueError):
    """A scenario document failed validation; ``errors`` holds ``(path, message)`` pairs."""

    def __init__(self, errors: list[tuple[str, str]]) -> None:
        self.errors = errors
        super().__init__("; ".join(f"{p or '<root>'}: {m}" for p, m in errors))


# -- schema ------------------------------------------------------------------


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class AbortAtStep(_Strict):
    abort_at_step: int = Field(ge=1, le=STEP_COUNT)


class WalkAwayAt(_Strict):
    walk_away_at: int = Field(ge=0)


def _behavior_tag(v) -> Optional[str]:
    if isinstance(v, str):
        return "complete"
    if isinstance(v, dict):
        if "abort_at_step" in v:
            return "abort"
        if "walk_away_at" in v:
            return "walk_away"
        return None
    return {AbortAtStep: "abort", WalkAwayAt: "walk_away"}.get(type(v))


Behavior = Annotated[
    Union[
        Annotated[Literal["complete"], Tag("complete")],
        Annotated[AbortAtStep, Tag("abort")],
        Annotated[WalkAwayAt, Tag("walk_away")],
    ],
    Discriminator(_behavior_tag),
]


class Wash(_Strict):
    start_ts: int = Field(ge=0)
    behavior: Behavior = "complete"
    badge_uid: Optional[str] = None

    @field_validator("badge_uid")
    @classmethod
    def _uid(cls, v: Optional[str]) -> Optional[str]:
        if v is not None and not is_valid_uid(v):
            raise ValueError("badge_uid must be 8 or 14 uppercase hex characters")
        return v


class PersonScript(_Strict):
    person_id: str
    enter_ts: int = Field(ge=0)
    speed_mps: float = Field(gt=0, le=10)
    washes: list[Wash] = []
    exit_ts: Optional[int] = None


class ConfigSpec(_Strict):
    step_duration_ms: int = 5000
    step_count: int = STEP_COUNT
    tap_present_mm: int = 400
    tap_absent_mm: int = 500
    rfid_pending_ms: int = 60_000
    valve_max_open_ms: int = 120_000
    device_id: str = "hh-device-1"

    def to_config(self) -> ControllerConfig:
        return ControllerConfig(**self.model_dump()).validate()


class GeometrySpec(_Strict):
    beam_trip_mm: int = 800
    beam_spacing_m: float = 0.30
    v_min_mps: float = 1.0
    v_max_mps: float = 3.0
    debounce_ms: int = 50

    def to_config(self) -> DetectorConfig:
        return DetectorConfig(**self.model_dump()).validate()


class Scenario(_Strict):
    config: ConfigSpec = ConfigSpec()
    geometry: GeometrySpec = GeometrySpec()
    persons: list[PersonScript] = []
    duration_ms: int = Field(gt=0)
    epoch_ms: int = 0
    checkpoints_ms: list[int] = []

    @model_validator(mode="after")
    def _check(self) -> "Scenario":
        errors = _semantic_errors(self)
        if errors:
            # surfaced with paths by load_scenario
            raise ValueError(_encode_errors(errors))
        return self

    @property
    def controller_config(self) -> ControllerConfig:
        return self.config.to_config()

    @property
    def detector_config(self) -> DetectorConfig:
        return self.geometry.to_config()


_ERR_SEP = "\x1f"


def _encode_errors(errors: list[tuple[str, str]]) -> str:
    return "\n".join(f"{p}{_ERR_SEP}{m}" for p, m in errors)


def _wash_end(wash: Wash, cfg: ControllerConfig) -> int:
    """Timestamp of the departure sample that ends a wash."""
    b = wash.behavior
    if b == "complete":
        return wash.start_ts + cfg.procedure_ms + _LINGER_MS
    if isinstance(b, AbortAtStep):
        return wash.start_ts + (b.abort_at_step - 1) * cfg.step_duration_ms + cfg.step_duration_ms // 2
    return b.walk_away_at


def _crossing_span(speed: float, geo: GeometrySpec) -> int:
    gap = round(geo.beam_spacing_m / speed * 1000)
    occ = max(1, round(BODY_DEPTH_M / speed * 1000))
    return gap + occ


def _semantic_errors(sc: Scenario) -> list[tuple[str, str]]:
    errors: list[tuple[str, str]] = []
    try:
        cfg = sc.config.to_config()
    except ConfigError as exc:
        return [("config", str(exc))]
    try:
        geo_cfg = sc.geometry.to_config()
    except ConfigError as exc:
        return [("geometry", str(exc))]

    crossings = []  # (start, end, path)
    washes = []
    for i, p in enumerate(sc.persons):
        base = f"persons[{i}]"
        if p.enter_ts >= sc.duration_ms:
            errors.append((f"{base}.enter_ts", "must lie within duration_ms"))
        crossings.append((p.enter_ts, p.enter_ts + _crossing_span(p.speed_mps, sc.geometry), f"{base}.enter_ts"))
        if p.exit_ts is not None:
            if p.exit_ts <= p.enter_ts:
                errors.append((f"{base}.exit_ts", "must come after enter_ts"))
            if p.exit_ts >= sc.duration_ms:
                errors.append((f"{base}.exit_ts", "must lie within duration_ms"))
            crossings.append((p.exit_ts, p.exit_ts + _crossing_span(p.speed_mps, sc.geometry), f"{base}.exit_ts"))
        for j, w in enumerate(p.washes):
            path = f"{base}.washes[{j}]"
            if isinstance(w.behavior, WalkAwayAt):
                t = w.behavior.walk_away_at
                if not w.start_ts < t < w.start_ts + cfg.procedure_ms:
                    errors.append((path, "walk_away_at must fall strictly inside the procedure"))
                    continue
            end = _wash_end(w, cfg)
            if end >= sc.duration_ms:
                errors.append((path, "wash must finish within duration_ms"))
            washes.append((w.start_ts, end, path))

    # single-file traffic: one doorway crossing at a time, with room for the pairer to settle
    settle = geo_cfg.window_ms[1] + geo_cfg.debounce_ms
    crossings.sort()
    for (s0, e0, _), (s1, _, p1) in zip(crossings, crossings[1:]):
        if s1 <= e0 + settle:
            errors.append((p1, "doorway crossings overlap; traffic must be single-file"))
    washes.sort()
    for (_, e0, _), (s1, _, p1) in zip(washes, washes[1:]):
        if s1 <= e0 + SAMPLE_PERIOD_MS:
            errors.append((p1, "washes overlap at the single tap"))
    for cp in sc.checkpoints_ms:
        if not 0 <= cp <= sc.duration_ms:
            errors.append(("checkpoints_ms", f"checkpoint {cp} outside the scenario"))
    return errors


def _format_loc(loc) -> str:
    out = ""
    for part in loc:
        if isinstance(part, int):
            out += f"[{part}]"
        else:
            out += ("." if out else "") + str(part)
    return out


def load_scenario(text: str) -> Scenario:
    """Parse and validate a scenario document; raises :class:`ScenarioError`."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ScenarioError([("", f"not a valid YAML/JSON document: {exc}")]) from None
    if doc is None:
        raise ScenarioError([("", "empty document")])
    try:
        return Scenario.model_validate(doc)
    except ValidationError as exc:
        errors = []
        for err in exc.errors():
            msg = err["msg"]
            if _ERR_SEP in msg:
                msg = msg.removeprefix("Value error, ")
                for line in msg.split("\n"):
                    path, _, m = line.partition(_ERR_SEP)
                    errors.append((path, m))
                continue
            loc = [p for p in err["loc"] if p not in ("complete", "abort", "walk_away")]
            errors.append((_format_loc(loc), msg))
        raise ScenarioError(errors) from None


def serialize_scenario(sc: Scenario) -> str:
    return yaml.safe_dump(sc.model_dump(mode="json"), sort_keys=False)


# -- trace -------------------------------------------------------------------


class Channel(str, enum.Enum):
    IR_A = "ir_a"
    IR_B = "ir_b"
    ULTRASONIC = "ultrasonic"
    RFID = "rfid"


_CHANNEL_ORDER = {Channel.IR_A: 0, Channel.IR_B: 1, Channel.ULTRASONIC: 2, Channel.RFID: 3}


@dataclass(frozen=True)
class SensorSample:
    ts: int
    channel: Channel
    value: Union[int, str]


@dataclass
class SensorTrace:
    samples: list[SensorSample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)


class _Noise:
    def __init__(self, seed: Optional[int], sigma: float) -> None:
        self.rng = np.random.default_rng(seed)
        self.sigma = sigma

    def __call__(self, nominal: int) -> int:
        if self.sigma <= 0:
            return nominal
        # clipped at 3 sigma so nominal readings never reach the dead band
        delta = float(np.clip(self.rng.normal(0.0, self.sigma), -3 * self.sigma, 3 * self.sigma))
        return int(round(nominal + delta))


def _check_jitter(sc: Scenario, sigma: float) -> None:
    cfg = sc.controller_config
    geo = sc.detector_config
    margin = 3 * sigma
    if not (AT_TAP_MM + margin <= cfg.tap_present_mm and AWAY_MM - margin >= cfg.tap_absent_mm
            and BLOCKED_MM + margin < geo.beam_trip_mm and CLEAR_MM - margin > geo.beam_trip_mm):
        raise ValueError(f"jitter sigma {sigma} mm would cross a detection threshold")


def generate_trace(sc: Scenario, seed: Optional[int] = 0, jitter_sigma_mm: float = JITTER_SIGMA_MM) -> SensorTrace:
    """Synthesize the time-ordered sensor samples a scenario produces.

    Crossing samples are event-driven: one blocked and one clear reading per
    beam. At the tap, presence is sampled every 250 ms from the wash start
    until the person leaves, followed by a single departure reading.
    """
    _check_jitter(sc, jitter_sigma_mm)
    noise = _Noise(seed, jitter_sigma_mm)
    cfg = sc.controller_config
    geo = sc.geometry
    raw: list[tuple[int, int, int, SensorSample]] = []

    def add(ts: int, channel: Channel, value) -> None:
        raw.append((ts, _CHANNEL_ORDER[channel], len(raw), SensorSample(ts, channel, value)))

    def crossing(t: int, speed: float, first: Channel, second: Channel) -> None:
        gap = round(geo.beam_spacing_m / speed * 1000)
        occ = max(1, round(BODY_DEPTH_M / speed * 1000))
        add(t, first, noise(BLOCKED_MM))
        add(t + occ, first, noise(CLEAR_MM))
        add(t + gap, second, noise(BLOCKED_MM))
        add(t + gap + occ, second, noise(CLEAR_MM))

    for p in sc.persons:
        crossing(p.enter_ts, p.speed_mps, Channel.IR_A, Channel.IR_B)
        if p.exit_ts is not None:
            crossing(p.exit_ts, p.speed_mps, Channel.IR_B, Channel.IR_A)
        for w in p.washes:
            end = _wash_end(w, cfg)
            t = w.start_ts
            while t < end:
                add(t, Channel.ULTRASONIC, noise(AT_TAP_MM))
                t += SAMPLE_PERIOD_MS
            add(end, Channel.ULTRASONIC, noise(AWAY_MM))
            if w.badge_uid is not None:
                add(w.start_ts, Channel.RFID, w.badge_uid)

    raw.sort(key=lambda r: r[:3])
    return SensorTrace([r[3] for r in raw])


# -- run ---------------------------------------------------------------------


@dataclass
class SimulationResult:
    emissions: list[DataPoint]
    final: CounterState
    unknown_crossings: int = 0
    commands: list = field(default_factory=list)

    def at(self, ts: int) -> Optional[DataPoint]:
        """The latest emission stamped at or before epoch-ms ``ts``."""
        stamps = [dp.ts for dp in self.emissions]
        i = bisect.bisect_right(stamps, ts)
        return self.emissions[i - 1] if i else None


def run(sc: Scenario, seed: Optional[int] = 0, jitter_sigma_mm: float = JITTER_SIGMA_MM,
        keep_commands: bool = False) -> SimulationResult:
    trace = generate_trace(sc, seed, jitter_sigma_mm)
    ctrl = Controller(sc.controller_config, epoch_offset_ms=sc.epoch_ms)
    door = DoorDetector(sc.detector_config)
    emissions: list[DataPoint] = []
    commands: list = [(0, c) for c in ctrl.init_commands] if keep_commands else []

    def feed(ev) -> None:
        cmds, dps = ctrl.handle(ev)
        emissions.extend(dps)
        if keep_commands:
            commands.extend((ev.ts, c) for c in cmds)

    for s in trace:
        if s.channel is Channel.IR_A or s.channel is Channel.IR_B:
            sensor = Sensor.A if s.channel is Channel.IR_A else Sensor.B
            crossing = door.feed(sensor, s.value, s.ts)
            if crossing is None:
                continue
            if crossing.direction is Direction.ENTER:
                feed(EntryDetected(crossing.ts))
            elif crossing.direction is Direction.EXIT:
                feed(ExitDetected(crossing.ts))
        elif s.channel is Channel.ULTRASONIC:
            feed(TapDistance(s.ts, s.value))
        else:
            feed(RfidRead(s.ts, s.value))
    feed(Tick(sc.duration_ms))
    door.flush()
    return SimulationResult(emissions, ctrl.counters, door.unknown, commands)


def oracle_counters(sc: Scenario) -> CounterState:
    """Expected final counters, computed from the script alone."""
    entries = len(sc.persons)
    exits = sum(1 for p in sc.persons if p.exit_ts is not None)
    complete = sum(1 for p in sc.persons for w in p.washes if w.behavior == "complete")
    return CounterState(
        accesses=entries,
        exits=exits,
        occupancy=entries - exits,
        opportunities=2 * entries,
        sanitizations=complete,
        ignored_exits=0,
    )


def expected_badges(sc: Scenario) -> list[Optional[str]]:
    """UID each completed wash should carry, in completion order."""
    cfg = sc.controller_config
    events = []  # (ts, order, kind, payload)
    for p in sc.persons:
        for w in p.washes:
            if w.badge_uid is not None:
                events.append((w.start_ts, 0, "badge", w.badge_uid))
            if w.behavior == "complete":
                events.append((w.start_ts + cfg.procedure_ms, 1, "done", None))
    events.sort(key=lambda e: e[:2])
    pending: Optional[tuple[str, int]] = None
    out = []
    for ts, _, kind, uid in events:
        if kind == "badge":
            pending = (uid, ts)
        else:
            ok = pending is not None and ts - pending[1] <= cfg.rfid_pending_ms
            out.append(pending[0] if ok else None)
            pending = None
    return out


def random_scenario(rng: np.random.Generator, n_persons: int = 4, *,
                    speed_range: tuple[float, float] = (1.0, 3.0),
                    config: Optional[dict] = None) -> Scenario:
    """A random, valid single-file scenario.

    Door crossings and washes are laid out on one timeline with gaps, so
    the script always passes validation. Exits only follow their entry.
    """
    cfg = ConfigSpec(**(config or {})).to_config()
    t = 1000
    persons: list[dict] = []
    inside: list[int] = []
    washes_by_person: dict[int, list[dict]] = {}
    for _ in range(n_persons * 3):
        roll = rng.random()
        if roll < 0.4 or not persons:
            idx = len(persons)
            speed = round(float(rng.uniform(*speed_range)), 2)
            persons.append({"person_id": f"p{idx}", "enter_ts": t, "speed_mps": speed})
            inside.append(idx)
            t += 1500
        elif roll < 0.6 and inside:
            idx = inside.pop(int(rng.integers(len(inside))))
            persons[idx]["exit_ts"] = t
            t += 1500
        else:
            idx = int(rng.integers(len(persons)))
            kind = rng.random()
            if kind < 0.5:
                behavior: object = "complete"
                length = cfg.procedure_ms + _LINGER_MS
            elif kind < 0.8:
                k = int(rng.integers(1, STEP_COUNT + 1))
                behavior = {"abort_at_step": k}
                length = (k - 1) * cfg.step_duration_ms + cfg.step_duration_ms // 2
            else:
                offset = int(rng.integers(1, cfg.procedure_ms))
                behavior = {"walk_away_at": t + offset}
                length = offset
            wash: dict = {"start_ts": t, "behavior": behavior}
            if rng.random() < 0.3:
                wash["badge_uid"] = "".join(f"{b:02X}" for b in rng.integers(0, 256, 4))
            washes_by_person.setdefault(idx, []).append(wash)
            t += length + 1000
    for idx, ws in washes_by_person.items():
        persons[idx]["washes"] = ws
    doc = {"config": config or {}, "persons": persons, "duration_ms": t + 1000}
    return Scenario.model_validate(doc)
