"""Hand-hygiene controller state machine.

The controller is a deterministic fold over time-stamped sensor events. It
never reads a clock: every timestamp arrives inside an event, and pending
timers (step boundaries, valve watchdog) fire at their exact due time as
soon as any event with a later or equal timestamp is handled.

Counters follow the device model:

    accesses       people detected entering the bed area
    exits          people detected leaving it
    occupancy      people currently inside
    opportunities  two per access (on entry and the anticipated exit)
    sanitizations  complete 11-step washes
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field, replace
from decimal import Decimal
from fractions import Fraction
from typing import Optional, Union

STEP_COUNT = 11
MIN_PROCEDURE_MS = 40_000
MAX_PROCEDURE_MS = 60_000

_UID_RE = re.compile(r"^(?:[0-9A-F]{8}|[0-9A-F]{14})$")
_LCD_WIDTH = 16


class ConfigError(ValueError):
    """Raised when a controller configuration violates one of its bounds."""


class OrderingError(ValueError):
    """Raised when an event timestamp goes backwards."""


def is_valid_uid(uid: object) -> bool:
    return isinstance(uid, str) and _UID_RE.match(uid) is not None


@dataclass(frozen=True)
class ControllerConfig:
    step_duration_ms: int = 5000
    step_count: int = STEP_COUNT
    tap_present_mm: int = 400
    tap_absent_mm: int = 500
    rfid_pending_ms: int = 60_000
    valve_max_open_ms: int = 120_000
    device_id: str = "hh-device-1"
    step_labels: tuple[str, ...] = tuple(f"Step {k}" for k in range(1, STEP_COUNT + 1))

    @property
    def procedure_ms(self) -> int:
        return self.step_count * self.step_duration_ms

    def validate(self) -> "ControllerConfig":
        if self.step_count != STEP_COUNT:
            raise ConfigError(f"step_count must be {STEP_COUNT}, got {self.step_count}")
        if self.step_duration_ms <= 0:
            raise ConfigError("step_duration_ms must be positive")
        total = self.procedure_ms
        if total < MIN_PROCEDURE_MS:
            raise ConfigError(
                f"procedure duration {total} ms is below the minimum of {MIN_PROCEDURE_MS} ms"
            )
        if total > MAX_PROCEDURE_MS:
            raise ConfigError(
                f"procedure duration {total} ms exceeds the maximum of {MAX_PROCEDURE_MS} ms"
            )
        if self.tap_present_mm < 0:
            raise ConfigError("tap_present_mm must be non-negative")
        if self.tap_absent_mm <= self.tap_present_mm:
            raise ConfigError(
                f"tap_absent_mm ({self.tap_absent_mm}) must exceed "
                f"tap_present_mm ({self.tap_present_mm})"
            )
        if self.rfid_pending_ms <= 0:
            raise ConfigError("rfid_pending_ms must be positive")
        if self.valve_max_open_ms <= 0:
            raise ConfigError("valve_max_open_ms must be positive")
        if not self.device_id:
            raise ConfigError("device_id must be non-empty")
        if len(self.step_labels) != self.step_count:
            raise ConfigError(f"step_labels must hold {self.step_count} entries")
        return self


@dataclass(frozen=True)
class CounterState:
    accesses: int = 0
    exits: int = 0
    occupancy: int = 0
    opportunities: int = 0
    sanitizations: int = 0
    ignored_exits: int = 0

    @property
    def overrate_flag(self) -> bool:
        return self.sanitizations > self.opportunities


@dataclass(frozen=True)
class HygieneRate:
    numerator: int
    denominator: int
    percent_2dp: Optional[Decimal]

    @property
    def ratio(self) -> Optional[Fraction]:
        if self.denominator == 0:
            return None
        return Fraction(self.numerator, self.denominator)

    @property
    def overrate(self) -> bool:
        return self.numerator > self.denominator


def round_percent(numerator: int, denominator: int) -> Decimal:
    """100 * numerator / denominator rounded half-up to two decimals, exactly."""
    # hundredths of a percent: floor(10000*n/d + 1/2)
    hundredths = (20_000 * numerator + denominator) // (2 * denominator)
    return Decimal(hundredths).scaleb(-2)


def compute_rate(counters: CounterState) -> HygieneRate:
    ns, no = counters.sanitizations, counters.opportunities
    percent = round_percent(ns, no) if no > 0 else None
    return HygieneRate(numerator=ns, denominator=no, percent_2dp=percent)


class EventKind(str, enum.Enum):
    ACCESS = "access"
    EXIT = "exit"
    HH_COMPLETE = "hh_complete"
    HH_ABORT = "hh_abort"
    ANOMALY = "anomaly"


@dataclass(frozen=True)
class DataPoint:
    seq: int
    device_id: str
    ts: int
    event_kind: EventKind
    counters: CounterState
    rate: HygieneRate
    rfid_uid: Optional[str] = None


# -- controller inputs -------------------------------------------------------


@dataclass(frozen=True)
class EntryDetected:
    ts: int


@dataclass(frozen=True)
class ExitDetected:
    ts: int


@dataclass(frozen=True)
class TapDistance:
    ts: int
    mm: int


@dataclass(frozen=True)
class RfidRead:
    ts: int
    uid_hex: str


@dataclass(frozen=True)
class Tick:
    ts: int


ControllerEvent = Union[EntryDetected, ExitDetected, TapDistance, RfidRead, Tick]


# -- controller outputs ------------------------------------------------------


@dataclass(frozen=True)
class ValveOpen:
    pass


@dataclass(frozen=True)
class ValveClose:
    pass


@dataclass(frozen=True)
class LcdText:
    line1: str
    line2: str = ""

    def __post_init__(self) -> None:
        if len(self.line1) > _LCD_WIDTH or len(self.line2) > _LCD_WIDTH:
            raise ValueError(f"LCD lines are limited to {_LCD_WIDTH} characters")


@dataclass(frozen=True)
class OrientationStep:
    """Backlight one position of the orientation panel; ``index=None`` turns it off."""

    index: Optional[int]


ActuatorCommand = Union[ValveOpen, ValveClose, LcdText, OrientationStep]


# -- procedure states --------------------------------------------------------


@dataclass(frozen=True)
class Idle:
    pass


@dataclass(frozen=True)
class Prompting:
    pass


@dataclass(frozen=True)
class Washing:
    step_index: int
    step_started_ts: int
    wash_started_ts: int


ProcedureState = Union[Idle, Prompting, Washing]

IDLE_TEXT = LcdText("Hand hygiene", "ready")
PROMPT_TEXT = LcdText("Please wash", "your hands")


@dataclass
class _Outbox:
    commands: list = field(default_factory=list)
    emissions: list = field(default_factory=list)


class Controller:
    """The hand-hygiene controller.

    ``epoch_offset_ms`` is added to event timestamps when data points are
    stamped; the state machine itself only ever sees monotonic milliseconds.
    """

    def __init__(self, config: ControllerConfig, epoch_offset_ms: int = 0) -> None:
        self.config = config.validate()
        self.epoch_offset_ms = epoch_offset_ms
        self.counters = CounterState()
        self.state: ProcedureState = Idle()
        self.last_completed_ts: Optional[int] = None
        self.seq = 0
        self.last_ts: Optional[int] = None
        self.tap_present = False
        self.valve_open = False
        self.valve_opened_ts: Optional[int] = None
        self.pending_uid: Optional[str] = None
        self.pending_expiry_ts: Optional[int] = None
        self.init_commands: list = [IDLE_TEXT, ValveClose()]
        self._out = _Outbox()

    # -- dispatch ------------------------------------------------------------

    def handle(self, ev: ControllerEvent) -> tuple[list, list[DataPoint]]:
        if self.last_ts is not None and ev.ts < self.last_ts:
            raise OrderingError(f"event at ts={ev.ts} precedes last event at ts={self.last_ts}")
        self.last_ts = ev.ts
        self._out = _Outbox()
        self._advance(ev.ts)
        if isinstance(ev, EntryDetected):
            self.on_entry(ev.ts)
        elif isinstance(ev, ExitDetected):
            self.on_exit(ev.ts)
        elif isinstance(ev, TapDistance):
            self.on_tap_distance(ev.ts, ev.mm)
        elif isinstance(ev, RfidRead):
            self.on_rfid(ev.ts, ev.uid_hex)
        elif isinstance(ev, Tick):
            self.on_tick(ev.ts)
        else:
            raise TypeError(f"unsupported event {ev!r}")
        out = self._out
        return out.commands, out.emissions

    # -- operations ----------------------------------------------------------

    def on_entry(self, ts: int) -> None:
        c = self.counters
        self.counters = replace(
            c,
            accesses=c.accesses + 1,
            opportunities=c.opportunities + 2,
            occupancy=c.occupancy + 1,
        )
        if isinstance(self.state, Idle):
            self.state = Prompting()
        if not isinstance(self.state, Washing):
            self._command(PROMPT_TEXT)
        self.snapshot(ts, EventKind.ACCESS)

    def on_exit(self, ts: int) -> None:
        c = self.counters
        if c.occupancy > 0:
            self.counters = replace(c, exits=c.exits + 1, occupancy=c.occupancy - 1)
            self.snapshot(ts, EventKind.EXIT)
        else:
            self.counters = replace(c, ignored_exits=c.ignored_exits + 1)
            self.snapshot(ts, EventKind.ANOMALY)
        if isinstance(self.state, Prompting) and self.counters.occupancy == 0:
            self.state = Idle()
            self._command(IDLE_TEXT)

    def on_tap_distance(self, ts: int, mm: int) -> None:
        cfg = self.config
        was_present = self.tap_present
        if mm <= cfg.tap_present_mm:
            self.tap_present = True
        elif mm >= cfg.tap_absent_mm:
            self.tap_present = False

        if self.tap_present and not was_present and not isinstance(self.state, Washing):
            self._start_wash(ts)
        elif not self.tap_present and isinstance(self.state, Washing):
            self.abort(ts, "left the tap")

    def on_tick(self, ts: int) -> None:
        # timers already fired in _advance; a tick carries no other input
        pass

    def on_rfid(self, ts: int, uid_hex: str) -> None:
        if not is_valid_uid(uid_hex):
            self.snapshot(ts, EventKind.ANOMALY)
            return
        self.pending_uid = uid_hex
        self.pending_expiry_ts = ts + self.config.rfid_pending_ms

    def abort(self, ts: int, reason: str = "") -> None:
        if not isinstance(self.state, Washing):
            return
        self._close_valve()
        self._command(OrientationStep(None))
        self._command(LcdText("HH aborted", reason[:_LCD_WIDTH]))
        self.state = self._rest_state()
        self.snapshot(ts, EventKind.HH_ABORT)

    def snapshot(self, ts: int, event_kind: EventKind, rfid_uid: Optional[str] = None) -> DataPoint:
        self.seq += 1
        dp = DataPoint(
            seq=self.seq,
            device_id=self.config.device_id,
            ts=ts + self.epoch_offset_ms,
            event_kind=event_kind,
            counters=self.counters,
            rate=compute_rate(self.counters),
            rfid_uid=rfid_uid,
        )
        self._out.emissions.append(dp)
        return dp

    # -- internals -----------------------------------------------------------

    def _command(self, cmd) -> None:
        self._out.commands.append(cmd)

    def _rest_state(self) -> ProcedureState:
        return Prompting() if self.counters.occupancy > 0 else Idle()

    def _close_valve(self) -> None:
        self.valve_open = False
        self.valve_opened_ts = None
        self._command(ValveClose())

    def _show_step(self, k: int) -> None:
        self._command(OrientationStep(k))
        self._command(LcdText(f"Step {k}/{self.config.step_count}",
                              self.config.step_labels[k - 1][:_LCD_WIDTH]))

    def _start_wash(self, ts: int) -> None:
        self.state = Washing(step_index=1, step_started_ts=ts, wash_started_ts=ts)
        self.valve_open = True
        self.valve_opened_ts = ts
        self._command(ValveOpen())
        self._show_step(1)

    def _advance(self, now: int) -> None:
        """Fire every timer due at or before ``now`` in time order."""
        cfg = self.config
        while isinstance(self.state, Washing):
            w = self.state
            step_due = w.step_started_ts + cfg.step_duration_ms
            valve_due = (
                self.valve_opened_ts + cfg.valve_max_open_ms
                if self.valve_open and self.valve_opened_ts is not None
                else None
            )
            if valve_due is not None and valve_due <= now and valve_due < step_due:
                self._close_valve()
                self.snapshot(valve_due, EventKind.ANOMALY)
                continue
            if step_due > now:
                return
            if w.step_index < cfg.step_count:
                self.state = replace(w, step_index=w.step_index + 1, step_started_ts=step_due)
                self._show_step(w.step_index + 1)
            else:
                self._complete(step_due)

    def _complete(self, ts: int) -> None:
        c = self.counters
        self.counters = replace(c, sanitizations=c.sanitizations + 1)
        uid = None
        if self.pending_uid is not None and self.pending_expiry_ts is not None:
            if ts <= self.pending_expiry_ts:
                uid = self.pending_uid
        self.pending_uid = None
        self.pending_expiry_ts = None
        self._close_valve()
        self._command(OrientationStep(None))
        percent = compute_rate(self.counters).percent_2dp
        self._command(LcdText("HH complete", f"Rate {percent}%" if percent is not None else ""))
        self.last_completed_ts = ts
        self.state = self._rest_state()
        self.snapshot(ts, EventKind.HH_COMPLETE, rfid_uid=uid)


def controller_init(config: ControllerConfig, epoch_offset_ms: int = 0) -> Controller:
    return Controller(config, epoch_offset_ms)


def replay(config: ControllerConfig, events, epoch_offset_ms: int = 0) -> list[DataPoint]:
    """Run ``events`` through a fresh controller and collect every emission."""
    ctrl = Controller(config, epoch_offset_ms)
    out: list[DataPoint] = []
    for ev in events:
        out.extend(ctrl.handle(ev)[1])
    return out
