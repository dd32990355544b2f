"""
Driving the controller with an injected clock
=============================================

The controller is a pure fold over timestamped events, so it can be
exercised on a laptop without hardware. Timers (step boundaries, the
valve watchdog) fire inside ``handle`` at their exact due times.
"""

from hhmon.core import (
    ControllerConfig,
    EntryDetected,
    OrientationStep,
    RfidRead,
    TapDistance,
    Tick,
    controller_init,
)

cfg = ControllerConfig()
print(f"procedure: {cfg.step_count} steps x {cfg.step_duration_ms} ms = {cfg.procedure_ms} ms")
ctrl = controller_init(cfg)


def show(label, out):
    cmds, dps = out
    steps = [c.index for c in cmds if isinstance(c, OrientationStep)]
    print(f"{label:<28} steps={steps} emitted={[(d.event_kind.value, str(d.rate.percent_2dp)) for d in dps]}")
    return dps


show("entry at t=0", ctrl.handle(EntryDetected(0)))
show("badge at t=2 s", ctrl.handle(RfidRead(2_000, "04A1B2C3")))
show("hands at the tap, t=3 s", ctrl.handle(TapDistance(3_000, 250)))
show("sensor jitter in dead band", ctrl.handle(TapDistance(4_000, 450)))
show("clock reaches t=20 s", ctrl.handle(Tick(20_000)))
(done,) = show("clock reaches t=60 s", ctrl.handle(Tick(60_000)))
print("completion at", done.ts, "ms carried badge", done.rfid_uid)
show("hands leave the tap", ctrl.handle(TapDistance(61_000, 900)))

# a second wash abandoned at step 4 leaves the sanitization count alone
show("second wash starts, t=70 s", ctrl.handle(TapDistance(70_000, 250)))
show("walks away at t=87.5 s", ctrl.handle(TapDistance(87_500, 900)))
print("sanitizations:", ctrl.counters.sanitizations, "opportunities:", ctrl.counters.opportunities)

# configurations outside the 40 to 60 s band never start
try:
    controller_init(ControllerConfig(step_duration_ms=3000))
except Exception as exc:
    print("rejected:", exc)
