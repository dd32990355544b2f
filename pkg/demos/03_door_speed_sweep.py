"""
Which walking speeds does the doorway recognise?
================================================

Two infrared beams 30 cm apart. A person tripping A then B is entering,
B then A is leaving. The gap between trips implies a speed; only gaps
inside the 1 to 3 m/s envelope are accepted.
"""

import numpy as np

from hhmon.detect import BeamTrip, DetectorConfig, Sensor, classify
from hhmon.sim import load_scenario, run

cfg = DetectorConfig()
lo, hi = cfg.window_ms
print(f"accepted gap between beams: {lo:.0f} to {hi:.0f} ms")

for gap in (80, 100, 150, 300, 320):
    d = classify(BeamTrip(Sensor.A, 0), BeamTrip(Sensor.B, gap), cfg)
    print(f"A then B after {gap:>3} ms ({0.30 / (gap / 1000):.2f} m/s): {d.value}")

# full pipeline: simulated person walks in and out at each speed on a 0.1 m/s grid
speeds = np.round(np.arange(0.5, 4.0001, 0.1), 1)
rows = []
for v in speeds:
    text = f"persons:\n  - {{person_id: p, enter_ts: 1000, speed_mps: {v}, exit_ts: 5000}}\nduration_ms: 10000\n"
    res = run(load_scenario(text))
    rows.append((v, res.final.accesses, res.final.exits, res.unknown_crossings))

for v, nac, ne, unknown in rows:
    mark = "ok " if (nac, ne) == (1, 1) else "-- "
    print(f"{mark}{v:.1f} m/s  entries={nac} exits={ne} unpaired trips={unknown}")
