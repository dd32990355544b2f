"""
Reconstructing the six published checkpoints
=============================================

A scripted morning at one hospital bed: nine people enter, five leave,
some wash to completion, some give up halfway. The simulator turns the
script into raw sensor samples, the door detector and controller turn
those back into counters, and the snapshot at each checkpoint should
match the published table row for row.
"""

from hhmon import data
from hhmon.report import format_rate, format_timestamp
from hhmon.sim import load_scenario, oracle_counters, run

scenario = load_scenario(data.read_text("table2.scn"))
result = run(scenario, seed=0)
print(f"{len(result.emissions)} data points, {result.unknown_crossings} unclassified crossings")

# snapshot at each checkpoint, in the column order of the published table
print(f"{'Timestamp':<20} {'TX Hyg':>8} {'NO':>3} {'NS':>3} {'NAc':>4} {'NE':>3} {'NOc':>4}")
for cp in scenario.checkpoints_ms:
    dp = result.at(scenario.epoch_ms + cp)
    c = dp.counters
    print(f"{format_timestamp(dp.ts):<20} {format_rate(dp.rate.percent_2dp, 'br'):>8} "
          f"{c.opportunities:>3} {c.sanitizations:>3} {c.accesses:>4} {c.exits:>3} {c.occupancy:>4}")

# the oracle counts straight from the script, skipping sensors and state machine
assert result.final == oracle_counters(scenario)
print("final counters agree with the script oracle:", result.final)
