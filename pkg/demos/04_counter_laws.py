"""
Counter laws over random single-file traffic
============================================

Random scripts of entries, exits and washes are run through the whole
pipeline and compared against counts taken directly from the script.
"""

import numpy as np

from hhmon.core import EventKind
from hhmon.sim import oracle_counters, random_scenario, run

rng = np.random.default_rng(7)
mismatches = 0
emissions = 0
for i in range(300):
    sc = random_scenario(rng, n_persons=int(rng.integers(1, 10)))
    res = run(sc, seed=i)
    emissions += len(res.emissions)
    for dp in res.emissions:
        c = dp.counters
        assert c.opportunities == 2 * c.accesses
        assert c.occupancy == c.accesses - c.exits + c.ignored_exits
    mismatches += res.final != oracle_counters(sc)

print(f"300 scenarios, {emissions} data points, {mismatches} oracle mismatches")

# rate distribution at the end of each run, for a feel of the numbers
rates = []
for i in range(300):
    res = run(random_scenario(rng, n_persons=6), seed=i)
    last = [dp for dp in res.emissions if dp.event_kind is not EventKind.ANOMALY]
    if last and last[-1].rate.percent_2dp is not None:
        rates.append(float(last[-1].rate.percent_2dp))
rates = np.array(rates)
print(f"final HH rate: median {np.median(rates):.2f}%, 10th-90th percentile "
      f"{np.percentile(rates, 10):.2f}% to {np.percentile(rates, 90):.2f}%")
