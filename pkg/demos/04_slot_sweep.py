"""
Slot length against error rate
==============================

Shorter slots send faster until the receiver's measuring sync no longer
fits, at which point bits smear into their neighbours.
"""

import numpy as np

from writesync import MediumConfig, SimParams, SingleFile, Timing
from writesync.metrics import bench

medium = MediumConfig(sim=SimParams(noise_frac=0.05, seed=1))
tm = Timing.from_sim(medium.sim)

for factor in np.arange(1.0, 3.01, 0.25):
    slot = int(round(factor * tm.t_b_ns))
    r = bench(SingleFile(slot_ns=slot), medium, trials=10, bits_per_trial=512, timing=tm).report
    bar = "#" * int(r.ber_pct / 2)
    print(f"slot {factor:4.2f} x t_b  {r.tr_bps:6.1f} b/s  BER {r.ber_pct:5.2f}% {bar}")
