"""
One-shot transmission and the write-back deadline
=================================================

The Spy dirties one unit per bit and leaves. The Trojan syncs the units for
its 1 bits whenever it likes. The Spy has to read before the kernel writes
dirty pages back on its own, or every unit reads as clean.
"""

import numpy as np

from writesync import MediumConfig, OneShot, SimParams, run_strategy_sim

bits = np.random.default_rng(2).integers(0, 2, 64).astype(np.uint8)
medium = MediumConfig(sim=SimParams(noise_frac=0))

for lag_s in (1, 19, 29, 31):
    # raise the lag limit so the late case runs instead of warning
    run = run_strategy_sim(OneShot(receiver_lag_ns=lag_s * 10**9, max_receiver_lag_ns=40 * 10**9), bits, medium)
    errors = int(np.count_nonzero(run.received != bits))
    print(f"receiver lag {lag_s:2d}s: {errors:2d} errors, {int(run.received.sum()):2d} ones read")
