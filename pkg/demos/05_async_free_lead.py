"""
Why slot-free transmission drifts
=================================

Without slots the sender must stay ahead of the receiver on every bit.
Each whitened 1 costs the sender a cached sync and the receiver only an
uncached one, so the lead moves by about t_b per bit in either direction.
The average drift is small and positive, so the lead is a random walk.
Every dip below zero lets the receiver read a unit the sender has not
reached yet.
"""

import numpy as np

from writesync import AsyncFree, MediumConfig, SimParams, run_strategy_sim
from writesync.protocols import async_free_horizon

bits = np.random.default_rng(0).integers(0, 2, 5000).astype(np.uint8)
medium = MediumConfig(sim=SimParams(noise_frac=0))

for t_s in (0, 20_000):
    cfg = AsyncFree(t_s_ns=t_s, resync_period_bits=5000)
    run = run_strategy_sim(cfg, bits, medium)
    lead = np.array(run.rx.t_ns) - np.array(run.tx.t_ns)
    h = async_free_horizon(run.tx.t_ns, run.rx.t_ns, cfg.units, run.rx.rearm_ns)
    ber = np.mean(run.received != bits)
    print(f"t_s={t_s / 1e3:4.0f}us  safe horizon {h:5d} bits  min lead {lead.min() / 1e6:7.2f} ms  BER {ber:.3f}")

# the same walk without coupling: nominal per-bit change in the lead
t_b, t_u = 918_000, 64_000
steps = np.where(bits == 1, t_u - t_b, t_b - 20_000)
walk = 3_000_000 + np.cumsum(steps)
print(f"mean step {steps.mean() / 1e3:.1f} us, spread {steps.std() / 1e3:.0f} us")
print(f"free walk: first negative at bit {int(np.argmax(walk < 0))}, minimum {walk.min() / 1e6:.1f} ms")
