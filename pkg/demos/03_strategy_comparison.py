"""
Six ways to use the channel
===========================

Same medium, same payload size, every strategy. OneShot wins on rate
because it never waits for a slot. AsyncFree trades reliability for speed.
"""

from writesync import AsyncFree, AsyncSlot, MediumConfig, MultiBit, OneShot, SimParams, SingleFile, SinglePage
from writesync.metrics import bench

medium = MediumConfig(sim=SimParams(noise_frac=0.05, seed=1))
strategies = [SingleFile(), SinglePage(), MultiBit(), AsyncSlot(), AsyncFree(), OneShot()]

print(f"{'strategy':<12} {'TR b/s':>9} {'peak b/s':>9} {'BER %':>7} {'SD':>7}")
for s in strategies:
    r = bench(s, medium, trials=10, bits_per_trial=1024).report
    print(f"{s.kind:<12} {r.tr_bps:9.1f} {r.peak_bps:9.1f} {r.ber_pct:7.2f} {r.sd:7.4f}")
