"""
Calibrating the two latency classes
===================================

A sync on a unit with pending writes pays for the write-back; a sync on a
clean unit does not. Calibration measures both and puts the decision
threshold halfway between their medians.
"""

import numpy as np

from writesync import MediumConfig, SimParams, calibrate, open_medium

cfg = MediumConfig(sim=SimParams(noise_frac=0.05, seed=1), unit_count=1)
with open_medium(cfg, "receiver") as h:
    cal = calibrate(h, n=1000)

print(f"cached   t_b_hat = {cal.t_b_hat_ns / 1e3:8.1f} us")
print(f"uncached t_u_hat = {cal.t_u_hat_ns / 1e3:8.1f} us")
print(f"threshold        = {cal.threshold_ns / 1e3:8.1f} us  (ratio {cal.separation_ratio:.1f})")

# the classes do not overlap at this noise level
print("cached below threshold:  ", int(np.sum(np.array(cal.cached_samples) < cal.threshold_ns)))
print("uncached above threshold:", int(np.sum(np.array(cal.uncached_samples) >= cal.threshold_ns)))

# a rough text histogram of both classes
edges = np.linspace(0, 1.2e6, 25)
for name, xs in (("cached", cal.cached_samples), ("uncached", cal.uncached_samples)):
    counts, _ = np.histogram(xs, edges)
    print(f"{name:>9} |" + "".join(" .:-=+*#%@"[min(9, c // 40)] for c in counts) + "|")
