"""
One file, one bit per slot
==========================

The Spy dirties a shared file and sleeps; the Trojan syncs it for a 1 and
stays idle for a 0. When the Spy syncs, a fast sync means the Trojan got
there first.
"""

from writesync import MediumConfig, SimParams, SingleFile, run_strategy_sim
from writesync.codec import bits_to_bytes, bytes_to_bits

message = b"hi"
bits = bytes_to_bits(message)

run = run_strategy_sim(SingleFile(), bits, MediumConfig(sim=SimParams(noise_frac=0.05, seed=4)))
print("sent    ", "".join(map(str, bits)))
print("received", "".join(map(str, run.received)))
print("decoded ", bits_to_bytes(run.received))

# each row of the trace is one measuring sync
print("seq  latency_us  bit")
for i, lat, b in zip(run.rx.seq, run.rx.latency_ns, run.rx.bit):
    print(f"{i:3d}  {lat / 1e3:10.1f}  {b}")
