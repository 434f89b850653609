"""
Framing a message
=================

A frame is a sync sequence, a length header and the payload. The receiver
skips idle zeros until the first 1 and checks the sync sequence before it
trusts the header.
"""

from writesync import codec

payload = codec.hex_to_bits("0xDEAD")
frame = codec.frame(payload)
print("frame  ", codec.bits_to_str(frame))

noisy = "0000" + codec.bits_to_str(frame)
f = codec.deframe(noisy)
print("offset ", f.offset, " payload", codec.bits_to_bytes(f.payload).hex())

# whitening balances ones and zeros whatever the payload
zeros = [0] * 4000
print("ones after whitening:", codec.xor_encode(zeros, codec.PrngStream(7)).mean())

# MultiBit sends two bits per slot as a unit index
print("symbols", codec.group2(payload).tolist())
