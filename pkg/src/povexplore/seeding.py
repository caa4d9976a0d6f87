"""Seed derivation.

``derive_seed(master, i)`` is the SplitMix64 output for state
``master + (i + 1) * 0x9E3779B97F4A7C15 (mod 2**64)``::

    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9  (mod 2**64)
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB  (mod 2**64)
    z =  z ^ (z >> 31)

The finalizer is a bijection on 64-bit words and the golden-ratio increment is
odd, so distinct ``i`` (below 2**64) under one master never collide.
"""

MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN = 0x9E3779B97F4A7C15

# stream tags for seeds derived from one run or training seed
STREAM_WORLD = 0x57
STREAM_AGENT = 0xA6
STREAM_INIT = 0x1417
STREAM_TRAIN = 0x7EA1
STREAM_EVAL = 0xE7A1


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(master_seed: int, run_id: int) -> int:
    return mix64((master_seed & MASK64) + (run_id + 1) * GOLDEN)
