"""Counter-based deterministic randomness from a 64-bit mix function.

Streams are addressed rather than stateful, so any draw can be recomputed
in isolation and the whole scheme can be reimplemented in another language
from this description alone:

* ``mix64`` is the splitmix64 output function: with all arithmetic modulo
  2**64,

      x ^= x >> 30;  x *= 0xBF58476D1CE4E5B9
      x ^= x >> 27;  x *= 0x94D049BB133111EB
      x ^= x >> 31

* A key tuple (integers, strings, bytes) folds into one 64-bit key by
  starting from OFFSET and absorbing each part with ``h = mix64(h ^ part)``.
  Strings absorb as little-endian 8-byte chunks of their UTF-8 encoding,
  zero padded, followed by their byte length.

* Draw ``i`` of the stream for key ``k`` is ``mix64(k + i * GOLDEN)``,
  i.e. the splitmix64 sequence with its increment applied per counter.
  Uniform doubles are the top 53 bits scaled into [0, 1).

Gaussian-shaped noise comes from an Irwin-Hall sum (12 uniforms minus 6,
zero mean and unit variance) instead of a transform involving log or trig,
which keeps every arithmetic step exactly rounded and therefore identical
across platforms.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
OFFSET = 0x6A09E667F3BCC909

_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def mix64(x: int) -> int:
    x &= MASK64
    x ^= x >> 30
    x = (x * _M1) & MASK64
    x ^= x >> 27
    x = (x * _M2) & MASK64
    x ^= x >> 31
    return x


def fold(*parts: int | str | bytes) -> int:
    """Deterministic 64-bit key from a tuple of ints, strings, or bytes."""
    h = OFFSET
    for part in parts:
        if isinstance(part, str):
            part = part.encode("utf-8")
        if isinstance(part, (bytes, bytearray)):
            raw = bytes(part)
            for i in range(0, len(raw), 8):
                h = mix64(h ^ int.from_bytes(raw[i : i + 8], "little"))
            h = mix64(h ^ len(raw))
        elif isinstance(part, (int, np.integer)):
            h = mix64(h ^ (int(part) & MASK64))
        else:
            raise TypeError(f"cannot fold {type(part).__name__} into a key")
    return h


def _mix64_array(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.uint64, copy=True)
    x ^= x >> np.uint64(30)
    x *= np.uint64(_M1)
    x ^= x >> np.uint64(27)
    x *= np.uint64(_M2)
    x ^= x >> np.uint64(31)
    return x


def uint64_stream(key: int, start: int, count: int) -> np.ndarray:
    """Draws [start, start+count) of the stream keyed by ``key``."""
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    idx = np.arange(start, start + count, dtype=np.uint64)
    base = (np.uint64(key & MASK64) + idx * np.uint64(GOLDEN)).astype(np.uint64)
    return _mix64_array(base)


def unit_stream(key: int, start: int, count: int) -> np.ndarray:
    """Uniform float64 draws in [0, 1)."""
    bits = uint64_stream(key, start, count)
    return (bits >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)


def normal_stream(key: int, start: int, count: int) -> np.ndarray:
    """Zero-mean unit-variance draws via Irwin-Hall with n = 12.

    Consumes 12 uniform draws per output; output i uses counters
    [start + 12*i, start + 12*(i+1)).
    """
    u = unit_stream(key, 12 * start, 12 * count)
    return u.reshape(count, 12).sum(axis=1) - 6.0
