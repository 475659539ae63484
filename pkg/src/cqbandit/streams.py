"""Counter-based random numbers keyed by (seed, round, channel, lane).

Every value is a pure function of its key, so two coupled queues that
consume a different number of draws never drift apart.  The mixer is the
SplitMix64 finalizer, applied once per key component.
"""

from __future__ import annotations

from enum import IntEnum

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_INV53 = 1.0 / (1 << 53)

_BLOCK = 1024


class Channel(IntEnum):
    ARRIVAL_COIN = 1
    ARRIVAL_CONTEXT = 2
    SERVICE_COIN = 3
    EXPLORE_COIN = 4
    SERVER_PICK = 5


def mix64(x: int) -> int:
    x = (x + _GOLDEN) & MASK64
    x = ((x ^ (x >> 30)) * _M1) & MASK64
    x = ((x ^ (x >> 27)) * _M2) & MASK64
    return x ^ (x >> 31)


def _mix64_array(x: np.ndarray) -> np.ndarray:
    # uint64 arithmetic wraps modulo 2**64, matching the masked int version
    x = x + np.uint64(_GOLDEN)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(_M1)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(_M2)
    return x ^ (x >> np.uint64(31))


def derive_seed(master: int, *labels: int | str) -> int:
    """Keyed child seed; string labels are folded in byte by byte."""
    h = mix64(master & MASK64)
    for label in labels:
        if isinstance(label, str):
            for b in label.encode():
                h = mix64(h ^ b)
            h = mix64(h ^ 0xFF)
        else:
            h = mix64(h ^ (int(label) & MASK64))
    return h


def _to_unit(h):
    # (h >> 11 + 0.5) / 2**53 lies strictly inside (0, 1)
    return ((h >> 11) + 0.5) * _INV53


class RandomnessStream:
    """Stateless uniform source; ``uniform(t, ch)`` is replayable in any order.

    Scalar coins are cached per block of rounds purely as a speed-up; the
    cache never changes a value.
    """

    def __init__(self, master_seed: int):
        self.master_seed = int(master_seed) & MASK64
        self._root = mix64(self.master_seed)
        self._cache: dict[tuple[int, int], np.ndarray] = {}

    def __repr__(self):
        return f"RandomnessStream(master_seed={self.master_seed})"

    def _key(self, t: int, channel: int) -> int:
        return mix64(mix64(self._root ^ int(channel)) ^ (int(t) & MASK64))

    def uniform(self, t: int, channel: Channel, lane: int = 0) -> float:
        if lane == 0 and t >= 0:
            block, off = divmod(t, _BLOCK)
            arr = self._cache.get((channel, block))
            if arr is None:
                ts = np.arange(block * _BLOCK, (block + 1) * _BLOCK, dtype=np.uint64)
                arr = self.uniform_rounds(ts, channel, 0)
                self._cache[(channel, block)] = arr
            return float(arr[off])
        return float(_to_unit(mix64(self._key(t, channel) ^ lane)))

    def uniforms(self, t: int, channel: Channel, n: int, start: int = 0) -> np.ndarray:
        """Lanes ``start .. start+n-1`` of one (round, channel) key."""
        lanes = np.arange(start, start + n, dtype=np.uint64)
        h = _mix64_array(np.uint64(self._key(t, channel)) ^ lanes)
        return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * _INV53

    def uniform_rounds(self, ts, channel: Channel, lane: int = 0) -> np.ndarray:
        """One lane across an array of rounds (vectorised scalar path)."""
        ts = np.asarray(ts, dtype=np.uint64)
        ch = np.uint64(mix64(self._root ^ int(channel)))
        h = _mix64_array(_mix64_array(ch ^ ts) ^ np.uint64(lane))
        return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * _INV53
