"""Portable seeded randomness.

Splits and batch orders must reproduce bit-for-bit on any platform and in
any language, so they use SplitMix64 (Steele, Lea & Flood 2014) driving a
Fisher-Yates shuffle instead of numpy's generators. The exact procedure:

* state advances by ``0x9E3779B97F4A7C15`` (mod 2**64) per draw;
* output is the SplitMix64 finalizer of the new state;
* ``shuffle`` walks ``i = n-1 .. 1`` and swaps item ``i`` with item
  ``draw % (i + 1)``.

Bulk numeric arrays (synthetic data, parameter init) use numpy's PCG64
seeded with :func:`derive_seed`, which is stable for a given numpy major
version.
"""

from __future__ import annotations

from typing import Iterable, MutableSequence, TypeVar

T = TypeVar("T")

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & _MASK

    def next_u64(self) -> int:
        self.state = (self.state + _GOLDEN) & _MASK
        return _mix(self.state)

    def uniform(self) -> float:
        """Float in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))


def derive_seed(seed: int, *labels: str | int) -> int:
    """Mix a root seed with labels into an independent 64-bit sub-seed."""
    # mix the root first so (seed, label) pairs cannot cancel through the XOR
    state = _mix(((seed & _MASK) + _GOLDEN) & _MASK)
    for label in labels:
        data = label.encode("utf-8") if isinstance(label, str) else int(label).to_bytes(8, "little", signed=True)
        for byte in data:
            state = _mix(((state ^ byte) + _GOLDEN) & _MASK)
        state = _mix((state + _GOLDEN) & _MASK)
    return state


def shuffle(items: MutableSequence[T], seed: int) -> MutableSequence[T]:
    """In-place Fisher-Yates shuffle driven by SplitMix64(seed)."""
    gen = SplitMix64(seed)
    for i in range(len(items) - 1, 0, -1):
        j = gen.next_u64() % (i + 1)
        items[i], items[j] = items[j], items[i]
    return items


def permutation(n: int, seed: int) -> list[int]:
    return list(shuffle(list(range(n)), seed))


def shuffled(items: Iterable[T], seed: int) -> list[T]:
    return list(shuffle(list(items), seed))
