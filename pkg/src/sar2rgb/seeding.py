"""Portable deterministic randomness for splits and batch ordering.

Every shuffle in this package is driven by SplitMix64 so that any
implementation of the same recipe reproduces the exact same order:

* holdout split: downward Fisher-Yates over indices, generator seeded
  directly with the user seed, first n shuffled indices form the holdout;
* training batches: one shuffle per epoch, seeded with ``epoch_seed``.
"""

from __future__ import annotations

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


class SplitMix64:
    """The standard SplitMix64 stream (Steele et al. mixing constants)."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_uint64(self) -> int:
        self.state = (self.state + _GAMMA) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return (z ^ (z >> 31)) & _MASK64


def fisher_yates(n: int, rng: SplitMix64) -> list[int]:
    """Shuffle ``range(n)`` with a downward Fisher-Yates pass.

    For i = n-1 .. 1 the swap partner is ``rng.next_uint64() % (i + 1)``.
    The modulo draw is part of the pinned recipe (its bias is irrelevant at
    the dataset sizes this package handles).
    """
    order = list(range(n))
    for i in range(n - 1, 0, -1):
        j = rng.next_uint64() % (i + 1)
        order[i], order[j] = order[j], order[i]
    return order


def epoch_seed(seed: int, epoch: int) -> int:
    """Seed of the per-epoch shuffle: the (epoch+1)-th output of the
    SplitMix64 stream started at ``seed``."""
    rng = SplitMix64(seed)
    out = rng.next_uint64()
    for _ in range(epoch):
        out = rng.next_uint64()
    return out
