"""Deterministic seed derivation.

Replicate and subsystem seeds are derived from a master seed with
splitmix64 so that runs are reproducible and independent of scheduling:
``derive(master, i)`` is the documented splitting rule used everywhere
(replicate i of a campaign, refit k of a trial, and so on).
"""

from __future__ import annotations

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(state: int) -> int:
    """One splitmix64 output for the given 64-bit state."""
    z = (state + _GOLDEN) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return (z ^ (z >> 31)) & _MASK


def derive(seed: int, *parts: int) -> int:
    """Fold integer parts into a seed, one splitmix64 round per part."""
    out = seed & _MASK
    for p in parts:
        out = splitmix64((out ^ (p & _MASK)) & _MASK)
    return out
