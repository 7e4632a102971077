"""Additive attention masks (0 = attend, NEG = blocked)."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

# Finite stand-in for -inf: exp(NEG + anything reasonable) underflows to exactly 0.
NEG = -1e9


def build_local_mask(turn_ids: Sequence[int]) -> np.ndarray:
    """Tokens attend only to tokens of the same turn."""
    ids = np.asarray(turn_ids)
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError("turn_ids must be a non-empty 1-D sequence")
    same = ids[:, None] == ids[None, :]
    return np.where(same, 0.0, NEG)


def build_global_mask(length: int) -> np.ndarray:
    if length < 1:
        raise ValueError(f"mask length must be >= 1, got {length}")
    return np.zeros((length, length))


def build_causal_mask(length: int) -> np.ndarray:
    if length < 1:
        raise ValueError(f"mask length must be >= 1, got {length}")
    return np.triu(np.full((length, length), NEG), k=1)


def build_packed_causal_mask(lengths: Sequence[int]) -> np.ndarray:
    """Block-diagonal causal mask for several sequences laid end to end."""
    total = int(sum(lengths))
    mask = np.full((total, total), NEG)
    start = 0
    for n in lengths:
        mask[start : start + n, start : start + n] = build_causal_mask(n)
        start += n
    return mask
