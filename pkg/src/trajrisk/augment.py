"""Length-preserving sequence augmentations: deletion, modification, subsetting.

The row-level functions are pure and take explicit indices; ``augment_sample``
draws those indices once per sample and applies them to every feature row of
one channel so the rows stay aligned in time.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Tuple

import numpy as np

from .preprocess import PAD, ProcessedSample

__all__ = [
    "STRATEGIES",
    "AugmentPlan",
    "augment_delete",
    "augment_modify",
    "augment_subset",
    "draw_augmentation",
    "apply_plan",
    "augment_sample",
]

STRATEGIES = ("delete", "modify", "subset")


def _row(row) -> np.ndarray:
    return np.asarray(row, dtype=np.int64)


def _valid(row: np.ndarray, valid_len: Optional[int]) -> int:
    if valid_len is not None:
        return int(valid_len)
    nz = np.flatnonzero(row != PAD)
    return int(nz[-1]) + 1 if nz.size else 0


def augment_delete(row, delete_indices: Iterable[int], valid_len: Optional[int] = None) -> np.ndarray:
    """Drop the listed positions and right-pad with PAD to the original length."""
    row = _row(row)
    n = _valid(row, valid_len)
    drop = set(int(i) for i in delete_indices)
    bad = [i for i in drop if not 0 <= i < n]
    if bad:
        raise IndexError(f"delete indices {sorted(bad)} outside valid range [0, {n})")
    kept = [row[i] for i in range(n) if i not in drop]
    out = np.full(row.shape, PAD, dtype=np.int64)
    out[:len(kept)] = kept
    return out


def augment_modify(row, index: int, direction: str, valid_len: Optional[int] = None) -> np.ndarray:
    """Overwrite ``row[index]`` with its left or right neighbour."""
    row = _row(row)
    n = _valid(row, valid_len)
    if direction not in ("left", "right"):
        raise ValueError("direction must be 'left' or 'right'")
    src = index - 1 if direction == "left" else index + 1
    if not (0 <= index < n and 0 <= src < n):
        raise IndexError(f"no {direction} neighbour for index {index} within valid length {n}")
    out = row.copy()
    out[index] = row[src]
    return out


def augment_subset(row, start: int, length: int, valid_len: Optional[int] = None) -> np.ndarray:
    """Keep the window [start, start + length) and right-pad; new valid length is ``length``."""
    row = _row(row)
    n = _valid(row, valid_len)
    if length < 1 or start < 0 or start + length > n:
        raise IndexError(f"window [{start}, {start + length}) outside valid range [0, {n})")
    out = np.full(row.shape, PAD, dtype=np.int64)
    out[:length] = row[start:start + length]
    return out


@dataclass(frozen=True)
class AugmentPlan:
    strategy: str
    channel: str
    indices: Tuple[int, ...] = ()
    directions: Tuple[str, ...] = ()
    start: int = 0
    length: int = 0


def draw_augmentation(sample: ProcessedSample, rng: np.random.Generator, p_aug: float = 0.3,
                      fraction: float = 0.15) -> Optional[AugmentPlan]:
    """Decide whether and how to augment ``sample``; ``None`` means leave it as is."""
    if rng.uniform() >= p_aug:
        return None
    strategy = STRATEGIES[int(rng.integers(len(STRATEGIES)))]
    channels = sorted(sample.channel_tokens)
    channel = channels[int(rng.integers(len(channels)))]
    n = sample.valid_len[channel]
    if strategy == "delete":
        if n < 2:
            return AugmentPlan(strategy, channel)
        k = int(min(max(1, round(fraction * n)), n - 1))
        idx = np.sort(rng.choice(n, size=k, replace=False))
        return AugmentPlan(strategy, channel, indices=tuple(int(i) for i in idx))
    if strategy == "modify":
        if n < 2:
            return AugmentPlan(strategy, channel)
        k = max(1, int(round(fraction * n)))
        idx = np.sort(rng.choice(n, size=min(k, n), replace=False))
        dirs = []
        for i in idx:
            if i == 0:
                dirs.append("right")
            elif i == n - 1:
                dirs.append("left")
            else:
                dirs.append("left" if rng.uniform() < 0.5 else "right")
        return AugmentPlan(strategy, channel, indices=tuple(int(i) for i in idx), directions=tuple(dirs))
    if n < 1:
        return AugmentPlan(strategy, channel)
    length = int(rng.integers(max(1, n // 2), n + 1))
    start = int(rng.integers(0, n - length + 1))
    return AugmentPlan(strategy, channel, start=start, length=length)


def apply_plan(sample: ProcessedSample, plan: Optional[AugmentPlan]) -> ProcessedSample:
    if plan is None:
        return sample
    tokens = sample.channel_tokens[plan.channel]
    n = sample.valid_len[plan.channel]
    if plan.strategy == "delete":
        if not plan.indices:
            return sample
        new = np.stack([augment_delete(r, plan.indices, n) for r in tokens])
        return sample.replace_channel(plan.channel, new, n - len(set(plan.indices)))
    if plan.strategy == "modify":
        if not plan.indices:
            return sample
        # neighbours are read from the original row, so edits do not chain
        new = tokens.copy()
        for i, d in zip(plan.indices, plan.directions):
            for m in range(tokens.shape[0]):
                new[m, i] = augment_modify(tokens[m], i, d, n)[i]
        return sample.replace_channel(plan.channel, new, n)
    if plan.length == 0:
        return sample
    new = np.stack([augment_subset(r, plan.start, plan.length, n) for r in tokens])
    return sample.replace_channel(plan.channel, new, plan.length)


def augment_sample(sample: ProcessedSample, rng: np.random.Generator, p_aug: float = 0.3,
                   fraction: float = 0.15) -> ProcessedSample:
    """Training-time augmentation of one randomly chosen channel with probability ``p_aug``."""
    return apply_plan(sample, draw_augmentation(sample, rng, p_aug, fraction))
