"""Minibatch assembly shared by both trainers."""
from __future__ import annotations

import numpy as np


def length_batches(
    lengths: np.ndarray, batch_size: int, rng: np.random.Generator
) -> list[np.ndarray]:
    """Index batches with equal lengths inside each batch, shuffled twice.

    Items are shuffled, stably regrouped by length, chunked, and the
    batch order is shuffled again, so batch composition and order are
    seeded but lengths never mix within a batch (no padding reaches a
    loss).
    """
    order = rng.permutation(lengths.size)
    order = order[np.argsort(lengths[order], kind="stable")]
    sorted_lengths = lengths[order]
    boundaries = np.flatnonzero(np.diff(sorted_lengths)) + 1
    batches: list[np.ndarray] = []
    for group in np.split(order, boundaries):
        for start in range(0, group.size, batch_size):
            batches.append(group[start : start + batch_size])
    return [batches[i] for i in rng.permutation(len(batches))]
