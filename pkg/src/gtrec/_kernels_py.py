"""Numpy implementations of the ranking and sampling kernels.

Used when the compiled ``_kernels`` extension is unavailable, and as the
reference the compiled versions are tested against.
"""

from __future__ import annotations

import numpy as np


def target_ranks(scores, targets, key_rank, exclude=None):
    """1-based rank of each row's target: higher score first, then lower key rank.

    Excluded columns (``exclude[u, j] != 0``) are skipped; the target itself is
    always counted as present.
    """
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    key_rank = np.asarray(key_rank, dtype=np.int64)
    rows = np.arange(len(targets))
    s_t = scores[rows, targets][:, None]
    k_t = key_rank[targets][:, None]
    ahead = (scores > s_t) | ((scores == s_t) & (key_rank[None, :] < k_t))
    if exclude is not None:
        ahead &= ~np.asarray(exclude, dtype=bool)
    return ahead.sum(axis=1).astype(np.int64) + 1


def topk(scores, k, key_rank, exclude=None):
    """Indices of the ``k`` best columns per row under the same ordering as ``target_ranks``.

    Rows with fewer than ``k`` non-excluded columns are padded with -1.
    """
    scores = np.asarray(scores, dtype=np.float64)
    key_rank = np.asarray(key_rank, dtype=np.int64)
    out = np.full((scores.shape[0], k), -1, dtype=np.int64)
    for u in range(scores.shape[0]):
        order = np.lexsort((key_rank, -scores[u]))
        if exclude is not None:
            order = order[~np.asarray(exclude[u], dtype=bool)[order]]
        out[u, :min(k, len(order))] = order[:k]
    return out


def window_pool(event_items, event_users, lo, hi, user, exclude):
    """Sorted distinct items of events ``lo:hi`` not by ``user`` and not excluded."""
    items = np.asarray(event_items[lo:hi], dtype=np.int64)
    users = np.asarray(event_users[lo:hi], dtype=np.int64)
    items = items[users != user]
    items = np.unique(items)
    return items[~np.asarray(exclude, dtype=bool)[items]]
