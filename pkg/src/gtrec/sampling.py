"""Negative samplers: temporal-window, semantic-pool and uniform."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .corpus import SECONDS_PER_DAY
from .embeddings import EmbeddingMatrix
from .errors import EmptyPool

DEFAULT_WINDOW_DAYS = 7
DEFAULT_POOL_FRACTION = 0.2


@dataclass(frozen=True)
class Negatives:
    items: tuple
    with_replacement: bool
    provenance: str


def _draw(pool: np.ndarray, n_neg: int, rng: np.random.Generator) -> tuple[np.ndarray, bool]:
    if len(pool) >= n_neg:
        return rng.choice(pool, size=n_neg, replace=False), False
    return rng.choice(pool, size=n_neg, replace=True), True


class WindowIndex:
    """Time-sorted view of a log for window-negative lookups.

    Items and users are integer-coded; ``user_items[u]`` is a boolean mask of
    everything user ``u`` ever consumed.
    """

    def __init__(self, log: Sequence, item_index: dict[str, int] | None = None):
        if item_index is None:
            item_index = {k: i for i, k in enumerate(sorted({x.item_id for x in log}))}
        self.item_index = item_index
        self.item_keys = [None] * (max(item_index.values()) + 1)
        for k, i in item_index.items():
            self.item_keys[i] = k
        self.user_index = {u: i for i, u in enumerate(sorted({x.user_id for x in log}))}
        order = sorted(range(len(log)), key=lambda i: (log[i].timestamp_utc, log[i].user_id, log[i].item_id))
        self.ts = np.array([log[i].timestamp_utc for i in order], dtype=np.int64)
        self.items = np.array([item_index[log[i].item_id] for i in order], dtype=np.int64)
        self.users = np.array([self.user_index[log[i].user_id] for i in order], dtype=np.int64)
        n_items = len(self.item_keys)
        self.user_items = np.zeros((len(self.user_index), n_items), dtype=np.uint8)
        self.user_items[self.users, self.items] = 1
        self.n_items = n_items

    def pool(self, user: int, t_interaction: int, window_days: float, exclude=None) -> np.ndarray:
        """Item indices consumed by other users in ``[t - window, t)`` minus the user's history."""
        if window_days <= 0:
            raise ValueError("window_days must be positive")
        lo = np.searchsorted(self.ts, t_interaction - window_days * SECONDS_PER_DAY, side="left")
        hi = np.searchsorted(self.ts, t_interaction, side="left")
        mask = self.user_items[user]
        if exclude is not None:
            mask = mask | np.asarray(exclude, dtype=np.uint8)
        return kernels.window_pool(self.items, self.users, lo, hi, user, mask)

    def sample(self, user: int, t_interaction: int, window_days: float, n_neg: int,
               rng: np.random.Generator, exclude=None) -> tuple[np.ndarray, bool]:
        pool = self.pool(user, t_interaction, window_days, exclude)
        if len(pool) == 0:
            raise EmptyPool(f"no window negatives for user index {user} at t={t_interaction}")
        return _draw(pool, n_neg, rng)


def sample_window_negatives(log, user: str, t_interaction: int, window_days: float = DEFAULT_WINDOW_DAYS,
                            n_neg: int = 5, rng: np.random.Generator | None = None) -> Negatives:
    """Items other users consumed shortly before ``t_interaction``, never ones ``user`` has seen."""
    index = log if isinstance(log, WindowIndex) else WindowIndex(log)
    rng = rng if rng is not None else np.random.default_rng()
    try:
        u = index.user_index[user]
    except KeyError:
        raise EmptyPool(f"user {user!r} not in log") from None
    try:
        idx, replaced = index.sample(u, t_interaction, window_days, n_neg, rng)
    except EmptyPool:
        raise EmptyPool(f"no window negatives for user {user!r} at t={t_interaction}") from None
    return Negatives(tuple(index.item_keys[i] for i in idx), replaced, "temporal_window")


def semantic_pool(t: np.ndarray, rows: np.ndarray, pool_fraction: float,
                  exclude: np.ndarray | None = None) -> np.ndarray:
    """Row indices in the least-similar ``pool_fraction`` of ``rows`` (cosine to ``t``), minus exclusions.

    Ties in similarity keep row order, so lower rows are considered less similar first.
    """
    if not 0 < pool_fraction <= 1:
        raise ValueError("pool_fraction must lie in (0, 1]")
    t = np.asarray(t, dtype=np.float64)
    rows = np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(rows, axis=1) * np.linalg.norm(t)
    sims = np.divide(rows @ t, norms, out=np.zeros(len(rows)), where=norms > 0)
    size = max(1, math.ceil(pool_fraction * len(rows) - 1e-9))
    bottom = np.argsort(sims, kind="stable")[:size]
    if exclude is not None:
        bottom = bottom[~np.asarray(exclude, dtype=bool)[bottom]]
    return np.sort(bottom)


def sample_semantic_negatives(t, M: EmbeddingMatrix, pool_fraction: float = DEFAULT_POOL_FRACTION,
                              n_neg: int = 5, rng: np.random.Generator | None = None,
                              exclude=()) -> Negatives:
    """Uniform draw from the least-similar fraction of the catalog, not the single extreme item."""
    rng = rng if rng is not None else np.random.default_rng()
    mask = np.zeros(len(M), dtype=bool)
    for k in exclude:
        i = M.index.get(k)
        if i is not None:
            mask[i] = True
    pool = semantic_pool(t, M.rows, pool_fraction, mask)
    if len(pool) == 0:
        raise EmptyPool("semantic pool is empty after exclusions")
    idx, replaced = _draw(pool, n_neg, rng)
    return Negatives(tuple(M.keys[i] for i in idx), replaced, "semantic_pool")


def sample_uniform(n_items: int, exclude: np.ndarray, shape, rng: np.random.Generator,
                   low: int = 1) -> np.ndarray:
    """Uniform item indices in ``[low, n_items]`` avoiding ``exclude`` (per-row masks).

    ``exclude`` is (rows, n_items + 1); ``shape`` starts with ``rows``.
    Rejected draws are redrawn until every slot is valid.
    """
    exclude = np.asarray(exclude, dtype=bool)
    allowed = (~exclude[:, low:]).sum(axis=1)
    if np.any(allowed == 0):
        raise EmptyPool("a user has consumed the entire catalog")
    out = rng.integers(low, n_items + 1, size=shape)
    rows = np.broadcast_to(np.arange(shape[0]).reshape((-1,) + (1,) * (len(shape) - 1)), shape)
    bad = exclude[rows, out]
    while bad.any():
        out[bad] = rng.integers(low, n_items + 1, size=int(bad.sum()))
        bad = exclude[rows, out]
    return out
