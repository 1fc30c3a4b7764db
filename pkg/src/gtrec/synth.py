"""Synthetic corpora with a controllable geo-temporal signal.

``make_world`` builds a consumption log where each (day, location) pair has a
theme and users mostly pick items of the current theme. In ``planted`` mode
the context embeddings point at their theme; in ``null`` mode they are
i.i.d. random. ``make_diagnostic`` builds the small corpora used to check the
informativeness test itself.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import SECONDS_PER_DAY, Interaction, write_interactions
from .embeddings import EmbeddingMatrix, l2_normalize, write_embeddings
from .enrichment import bucket_of, context_key

EPOCH0 = 1_600_000_000 - 1_600_000_000 % SECONDS_PER_DAY  # a midnight UTC
LOCATIONS = ("Lisbon, Portugal", "Osaka, Japan", "Denver, USA", "Nairobi, Kenya")
GENRES = ("Drama", "Comedy", "Action", "Horror", "Romance", "Sci-Fi", "Documentary", "Thriller")


@dataclass
class SyntheticWorld:
    log: list[Interaction]
    items: list[dict]
    item_embeddings: EmbeddingMatrix
    context_embeddings: EmbeddingMatrix
    meta: dict = field(default_factory=dict)

    def with_noise_contexts(self, seed: int) -> "SyntheticWorld":
        """Same log and items, context vectors replaced by random unit vectors."""
        rng = np.random.default_rng([seed, 7919])
        rows = l2_normalize(rng.normal(size=self.context_embeddings.rows.shape))
        noise = EmbeddingMatrix(self.context_embeddings.keys, rows, normalized=True)
        return SyntheticWorld(self.log, self.items, self.item_embeddings, noise,
                              {**self.meta, "contexts": "noise", "noise_seed": seed})

    def write(self, out_dir: str | Path, embeddings: bool = True) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"interactions": out / "interactions.jsonl", "items": out / "items.jsonl"}
        write_interactions(paths["interactions"], self.log)
        with paths["items"].open("w", encoding="utf-8") as fh:
            for row in self.items:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        if embeddings:
            paths["item_embeddings"] = out / "items.emb"
            paths["context_embeddings"] = out / "contexts.emb"
            write_embeddings(paths["item_embeddings"], self.item_embeddings)
            write_embeddings(paths["context_embeddings"], self.context_embeddings)
        return paths


def _unit(rng, *shape):
    return l2_normalize(rng.normal(size=shape)).astype(np.float64)


def make_world(
    n_users: int = 200,
    n_items: int = 100,
    n_themes: int = 5,
    dim: int = 32,
    n_days: int = 60,
    events_per_user: tuple[int, int] = (8, 16),
    mode: str = "planted",
    theme_affinity: float = 0.9,
    meta_alignment: float = 0.3,
    context_noise: float = 0.2,
    seed: int = 0,
) -> SyntheticWorld:
    """Users in a few cities consume items whose theme matches the local daily theme.

    ``theme_affinity`` is the probability a pick follows the current theme;
    ``meta_alignment`` mixes the theme direction into item metadata so that
    metadata alone carries only part of the signal.
    """
    if mode not in ("planted", "null"):
        raise ValueError("mode must be 'planted' or 'null'")
    rng = np.random.default_rng(seed)
    themes = _unit(rng, n_themes, dim)
    item_theme = np.arange(n_items) % n_themes
    meta = l2_normalize(meta_alignment * themes[item_theme]
                        + (1 - meta_alignment) * _unit(rng, n_items, dim))
    item_ids = [f"i{j:04d}" for j in range(n_items)]
    by_theme = [np.flatnonzero(item_theme == k) for k in range(n_themes)]
    # daily theme per location, shifted so cities disagree on the same day
    schedule = rng.integers(0, n_themes, size=(n_days, len(LOCATIONS)))

    log = []
    for u in range(n_users):
        loc = int(rng.integers(len(LOCATIONS)))
        n_ev = int(rng.integers(events_per_user[0], events_per_user[1] + 1))
        day = int(rng.integers(0, max(1, n_days - n_ev)))
        second = 3600 * 9
        for e in range(n_ev):
            if e and rng.random() < 0.35:
                day = min(n_days - 1, day + int(rng.integers(1, 3)))
                second = 3600 * 9
            second += int(rng.integers(60, 1800))
            if mode == "planted" and rng.random() < theme_affinity:
                j = int(rng.choice(by_theme[schedule[day, loc]]))
            else:
                j = int(rng.integers(n_items))
            ts = EPOCH0 + day * SECONDS_PER_DAY + min(second, SECONDS_PER_DAY - 1)
            log.append(Interaction(f"u{u:04d}", item_ids[j], ts, LOCATIONS[loc]))

    keys = sorted({context_key(bucket_of(x.timestamp_utc, "day"), x.location) for x in log})
    rows = np.zeros((len(keys), dim))
    for r, key in enumerate(keys):
        day = (int(np.datetime64(key.split("|")[0]).astype("datetime64[s]").astype(np.int64)) - EPOCH0) // SECONDS_PER_DAY
        loc = LOCATIONS.index(key.split("|", 1)[1])
        if mode == "planted":
            rows[r] = themes[schedule[day, loc]] + context_noise * _unit(rng, dim)
        else:
            rows[r] = _unit(rng, dim)
    contexts = EmbeddingMatrix(keys, l2_normalize(rows), normalized=True)
    items = [{"item_id": item_ids[j], "title": f"Synthetic title {j}",
              "genres": [GENRES[item_theme[j] % len(GENRES)]]} for j in range(n_items)]
    item_emb = EmbeddingMatrix(item_ids, meta.astype(np.float32), normalized=True)
    if mode == "null":
        item_emb = EmbeddingMatrix(item_ids, _unit(rng, n_items, dim).astype(np.float32), normalized=True)
    return SyntheticWorld(log, items, item_emb, contexts,
                          {"mode": mode, "seed": seed, "n_users": n_users, "n_items": n_items,
                           "n_themes": n_themes, "dim": dim})


def make_memorization_log(n_users: int = 5, length: int = 6, n_items: int = 20, seed: int = 0):
    """A handful of users with fixed short sequences over disjoint items, for overfitting checks."""
    if n_users * length > n_items:
        raise ValueError("need n_items >= n_users * length for disjoint sequences")
    rng = np.random.default_rng(seed)
    picks = rng.permutation(n_items)[: n_users * length].reshape(n_users, length)
    log = []
    for u in range(n_users):
        for e, j in enumerate(picks[u]):
            log.append(Interaction(f"u{u}", f"i{j:03d}", EPOCH0 + u * 1000 + e * 60, LOCATIONS[0]))
    return log


def make_diagnostic(
    mode: str = "planted",
    n_users: int = 500,
    n_items: int = 500,
    dim: int = 64,
    history: int = 3,
    seed: int = 0,
) -> tuple[list[Interaction], EmbeddingMatrix, EmbeddingMatrix]:
    """Log plus item and context matrices for the informativeness test.

    ``planted``: every pre-target event of a user happens in a context whose
    vector equals the target item's metadata row. ``null``: all vectors are
    i.i.d. random unit vectors and targets are uniform.
    """
    if mode not in ("planted", "null"):
        raise ValueError("mode must be 'planted' or 'null'")
    rng = np.random.default_rng(seed)
    item_ids = [f"i{j:04d}" for j in range(n_items)]
    M = _unit(rng, n_items, dim)
    log, ctx_rows = [], {}
    for u in range(n_users):
        target = int(rng.integers(n_items))
        day = int(rng.integers(0, 3650))
        loc = f"Cell {u}"
        key = context_key(bucket_of(EPOCH0 + day * SECONDS_PER_DAY, "day"), loc)
        ctx_rows[key] = M[target] if mode == "planted" else _unit(rng, dim)
        for e in range(history):
            j = int(rng.integers(n_items))
            log.append(Interaction(f"u{u:04d}", item_ids[j], EPOCH0 + day * SECONDS_PER_DAY + 60 * (e + 1), loc))
        tday = day + 1
        tkey = context_key(bucket_of(EPOCH0 + tday * SECONDS_PER_DAY, "day"), loc)
        ctx_rows.setdefault(tkey, _unit(rng, dim))
        log.append(Interaction(f"u{u:04d}", item_ids[target], EPOCH0 + tday * SECONDS_PER_DAY + 60, loc))
    keys = sorted(ctx_rows)
    contexts = EmbeddingMatrix(keys, np.array([ctx_rows[k] for k in keys], dtype=np.float32), normalized=True)
    items = EmbeddingMatrix(item_ids, M.astype(np.float32), normalized=True)
    return log, items, contexts
