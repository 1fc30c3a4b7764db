"""Small builders shared by several test modules."""

from __future__ import annotations

import numpy as np

from gtrec.corpus import SplitSpec
from gtrec.model import BackboneConfig, VariantConfig, variant_from_name
from gtrec.synth import make_world
from gtrec.training import TrainConfig, build_batches, prepare_for_config

TINY = BackboneConfig(d_model=8, n_layers=2, n_heads=1, max_seq_len=4, dropout_rate=0.0)

# every architecture plus every aux loss kind
GRAD_VARIANTS = ["SASRec", "M", "Id+M", "M+GT", "Id+M+GT", "Loss-[BCE]", "Loss-[Cos]",
                 "Loss-[Pairwise_rand]", "Loss-[Pairwise_sem]"]


def tiny_world(seed=0, n_users=12, n_items=15, dim=6):
    return make_world(n_users=n_users, n_items=n_items, n_themes=3, dim=dim, n_days=10,
                      events_per_user=(5, 8), seed=seed)


def tiny_setup(variant, seed=0, backbone=TINY, dim=6, **overrides):
    """(config, prepared data, first batch) for a tiny model of ``variant``."""
    world = tiny_world(seed, dim=dim)
    v = variant_from_name(variant) if isinstance(variant, str) else variant
    overrides.setdefault("split", SplitSpec("general", min_history=3))
    cfg = TrainConfig(variant=v, backbone=backbone, seed=seed, batch_size=8, **overrides)
    data = prepare_for_config(cfg, world.log, world.item_embeddings, world.context_embeddings)
    batch = next(build_batches(data, cfg, np.random.default_rng(seed)))
    return cfg, data, batch
