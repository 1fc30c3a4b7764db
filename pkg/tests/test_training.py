import json

import numpy as np
import pytest

from gtrec.corpus import SplitSpec
from gtrec.errors import EmptyPool, GradCheckFailed
from gtrec.model import BackboneConfig, variant_from_name
from gtrec import autograd as ag
from gtrec.synth import make_world
from gtrec.training import (
    Adam, EncodedSequence, TrainConfig, build_batches, clip_grad_norm, load_config,
    prepare_for_config, run_grad_check, train, training_sequences,
)

from helpers import tiny_setup

SMALL = BackboneConfig(d_model=16, n_layers=1, n_heads=1, max_seq_len=6, dropout_rate=0.0)


def _config(variant="SASRec", seed=0, **kw):
    kw.setdefault("backbone", SMALL)
    kw.setdefault("split", SplitSpec("general", min_history=3))
    kw.setdefault("batch_size", 8)
    return TrainConfig(variant=variant_from_name(variant), seed=seed, **kw)


def _world(n_users=20, seed=0):
    return make_world(n_users=n_users, n_items=30, n_themes=3, dim=8, n_days=12,
                      events_per_user=(6, 10), seed=seed)


def _data(cfg, world):
    return prepare_for_config(cfg, world.log, world.item_embeddings, world.context_embeddings)


def test_training_loss_decreases_on_twenty_users():
    world = _world()
    cfg = _config(max_epochs=5, patience=10, lr=1e-2)
    res = train(cfg, _data(cfg, world))
    assert len(res.log) == 5
    assert res.log[-1]["train_loss"] < res.log[0]["train_loss"]
    assert res.log[-1]["probe_loss"] < res.log[0]["probe_loss"]


@pytest.mark.parametrize("variant", ["SASRec", "Id+M+GT", "Loss-[Pairwise_rand]"])
def test_same_seed_gives_bit_identical_checkpoints(variant):
    world = _world()
    cfg = _config(variant, max_epochs=2, backbone=BackboneConfig(16, 1, 1, 6, 0.2))
    a = train(cfg, _data(cfg, world)).checkpoint.to_bytes()
    b = train(cfg, _data(cfg, world)).checkpoint.to_bytes()
    assert a == b
    other = _config(variant, seed=1, max_epochs=2, backbone=BackboneConfig(16, 1, 1, 6, 0.2))
    assert train(other, _data(other, world)).checkpoint.to_bytes() != a


def test_zero_lr_keeps_probe_loss_constant():
    world = _world()
    cfg = _config(max_epochs=4, lr=0.0, backbone=BackboneConfig(16, 1, 1, 6, 0.2))
    res = train(cfg, _data(cfg, world))
    probes = [r["probe_loss"] for r in res.log]
    assert len(set(probes)) == 1
    assert len({r["val_ndcg@10"] for r in res.log}) == 1


def test_early_stopping_and_best_epoch_restored():
    world = _world()
    cfg = _config(max_epochs=30, patience=2, lr=0.0)
    res = train(cfg, _data(cfg, world))
    # nothing changes, so the first epoch is best and patience ends the run
    assert res.best_epoch == 1
    assert len(res.log) == 3
    assert res.checkpoint.meta["best_epoch"] == 1


def test_log_records_have_expected_keys():
    world = _world()
    cfg = _config("Loss-[BCE]", max_epochs=1)
    rec = train(cfg, _data(cfg, world)).log[0]
    for key in ("epoch", "train_loss", "rank_loss", "probe_loss", "val_ndcg@10", "val_hr@10",
                "aux_loss", "aux_provenance", "best_epoch"):
        assert key in rec
    json.dumps(rec)
    assert set(rec["aux_provenance"]) <= {"temporal_window", "semantic_pool", "uniform"}


def test_abc_sequence_gives_input_ab_positive_bc():
    cfg, data, _ = tiny_setup("SASRec")
    seqs = {"u": EncodedSequence(np.array([1, 2, 3]), np.array([1, 1, 1]), np.array([0, 1, 2]))}
    batch = next(build_batches(data, cfg, np.random.default_rng(0), seqs, shuffle=False))
    L = cfg.backbone.max_seq_len
    assert batch.inputs[0].tolist() == [0] * (L - 2) + [1, 2]
    assert batch.positives[0].tolist() == [0] * (L - 2) + [2, 3]
    assert batch.positives[0, -1] == 3
    assert (batch.negatives[0, : L - 2] == 0).all()
    assert not np.isin(batch.negatives[0, L - 2:], [1, 2, 3]).any()


@pytest.mark.parametrize("variant", ["Loss-[BCE]", "Loss-[Pairwise_sem]"])
def test_aux_anchor_has_exactly_n_neg_negatives(variant):
    cfg, data, batch = tiny_setup(variant, n_neg_aux=4)
    assert batch.aux_negatives.shape == (len(batch.users), 4)
    assert len(batch.aux_provenance) == len(batch.users)
    assert (batch.aux_negatives >= 1).all()


def test_non_aux_variants_have_no_aux_batch():
    _, _, batch = tiny_setup("Id+M")
    assert batch.aux_items is None and batch.aux_provenance == ()


def test_full_pass_over_hundred_users():
    world = make_world(n_users=100, n_items=60, n_themes=4, dim=8, n_days=20, events_per_user=(5, 9), seed=3)
    cfg = _config("Loss-[Pairwise_rand]", n_neg=3, batch_size=16)
    data = _data(cfg, world)
    seqs = training_sequences(data)
    assert len(seqs) == 100
    seen = []
    for batch in build_batches(data, cfg, np.random.default_rng(0)):
        for r, u in enumerate(batch.users):
            seen.append(u)
            history = set(data.user_items[u].tolist())
            assert batch.positives[r, -1] == seqs[u].items[-1]
            negs = batch.negatives[r][batch.mask[r]]
            assert not np.isin(negs, list(history)).any()
            assert not np.isin(batch.aux_negatives[r], list(history)).any()
    assert sorted(seen) == sorted(seqs)


def test_strict_pools_raise_with_user_context():
    world = _world()
    cfg = _config("Loss-[Pairwise_rand]", window_days=1e-6, strict_pools=True)
    data = _data(cfg, world)
    with pytest.raises(EmptyPool, match="user"):
        next(build_batches(data, cfg, np.random.default_rng(0)))
    lenient = _config("Loss-[Pairwise_rand]", window_days=1e-6)
    batch = next(build_batches(data, lenient, np.random.default_rng(0)))
    assert set(batch.aux_provenance) == {"uniform"}


def test_frozen_tables_unchanged_after_training():
    world = _world()
    cfg = _config("Id+M+GT", max_epochs=2)
    data = _data(cfg, world)
    meta, ctx = data.item_meta.copy(), data.context_table.copy()
    res = train(cfg, data)
    np.testing.assert_array_equal(res.model.item_meta, meta)
    np.testing.assert_array_equal(res.model.context_table, ctx)


def test_grad_check_mode_passes_and_aborts_on_broken_rule():
    cfg, data, batch = tiny_setup("Id+M+GT", grad_check_mode=True, max_epochs=1)
    res = train(cfg, data)
    assert res.grad_check is not None and res.grad_check.passed
    with ag.override_backward("layer_norm", lambda out, g: (g,)):
        with pytest.raises(GradCheckFailed):
            train(cfg, data)


def test_run_grad_check_every_parameter():
    cfg, data, batch = tiny_setup("Loss-[Cos]")
    from gtrec.training import build_model
    rep = run_grad_check(build_model(cfg, data), batch, cfg)
    names = {p.name for p in rep.params}
    assert {"item_emb", "F1.weight", "Pt.weight", "pos_emb"} <= names


def test_adam_first_step_moves_by_lr_times_sign():
    p = ag.Tensor(np.array([1.0, -1.0]), requires_grad=True, dtype=np.float64)
    p.grad = np.array([3.0, -0.5])
    Adam({"p": p}, lr=0.1, eps=0.0).step()
    np.testing.assert_allclose(p.data, [0.9, -0.9])


def test_clip_grad_norm_scales_to_max():
    p = ag.Tensor(np.zeros(2), requires_grad=True, dtype=np.float64)
    p.grad = np.array([3.0, 4.0])
    assert clip_grad_norm({"p": p}, 1.0) == pytest.approx(5.0)
    assert np.linalg.norm(p.grad) == pytest.approx(1.0)


def test_config_invariants():
    with pytest.raises(ValueError):
        TrainConfig(lr=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(patience=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rate": 1})


def test_load_config_toml_and_json(tmp_path):
    (tmp_path / "c.toml").write_text(
        'variant = "Loss-[Cos]"\nlambda_aux = 0.5\nlr = 0.002\nseed = 4\n'
        '[backbone]\nd_model = 16\nmax_seq_len = 8\n[split]\nmode = "explorer"\n'
    )
    cfg = load_config(tmp_path / "c.toml")
    assert cfg.variant.aux_kind == "cosine" and cfg.variant.lambda_aux == 0.5
    assert cfg.lr == 0.002 and cfg.seed == 4
    assert cfg.backbone.d_model == 16 and cfg.split.mode == "explorer"
    (tmp_path / "c.json").write_text(json.dumps({"variant": "M", "batch_size": 7}))
    assert load_config(tmp_path / "c.json").batch_size == 7
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
