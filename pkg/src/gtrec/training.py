"""Data preparation, batch assembly and the optimization loop."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .corpus import Interaction, Split, SplitSpec, build_histories, make_split
from .embeddings import EmbeddingMatrix
from .enrichment import bucket_of, context_key
from .errors import EmptyPool, GradCheckFailed, MissingContext, MissingEmbedding, NonFinite
from .evaluation import ndcg_from_ranks, hits_from_ranks, target_ranks
from .losses import AuxBatch, aux_loss, ranking_loss, total_loss
from .model import (
    GT_SCORING,
    BackboneConfig,
    Checkpoint,
    ItemVocab,
    SeqRecModel,
    VariantConfig,
    variant_from_name,
)
from .sampling import WindowIndex, sample_uniform, semantic_pool, _draw

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------- configuration


@dataclass
class TrainConfig:
    variant: VariantConfig = field(default_factory=VariantConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    bucket: str = "day"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    batch_size: int = 128
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    grad_check_mode: bool = False
    n_neg: int = 1
    n_neg_aux: int = 5
    window_days: float = 7
    pool_fraction: float = 0.2
    margin: float = 0.5
    temperature: float = 5.0
    clip_norm: float = 5.0
    strict_pools: bool = False
    val_k: int = 10

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        v = d.pop("variant", None)
        if isinstance(v, str):
            variant = variant_from_name(v)
        else:
            variant = VariantConfig(**(v or {}))
        if "lambda_aux" in d:
            variant = replace(variant, lambda_aux=float(d.pop("lambda_aux")))
        backbone = BackboneConfig(**d.pop("backbone", {}))
        split = SplitSpec(**d.pop("split", {}))
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(variant=variant, backbone=backbone, split=split, **d)


def load_config(path: str | Path) -> TrainConfig:
    path = Path(path)
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # python < 3.11
            import tomli as tomllib
        with path.open("rb") as fh:
            return TrainConfig.from_dict(tomllib.load(fh))
    return TrainConfig.from_dict(json.loads(path.read_text()))


# ---------------------------------------------------------------- prepared data


@dataclass
class EncodedSequence:
    items: np.ndarray
    contexts: np.ndarray
    timestamps: np.ndarray


@dataclass
class PreparedData:
    """Index-coded view of a split plus the frozen feature tables a model needs."""

    split: Split
    vocab: ItemVocab
    sequences: dict[str, EncodedSequence]
    item_meta: np.ndarray | None
    context_keys: tuple[str, ...]
    context_table: np.ndarray | None
    item_profile: np.ndarray | None
    window: WindowIndex
    user_items: dict[str, np.ndarray]
    bucket: str
    max_len: int
    test_contexts: dict[str, int] = field(default_factory=dict)

    @property
    def n_items(self) -> int:
        return len(self.vocab)


def prepare_data(
    log: Sequence,
    split_spec: SplitSpec,
    max_len: int,
    items: EmbeddingMatrix | None = None,
    contexts: EmbeddingMatrix | None = None,
    bucket: str = "day",
    require_meta: bool = False,
    require_contexts: bool = False,
) -> PreparedData:
    """Build histories and the split, then index-code everything for training.

    ``max_len`` bounds the per-user history (validation and test items
    included). Item context profiles are the normalized mean context vector of
    each item's training events.
    """
    histories = build_histories(log, max_len)
    split = make_split(histories, split_spec)
    vocab = ItemVocab(x.item_id for x in log)

    item_meta = None
    if items is not None:
        missing = [k for k in vocab.keys if k not in items]
        if missing and require_meta:
            raise MissingEmbedding(f"{len(missing)} item(s) lack metadata rows, e.g. {missing[:5]}")
        item_meta = np.zeros((len(vocab) + 1, items.dim), dtype=np.float32)
        for k, i in vocab.index.items():
            row = items.get(k)
            if row is not None:
                item_meta[i] = row
    elif require_meta:
        raise MissingEmbedding("variant needs item metadata embeddings")

    keys_needed = set()
    for h in split.train.values():
        keys_needed.update(context_key(bucket_of(t, bucket), loc) for t, loc in zip(h.timestamps, h.locations))
    for c in split.test.values():
        keys_needed.add(context_key(bucket_of(c.timestamp_utc, bucket), c.location))
    context_keys = tuple(sorted(keys_needed))
    ctx_index = {k: i + 1 for i, k in enumerate(context_keys)}
    context_table = None
    if contexts is not None:
        missing = [k for k in context_keys if k not in contexts]
        if missing and require_contexts:
            raise MissingContext(missing)
        context_table = np.zeros((len(context_keys) + 1, contexts.dim), dtype=np.float32)
        for k, i in ctx_index.items():
            row = contexts.get(k)
            if row is not None:
                context_table[i] = row
    elif require_contexts:
        raise MissingContext(context_keys)

    sequences = {}
    for u, h in split.train.items():
        sequences[u] = EncodedSequence(
            np.array(vocab.encode(h.items), dtype=np.int64),
            np.array([ctx_index[context_key(bucket_of(t, bucket), loc)]
                      for t, loc in zip(h.timestamps, h.locations)], dtype=np.int64),
            np.array(h.timestamps, dtype=np.int64),
        )
    test_contexts = {
        u: ctx_index[context_key(bucket_of(c.timestamp_utc, bucket), c.location)]
        for u, c in split.test.items()
    }

    item_profile = None
    if context_table is not None:
        acc = np.zeros((len(vocab) + 1, context_table.shape[1]), dtype=np.float64)
        for s in sequences.values():
            np.add.at(acc, s.items, context_table[s.contexts].astype(np.float64))
        norms = np.linalg.norm(acc, axis=1, keepdims=True)
        item_profile = np.divide(acc, norms, out=np.zeros_like(acc), where=norms > 0).astype(np.float32)

    # negatives may never come from anything the user ever consumed
    user_items = {}
    for u in split.train:
        h = histories[u]
        user_items[u] = np.unique(np.array(vocab.encode(h.items), dtype=np.int64))
    train_log = [Interaction(u, item, ts, loc) for u, h in sorted(split.train.items())
                 for item, ts, loc in h.events()]
    window = WindowIndex(train_log, dict(vocab.index))
    return PreparedData(split, vocab, sequences, item_meta, context_keys, context_table,
                        item_profile, window, user_items, bucket, max_len, test_contexts)


# ---------------------------------------------------------------- batches


@dataclass
class Batch:
    users: list[str]
    inputs: np.ndarray
    input_ctx: np.ndarray
    positives: np.ndarray
    positive_ctx: np.ndarray
    negatives: np.ndarray
    aux_items: np.ndarray | None = None
    aux_ctx: np.ndarray | None = None
    aux_negatives: np.ndarray | None = None
    aux_provenance: tuple[str, ...] = ()

    @property
    def mask(self) -> np.ndarray:
        return self.positives > 0


def training_sequences(data: PreparedData, hold_out_validation: bool = True) -> dict[str, EncodedSequence]:
    """Per-user sequences used for next-item training (validation item removed)."""
    out = {}
    for u, s in data.sequences.items():
        if hold_out_validation:
            s = EncodedSequence(s.items[:-1], s.contexts[:-1], s.timestamps[:-1])
        if len(s.items) >= 2:
            out[u] = s
    return out


def build_batches(
    data: PreparedData,
    config: TrainConfig,
    rng: np.random.Generator,
    sequences: Mapping[str, EncodedSequence] | None = None,
    shuffle: bool = True,
) -> Iterator[Batch]:
    """Yield next-item batches: inputs ``s[:-1]``, positives ``s[1:]``, sampled negatives.

    Aux-loss variants also get one anchor per sequence (its last input event)
    with ``n_neg_aux`` negatives from the temporal-window or semantic sampler.
    """
    if sequences is None:
        sequences = training_sequences(data)
    users = sorted(sequences)
    if not users:
        raise EmptyPool("no training sequences with at least two events")
    if shuffle:
        users = [users[i] for i in rng.permutation(len(users))]
    L = config.backbone.max_seq_len
    n_items = data.n_items
    variant = config.variant
    want_aux = variant.architecture == "aux_loss"
    meta_rows = data.item_meta[1:] if (want_aux and data.item_meta is not None) else None

    for lo in range(0, len(users), config.batch_size):
        chunk = users[lo:lo + config.batch_size]
        B = len(chunk)
        inputs = np.zeros((B, L), dtype=np.int64)
        input_ctx = np.zeros((B, L), dtype=np.int64)
        positives = np.zeros((B, L), dtype=np.int64)
        positive_ctx = np.zeros((B, L), dtype=np.int64)
        exclude = np.zeros((B, n_items + 1), dtype=bool)
        exclude[:, 0] = True
        for r, u in enumerate(chunk):
            s = sequences[u]
            inp, pos = s.items[:-1][-L:], s.items[1:][-L:]
            n = len(inp)
            inputs[r, L - n:] = inp
            input_ctx[r, L - n:] = s.contexts[:-1][-L:]
            positives[r, L - n:] = pos
            positive_ctx[r, L - n:] = s.contexts[1:][-L:]
            exclude[r, data.user_items.get(u, s.items)] = True
            exclude[r, s.items] = True
        negatives = sample_uniform(n_items, exclude, (B, L, config.n_neg), rng)
        negatives = np.where(positives[..., None] > 0, negatives, 0)
        batch = Batch(chunk, inputs, input_ctx, positives, positive_ctx, negatives)

        if want_aux:
            aux_items = inputs[:, -1].copy()
            aux_ctx = input_ctx[:, -1].copy()
            aux_neg = np.zeros((B, config.n_neg_aux), dtype=np.int64)
            provenance = []
            for r, u in enumerate(chunk):
                s = sequences[u]
                anchor_ts = int(s.timestamps[:-1][-1])
                try:
                    if variant.aux_kind == "pairwise_sem":
                        t = data.context_table[aux_ctx[r]]
                        pool = semantic_pool(t, meta_rows, config.pool_fraction, exclude[r, 1:]) + 1
                        if len(pool) == 0:
                            raise EmptyPool("semantic pool empty")
                        aux_neg[r], _ = _draw(pool, config.n_neg_aux, rng)
                        provenance.append("semantic_pool")
                    else:
                        uidx = data.window.user_index[u]
                        aux_neg[r], _ = data.window.sample(
                            uidx, anchor_ts, config.window_days, config.n_neg_aux, rng,
                            exclude=exclude[r].astype(np.uint8),
                        )
                        provenance.append("temporal_window")
                except EmptyPool as exc:
                    if config.strict_pools:
                        raise EmptyPool(f"user {u!r}: {exc}") from None
                    aux_neg[r] = sample_uniform(n_items, exclude[r:r + 1], (1, config.n_neg_aux), rng)[0]
                    provenance.append("uniform")
            batch.aux_items, batch.aux_ctx, batch.aux_negatives = aux_items, aux_ctx, aux_neg
            batch.aux_provenance = tuple(provenance)
        yield batch


# ---------------------------------------------------------------- loss


def batch_loss(model: SeqRecModel, batch: Batch, config: TrainConfig, training: bool = True,
               rng: np.random.Generator | None = None):
    """Total loss tensor and a dict of its float components."""
    v = model.variant
    h = model.encode(batch.inputs, batch.input_ctx, training=training, rng=rng, use_gt=v.gt_at_train)
    B, L, d = h.shape
    with_ctx = v.architecture in GT_SCORING and v.gt_at_train
    if with_ctx:
        xp = model.candidate_repr(batch.positives, model.context_table[batch.positive_ctx], True)
        xn = model.candidate_repr(batch.negatives, model.profile_of(batch.negatives), True)
    else:
        xp = model.candidate_repr(batch.positives)
        xn = model.candidate_repr(batch.negatives)
    s_pos = ag.sum(ag.mul(h, xp), axis=-1)
    s_neg = ag.sum(ag.mul(ag.reshape(h, (B, L, 1, d)), xn), axis=-1)
    rank = ranking_loss(s_pos, s_neg, batch.mask)
    parts = {"rank_loss": rank.item()}
    if v.architecture == "aux_loss" and batch.aux_items is not None:
        anchors = ag.matmul(Tensor(model.context_table[batch.aux_ctx], dtype=model.dtype),
                            model.params["Pt.weight"])
        aux_batch = AuxBatch(anchors, model.item_tokens(batch.aux_items),
                             model.item_tokens(batch.aux_negatives), batch.aux_provenance)
        aux = aux_loss(aux_batch, v.aux_kind, config.margin, config.temperature)
        parts["aux_loss"] = aux.item()
        loss = total_loss(rank, aux, v.lambda_aux)
    else:
        loss = rank
    parts["loss"] = loss.item()
    return loss, parts


# ---------------------------------------------------------------- optimizer


class Adam:
    def __init__(self, params: Mapping[str, Tensor], lr=1e-3, betas=(0.9, 0.98), eps=1e-8):
        self.params = params
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            if self.lr:
                upd = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
                p.data = (p.data - upd).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def clip_grad_norm(params: Mapping[str, Tensor], max_norm: float) -> float:
    total = float(np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum())
                              for p in params.values() if p.grad is not None)))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype)
    return total


# ---------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    model: SeqRecModel
    checkpoint: Checkpoint
    log: list[dict]
    best_epoch: int
    grad_check: object = None


def validation_metrics(model: SeqRecModel, data: PreparedData, k: int = 10) -> dict[str, float]:
    """NDCG@k / HR@k predicting each user's last training item from the items before it."""
    users = [u for u in sorted(data.sequences) if len(data.sequences[u].items) >= 2]
    if not users:
        return {"val_ndcg": 0.0, "val_hr": 0.0}
    L = model.backbone.max_seq_len
    seqs = np.zeros((len(users), L), dtype=np.int64)
    ctx = np.zeros((len(users), L), dtype=np.int64)
    targets = np.zeros(len(users), dtype=np.int64)
    for r, u in enumerate(users):
        s = data.sequences[u]
        inp, c = s.items[:-1][-L:], s.contexts[:-1][-L:]
        seqs[r, L - len(inp):] = inp
        ctx[r, L - len(c):] = c
        targets[r] = s.items[-1]
    ranks = target_ranks(model, seqs, ctx, targets, model.variant.gt_at_infer)
    return {"val_ndcg": float(ndcg_from_ranks(ranks, k).mean()),
            "val_hr": float(hits_from_ranks(ranks, k).mean())}


def history_len(config: TrainConfig) -> int:
    """Events kept per user: the model window plus the validation and test items."""
    return config.backbone.max_seq_len + 2


def prepare_for_config(config: TrainConfig, log, items=None, contexts=None) -> PreparedData:
    arch = config.variant.architecture
    return prepare_data(
        log, config.split, history_len(config), items, contexts, config.bucket,
        require_meta=arch != "baseline_id",
        require_contexts=config.variant.uses_gt,
    )


def build_model(config: TrainConfig, data: PreparedData, dtype=np.float32) -> SeqRecModel:
    return SeqRecModel(config.backbone, config.variant, data.n_items, data.item_meta,
                       data.context_table, data.item_profile, seed=config.seed, dtype=dtype)


def run_grad_check(model: SeqRecModel, batch: Batch, config: TrainConfig, tol: float = 1e-3,
                   max_coords: int = 16):
    m64 = model.astype(np.float64)
    return ag.grad_check(lambda: batch_loss(m64, batch, config, training=False)[0],
                         m64.params, tol=tol, max_coords=max_coords, seed=config.seed)


def train(config: TrainConfig, data: PreparedData, callback=None) -> TrainResult:
    """Adam with gradient clipping and early stopping on validation NDCG.

    The best-validation parameters are restored before the checkpoint is
    built. Everything random derives from ``config.seed``.
    """
    rng = np.random.default_rng(config.seed)
    model = build_model(config, data)
    frozen_before = {
        name: None if arr is None else arr.tobytes()
        for name, arr in (("item_meta", model.item_meta), ("context_table", model.context_table))
    }
    opt = Adam(model.params, config.lr, (config.beta1, config.beta2), config.adam_eps)
    sequences = training_sequences(data)

    probe_rng = np.random.default_rng([config.seed, 1])
    probe = next(build_batches(data, config, probe_rng, sequences, shuffle=False))

    gc_report = None
    if config.grad_check_mode:
        gc_report = run_grad_check(model, probe, config)
        if not gc_report.passed:
            raise GradCheckFailed(gc_report)

    history: list[dict] = []
    best_score, best_epoch, best_state, waited = -1.0, 0, model.state_dict(), 0
    step = 0
    for epoch in range(1, config.max_epochs + 1):
        losses, rank_losses, aux_losses = [], [], []
        provenance: dict[str, int] = {}
        for batch in build_batches(data, config, rng, sequences):
            opt.zero_grad()
            try:
                loss, parts = batch_loss(model, batch, config, training=True, rng=rng)
                loss.backward()
            except NonFinite as exc:
                raise NonFinite(f"epoch {epoch} step {step}: {exc}") from None
            clip_grad_norm(model.params, config.clip_norm)
            opt.step()
            step += 1
            losses.append(parts["loss"])
            rank_losses.append(parts["rank_loss"])
            if "aux_loss" in parts:
                aux_losses.append(parts["aux_loss"])
            for p in batch.aux_provenance:
                provenance[p] = provenance.get(p, 0) + 1
        probe_loss = batch_loss(model, probe, config, training=False)[1]["loss"]
        val = validation_metrics(model, data, config.val_k)
        record = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "rank_loss": float(np.mean(rank_losses)),
            "probe_loss": probe_loss,
            f"val_ndcg@{config.val_k}": val["val_ndcg"],
            f"val_hr@{config.val_k}": val["val_hr"],
        }
        if aux_losses:
            record["aux_loss"] = float(np.mean(aux_losses))
            record["aux_provenance"] = dict(sorted(provenance.items()))
        improved = val["val_ndcg"] > best_score
        if improved:
            best_score, best_epoch, best_state, waited = val["val_ndcg"], epoch, model.state_dict(), 0
        else:
            waited += 1
        record["best_epoch"] = best_epoch
        history.append(record)
        logger.info("epoch %d loss %.4f val_ndcg %.4f", epoch, record["train_loss"], val["val_ndcg"])
        if callback is not None:
            callback(record)
        if waited >= config.patience:
            break

    model.load_state_dict(best_state)
    for name, arr in (("item_meta", model.item_meta), ("context_table", model.context_table)):
        if (None if arr is None else arr.tobytes()) != frozen_before[name]:
            raise RuntimeError(f"frozen table {name} changed during training")
    ckpt = Checkpoint.from_model(model, data.vocab.keys, {
        "seed": config.seed,
        "best_epoch": best_epoch,
        "config": json.loads(json.dumps(config.to_dict())),
        "context_keys_sha": _keys_digest(data.context_keys),
    })
    return TrainResult(model, ckpt, history, best_epoch, gc_report)


def _keys_digest(keys) -> str:
    import hashlib
    return hashlib.sha256("\n".join(keys).encode()).hexdigest()


def write_log(path: str | Path, records: Sequence[dict]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
