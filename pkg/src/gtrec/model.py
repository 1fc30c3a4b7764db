"""Self-attentive sequential recommender and its geo-temporal variants.

Architectures
-------------
baseline_id    learned item ids into a causal Transformer; candidates are id rows.
metadata_only  frozen metadata rows projected by ``F`` replace the ids (M).
meta_gt        as metadata_only; candidates become ``F(m_j + t_j)`` (M+GT).
id_meta        tokens ``F1([id_i || m_i])`` (Id+M).
id_meta_gt     as id_meta; candidates become ``z_j + F2(t_j)`` (Id+M+GT).
aux_loss       id_meta plus an alignment loss between projected context vectors
               and item tokens (Loss-[...]).

Index 0 of every item/context table is padding.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import SeqTooLong, UnknownItem, VariantMismatch

ARCHITECTURES = ("baseline_id", "metadata_only", "meta_gt", "id_meta", "id_meta_gt", "aux_loss")
AUX_KINDS = ("none", "bce", "cosine", "pairwise_rand", "pairwise_sem")
GT_SCORING = ("meta_gt", "id_meta_gt")
USES_IDS = ("baseline_id", "id_meta", "id_meta_gt", "aux_loss")
USES_META = ("metadata_only", "meta_gt", "id_meta", "id_meta_gt", "aux_loss")


@dataclass(frozen=True)
class BackboneConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 1
    max_seq_len: int = 50
    dropout_rate: float = 0.2

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.max_seq_len < 2:
            raise ValueError("max_seq_len must be >= 2")


@dataclass(frozen=True)
class VariantConfig:
    architecture: str = "baseline_id"
    aux_kind: str = "none"
    gt_at_train: bool = False
    gt_at_infer: bool = False
    lambda_aux: float = 0.1
    # also add t_i to history tokens (meta_gt / id_meta_gt only)
    gt_input: bool = False

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.aux_kind not in AUX_KINDS:
            raise ValueError(f"unknown aux kind {self.aux_kind!r}")
        if (self.aux_kind != "none") != (self.architecture == "aux_loss"):
            raise ValueError("aux_kind must be set exactly when architecture is aux_loss")
        if self.lambda_aux < 0:
            raise ValueError("lambda_aux must be >= 0")
        if self.architecture not in GT_SCORING and (self.gt_at_infer or self.gt_input):
            raise ValueError(f"{self.architecture} has no geo-temporal scoring path")

    @property
    def uses_gt(self) -> bool:
        return self.architecture == "aux_loss" or (
            self.architecture in GT_SCORING and (self.gt_at_train or self.gt_at_infer)
        )


VARIANTS: dict[str, VariantConfig] = {
    "SASRec": VariantConfig("baseline_id"),
    "M": VariantConfig("metadata_only"),
    "Id+M": VariantConfig("id_meta"),
    "Id+M+GT_train": VariantConfig("id_meta_gt", gt_at_train=True, gt_at_infer=False),
    "Id+M+GT": VariantConfig("id_meta_gt", gt_at_train=True, gt_at_infer=True),
    "M+GT_train": VariantConfig("meta_gt", gt_at_train=True, gt_at_infer=False),
    "M+GT": VariantConfig("meta_gt", gt_at_train=True, gt_at_infer=True),
    "Loss-[BCE]": VariantConfig("aux_loss", aux_kind="bce", gt_at_train=True),
    "Loss-[Cos]": VariantConfig("aux_loss", aux_kind="cosine", gt_at_train=True),
    "Loss-[Pairwise_rand]": VariantConfig("aux_loss", aux_kind="pairwise_rand", gt_at_train=True),
    "Loss-[Pairwise_sem]": VariantConfig("aux_loss", aux_kind="pairwise_sem", gt_at_train=True),
}


def variant_from_name(name: str) -> VariantConfig:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}") from None


class ItemVocab:
    """Item key <-> row index; keys sorted ascending, index 0 reserved for padding."""

    def __init__(self, keys):
        self.keys = tuple(sorted(set(str(k) for k in keys)))
        self.index = {k: i + 1 for i, k in enumerate(self.keys)}

    def __len__(self) -> int:
        return len(self.keys)

    def encode(self, items) -> list[int]:
        try:
            return [self.index[i] for i in items]
        except KeyError as exc:
            raise UnknownItem(f"unknown item {exc.args[0]!r}") from None

    def decode(self, idx) -> list[str]:
        return [self.keys[i - 1] for i in idx]


def _glorot(rng, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def score(h, x) -> float:
    """Relevance of candidate representation ``x`` for user state ``h``."""
    h = np.asarray(h, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if h.shape != x.shape:
        from .errors import DimMismatch
        raise DimMismatch(f"{h.shape} vs {x.shape}")
    return float(h @ x)


class SeqRecModel:
    """Parameters plus frozen feature tables for one variant.

    ``item_meta`` is (n_items + 1, d_embed) with a zero padding row;
    ``context_table`` is (n_contexts + 1, d_embed) likewise; ``item_profile``
    holds one context vector per item used for candidates whose own
    interaction context is unknown (negatives and inference).
    """

    def __init__(
        self,
        backbone: BackboneConfig,
        variant: VariantConfig,
        n_items: int,
        item_meta: np.ndarray | None = None,
        context_table: np.ndarray | None = None,
        item_profile: np.ndarray | None = None,
        seed: int = 0,
        dtype=np.float32,
    ):
        self.backbone = backbone
        self.variant = variant
        self.n_items = n_items
        self.seed = seed
        self.dtype = np.dtype(dtype).type
        arch = variant.architecture
        if arch in USES_META and item_meta is None:
            raise VariantMismatch(f"{arch} needs item metadata embeddings")
        if variant.uses_gt and context_table is None:
            raise VariantMismatch(f"{arch} with geo-temporal features needs a context table")
        self.item_meta = None if item_meta is None else np.array(item_meta, dtype=self.dtype)
        self.context_table = None if context_table is None else np.array(context_table, dtype=self.dtype)
        self.item_profile = None if item_profile is None else np.array(item_profile, dtype=self.dtype)
        for arr in (self.item_meta, self.context_table, self.item_profile):
            if arr is not None:
                arr.setflags(write=False)
        d = backbone.d_model
        self.d_embed = (
            self.item_meta.shape[1] if self.item_meta is not None
            else self.context_table.shape[1] if self.context_table is not None else d
        )
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(seed))

    # ------------------------------------------------------------ parameters

    def _add(self, name, value):
        self.params[name] = Tensor(value, requires_grad=True, name=name, dtype=self.dtype)

    def _init_params(self, rng):
        b, arch = self.backbone, self.variant.architecture
        d, de = b.d_model, self.d_embed
        if arch == "baseline_id":
            self.d_id = d
        elif arch in USES_IDS:
            self.d_id = d // 2
        else:
            self.d_id = 0
        if self.d_id:
            table = rng.normal(0.0, 1.0 / np.sqrt(self.d_id), size=(self.n_items + 1, self.d_id))
            table[0] = 0.0
            self._add("item_emb", table)
        if arch in ("metadata_only", "meta_gt") and de != d:
            self._add("F.weight", _glorot(rng, de, d))
        if arch in ("id_meta", "id_meta_gt", "aux_loss"):
            self._add("F1.weight", _glorot(rng, self.d_id + de, d))
        if arch == "id_meta_gt":
            self._add("F2.weight", np.zeros((de, d)))
        if arch == "aux_loss":
            self._add("Pt.weight", _glorot(rng, de, d))
        self._add("pos_emb", rng.normal(0.0, 1.0 / np.sqrt(d), size=(b.max_seq_len, d)))
        for layer in range(b.n_layers):
            p = f"blocks.{layer}."
            self._add(p + "ln1.gamma", np.ones(d))
            self._add(p + "ln1.beta", np.zeros(d))
            for w in ("q", "k", "v", "o"):
                self._add(p + f"attn.W{w}", _glorot(rng, d, d))
                self._add(p + f"attn.b{w}", np.zeros(d))
            self._add(p + "ln2.gamma", np.ones(d))
            self._add(p + "ln2.beta", np.zeros(d))
            self._add(p + "ffn.W1", _glorot(rng, d, d))
            self._add(p + "ffn.b1", np.zeros(d))
            self._add(p + "ffn.W2", _glorot(rng, d, d))
            self._add(p + "ffn.b2", np.zeros(d))
        self._add("ln_final.gamma", np.ones(d))
        self._add("ln_final.beta", np.zeros(d))

    def parameter_census(self) -> dict[str, int]:
        return {k: int(v.data.size) for k, v in self.params.items()}

    def n_parameters(self) -> int:
        return sum(self.parameter_census().values())

    def astype(self, dtype) -> "SeqRecModel":
        """Copy of this model with parameters and tables cast to ``dtype``."""
        clone = object.__new__(SeqRecModel)
        clone.__dict__.update(self.__dict__)
        clone.dtype = np.dtype(dtype).type
        for attr in ("item_meta", "context_table", "item_profile"):
            arr = getattr(self, attr)
            if arr is not None:
                arr = arr.astype(clone.dtype)
                arr.setflags(write=False)
            setattr(clone, attr, arr)
        clone.params = {
            k: Tensor(v.data.astype(clone.dtype), requires_grad=True, name=k, dtype=clone.dtype)
            for k, v in self.params.items()
        }
        return clone

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        if set(state) != set(self.params):
            raise VariantMismatch("parameter names do not match the architecture")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise VariantMismatch(f"shape mismatch for {k}: {v.shape}")
            self.params[k].data = np.array(v, dtype=self.dtype)

    # ------------------------------------------------------------ pieces

    def _const(self, arr) -> Tensor:
        return Tensor(arr, dtype=self.dtype)

    def _F(self, x: Tensor) -> Tensor:
        w = self.params.get("F.weight")
        return x if w is None else ag.matmul(x, w)

    def _meta(self, items) -> Tensor:
        return self._const(self.item_meta[items])

    def _ctx(self, ctx_idx) -> Tensor:
        return self._const(self.context_table[ctx_idx])

    def item_tokens(self, items, ctx_idx=None, use_gt: bool = False) -> Tensor:
        """Input-space representation of item indices (any leading shape)."""
        arch = self.variant.architecture
        items = np.asarray(items, dtype=np.int64)
        if arch == "baseline_id":
            return ag.embedding_lookup(self.params["item_emb"], items)
        if arch in ("metadata_only", "meta_gt"):
            m = self._meta(items)
            if use_gt and self.variant.gt_input and ctx_idx is not None:
                m = ag.add(m, self._ctx(ctx_idx))
            return self._F(m)
        ids = ag.embedding_lookup(self.params["item_emb"], items)
        z = ag.matmul(ag.concat([ids, self._meta(items)], axis=-1), self.params["F1.weight"])
        if use_gt and self.variant.gt_input and ctx_idx is not None and "F2.weight" in self.params:
            z = ag.add(z, ag.matmul(self._ctx(ctx_idx), self.params["F2.weight"]))
        return z

    def encode(self, seqs, ctx=None, training: bool = False, rng=None, use_gt=None) -> Tensor:
        """Hidden states (B, L, d) for left-padded index sequences (B, L)."""
        b = self.backbone
        seqs = np.asarray(seqs, dtype=np.int64)
        if seqs.ndim == 1:
            seqs = seqs[None, :]
        B, L = seqs.shape
        if L > b.max_seq_len:
            raise SeqTooLong(f"sequence length {L} exceeds max_seq_len {b.max_seq_len}")
        if seqs.max(initial=0) > self.n_items or seqs.min(initial=0) < 0:
            raise UnknownItem("item index outside the vocabulary")
        if use_gt is None:
            use_gt = self.variant.gt_at_train if training else self.variant.gt_at_infer
        valid = seqs > 0
        keep = Tensor(valid[..., None].astype(self.dtype), dtype=self.dtype)

        x = self.item_tokens(seqs, ctx, use_gt=use_gt)
        x = ag.add(x, self.params["pos_emb"][b.max_seq_len - L:])
        x = ag.dropout(x, b.dropout_rate, rng, training)
        x = ag.mul(x, keep)

        causal = ag.causal_mask(L)
        mask = (causal[None, :, :] & valid[:, None, :]) | np.eye(L, dtype=bool)[None]
        mask = mask[:, None, :, :]  # broadcast over heads
        H = b.n_heads
        dh = b.d_model // H
        for layer in range(b.n_layers):
            p = f"blocks.{layer}."
            P = self.params
            q_in = ag.layer_norm(x, P[p + "ln1.gamma"], P[p + "ln1.beta"])
            q = ag.linear(q_in, P[p + "attn.Wq"], P[p + "attn.bq"])
            k = ag.linear(x, P[p + "attn.Wk"], P[p + "attn.bk"])
            v = ag.linear(x, P[p + "attn.Wv"], P[p + "attn.bv"])
            split = lambda t: ag.transpose(ag.reshape(t, (B, L, H, dh)), (0, 2, 1, 3))  # noqa: E731
            q, k, v = split(q), split(k), split(v)
            att = ag.mul(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
            att = ag.softmax(att, mask)
            att = ag.dropout(att, b.dropout_rate, rng, training)
            ctx_out = ag.reshape(ag.transpose(ag.matmul(att, v), (0, 2, 1, 3)), (B, L, b.d_model))
            ctx_out = ag.linear(ctx_out, P[p + "attn.Wo"], P[p + "attn.bo"])
            x = ag.add(q_in, ag.dropout(ctx_out, b.dropout_rate, rng, training))

            y = ag.layer_norm(x, P[p + "ln2.gamma"], P[p + "ln2.beta"])
            y = ag.relu(ag.linear(y, P[p + "ffn.W1"], P[p + "ffn.b1"]))
            y = ag.dropout(y, b.dropout_rate, rng, training)
            y = ag.linear(y, P[p + "ffn.W2"], P[p + "ffn.b2"])
            x = ag.add(x, ag.dropout(y, b.dropout_rate, rng, training))
            x = ag.mul(x, keep)
        return ag.layer_norm(x, self.params["ln_final.gamma"], self.params["ln_final.beta"])

    forward = encode

    def candidate_repr(self, items, t=None, with_context: bool = False) -> Tensor:
        """Output-space representation x_j of candidate item indices.

        ``t`` holds one context vector per candidate (same leading shape as
        ``items``); it is read only when ``with_context`` is set on a variant
        with a geo-temporal scoring path.
        """
        arch = self.variant.architecture
        if with_context and arch not in GT_SCORING:
            raise VariantMismatch(f"{arch} has no with-context candidate representation")
        items = np.asarray(items, dtype=np.int64)
        if arch in ("metadata_only", "meta_gt"):
            m = self._meta(items)
            if with_context:
                m = ag.add(m, self._const(t))
            return self._F(m)
        z = self.item_tokens(items)
        if with_context:
            z = ag.add(z, ag.matmul(self._const(t), self.params["F2.weight"]))
        return z

    def profile_of(self, items) -> np.ndarray:
        if self.item_profile is None:
            raise VariantMismatch("model has no item context profiles")
        return self.item_profile[np.asarray(items, dtype=np.int64)]

    # ------------------------------------------------------------ scoring

    def last_hidden(self, seqs, ctx=None, use_gt=None) -> np.ndarray:
        h = self.encode(seqs, ctx, training=False, use_gt=use_gt)
        return h.data[:, -1, :]

    def catalog_repr(self, with_context: bool) -> np.ndarray:
        """(n_items + 1, d) candidate matrix for every item (row 0 is padding)."""
        items = np.arange(self.n_items + 1)
        t = self.profile_of(items) if with_context else None
        return self.candidate_repr(items, t, with_context).data

    def full_scores(self, seqs, ctx=None, with_context: bool | None = None) -> np.ndarray:
        """Scores (B, n_items) over the whole catalog, column j -> item index j + 1."""
        if with_context is None:
            with_context = self.variant.gt_at_infer
        with_context = with_context and self.variant.architecture in GT_SCORING
        h = self.last_hidden(seqs, ctx, use_gt=with_context)
        X = self.catalog_repr(with_context)
        return (h.astype(np.float64) @ X[1:].astype(np.float64).T)


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"GTCK"


@dataclass
class Checkpoint:
    backbone: BackboneConfig
    variant: VariantConfig
    item_keys: tuple[str, ...]
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: SeqRecModel, item_keys, meta=None) -> "Checkpoint":
        buffers = {}
        if model.item_profile is not None:
            buffers["item_profile"] = model.item_profile.copy()
        return cls(model.backbone, model.variant, tuple(item_keys), model.state_dict(),
                   buffers, dict(meta or {}))

    def build_model(self, item_meta=None, context_table=None) -> SeqRecModel:
        model = SeqRecModel(
            self.backbone, self.variant, len(self.item_keys), item_meta, context_table,
            self.buffers.get("item_profile"), seed=self.meta.get("seed", 0),
            dtype=next(iter(self.params.values())).dtype,
        )
        model.load_state_dict(self.params)
        return model

    def header(self) -> dict:
        blobs = [
            {"kind": kind, "name": k, "dtype": str(v.dtype), "shape": list(v.shape)}
            for kind, group in (("param", self.params), ("buffer", self.buffers))
            for k, v in sorted(group.items())
        ]
        return {
            "format": 1,
            "backbone": asdict(self.backbone),
            "variant": asdict(self.variant),
            "item_keys": list(self.item_keys),
            "meta": self.meta,
            "blobs": blobs,
        }

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True).encode("utf-8")
        parts = [CKPT_MAGIC, struct.pack("<Q", len(head)), head]
        for kind, group in (("param", self.params), ("buffer", self.buffers)):
            for k in sorted(group):
                parts.append(np.ascontiguousarray(group[k]).astype(group[k].dtype.newbyteorder("<")).tobytes())
        return b"".join(parts)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        data = Path(path).read_bytes()
        if data[:4] != CKPT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint")
        (n,) = struct.unpack_from("<Q", data, 4)
        head = json.loads(data[12:12 + n].decode("utf-8"))
        off = 12 + n
        params, buffers = {}, {}
        for blob in head["blobs"]:
            dt = np.dtype(blob["dtype"]).newbyteorder("<")
            count = int(np.prod(blob["shape"])) if blob["shape"] else 1
            arr = np.frombuffer(data, dtype=dt, count=count, offset=off).reshape(blob["shape"])
            off += count * dt.itemsize
            (params if blob["kind"] == "param" else buffers)[blob["name"]] = arr.astype(dt.newbyteorder("="))
        if off != len(data):
            raise ValueError("checkpoint has trailing bytes")
        return cls(
            BackboneConfig(**head["backbone"]),
            VariantConfig(**head["variant"]),
            tuple(head["item_keys"]),
            params,
            buffers,
            head["meta"],
        )
