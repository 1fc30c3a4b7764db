"""Ranking and auxiliary alignment losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import NonFinite

AUX_LOSS_KINDS = ("bce", "cosine", "pairwise")
DEFAULT_TEMPERATURE = 5.0
DEFAULT_MARGIN = 0.5


def _tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise NonFinite("loss inputs must be finite")
    return Tensor(arr, dtype=np.float64)


def _masked_mean(per: Tensor, mask) -> Tensor:
    if mask is None:
        return ag.mean(per)
    mask = np.asarray(mask, dtype=per.data.dtype)
    denom = max(float(mask.sum()), 1.0)
    return ag.mul(ag.sum(ag.mul(per, Tensor(mask, dtype=per.data.dtype))), 1.0 / denom)


def ranking_loss(s_pos, s_neg, mask=None) -> Tensor:
    """``-log sigmoid(s_pos) - mean_j log sigmoid(-s_neg_j)``, averaged over positions.

    ``s_neg`` carries the negatives on its last axis; ``mask`` selects the
    positions that count toward the average.
    """
    s_pos, s_neg = _tensor(s_pos), _tensor(s_neg)
    if s_neg.ndim == s_pos.ndim:
        s_neg = ag.reshape(s_neg, s_neg.shape + (1,))
    pos_term = ag.log_sigmoid(s_pos)
    neg_term = ag.mean(ag.log_sigmoid(ag.mul(s_neg, -1.0)), axis=-1)
    per = ag.mul(ag.add(pos_term, neg_term), -1.0)
    return _masked_mean(per, mask)


@dataclass
class AuxBatch:
    """Anchors (B, d) context vectors, positives (B, d), negatives (B, n_neg, d).

    Fields may be numpy arrays or tensors (already projected by a model).
    """

    anchors: object
    positives: object
    negatives: object
    provenance: tuple[str, ...] = ()
    anchor_items: np.ndarray | None = None
    negative_items: np.ndarray | None = None

    def __post_init__(self):
        a, p, n = (np.shape(getattr(x, "data", x)) for x in (self.anchors, self.positives, self.negatives))
        if a != p or len(n) != 3 or n[0] != a[0] or n[2] != a[1]:
            raise ValueError(f"inconsistent aux batch shapes {a}, {p}, {n}")
        if n[1] < 1:
            raise ValueError("aux batch needs at least one negative per anchor")

    @property
    def n_neg(self) -> int:
        return int(np.shape(getattr(self.negatives, "data", self.negatives))[1])


def similarities(batch: AuxBatch) -> tuple[Tensor, Tensor]:
    """Cosine similarity of each anchor to its positive (B,) and negatives (B, n_neg)."""
    a = ag.l2_normalize(_tensor(batch.anchors))
    p = ag.l2_normalize(_tensor(batch.positives))
    n = ag.l2_normalize(_tensor(batch.negatives))
    sim_pos = ag.sum(ag.mul(a, p), axis=-1)
    B, d = a.shape
    sim_neg = ag.sum(ag.mul(ag.reshape(a, (B, 1, d)), n), axis=-1)
    return sim_pos, sim_neg


def aux_loss(batch: AuxBatch, kind: str, margin: float = DEFAULT_MARGIN,
             temperature: float = DEFAULT_TEMPERATURE) -> Tensor:
    """Alignment loss between context anchors and same-item metadata positives.

    bce       cross-entropy of sigmoid(temperature * sim), positives labelled 1 and
              negatives 0 (negatives averaged per anchor)
    cosine    mean of 1 - sim(anchor, positive); negatives unused
    pairwise  mean over negatives of max(0, margin - sim_pos + sim_neg)
    """
    if kind in ("pairwise_rand", "pairwise_sem"):
        kind = "pairwise"
    if kind not in AUX_LOSS_KINDS:
        raise ValueError(f"unknown aux loss kind {kind!r}")
    sim_pos, sim_neg = similarities(batch)
    if kind == "cosine":
        return ag.mean(ag.sub(1.0, sim_pos))
    if kind == "bce":
        pos = ag.log_sigmoid(ag.mul(sim_pos, temperature))
        neg = ag.mean(ag.log_sigmoid(ag.mul(sim_neg, -temperature)), axis=-1)
        return ag.mul(ag.mean(ag.add(pos, neg)), -1.0)
    if margin <= 0:
        raise ValueError("pairwise aux loss needs margin > 0")
    B = sim_pos.shape[0]
    gap = ag.add(ag.sub(margin, ag.reshape(sim_pos, (B, 1))), sim_neg)
    return ag.mean(ag.relu(gap))


def total_loss(rank, aux, lambda_aux: float):
    """``rank + lambda_aux * aux`` for floats or tensors."""
    if isinstance(rank, Tensor) or isinstance(aux, Tensor):
        if aux is None or lambda_aux == 0:
            return rank
        return ag.add(rank, ag.mul(aux, lambda_aux))
    return rank + lambda_aux * (aux or 0.0)
