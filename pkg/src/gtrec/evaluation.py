"""Top-k metrics, full-catalog evaluation, and improvement-over-baseline tables."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .errors import VariantMismatch

TABLE_COLUMNS = (
    ("ndcg", 5), ("ndcg", 10), ("hr", 1), ("hr", 5), ("hr", 10),
    ("coverage", 1), ("coverage", 5), ("coverage", 10),
)


# ---------------------------------------------------------------- single-list metrics


def hr_at_k(ranked: Sequence, target, k: int) -> int:
    if k < 1:
        raise ValueError("k must be >= 1")
    return int(target in list(ranked[:k]))


def ndcg_at_k(ranked: Sequence, target, k: int) -> float:
    """Leave-one-out NDCG: ``1 / log2(rank + 1)`` for a 1-based rank within the top k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    top = list(ranked[:k])
    if target not in top:
        return 0.0
    return 1.0 / math.log2(top.index(target) + 2)


def coverage_at_k(all_user_topk: Sequence[Sequence], catalog_size: int, k: int) -> float:
    """Fraction of the catalog appearing in at least one user's top-k list."""
    seen = set()
    for lst in all_user_topk:
        seen.update(lst[:k])
    return len(seen) / catalog_size


def hits_from_ranks(ranks: np.ndarray, k: int) -> np.ndarray:
    return (np.asarray(ranks) <= k).astype(np.float64)


def ndcg_from_ranks(ranks: np.ndarray, k: int) -> np.ndarray:
    ranks = np.asarray(ranks, dtype=np.float64)
    return np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0)


# ---------------------------------------------------------------- reports


@dataclass
class MetricsReport:
    variant: str
    split: str
    ks: list[int]
    hr: dict[int, float]
    ndcg: dict[int, float]
    coverage: dict[int, float] | None
    n_users: int
    with_context: bool
    ranks: list[int] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.hr = {int(k): float(v) for k, v in self.hr.items()}
        self.ndcg = {int(k): float(v) for k, v in self.ndcg.items()}
        if self.coverage is not None:
            self.coverage = {int(k): float(v) for k, v in self.coverage.items()}

    def metric(self, name: str, k: int) -> float | None:
        table = getattr(self, name)
        return None if table is None else table.get(k)

    def to_json(self) -> dict:
        d = asdict(self)
        for key in ("hr", "ndcg", "coverage"):
            if d[key] is not None:
                d[key] = {str(k): v for k, v in d[key].items()}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "MetricsReport":
        fields = set(cls.__dataclass_fields__)
        if not isinstance(d, dict) or not {"variant", "hr", "ndcg"} <= set(d) or set(d) - fields:
            raise ValueError("not a metrics report")
        return cls(**d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        return cls.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- scoring


class PopularityScorer:
    """Scores every item by a fixed vector, ignoring the user."""

    def __init__(self, popularity: np.ndarray):
        self.popularity = np.asarray(popularity, dtype=np.float64)

    def full_scores(self, seqs, ctx=None, with_context=None) -> np.ndarray:
        return np.tile(self.popularity, (len(seqs), 1))


def test_inputs(data, users: Sequence[str], max_len: int):
    """Left-padded (items, contexts) of each user's full training history."""
    seqs = np.zeros((len(users), max_len), dtype=np.int64)
    ctx = np.zeros((len(users), max_len), dtype=np.int64)
    for r, u in enumerate(users):
        s = data.sequences[u]
        items, cidx = s.items[-max_len:], s.contexts[-max_len:]
        seqs[r, max_len - len(items):] = items
        ctx[r, max_len - len(cidx):] = cidx
    return seqs, ctx


def target_ranks(scorer, seqs, ctx, targets, with_context, exclude=None, batch_size=256,
                 topk: int = 0):
    """1-based full-catalog ranks of ``targets`` (item indices), optionally top-k lists too.

    Top-k lists hold 1-based item indices; 0 pads rows with too few allowed items.
    """
    ranks, tops = [], []
    n = len(targets)
    for lo in range(0, n, batch_size):
        hi = min(n, lo + batch_size)
        scores = scorer.full_scores(seqs[lo:hi], ctx[lo:hi], with_context)
        ex = None if exclude is None else exclude[lo:hi]
        key_rank = np.arange(scores.shape[1])
        ranks.append(kernels.target_ranks(scores, np.asarray(targets[lo:hi]) - 1, key_rank, ex))
        if topk:
            t = kernels.topk(scores, topk, key_rank, ex)
            tops.append(np.where(t >= 0, t + 1, 0))
    r = np.concatenate(ranks) if ranks else np.zeros(0, dtype=np.int64)
    if topk:
        return r, (np.concatenate(tops) if tops else np.zeros((0, topk), dtype=np.int64))
    return r


def evaluate(scorer, data, with_context: bool | None = None, ks=(1, 5, 10),
             exclude_seen: bool | None = None, variant_name: str = "", max_len: int | None = None,
             users: Sequence[str] | None = None) -> MetricsReport:
    """Rank the full catalog for every test user and aggregate HR/NDCG (and coverage).

    Seen-item filtering defaults to on for the explorer split (items the user
    consumed inside the look-back window) and off for the general split.
    """
    ks = sorted(int(k) for k in ks)
    variant = getattr(scorer, "variant", None)
    if with_context is None:
        with_context = bool(variant and variant.gt_at_infer)
    if with_context and variant is not None and variant.architecture not in ("meta_gt", "id_meta_gt"):
        raise VariantMismatch(f"{variant.architecture} cannot score with context")
    if with_context and variant is not None and getattr(scorer, "item_profile", None) is None:
        raise VariantMismatch("with-context evaluation needs item context profiles")
    split = data.split
    if exclude_seen is None:
        exclude_seen = split.mode == "explorer"
    users = sorted(split.test) if users is None else list(users)
    if max_len is None:
        max_len = scorer.backbone.max_seq_len if hasattr(scorer, "backbone") else data.max_len
    seqs, ctx = test_inputs(data, users, max_len)
    targets = np.array(data.vocab.encode(split.test[u].item_id for u in users), dtype=np.int64)
    exclude = None
    if exclude_seen:
        exclude = np.zeros((len(users), len(data.vocab)), dtype=np.uint8)
        for r, u in enumerate(users):
            seen = split.window_seen.get(u)
            if seen is None:
                seen = set(data.split.train[u].items) if u in data.split.train else set()
            idx = [i - 1 for i in data.vocab.encode(sorted(seen)) if i != targets[r]]
            exclude[r, idx] = 1
    with_coverage = split.mode == "general"
    kmax = max(ks)
    if with_coverage:
        ranks, tops = target_ranks(scorer, seqs, ctx, targets, with_context, exclude, topk=kmax)
    else:
        ranks = target_ranks(scorer, seqs, ctx, targets, with_context, exclude)
    hr = {k: float(hits_from_ranks(ranks, k).mean()) for k in ks}
    ndcg = {k: float(ndcg_from_ranks(ranks, k).mean()) for k in ks}
    coverage = None
    if with_coverage:
        coverage = {k: len(np.unique(tops[:, :k][tops[:, :k] > 0])) / len(data.vocab) for k in ks}
    if not variant_name and variant is not None:
        variant_name = variant.architecture
    return MetricsReport(variant_name, split.mode, ks, hr, ndcg, coverage, len(users),
                         bool(with_context), [int(r) for r in ranks])


# ---------------------------------------------------------------- improvement tables


@dataclass
class ImprovementRow:
    variant: str
    values: dict[str, float | None]
    zero_baseline: list[str] = field(default_factory=list)


@dataclass
class ImprovementTable:
    columns: list[str]
    rows: list[ImprovementRow]
    baseline: str

    def cell(self, variant: str, column: str) -> float | None:
        for r in self.rows:
            if r.variant == variant:
                return r.values.get(column)
        raise KeyError(variant)

    def render_text(self) -> str:
        width = max([len("Model Variation")] + [len(r.variant) for r in self.rows]) + 2
        head = "Model Variation".ljust(width) + "".join(c.rjust(12) for c in self.columns)
        lines = [f"Percentage improvement (%) over {self.baseline}", head, "-" * len(head)]
        for r in self.rows:
            cells = []
            for c in self.columns:
                v = r.values.get(c)
                if c in r.zero_baseline:
                    cells.append("n/a*".rjust(12))
                elif v is None:
                    cells.append("-".rjust(12))
                else:
                    cells.append(f"{v:+.2f}".rjust(12))
            lines.append(r.variant.ljust(width) + "".join(cells))
        if any(r.zero_baseline for r in self.rows):
            lines.append("* baseline value is zero; improvement undefined")
        return "\n".join(lines) + "\n"

    def render_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", *self.columns])
        for r in self.rows:
            w.writerow([r.variant] + [
                "ZeroBaseline" if c in r.zero_baseline else ("" if r.values.get(c) is None
                                                               else f"{r.values[c]:.2f}")
                for c in self.columns
            ])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {"baseline": self.baseline, "columns": self.columns,
                "rows": [asdict(r) for r in self.rows]}


def column_name(metric: str, k: int) -> str:
    return f"{metric.upper() if metric != 'coverage' else 'Coverage'}@{k}"


def improvement_table(reports: Sequence[MetricsReport], baseline: MetricsReport) -> ImprovementTable:
    """``(metric - baseline) / baseline * 100`` per cell; zero baselines are flagged, not fatal."""
    columns = []
    for metric, k in TABLE_COLUMNS:
        if baseline.metric(metric, k) is not None and any(r.metric(metric, k) is not None for r in reports):
            columns.append((metric, k))
    for metric in ("ndcg", "hr", "coverage"):
        table = getattr(baseline, metric) or {}
        for k in sorted(table):
            if (metric, k) not in columns and (metric, k) != ("ndcg", 1) and any(r.metric(metric, k) is not None for r in reports):
                columns.append((metric, k))
    rows = []
    for r in reports:
        values, zero = {}, []
        for metric, k in columns:
            name = column_name(metric, k)
            base, val = baseline.metric(metric, k), r.metric(metric, k)
            if base is None or val is None:
                values[name] = None
            elif base == 0:
                values[name] = None
                zero.append(name)
            else:
                values[name] = (val - base) / base * 100.0
        rows.append(ImprovementRow(r.variant, values, zero))
    return ImprovementTable([column_name(m, k) for m, k in columns], rows, baseline.variant)


def report_from_values(variant: str, split: str, values: dict[str, float]) -> MetricsReport:
    """Build a report from ``{"NDCG@5": ..., "HR@1": ...}`` style values (e.g. published tables)."""
    hr, ndcg, cov = {}, {}, {}
    for name, v in values.items():
        metric, _, k = name.partition("@")
        {"hr": hr, "ndcg": ndcg, "coverage": cov}[metric.lower()][int(k)] = v
    ks = sorted(set(hr) | set(ndcg) | set(cov))
    return MetricsReport(variant, split, ks, hr, ndcg, cov or None, 0, False)
