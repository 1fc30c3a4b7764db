"""Sequential recommendation with geo-temporal context embeddings."""

__version__ = "0.1.0"

from .corpus import Interaction, Split, SplitSpec, UserHistory, build_histories, load_interactions, make_split
from .diagnostics import DiagnosticReport, rank_by_dot, run_informativeness, sample_user_gt
from .embeddings import EmbeddingMatrix, cosine_sim, load_embeddings, mock_encode, write_embeddings
from .enrichment import ContextCache, GeoTemporalContext, MockProvider, build_prompt, enrich
from .evaluation import MetricsReport, coverage_at_k, evaluate, hr_at_k, improvement_table, ndcg_at_k
from .losses import AuxBatch, aux_loss, ranking_loss, total_loss
from .model import VARIANTS, BackboneConfig, Checkpoint, SeqRecModel, VariantConfig, variant_from_name
from .sampling import sample_semantic_negatives, sample_window_negatives
from .training import TrainConfig, prepare_data, train

__all__ = [
    "AuxBatch", "BackboneConfig", "Checkpoint", "ContextCache", "DiagnosticReport", "EmbeddingMatrix",
    "GeoTemporalContext", "Interaction", "MetricsReport", "MockProvider", "SeqRecModel", "Split",
    "SplitSpec", "TrainConfig", "UserHistory", "VARIANTS", "VariantConfig", "aux_loss", "build_histories",
    "build_prompt", "cosine_sim", "coverage_at_k", "enrich", "evaluate", "hr_at_k", "improvement_table",
    "load_embeddings", "load_interactions", "make_split", "mock_encode", "ndcg_at_k", "prepare_data",
    "rank_by_dot", "ranking_loss", "run_informativeness", "sample_semantic_negatives", "sample_user_gt",
    "sample_window_negatives", "total_loss", "train", "variant_from_name", "write_embeddings",
]
