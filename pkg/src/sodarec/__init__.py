"""Generative recommendation with distribution-level codebook supervision."""

from .config import ABLATIONS, TrainConfig
from .corpus import EmbeddingTable, SplitDataset, k_core_filter, split_leave_one_out, synth_corpus
from .decoding import MetricsReport, PrefixTrie, constrained_beam_search, evaluate, ndcg_at_k, recall_at_k
from .quantizer import RQVAE, CodeSequence, TokenizerConfig, assign_semantic_ids
from .seqmodel import ModelConfig, Recommender, VocabLayout
from .soda import SodaConfig, distribution_score, pointwise_variant, soda_loss

__version__ = "0.1.0"

__all__ = [
    "ABLATIONS", "TrainConfig",
    "EmbeddingTable", "SplitDataset", "k_core_filter", "split_leave_one_out", "synth_corpus",
    "MetricsReport", "PrefixTrie", "constrained_beam_search", "evaluate", "ndcg_at_k", "recall_at_k",
    "RQVAE", "CodeSequence", "TokenizerConfig", "assign_semantic_ids",
    "ModelConfig", "Recommender", "VocabLayout",
    "SodaConfig", "distribution_score", "pointwise_variant", "soda_loss",
]
