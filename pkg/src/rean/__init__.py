"""Aggregate variable-length sets of embeddings into one representation.

The main model runs a bidirectional LSTM over the frames of a template and
turns its outputs into per-frame, per-component attention weights, so that
long runs of redundant low-quality frames can be down-weighted. Baselines,
a triplet-loss trainer, a synthetic data generator and recognition
protocols live in the submodules.
"""

from .aggregator import (
    AggregatorParams,
    AttentionWeights,
    FrameEmbeddingSet,
    QualityMLP,
    TemplateRepresentation,
    aggregate,
    avg_pool,
    naive_lstm_pool,
    quality_pool,
    rean_aggregate,
    rean_attention,
)
from .estimators import (
    AvgPoolAggregator,
    ContextFilterAggregator,
    NaiveLSTMAggregator,
    QualityPoolAggregator,
    REANAggregator,
)

__version__ = "0.1.0"

__all__ = [
    "AggregatorParams",
    "AttentionWeights",
    "AvgPoolAggregator",
    "ContextFilterAggregator",
    "FrameEmbeddingSet",
    "NaiveLSTMAggregator",
    "QualityMLP",
    "QualityPoolAggregator",
    "REANAggregator",
    "TemplateRepresentation",
    "aggregate",
    "avg_pool",
    "naive_lstm_pool",
    "quality_pool",
    "rean_aggregate",
    "rean_attention",
]
