"""Rank-weighted multi-field contrastive learning for retrieval and ranking."""

from .dataset import CorpusRecord, Dataset, QueryRecord, SplitAssignment, Triplet, quadruple_split
from .encoder import FieldSchema, Model
from .evaluate import EvalConfig, MetricsReport, evaluate_splits
from .multifield import FieldWeights
from .stw import StwFunction, stw_batch, stw_eval
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "CorpusRecord",
    "Dataset",
    "EvalConfig",
    "FieldSchema",
    "FieldWeights",
    "MetricsReport",
    "Model",
    "QueryRecord",
    "SplitAssignment",
    "StwFunction",
    "TrainConfig",
    "Triplet",
    "evaluate_splits",
    "quadruple_split",
    "stw_batch",
    "stw_eval",
    "train",
]
