"""Multi-view two-tower retrieval with shared self-attentive feature extraction."""

from ._kernels import BACKEND
from .data import FeatureSchema, SyntheticConfig, generate_synthetic, load_dataset, temporal_split, write_dataset
from .evaluation import EvalReport, auc, evaluate, rela_impr
from .model import ModelConfig, build_variant, load_checkpoint, save_checkpoint
from .retrieval import EmbeddingIndex, export_embeddings, read_index, write_index
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "EmbeddingIndex",
    "EvalReport",
    "FeatureSchema",
    "ModelConfig",
    "SyntheticConfig",
    "TrainConfig",
    "auc",
    "build_variant",
    "evaluate",
    "export_embeddings",
    "generate_synthetic",
    "load_checkpoint",
    "load_dataset",
    "read_index",
    "rela_impr",
    "save_checkpoint",
    "temporal_split",
    "train",
    "write_dataset",
    "write_index",
]
